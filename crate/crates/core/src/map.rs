use crate::error::{Error, Result};

/// A single layer's post-activation tensor laid out channel-major as `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    data: Vec<f32>,
    channels: usize,
    height: usize,
    width: usize,
    layer_id: String,
}

impl ActivationMap {
    pub fn new(
        data: Vec<f32>,
        channels: usize,
        height: usize,
        width: usize,
        layer_id: impl Into<String>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidDimension(format!(
                "activation map dims must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { data, channels, height, width, layer_id: layer_id.into() })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, layer_id: impl Into<String>) -> Result<Self> {
        Self::new(vec![0.0; channels * height * width], channels, height, width, layer_id)
    }

    pub fn filled(
        value: f32,
        channels: usize,
        height: usize,
        width: usize,
        layer_id: impl Into<String>,
    ) -> Result<Self> {
        Self::new(vec![value; channels * height * width], channels, height, width, layer_id)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Replaces the buffer without re-validating finiteness; callers only
    /// write values derived from an already valid map.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            data,
            channels: self.channels,
            height: self.height,
            width: self.width,
            layer_id: self.layer_id.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_non_finite() {
        assert!(ActivationMap::new(vec![], 0, 1, 1, "l").is_err());
        assert!(matches!(
            ActivationMap::new(vec![0.0, f32::NAN], 1, 1, 2, "l"),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            ActivationMap::new(vec![0.0; 3], 1, 2, 2, "l"),
            Err(Error::LengthMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn indexing_is_channel_major() {
        let m = ActivationMap::new((0..12).map(|v| v as f32).collect(), 3, 2, 2, "l").unwrap();
        assert_eq!(m.get(1, 0, 1), 5.0);
        assert_eq!(m.channel(2), &[8.0, 9.0, 10.0, 11.0]);
    }
}
