//! Zero-block overlays: darken each spatial block of the input image by the
//! share of channels whose block was zeroed.

use image::RgbImage;
use zebra_core::BlockMask;

/// Strength of the darkening: a block zeroed in every channel is scaled by `1 - ALPHA`.
pub const ALPHA: f32 = 0.8;

/// Per-block darkness in `[0, 1]`, row-major `[blocks_h, blocks_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DarknessGrid {
    pub blocks_h: usize,
    pub blocks_w: usize,
    pub values: Vec<f32>,
}

impl DarknessGrid {
    /// Fraction of channels whose block `(i, j)` is zeroed.
    pub fn from_mask(mask: &BlockMask) -> Self {
        let (c, bh, bw) = (mask.channels, mask.blocks_h, mask.blocks_w);
        let mut values = vec![0.0f32; bh * bw];
        for ch in 0..c {
            for i in 0..bh {
                for j in 0..bw {
                    if !mask.get(ch, i, j) {
                        values[i * bw + j] += 1.0;
                    }
                }
            }
        }
        for v in &mut values {
            *v /= c as f32;
        }
        Self { blocks_h: bh, blocks_w: bw, values }
    }

    /// Nearest-neighbour lookup for pixel `(y, x)` of a `height x width` image.
    pub fn at_pixel(&self, y: u32, x: u32, height: u32, width: u32) -> f32 {
        let i = (y as usize * self.blocks_h) / height as usize;
        let j = (x as usize * self.blocks_w) / width as usize;
        self.values[i * self.blocks_w + j]
    }
}

/// `base * (1 - ALPHA * darkness)`, darkness upscaled to the image by nearest neighbour.
pub fn render_overlay(base: &RgbImage, darkness: &DarknessGrid) -> RgbImage {
    let (w, h) = base.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let d = darkness.at_pixel(y, x, h, w);
        let factor = 1.0 - ALPHA * d;
        let p = base.get_pixel(x, y);
        image::Rgb(p.0.map(|v| (v as f32 * factor).round().clamp(0.0, 255.0) as u8))
    })
}

/// PNG bytes with fixed encoder settings.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::NoFilter)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}
