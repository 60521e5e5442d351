use rand::Rng;

use super::{ParamKind, ParamMut, StateVisitor};
use crate::tensor::gemm;

/// Fully connected classifier layer on `[N, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]` row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub grad_weight: Vec<f32>,
    pub grad_bias: Vec<f32>,
    pub mask: Option<Vec<bool>>,
    input: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = (0..in_features * out_features).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..out_features).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::from_parts(name, in_features, out_features, weight, bias)
    }

    pub fn from_parts(
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Self {
        assert_eq!(weight.len(), in_features * out_features);
        assert_eq!(bias.len(), out_features);
        Self {
            name: name.into(),
            in_features,
            out_features,
            grad_weight: vec![0.0; weight.len()],
            grad_bias: vec![0.0; out_features],
            weight,
            bias,
            mask: None,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &[f32], batch: usize, cache: bool) -> Vec<f32> {
        assert_eq!(x.len(), batch * self.in_features, "{}: input width", self.name);
        let mut out = Vec::with_capacity(batch * self.out_features);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        gemm(batch, self.in_features, self.out_features, x, false, &self.weight, true, 1.0, &mut out);
        self.input = cache.then(|| x.to_vec());
        out
    }

    pub fn backward(&mut self, grad_out: &[f32], batch: usize) -> Vec<f32> {
        let x = self.input.take().expect("linear backward without cached forward");
        gemm(self.out_features, batch, self.in_features, grad_out, true, &x, false, 1.0, &mut self.grad_weight);
        for row in grad_out.chunks(self.out_features) {
            for (g, v) in self.grad_bias.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = vec![0.0; batch * self.in_features];
        gemm(batch, self.out_features, self.in_features, grad_out, false, &self.weight, false, 0.0, &mut dx);
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(ParamMut {
            name: format!("{}.weight", self.name),
            kind: ParamKind::LinearWeight,
            value: &mut self.weight,
            grad: &mut self.grad_weight,
            mask: self.mask.as_deref(),
        });
        f(ParamMut {
            name: format!("{}.bias", self.name),
            kind: ParamKind::LinearBias,
            value: &mut self.bias,
            grad: &mut self.grad_bias,
            mask: None,
        });
    }

    pub fn visit_state(&mut self, f: &mut StateVisitor<'_>) {
        let (o, i) = (self.out_features, self.in_features);
        f(&format!("{}.weight", self.name), &[o, i], &mut self.weight);
        f(&format!("{}.bias", self.name), &[o], &mut self.bias);
    }

    pub fn visit_masks(&mut self, f: &mut dyn FnMut(&str, &mut Option<Vec<bool>>)) {
        f(&format!("{}.weight", self.name), &mut self.mask);
    }

    pub fn select_inputs(&self, keep: &[bool]) -> Linear {
        let ins: Vec<usize> = (0..self.in_features).filter(|&i| keep[i]).collect();
        let mut weight = Vec::with_capacity(self.out_features * ins.len());
        let mut mask = self.mask.as_ref().map(|_| Vec::new());
        for o in 0..self.out_features {
            for &i in &ins {
                weight.push(self.weight[o * self.in_features + i]);
                if let (Some(m), Some(src)) = (mask.as_mut(), self.mask.as_ref()) {
                    m.push(src[o * self.in_features + i]);
                }
            }
        }
        let mut l = Linear::from_parts(self.name.clone(), ins.len(), self.out_features, weight, self.bias.clone());
        l.mask = mask;
        l
    }
}
