use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamKind, ParamMut, StateVisitor};
use crate::tensor::{gemm, Tensor};

/// Bias-free 2-D convolution (always followed by batch norm), lowered to GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_ch, in_ch, k, k]` row-major.
    pub weight: Vec<f32>,
    pub grad: Vec<f32>,
    pub mask: Option<Vec<bool>>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        let weight = (0..out_ch * fan_in).map(|_| normal.sample(rng)).collect();
        Self::from_weights(name, in_ch, out_ch, kernel, stride, weight)
    }

    pub fn from_weights(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        weight: Vec<f32>,
    ) -> Self {
        assert_eq!(weight.len(), out_ch * in_ch * kernel * kernel);
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
            grad: vec![0.0; weight.len()],
            weight,
            mask: None,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols = oh * ow;
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * h + iy as usize) * w..][..w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols = oh * ow;
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * h + iy as usize) * w..][..w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.c, self.in_ch, "{}: input channels", self.name);
        let (oh, ow) = self.output_size(x.h, x.w);
        let mut out = Tensor::zeros(x.n, self.out_ch, oh, ow);
        let mut col = vec![0.0; self.col_rows() * oh * ow];
        for n in 0..x.n {
            self.im2col(x.sample(n), x.h, x.w, oh, ow, &mut col);
            gemm(self.out_ch, self.col_rows(), oh * ow, &self.weight, false, &col, false, 0.0, out.sample_mut(n));
        }
        self.input = cache.then(|| x.clone());
        out
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without cached forward");
        let (oh, ow) = (grad_out.h, grad_out.w);
        let rows = self.col_rows();
        let mut col = vec![0.0; rows * oh * ow];
        let mut dcol = vec![0.0; rows * oh * ow];
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            self.im2col(x.sample(n), x.h, x.w, oh, ow, &mut col);
            let g = grad_out.sample(n);
            gemm(self.out_ch, oh * ow, rows, g, false, &col, true, 1.0, &mut self.grad);
            gemm(rows, self.out_ch, oh * ow, &self.weight, true, g, false, 0.0, &mut dcol);
            self.col2im(&dcol, x.h, x.w, oh, ow, dx.sample_mut(n));
        }
        dx
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(ParamMut {
            name: format!("{}.weight", self.name),
            kind: ParamKind::ConvWeight,
            value: &mut self.weight,
            grad: &mut self.grad,
            mask: self.mask.as_deref(),
        });
    }

    pub fn visit_state(&mut self, f: &mut StateVisitor<'_>) {
        let shape = self.shape();
        f(&format!("{}.weight", self.name), &shape, &mut self.weight);
    }

    pub fn visit_masks(&mut self, f: &mut dyn FnMut(&str, &mut Option<Vec<bool>>)) {
        f(&format!("{}.weight", self.name), &mut self.mask);
    }

    /// Keeps the selected output and input channels.
    pub fn select_channels(&self, keep_out: &[bool], keep_in: &[bool]) -> Conv2d {
        let kk = self.kernel * self.kernel;
        let outs: Vec<usize> = (0..self.out_ch).filter(|&o| keep_out[o]).collect();
        let ins: Vec<usize> = (0..self.in_ch).filter(|&i| keep_in[i]).collect();
        let mut weight = Vec::with_capacity(outs.len() * ins.len() * kk);
        let mut mask = self.mask.as_ref().map(|_| Vec::with_capacity(outs.len() * ins.len() * kk));
        for &o in &outs {
            for &i in &ins {
                let base = (o * self.in_ch + i) * kk;
                weight.extend_from_slice(&self.weight[base..base + kk]);
                if let (Some(m), Some(src)) = (mask.as_mut(), self.mask.as_ref()) {
                    m.extend_from_slice(&src[base..base + kk]);
                }
            }
        }
        let mut conv = Conv2d::from_weights(self.name.clone(), ins.len(), outs.len(), self.kernel, self.stride, weight);
        conv.padding = self.padding;
        conv.mask = mask;
        conv
    }
}
