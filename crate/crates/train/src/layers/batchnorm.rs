use super::{Mode, ParamKind, ParamMut, StateVisitor};
use crate::tensor::Tensor;

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub grad_gamma: Vec<f32>,
    pub grad_beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.channels, "{}: channels", self.name);
        let plane = x.plane();
        let count = x.n * plane;
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        match mode {
            Mode::Eval => {
                for c in 0..x.c {
                    let inv = 1.0 / (self.running_var[c] + EPS).sqrt();
                    let (scale, shift) = (self.gamma[c] * inv, self.beta[c] - self.gamma[c] * inv * self.running_mean[c]);
                    for n in 0..x.n {
                        let off = (n * x.c + c) * plane;
                        for i in off..off + plane {
                            out.data[i] = x.data[i] * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
                let mut inv_stds = vec![0.0; x.c];
                for c in 0..x.c {
                    let mut sum = 0.0f64;
                    for n in 0..x.n {
                        let off = (n * x.c + c) * plane;
                        sum += x.data[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for n in 0..x.n {
                        let off = (n * x.c + c) * plane;
                        sq += x.data[off..off + plane].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let inv = 1.0 / (var + EPS as f64).sqrt();
                    inv_stds[c] = inv as f32;
                    for n in 0..x.n {
                        let off = (n * x.c + c) * plane;
                        for i in off..off + plane {
                            let h = ((x.data[i] as f64 - mean) * inv) as f32;
                            xhat.data[i] = h;
                            out.data[i] = self.gamma[c] * h + self.beta[c];
                        }
                    }
                    let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                    self.running_mean[c] = (1.0 - MOMENTUM) * self.running_mean[c] + MOMENTUM * mean as f32;
                    self.running_var[c] = (1.0 - MOMENTUM) * self.running_var[c] + MOMENTUM * unbiased as f32;
                }
                self.cache = Some((xhat, inv_stds));
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (xhat, inv_stds) = self.cache.take().expect("batchnorm backward without cached forward");
        let plane = xhat.plane();
        let m = (xhat.n * plane) as f32;
        let mut dx = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
        for c in 0..xhat.c {
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for n in 0..xhat.n {
                let off = (n * xhat.c + c) * plane;
                for i in off..off + plane {
                    sum_g += grad_out.data[i] as f64;
                    sum_gx += (grad_out.data[i] * xhat.data[i]) as f64;
                }
            }
            self.grad_beta[c] += sum_g as f32;
            self.grad_gamma[c] += sum_gx as f32;
            let k = self.gamma[c] * inv_stds[c] / m;
            let (sg, sgx) = (sum_g as f32, sum_gx as f32);
            for n in 0..xhat.n {
                let off = (n * xhat.c + c) * plane;
                for i in off..off + plane {
                    dx.data[i] = k * (m * grad_out.data[i] - sg - xhat.data[i] * sgx);
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(ParamMut {
            name: format!("{}.weight", self.name),
            kind: ParamKind::BnGamma,
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
            mask: None,
        });
        f(ParamMut {
            name: format!("{}.bias", self.name),
            kind: ParamKind::BnBeta,
            value: &mut self.beta,
            grad: &mut self.grad_beta,
            mask: None,
        });
    }

    pub fn visit_state(&mut self, f: &mut StateVisitor<'_>) {
        let shape = [self.channels];
        f(&format!("{}.weight", self.name), &shape, &mut self.gamma);
        f(&format!("{}.bias", self.name), &shape, &mut self.beta);
        f(&format!("{}.running_mean", self.name), &shape, &mut self.running_mean);
        f(&format!("{}.running_var", self.name), &shape, &mut self.running_var);
    }

    pub fn select_channels(&self, keep: &[bool]) -> BatchNorm2d {
        let pick = |v: &[f32]| v.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect::<Vec<_>>();
        let mut bn = BatchNorm2d::new(self.name.clone(), keep.iter().filter(|&&k| k).count());
        bn.gamma = pick(&self.gamma);
        bn.beta = pick(&self.beta);
        bn.running_mean = pick(&self.running_mean);
        bn.running_var = pick(&self.running_var);
        bn
    }
}
