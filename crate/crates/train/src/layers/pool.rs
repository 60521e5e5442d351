use crate::tensor::Tensor;

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert!(x.h % 2 == 0 && x.w % 2 == 0, "max pool needs even spatial dims");
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut arg = vec![0u32; out.data.len()];
        for p in 0..x.n * x.c {
            let src = &x.data[p * x.h * x.w..][..x.h * x.w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * x.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * x.w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data[o] = src[best];
                    arg[o] = best as u32;
                }
            }
        }
        self.argmax = cache.then_some((arg, x.shape()));
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (arg, [n, c, h, w]) = self.argmax.take().expect("max pool backward without cached forward");
        let mut dx = Tensor::zeros(n, c, h, w);
        let (oh, ow) = (h / 2, w / 2);
        for p in 0..n * c {
            for o in 0..oh * ow {
                let idx = p * oh * ow + o;
                dx.data[p * h * w + arg[idx] as usize] += grad_out.data[idx];
            }
        }
        dx
    }
}

/// Global average pool to `[N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let plane = x.plane();
    x.data.chunks(plane).map(|p| p.iter().sum::<f32>() / plane as f32).collect()
}

pub fn global_avg_pool_backward(grad: &[f32], shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (chunk, g) in dx.data.chunks_mut(plane).zip(grad) {
        chunk.fill(g / plane as f32);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0, 3.0, 0.0, -1.0, 2.0, 0.5, -2.0, -0.5]);
        let mut pool = MaxPool2::default();
        let y = pool.forward(&x, true);
        assert_eq!(y.data, vec![3.0, 0.0]);
        let dx = pool.backward(&Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(dx.data, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_and_backward() {
        let x = Tensor::from_vec(1, 2, 1, 2, vec![1.0, 3.0, -2.0, 2.0]);
        assert_eq!(global_avg_pool(&x), vec![2.0, 0.0]);
        assert_eq!(global_avg_pool_backward(&[2.0, 4.0], x.shape()).data, vec![1.0, 1.0, 2.0, 2.0]);
    }
}
