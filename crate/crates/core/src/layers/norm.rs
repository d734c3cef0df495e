use super::Mode;
use crate::error::{dim_err, Result};
use crate::params::{join, Entry, EntryMut, Param, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// State kept from forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    mode: Mode,
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(
                Tensor::full([1, channels, 1, 1], T::one()),
                ParamKind::Gamma,
            ),
            beta: Param::new(Tensor::zeros([1, channels, 1, 1]), ParamKind::Beta),
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: Tensor::full([1, channels, 1, 1], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.channels()
    }

    /// Normalizes `x`. Train mode uses batch statistics and updates the
    /// running estimates; eval mode is a fixed per-channel affine map.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let [n, c, h, w] = x.dims();
        if c != self.channels() {
            return Err(dim_err!(
                "batch norm has {} channels, input {:?}",
                self.channels(),
                x.dims()
            ));
        }
        let count = n * h * w;
        let eps = self.epsilon;
        let mut inv_std = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for s in 0..n {
                        sum += x.plane(s, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for s in 0..n {
                        sq += x
                            .plane(s, ch)
                            .iter()
                            .map(|v| (v.as_f64() - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let unbiased = if count > 1 {
                        sq / (count - 1) as f64
                    } else {
                        var
                    };
                    let m = self.momentum;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::lit((1.0 - m) * rm.as_f64() + m * mean);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = T::lit((1.0 - m) * rv.as_f64() + m * unbiased);
                    (mean, var)
                }
                Mode::Eval => (
                    self.running_mean.data()[ch].as_f64(),
                    self.running_var.data()[ch].as_f64(),
                ),
            };
            inv_std.push(T::lit(1.0 / (var + eps).sqrt()));
            shift.push(T::lit(mean));
        }
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut x_hat = Tensor::zeros(x.dims());
        let mut y = Tensor::zeros(x.dims());
        for s in 0..n {
            for ch in 0..c {
                let (m, is, g, b) = (shift[ch], inv_std[ch], gamma[ch], beta[ch]);
                let src = x.plane(s, ch);
                for (d, &v) in x_hat.plane_mut(s, ch).iter_mut().zip(src) {
                    *d = (v - m) * is;
                }
                for (d, &v) in y.plane_mut(s, ch).iter_mut().zip(x_hat.plane(s, ch)) {
                    *d = g * v + b;
                }
            }
        }
        Ok((
            y,
            BnCache {
                mode,
                x_hat,
                inv_std,
            },
        ))
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = cache.x_hat.dims();
        if grad_out.dims() != cache.x_hat.dims() {
            return Err(dim_err!(
                "batch norm backward: grad {:?}, cached {:?}",
                grad_out.dims(),
                cache.x_hat.dims()
            ));
        }
        let count = T::lit((n * h * w) as f64);
        let mut gx = Tensor::zeros(grad_out.dims());
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for s in 0..n {
                for (&g, &xh) in grad_out.plane(s, ch).iter().zip(cache.x_hat.plane(s, ch)) {
                    sum_g += g;
                    sum_gx += g * xh;
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_gx;
            self.beta.grad.data_mut()[ch] += sum_g;
            let gamma = self.gamma.value.data()[ch];
            let scale = gamma * cache.inv_std[ch];
            for s in 0..n {
                let g_plane = grad_out.plane(s, ch);
                let xh_plane = cache.x_hat.plane(s, ch);
                let dst = gx.plane_mut(s, ch);
                match cache.mode {
                    Mode::Train => {
                        let k = scale / count;
                        for ((d, &g), &xh) in dst.iter_mut().zip(g_plane).zip(xh_plane) {
                            *d = k * (count * g - sum_g - xh * sum_gx);
                        }
                    }
                    Mode::Eval => {
                        for (d, &g) in dst.iter_mut().zip(g_plane) {
                            *d = scale * g;
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Scalar> ParamStore<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "gamma"), Entry::Param(&self.gamma));
        f(&join(prefix, "beta"), Entry::Param(&self.beta));
        f(
            &join(prefix, "running_mean"),
            Entry::Buffer(&self.running_mean),
        );
        f(
            &join(prefix, "running_var"),
            Entry::Buffer(&self.running_var),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "gamma"), EntryMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), EntryMut::Param(&mut self.beta));
        f(
            &join(prefix, "running_mean"),
            EntryMut::Buffer(&mut self.running_mean),
        );
        f(
            &join(prefix, "running_var"),
            EntryMut::Buffer(&mut self.running_var),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::uniform([3, 2, 4, 4], -3.0, 5.0, &mut rng);
        let mut bn = BatchNorm::new(2);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|s| y.plane(s, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            // epsilon shrinks the variance slightly below one
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full([2, 1, 3, 3], 4.2);
        let mut bn = BatchNorm::new(1);
        bn.beta.value.data_mut()[0] = 0.3;
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_elementwise_affine() {
        let mut rng = Rng::new(6);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.running_mean = Tensor::from_vec([1, 2, 1, 1], vec![0.5, -1.0]).unwrap();
        bn.running_var = Tensor::from_vec([1, 2, 1, 1], vec![2.0, 0.25]).unwrap();
        let x = Tensor::<f64>::uniform([2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let (full, _) = bn.forward(&x, Mode::Eval).unwrap();
        let (first, _) = bn
            .forward(&x.slice_batch(0, 1).unwrap(), Mode::Eval)
            .unwrap();
        assert_eq!(first, full.slice_batch(0, 1).unwrap());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut bn = BatchNorm::<f64>::new(3);
        assert!(bn
            .forward(&Tensor::zeros([1, 2, 2, 2]), Mode::Train)
            .is_err());
    }
}
