use super::for_each_plane;
use crate::error::{dim_err, Result};
use crate::params::{join, Entry, EntryMut, Param, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Stride-1 convolution with zero "same" padding.
///
/// `weight` is `(C_out, C_in, k, k)` with odd `k`; `bias` is `(1, C_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

/// Gradients of `sum(grad_out ⊙ conv(x))`.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_weight<T: Scalar>(weight: &Tensor<T>, bias: &Tensor<T>) -> Result<usize> {
    let [c_out, _, kh, kw] = weight.dims();
    if kh != kw || kh % 2 == 0 {
        return Err(dim_err!(
            "kernel must be square with odd size, got {kh}x{kw}"
        ));
    }
    if bias.dims() != [1, c_out, 1, 1] {
        return Err(dim_err!(
            "bias extents {:?} do not match {c_out} output channels",
            bias.dims()
        ));
    }
    Ok(kh)
}

/// Index range `[lo, hi)` of output positions whose input position
/// `pos + shift` lies inside `[0, len)`.
#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = ((-shift).max(0) as usize).min(len);
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let k = check_weight(weight, bias)?;
    let [c_out, c_in, _, _] = weight.dims();
    let [n, xc, h, w] = x.dims();
    if xc != c_in {
        return Err(dim_err!(
            "conv2d expects {c_in} input channels, got {xc} (input {:?})",
            x.dims()
        ));
    }
    let pad = (k / 2) as isize;
    let wd = weight.data();
    let bd = bias.data();
    let mut out = Tensor::zeros([n, c_out, h, w]);
    for_each_plane(out.data_mut(), h * w, |idx, plane| {
        let (s, co) = (idx / c_out, idx % c_out);
        plane.fill(bd[co]);
        for ci in 0..c_in {
            let src = x.plane(s, ci);
            let taps = &wd[(co * c_in + ci) * k * k..(co * c_in + ci + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (r0, r1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (j0, j1) = valid_range(w, dx);
                    if j0 == j1 {
                        continue;
                    }
                    let wv = taps[ky * k + kx];
                    for i in r0..r1 {
                        let si = (i as isize + dy) as usize;
                        let src_row = &src[si * w..si * w + w];
                        let dst_row = &mut plane[i * w..i * w + w];
                        let sj0 = (j0 as isize + dx) as usize;
                        for (d, &v) in dst_row[j0..j1].iter_mut().zip(&src_row[sj0..]) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [c_out, c_in, k, _] = weight.dims();
    let [n, xc, h, w] = x.dims();
    if xc != c_in || grad_out.dims() != [n, c_out, h, w] {
        return Err(dim_err!(
            "conv2d backward: input {:?}, weight {:?}, grad {:?}",
            x.dims(),
            weight.dims(),
            grad_out.dims()
        ));
    }
    let pad = (k / 2) as isize;
    let wd = weight.data();

    let mut gx = Tensor::zeros(x.dims());
    for_each_plane(gx.data_mut(), h * w, |idx, plane| {
        let (s, ci) = (idx / c_in, idx % c_in);
        for co in 0..c_out {
            let g = grad_out.plane(s, co);
            let taps = &wd[(co * c_in + ci) * k * k..(co * c_in + ci + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (r0, r1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (j0, j1) = valid_range(w, dx);
                    if j0 == j1 {
                        continue;
                    }
                    let wv = taps[ky * k + kx];
                    for i in r0..r1 {
                        let si = (i as isize + dy) as usize;
                        let g_row = &g[i * w..i * w + w];
                        let dst_row = &mut plane[si * w..si * w + w];
                        let sj0 = (j0 as isize + dx) as usize;
                        for (d, &v) in dst_row[sj0..].iter_mut().zip(&g_row[j0..j1]) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    });

    let mut gw = Tensor::zeros(weight.dims());
    for_each_plane(gw.data_mut(), c_in * k * k, |co, taps| {
        for s in 0..n {
            let g = grad_out.plane(s, co);
            for ci in 0..c_in {
                let src = x.plane(s, ci);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (r0, r1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (j0, j1) = valid_range(w, dx);
                        if j0 == j1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for i in r0..r1 {
                            let si = (i as isize + dy) as usize;
                            let sj0 = (j0 as isize + dx) as usize;
                            let g_row = &g[i * w + j0..i * w + j1];
                            let x_row = &src[si * w + sj0..];
                            for (&a, &b) in g_row.iter().zip(x_row) {
                                acc += a * b;
                            }
                        }
                        taps[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });

    let mut gb = Tensor::zeros([1, c_out, 1, 1]);
    for co in 0..c_out {
        let mut acc = T::zero();
        for s in 0..n {
            acc += grad_out.plane(s, co).iter().copied().sum::<T>();
        }
        gb.data_mut()[co] = acc;
    }

    Ok(ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    })
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform weights with bound `sqrt(6 / fan_in)`, zero bias.
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Param::new(
                Tensor::uniform([c_out, c_in, k, k], -bound, bound, rng),
                ParamKind::Weight,
            ),
            bias: Param::new(Tensor::zeros([1, c_out, 1, 1]), ParamKind::Bias),
        }
    }

    pub fn from_tensors(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        check_weight(&weight, &bias)?;
        Ok(Conv2d {
            weight: Param::new(weight, ParamKind::Weight),
            bias: Param::new(bias, ParamKind::Bias),
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.dims()[1]
    }
    pub fn c_out(&self) -> usize {
        self.weight.value.dims()[0]
    }
    pub fn kernel(&self) -> usize {
        self.weight.value.dims()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight.value, &self.bias.value)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, &self.weight.value, grad_out)?;
        self.weight.grad.add_assign(&g.weight);
        self.bias.grad.add_assign(&g.bias);
        Ok(g.x)
    }
}

impl<T: Scalar> ParamStore<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
        f(&join(prefix, "bias"), Entry::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), EntryMut::Param(&mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct scalar cross-correlation with explicit bounds checks.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, c_in, h, wd] = x.dims();
        let [c_out, _, k, _] = w.dims();
        let p = (k / 2) as isize;
        let mut y = Tensor::zeros([n, c_out, h, wd]);
        for s in 0..n {
            for co in 0..c_out {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b.at(0, co, 0, 0);
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let si = i as isize + ky as isize - p;
                                    let sj = j as isize + kx as isize - p;
                                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd
                                    {
                                        acc += w.at(co, ci, ky, kx)
                                            * x.at(s, ci, si as usize, sj as usize);
                                    }
                                }
                            }
                        }
                        *y.at_mut(s, co, i, j) = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::uniform([2, 1, 3, 4], -1.0, 1.0, &mut rng);
        let conv =
            Conv2d::from_tensors(Tensor::full([1, 1, 1, 1], 1.0), Tensor::zeros([1, 1, 1, 1]))
                .unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
        let g = Tensor::<f64>::uniform([2, 1, 3, 4], -1.0, 1.0, &mut rng);
        let grads = conv2d_backward(&x, &conv.weight.value, &g).unwrap();
        assert_eq!(grads.x, g);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::<f64>::full([1, 2, 5, 5], 3.0);
        let y = conv2d_forward(
            &x,
            &Tensor::zeros([2, 2, 3, 3]),
            &Tensor::full([1, 2, 1, 1], 0.7),
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&x, &w, &Tensor::zeros([1, 3, 4, 4])).unwrap();
        assert_eq!(g.x.max_abs(), 0.0);
        assert_eq!(g.weight.max_abs(), 0.0);
        assert_eq!(g.bias.max_abs(), 0.0);
    }

    #[test]
    fn matches_naive_loop_on_small_shapes() {
        let mut rng = Rng::new(3);
        for n in 1..=2 {
            for c in [1, 2, 4] {
                for hw in [1, 2, 5] {
                    for k in [1, 3, 5] {
                        let x = Tensor::<f64>::uniform([n, c, hw, hw + 1], -1.0, 1.0, &mut rng);
                        let w = Tensor::<f64>::uniform([3, c, k, k], -1.0, 1.0, &mut rng);
                        let b = Tensor::<f64>::uniform([1, 3, 1, 1], -1.0, 1.0, &mut rng);
                        let y = conv2d_forward(&x, &w, &b).unwrap();
                        let r = naive(&x, &w, &b);
                        for (a, e) in y.data().iter().zip(r.data()) {
                            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::uniform([2, 2, 4, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([1, 3, 1, 1], -1.0, 1.0, &mut rng);
        let g = Tensor::<f64>::uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv2d_forward(x, w, b).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let grads = conv2d_backward(&x, &w, &g).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for e in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[e] += h;
            m.data_mut()[e] -= h;
            let num = (obj(&p, &w, &b) - obj(&m, &w, &b)) / (2.0 * h);
            assert!(rel(grads.x.data()[e], num) < 1e-6);
        }
        for e in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[e] += h;
            m.data_mut()[e] -= h;
            let num = (obj(&x, &p, &b) - obj(&x, &m, &b)) / (2.0 * h);
            assert!(rel(grads.weight.data()[e], num) < 1e-6);
        }
        for e in 0..b.len() {
            let (mut p, mut m) = (b.clone(), b.clone());
            p.data_mut()[e] += h;
            m.data_mut()[e] -= h;
            let num = (obj(&x, &w, &p) - obj(&x, &w, &m)) / (2.0 * h);
            assert!(rel(grads.bias.data()[e], num) < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros([3, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros([1, 3, 1, 1])).is_err());
        let w = Tensor::<f64>::zeros([3, 2, 2, 2]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros([1, 3, 1, 1])).is_err());
        let w = Tensor::<f64>::zeros([3, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros([1, 2, 1, 1])).is_err());
    }
}
