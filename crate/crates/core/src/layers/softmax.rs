use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Per-pixel softmax across channels, stabilized by subtracting the
/// per-pixel maximum.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let p = h * w;
    let mut out = Tensor::zeros(x.dims());
    let src = x.data();
    let dst = out.data_mut();
    for s in 0..n {
        let base = s * c * p;
        for e in 0..p {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[base + ch * p + e]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let v = (src[base + ch * p + e] - m).exp();
                dst[base + ch * p + e] = v;
                z += v;
            }
            for ch in 0..c {
                dst[base + ch * p + e] /= z;
            }
        }
    }
    out
}

/// Chains a gradient with respect to softmax outputs back to the logits:
/// `g_logit = p ⊙ (g − Σ_c g_c p_c)` per pixel.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    probs.same_dims(grad_probs, "softmax backward")?;
    let [n, c, h, w] = probs.dims();
    let p = h * w;
    let mut out = Tensor::zeros(probs.dims());
    let (pr, gp) = (probs.data(), grad_probs.data());
    let dst = out.data_mut();
    for s in 0..n {
        let base = s * c * p;
        for e in 0..p {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += gp[base + ch * p + e] * pr[base + ch * p + e];
            }
            for ch in 0..c {
                let o = base + ch * p + e;
                dst[o] = pr[o] * (gp[o] - dot);
            }
        }
    }
    Ok(out)
}
