use crate::error::{dim_err, Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Argmax positions of a 2×2 stride-2 max-pool.
///
/// One entry per pooled element: the offset `i * W + j` of the winning
/// position inside its input plane of width `W = 2 * pooled_width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    dims: Dims,
    offsets: Vec<u32>,
}

impl PoolIndices {
    /// Builds indices from raw offsets, validating that each lies inside its
    /// pooling window.
    pub fn from_offsets(dims: Dims, offsets: Vec<u32>) -> Result<Self> {
        if offsets.len() != dims.iter().product::<usize>() {
            return Err(dim_err!(
                "{} offsets for pooled extents {dims:?}",
                offsets.len()
            ));
        }
        let idx = PoolIndices { dims, offsets };
        idx.validate()?;
        Ok(idx)
    }

    /// Extents of the pooled tensor.
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    fn validate(&self) -> Result<()> {
        let [_, _, h, w] = self.dims;
        let wide = 2 * w;
        for (e, &off) in self.offsets.iter().enumerate() {
            let (i, j) = ((e / w) % h, e % w);
            let (oi, oj) = (off as usize / wide, off as usize % wide);
            if oi / 2 != i || oj / 2 != j || oi >= 2 * h {
                return Err(Error::Corruption(format!(
                    "offset {off} for pooled element ({i}, {j}) lies outside its 2x2 window"
                )));
            }
        }
        Ok(())
    }
}

/// 2×2 max-pool with stride 2. Ties go to the first position in row-major
/// window order.
pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!(
            "2x2 max-pool needs even height and width, got {:?}",
            x.dims()
        ));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ph, pw]);
    let mut offsets = Vec::with_capacity(n * c * ph * pw);
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for i in 0..ph {
                for j in 0..pw {
                    let mut best_off = (2 * i) * w + 2 * j;
                    let mut best = src[best_off];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let off = (2 * i + di) * w + 2 * j + dj;
                        if src[off] > best {
                            best = src[off];
                            best_off = off;
                        }
                    }
                    dst[i * pw + j] = best;
                    offsets.push(best_off as u32);
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            dims: [n, c, ph, pw],
            offsets,
        },
    ))
}

/// Places each value of `x_small` at its recorded position in a tensor of
/// twice the height and width; every other position is zero.
pub fn max_unpool2x2<T: Scalar>(x_small: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if x_small.dims() != indices.dims {
        return Err(dim_err!(
            "unpool input {:?} does not match pooling indices {:?}",
            x_small.dims(),
            indices.dims
        ));
    }
    indices.validate()?;
    let [n, c, h, w] = x_small.dims();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let p = h * w;
    for s in 0..n {
        for ch in 0..c {
            let plane = s * c + ch;
            let offs = &indices.offsets[plane * p..(plane + 1) * p];
            let src = x_small.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for (&v, &off) in src.iter().zip(offs) {
                dst[off as usize] = v;
            }
        }
    }
    Ok(out)
}

/// Gradient of max-pool: scatter to the winners.
pub fn maxpool2x2_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    max_unpool2x2(grad_out, indices)
}

/// Gradient of max-unpool: gather from the recorded positions.
pub fn max_unpool2x2_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = indices.dims;
    if grad_out.dims() != [n, c, 2 * h, 2 * w] {
        return Err(dim_err!(
            "unpool backward: grad {:?} for pooled extents {:?}",
            grad_out.dims(),
            indices.dims
        ));
    }
    let p = h * w;
    let mut out = Tensor::zeros(indices.dims);
    for s in 0..n {
        for ch in 0..c {
            let plane = s * c + ch;
            let offs = &indices.offsets[plane * p..(plane + 1) * p];
            let src = grad_out.plane(s, ch);
            for (d, &off) in out.plane_mut(s, ch).iter_mut().zip(offs) {
                *d = src[off as usize];
            }
        }
    }
    Ok(out)
}
