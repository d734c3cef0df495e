use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Stacks tensors along the channel extent, first argument first.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("concat of an empty list"))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        let [pn, _, ph, pw] = p.dims();
        if (pn, ph, pw) != (n, h, w) {
            return Err(dim_err!(
                "concat: {:?} does not match {:?} outside the channel extent",
                p.dims(),
                first.dims()
            ));
        }
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for p in parts {
            for ch in 0..p.channels() {
                data.extend_from_slice(p.plane(s, ch));
            }
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Inverse of [`concat_channels`]: cuts `grad` into consecutive channel
/// groups of the given widths.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    if widths.iter().sum::<usize>() != grad.channels() {
        return Err(dim_err!(
            "split widths {widths:?} do not sum to {} channels",
            grad.channels()
        ));
    }
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &w in widths {
        out.push(grad.slice_channels(start, start + w)?);
        start += w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn concat_and_split() {
        let mut rng = Rng::new(1);
        let a = Tensor::<f64>::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.dims(), [1, 5, 4, 4]);
        assert_eq!(y.slice_channels(0, 2).unwrap(), a);
        let parts = split_channels(&y, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_keeps_samples_apart() {
        let mut rng = Rng::new(2);
        let a = Tensor::<f64>::uniform([2, 1, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([2, 2, 2, 2], -1.0, 1.0, &mut rng);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.plane(1, 0), a.plane(1, 0));
        assert_eq!(y.plane(1, 2), b.plane(1, 1));
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f64>::zeros([1, 2, 4, 2]);
        assert!(concat_channels(&[&a, &b]).is_err());
        assert!(split_channels(&a, &[1, 2]).is_err());
    }
}
