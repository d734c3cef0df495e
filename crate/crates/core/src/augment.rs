//! Random affine augmentation applied jointly to an image and its labels.

use crate::error::{dim_err, Result};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Sampling ranges for [`AffineParams::sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    /// Largest shift as a fraction of the image extent along each axis.
    pub max_translation: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            max_rotation_deg: 10.0,
            scale: (0.9, 1.1),
            max_translation: 0.1,
        }
    }
}

/// Rotation about the image centre, isotropic scale, then translation in
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_rad: f64,
    pub scale: f64,
    pub shift_y: f64,
    pub shift_x: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_rad: 0.0,
        scale: 1.0,
        shift_y: 0.0,
        shift_x: 0.0,
    };

    pub fn sample(ranges: &AffineRanges, height: usize, width: usize, rng: &mut Rng) -> Self {
        let r = ranges.max_rotation_deg.to_radians();
        let t = ranges.max_translation;
        AffineParams {
            rotation_rad: rng.uniform(-r, r),
            scale: rng.uniform(ranges.scale.0, ranges.scale.1),
            shift_y: rng.uniform(-t, t) * height as f64,
            shift_x: rng.uniform(-t, t) * width as f64,
        }
    }

    /// Source coordinates sampled for output pixel `(i, j)`.
    fn source(&self, i: f64, j: f64, cy: f64, cx: f64) -> (f64, f64) {
        let (s, c) = self.rotation_rad.sin_cos();
        let y = i - cy - self.shift_y;
        let x = j - cx - self.shift_x;
        (
            (c * y - s * x) / self.scale + cy,
            (s * y + c * x) / self.scale + cx,
        )
    }
}

/// Warps `img` (shape `[1, C, H, W]`) bilinearly and `lbl` (`[1, H, W]`)
/// by nearest neighbour under the same transform. Coordinates outside the
/// image are clamped to the border.
pub fn warp<T: Scalar>(
    img: &Tensor<T>,
    lbl: &LabelMap,
    p: &AffineParams,
) -> Result<(Tensor<T>, LabelMap)> {
    let [n, c, h, w] = img.dims();
    if n != 1 || lbl.dims() != [1, h, w] {
        return Err(dim_err!(
            "augmentation takes one sample, got image {:?} and labels {:?}",
            img.dims(),
            lbl.dims()
        ));
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    let mut out = Tensor::zeros(img.dims());
    let mut labels = vec![0u32; h * w];
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = p.source(i as f64, j as f64, cy, cx);
            let (sy, sx) = (clamp(sy, h), clamp(sx, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let src = img.plane(0, ch);
                let at = |y: usize, x: usize| src[y * w + x].as_f64();
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out.plane_mut(0, ch)[i * w + j] = T::lit((1.0 - fy) * top + fy * bottom);
            }
            let (ny, nx) = (sy.round() as usize, sx.round() as usize);
            labels[i * w + j] = lbl.data()[ny * w + nx];
        }
    }
    Ok((out, LabelMap::from_vec([1, h, w], labels)?))
}

/// Draws a transform from the default ranges and applies it.
pub fn augment_affine<T: Scalar>(
    img: &Tensor<T>,
    lbl: &LabelMap,
    rng: &mut Rng,
) -> Result<(Tensor<T>, LabelMap)> {
    let p = AffineParams::sample(&AffineRanges::default(), img.height(), img.width(), rng);
    warp(img, lbl, &p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> (Tensor<f32>, LabelMap) {
        let mut rng = Rng::new(seed);
        let img = Tensor::<f32>::uniform([1, 2, 16, 12], -1.0, 1.0, &mut rng);
        let lbl =
            LabelMap::from_vec([1, 16, 12], (0..192).map(|i| (i % 7) as u32).collect()).unwrap();
        (img, lbl)
    }

    #[test]
    fn identity_is_bit_exact() {
        let (img, lbl) = sample(1);
        let (a, b) = warp(&img, &lbl, &AffineParams::IDENTITY).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lbl);
    }

    #[test]
    fn labels_stay_within_original_set() {
        let (img, _) = sample(2);
        let lbl =
            LabelMap::from_vec([1, 16, 12], (0..192).map(|i| [0, 3, 5][i % 3]).collect()).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let (_, out) = augment_affine(&img, &lbl, &mut rng).unwrap();
            assert!(out.data().iter().all(|v| [0, 3, 5].contains(v)));
        }
    }

    #[test]
    fn reproducible_for_a_seed() {
        let (img, lbl) = sample(4);
        let a = augment_affine(&img, &lbl, &mut Rng::new(9)).unwrap();
        let b = augment_affine(&img, &lbl, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_shift_moves_pixels() {
        let (img, lbl) = sample(5);
        let p = AffineParams {
            shift_x: 2.0,
            ..AffineParams::IDENTITY
        };
        let (out, l) = warp(&img, &lbl, &p).unwrap();
        assert_eq!(out.at(0, 1, 3, 7), img.at(0, 1, 3, 5));
        assert_eq!(l.at(0, 3, 7), lbl.at(0, 3, 5));
        assert_eq!(out.at(0, 0, 3, 0), img.at(0, 0, 3, 0));
    }
}
