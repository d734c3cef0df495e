//! Training loss: median-frequency balanced logistic loss plus soft Dice.

use crate::error::{dim_err, Error, Result};
use crate::layers::{softmax_backward, softmax_channels};
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Smoothing term in the soft Dice denominator.
pub const DICE_EPSILON: f64 = 1e-6;

/// Median frequency balancing weights, `w_c = median(f) / f_c`.
///
/// The median runs over classes that occur at least once. Classes that never
/// occur get weight 0 and are listed in `absent`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub absent: Vec<usize>,
    /// Only one class occurs in the whole corpus.
    pub degenerate: bool,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
            frequencies: vec![1.0 / num_classes as f64; num_classes],
            absent: Vec::new(),
            degenerate: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn compute_class_weights<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    num_classes: usize,
) -> Result<ClassWeights> {
    let mut counts = vec![0u64; num_classes];
    let mut maps = 0;
    for l in labels {
        l.validate(num_classes)?;
        for &v in l.data() {
            counts[v as usize] += 1;
        }
        maps += 1;
    }
    if maps == 0 {
        return Err(Error::Config(
            "class weights need at least one label map".into(),
        ));
    }
    let total: u64 = counts.iter().sum();
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let med = median(&present);
    let absent: Vec<usize> = (0..num_classes).filter(|&c| counts[c] == 0).collect();
    let weights = frequencies
        .iter()
        .map(|&f| if f > 0.0 { med / f } else { 0.0 })
        .collect();
    let degenerate = present.len() == 1;
    if degenerate {
        log::warn!("degenerate corpus: every labelled pixel belongs to one class");
    }
    if !absent.is_empty() {
        log::warn!("classes {absent:?} never occur; their loss weight is 0");
    }
    Ok(ClassWeights {
        weights,
        frequencies,
        absent,
        degenerate,
    })
}

fn check_pair<T: Scalar>(x: &Tensor<T>, labels: &LabelMap, num_classes: usize) -> Result<()> {
    let [n, c, h, w] = x.dims();
    if labels.dims() != [n, h, w] {
        return Err(dim_err!(
            "labels {:?} do not match predictions {:?}",
            labels.dims(),
            x.dims()
        ));
    }
    if c != num_classes {
        return Err(dim_err!(
            "{c} prediction channels for {num_classes} classes"
        ));
    }
    labels.validate(num_classes)
}

/// Mean over pixels of `w[y] * -log softmax(logits)[y]`, with its gradient
/// with respect to the logits.
pub fn weighted_logistic_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    weights: &ClassWeights,
) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = logits.dims();
    check_pair(logits, labels, weights.num_classes())?;
    let p = h * w;
    let pixels = (n * p) as f64;
    let src = logits.data();
    let mut grad = Tensor::zeros(logits.dims());
    let dst = grad.data_mut();
    let mut total = 0.0;
    let mut exps = vec![0.0f64; c];
    for s in 0..n {
        let base = s * c * p;
        for e in 0..p {
            let y = labels.data()[s * p + e] as usize;
            let wy = weights.weights[y];
            let m = (0..c)
                .map(|ch| src[base + ch * p + e].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ch, ex) in exps.iter_mut().enumerate() {
                *ex = (src[base + ch * p + e].as_f64() - m).exp();
                z += *ex;
            }
            total += wy * (z.ln() + m - src[base + y * p + e].as_f64());
            let scale = wy / pixels;
            for (ch, ex) in exps.iter().enumerate() {
                let onehot = if ch == y { 1.0 } else { 0.0 };
                dst[base + ch * p + e] = T::lit(scale * (ex / z - onehot));
            }
        }
    }
    Ok((total / pixels, grad))
}

/// Per-class overlap sums of a soft prediction against one-hot labels.
struct Overlap {
    intersection: Vec<f64>,
    predicted: Vec<f64>,
    target: Vec<f64>,
}

fn overlap<T: Scalar>(probs: &Tensor<T>, labels: &LabelMap) -> Overlap {
    let [n, c, h, w] = probs.dims();
    let p = h * w;
    let mut o = Overlap {
        intersection: vec![0.0; c],
        predicted: vec![0.0; c],
        target: vec![0.0; c],
    };
    for s in 0..n {
        for ch in 0..c {
            o.predicted[ch] += probs.plane(s, ch).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        for e in 0..p {
            let y = labels.data()[s * p + e] as usize;
            o.target[y] += 1.0;
            o.intersection[y] += probs.plane(s, y)[e].as_f64();
        }
    }
    o
}

/// `1 - mean_c 2 I_c / (P_c + T_c + eps)` over the classes present in
/// `labels`, with its gradient with respect to `probs`.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, labels: &LabelMap) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = probs.dims();
    check_pair(probs, labels, c)?;
    let o = overlap(probs, labels);
    let present = o.target.iter().filter(|&&t| t > 0.0).count() as f64;
    let mut score = 0.0;
    // d(loss)/d(p) = coef_hit if the pixel belongs to the class, coef_miss otherwise.
    let mut coef_hit = vec![0.0; c];
    let mut coef_miss = vec![0.0; c];
    for ch in 0..c {
        if o.target[ch] == 0.0 {
            continue;
        }
        let denom = o.predicted[ch] + o.target[ch] + DICE_EPSILON;
        score += 2.0 * o.intersection[ch] / denom;
        coef_miss[ch] = 2.0 * o.intersection[ch] / (denom * denom) / present;
        coef_hit[ch] = coef_miss[ch] - 2.0 / denom / present;
    }
    let p = h * w;
    let mut grad = Tensor::zeros(probs.dims());
    for s in 0..n {
        for ch in 0..c {
            let dst = grad.plane_mut(s, ch);
            let row = &labels.data()[s * p..(s + 1) * p];
            for (d, &y) in dst.iter_mut().zip(row) {
                *d = T::lit(if y as usize == ch {
                    coef_hit[ch]
                } else {
                    coef_miss[ch]
                });
            }
        }
    }
    Ok((1.0 - score / present, grad))
}

/// Loss values of one composite evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub logistic: f64,
    pub dice: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.logistic + self.dice
    }
}

/// Weighted logistic loss plus soft Dice on the softmax probabilities, with
/// the summed gradient with respect to the logits.
pub fn composite_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    weights: &ClassWeights,
) -> Result<(LossParts, Tensor<T>)> {
    let (logistic, mut grad) = weighted_logistic_loss(logits, labels, weights)?;
    let probs = softmax_channels(logits);
    let (dice, g_probs) = soft_dice_loss(&probs, labels)?;
    grad.add_assign(&softmax_backward(&probs, &g_probs)?);
    Ok((LossParts { logistic, dice }, grad))
}
