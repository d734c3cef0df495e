//! Central finite-difference checks of every backward pass.
//!
//! A unit's output is reduced to a scalar `L = sum(r * y)` with a fixed random
//! `r`, and each element of every input and parameter is perturbed by `±h`.
//! Elements whose perturbation by `±TIE_MARGIN` or `±h` changes any ReLU
//! sign, maxout winner or pooling position sit near a kink, where the
//! function is not differentiable, and are skipped.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::blocks::{BlockMode, DenseBlock, UnpoolBlock};
use crate::error::{Error, Result};
use crate::layers::*;
use crate::loss::{composite_loss, ClassWeights};
use crate::network::{Model, Variant, VariantSpec};
use crate::params::{Entry, EntryMut, ParamStore};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const TIE_MARGIN: f64 = 1e-4;
/// Lower bound on the relative-error denominator, so gradients that are zero
/// up to rounding do not register as large relative errors.
pub const REL_FLOOR: f64 = 1e-3;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const NET_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    Maxout,
    MaxPool,
    Unpool,
    Softmax,
    Concat,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Dense,
    Cdb,
    Unpool,
    Cub,
}

/// What to check: `layer:<name>`, `block:<name>` or `net:<variant>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckUnit {
    Layer(LayerKind),
    Block(BlockKind),
    Net(Variant),
}

const LAYERS: [(&str, LayerKind); 9] = [
    ("conv", LayerKind::Conv),
    ("bn", LayerKind::BatchNorm),
    ("relu", LayerKind::Relu),
    ("maxout", LayerKind::Maxout),
    ("maxpool", LayerKind::MaxPool),
    ("unpool", LayerKind::Unpool),
    ("softmax", LayerKind::Softmax),
    ("concat", LayerKind::Concat),
    ("loss", LayerKind::Loss),
];

const BLOCKS: [(&str, BlockKind); 4] = [
    ("dense", BlockKind::Dense),
    ("cdb", BlockKind::Cdb),
    ("unpool", BlockKind::Unpool),
    ("cub", BlockKind::Cub),
];

impl CheckUnit {
    /// Every checkable unit.
    pub fn all() -> Vec<CheckUnit> {
        LAYERS
            .iter()
            .map(|&(_, k)| CheckUnit::Layer(k))
            .chain(BLOCKS.iter().map(|&(_, k)| CheckUnit::Block(k)))
            .chain(Variant::ALL.iter().map(|&v| CheckUnit::Net(v)))
            .collect()
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            CheckUnit::Net(_) => NET_TOLERANCE,
            _ => LAYER_TOLERANCE,
        }
    }
}

impl fmt::Display for CheckUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckUnit::Layer(k) => {
                let name = LAYERS.iter().find(|(_, l)| l == k).map_or("?", |(n, _)| n);
                write!(f, "layer:{name}")
            }
            CheckUnit::Block(k) => {
                let name = BLOCKS.iter().find(|(_, b)| b == k).map_or("?", |(n, _)| n);
                write!(f, "block:{name}")
            }
            CheckUnit::Net(v) => write!(f, "net:{v}"),
        }
    }
}

impl FromStr for CheckUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || {
            Error::Usage(format!(
                "unknown unit {s:?}; expected layer:<{}>, block:<{}> or net:<{}>",
                LAYERS.map(|(n, _)| n).join("|"),
                BLOCKS.map(|(n, _)| n).join("|"),
                Variant::ALL.map(|v| v.name()).join("|"),
            ))
        };
        let (kind, name) = s.split_once(':').ok_or_else(unknown)?;
        match kind {
            "layer" => LAYERS
                .iter()
                .find(|(n, _)| *n == name)
                .map(|&(_, k)| CheckUnit::Layer(k))
                .ok_or_else(unknown),
            "block" => BLOCKS
                .iter()
                .find(|(n, _)| *n == name)
                .map(|&(_, k)| CheckUnit::Block(k))
                .ok_or_else(unknown),
            "net" => name.parse().map(CheckUnit::Net).map_err(|_| unknown()),
            _ => Err(unknown()),
        }
    }
}

/// Outcome for one input or parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub unit: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    /// Tensors whose error exceeds the tolerance.
    pub fn failing(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_err.is_nan() || t.max_rel_err > self.tolerance)
            .map(|t| format!("{} ({:.3e})", t.name, t.max_rel_err))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (tolerance {:e})", self.unit, self.tolerance);
        for t in &self.tensors {
            let _ = writeln!(
                s,
                "  {:<36} max_rel {:.3e}  max_abs {:.3e}  checked {:>5}  skipped {:>4}{}",
                t.name,
                t.max_rel_err,
                t.max_abs_err,
                t.checked,
                t.skipped,
                if t.max_rel_err <= self.tolerance {
                    ""
                } else {
                    "  FAIL"
                }
            );
        }
        s
    }

    /// `Err(Error::GradCheck)` listing the failing tensors, if any.
    pub fn into_result(self) -> Result<Self> {
        let failing = self.failing();
        if failing.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradCheck(failing))
        }
    }
}

/// Output, kink signature, and input gradients when a backward was requested.
type Eval = (Tensor<f64>, Vec<u32>, Vec<Tensor<f64>>);
type Forward<M> = Box<dyn FnMut(&mut M, &[Tensor<f64>], Option<&Tensor<f64>>) -> Result<Eval>>;

struct NoParams;

impl ParamStore<f64> for NoParams {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, Entry<'_, f64>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {}
}

struct Probe<M> {
    module: M,
    inputs: Vec<(String, Tensor<f64>)>,
    proj: Option<Tensor<f64>>,
    f: Forward<M>,
}

impl<M: ParamStore<f64>> Probe<M> {
    fn xs(&self) -> Vec<Tensor<f64>> {
        self.inputs.iter().map(|(_, t)| t.clone()).collect()
    }

    fn scalar(&self, y: &Tensor<f64>) -> f64 {
        match &self.proj {
            Some(r) => y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            None => y.sum(),
        }
    }

    fn loss(&mut self) -> Result<(f64, Vec<u32>)> {
        let xs = self.xs();
        let (y, kinks, _) = (self.f)(&mut self.module, &xs, None)?;
        Ok((self.scalar(&y), kinks))
    }

    fn param_slot(&mut self, index: usize, e: usize, set: Option<f64>) -> f64 {
        let mut i = 0;
        let mut value = 0.0;
        self.module.visit_mut("", &mut |_, entry| {
            if let EntryMut::Param(p) = entry {
                if i == index {
                    let slot = &mut p.value.data_mut()[e];
                    value = *slot;
                    if let Some(v) = set {
                        *slot = v;
                    }
                }
                i += 1;
            }
        });
        value
    }

    /// Reads element `e` of tensor `t`, optionally overwriting it.
    fn slot(&mut self, t: usize, e: usize, set: Option<f64>) -> f64 {
        let n_in = self.inputs.len();
        if t < n_in {
            let slot = &mut self.inputs[t].1.data_mut()[e];
            let old = *slot;
            if let Some(v) = set {
                *slot = v;
            }
            old
        } else {
            self.param_slot(t - n_in, e, set)
        }
    }

    fn check(mut self, unit: String, tolerance: f64) -> Result<GradReport> {
        self.module.zero_grads();
        let xs = self.xs();
        let (_, base_kinks, input_grads) = {
            let probe_y = (self.f)(&mut self.module, &xs, None)?.0;
            let r = self
                .proj
                .clone()
                .unwrap_or_else(|| Tensor::full(probe_y.dims(), 1.0));
            (self.f)(&mut self.module, &xs, Some(&r))?
        };
        let mut analytic: Vec<(String, Tensor<f64>)> = self
            .inputs
            .iter()
            .map(|(n, _)| n.clone())
            .zip(input_grads)
            .collect();
        self.module.visit("", &mut |name, e| {
            if let Entry::Param(p) = e {
                analytic.push((name.to_owned(), p.grad.clone()));
            }
        });

        let mut tensors = Vec::with_capacity(analytic.len());
        for (t, (name, grad)) in analytic.iter().enumerate() {
            let mut tc = TensorCheck {
                name: name.clone(),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                checked: 0,
                skipped: 0,
            };
            for (e, &a) in grad.data().iter().enumerate() {
                let orig = self.slot(t, e, None);
                let eval_at = |probe: &mut Self, v: f64| {
                    probe.slot(t, e, Some(v));
                    let out = probe.loss();
                    probe.slot(t, e, Some(orig));
                    out
                };
                let (_, k1) = eval_at(&mut self, orig + TIE_MARGIN)?;
                let (_, k2) = eval_at(&mut self, orig - TIE_MARGIN)?;
                let (lp, k3) = eval_at(&mut self, orig + FD_STEP)?;
                let (lm, k4) = eval_at(&mut self, orig - FD_STEP)?;
                if [&k1, &k2, &k3, &k4].iter().any(|k| **k != base_kinks) {
                    tc.skipped += 1;
                    continue;
                }
                let n = (lp - lm) / (2.0 * FD_STEP);
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
                tc.max_abs_err = tc.max_abs_err.max(abs);
                if rel.is_nan() || rel > tc.max_rel_err {
                    tc.max_rel_err = rel;
                }
                tc.checked += 1;
            }
            tensors.push(tc);
        }
        Ok(GradReport {
            unit,
            tolerance,
            tensors,
        })
    }
}

fn winners(a: &crate::tensor::ArgIndex) -> Vec<u32> {
    a.winners().iter().map(|&w| u32::from(w)).collect()
}

fn probe<M: ParamStore<f64>>(
    module: M,
    inputs: Vec<(&str, Tensor<f64>)>,
    out_dims: Option<[usize; 4]>,
    rng: &mut Rng,
    f: Forward<M>,
) -> Probe<M> {
    Probe {
        module,
        inputs: inputs.into_iter().map(|(n, t)| (n.to_owned(), t)).collect(),
        proj: out_dims.map(|d| Tensor::normal(d, 1.0, rng)),
        f,
    }
}

fn layer_report(kind: LayerKind, unit: String, tol: f64, rng: &mut Rng) -> Result<GradReport> {
    let x = |d: [usize; 4], rng: &mut Rng| Tensor::<f64>::uniform(d, -1.0, 1.0, rng);
    match kind {
        LayerKind::Conv => {
            let conv = Conv2d::<f64>::new(3, 2, 3, rng);
            let mut c = conv;
            c.bias.value = Tensor::uniform([1, 2, 1, 1], -0.5, 0.5, rng);
            let input = x([2, 3, 5, 4], rng);
            probe(
                c,
                vec![("x", input)],
                Some([2, 2, 5, 4]),
                rng,
                Box::new(|m: &mut Conv2d<f64>, xs, g| {
                    let y = m.forward(&xs[0])?;
                    let gx = match g {
                        Some(g) => vec![m.backward(&xs[0], g)?],
                        None => vec![],
                    };
                    Ok((y, vec![], gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::BatchNorm => {
            let mut bn = BatchNorm::<f64>::new(3);
            bn.gamma.value = Tensor::uniform([1, 3, 1, 1], 0.5, 1.5, rng);
            bn.beta.value = Tensor::uniform([1, 3, 1, 1], -0.5, 0.5, rng);
            let input = x([2, 3, 3, 3], rng);
            probe(
                bn,
                vec![("x", input)],
                Some([2, 3, 3, 3]),
                rng,
                Box::new(|m: &mut BatchNorm<f64>, xs, g| {
                    let (y, cache) = m.forward(&xs[0], Mode::Train)?;
                    let gx = match g {
                        Some(g) => vec![m.backward(&cache, g)?],
                        None => vec![],
                    };
                    Ok((y, vec![], gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::Relu => {
            let input = x([2, 2, 4, 4], rng);
            probe(
                NoParams,
                vec![("x", input)],
                Some([2, 2, 4, 4]),
                rng,
                Box::new(|_: &mut NoParams, xs, g| {
                    let y = relu_forward(&xs[0]);
                    let kinks = xs[0].data().iter().map(|&v| u32::from(v > 0.0)).collect();
                    let gx = match g {
                        Some(g) => vec![relu_backward(&xs[0], g)?],
                        None => vec![],
                    };
                    Ok((y, kinks, gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::Maxout => {
            let d = [2, 2, 3, 3];
            let inputs = vec![("a", x(d, rng)), ("b", x(d, rng)), ("c", x(d, rng))];
            probe(
                NoParams,
                inputs,
                Some(d),
                rng,
                Box::new(|_: &mut NoParams, xs, g| {
                    let refs: Vec<&Tensor<f64>> = xs.iter().collect();
                    let (y, arg) = maxout_forward(&refs)?;
                    let gx = match g {
                        Some(g) => maxout_backward(&arg, g)?,
                        None => vec![],
                    };
                    Ok((y, winners(&arg), gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::MaxPool => {
            let input = x([2, 2, 4, 6], rng);
            probe(
                NoParams,
                vec![("x", input)],
                Some([2, 2, 2, 3]),
                rng,
                Box::new(|_: &mut NoParams, xs, g| {
                    let (y, idx) = maxpool2x2_forward(&xs[0])?;
                    let gx = match g {
                        Some(g) => vec![maxpool2x2_backward(&idx, g)?],
                        None => vec![],
                    };
                    Ok((y, idx.offsets().to_vec(), gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::Unpool => {
            let (_, idx) = maxpool2x2_forward(&x([2, 2, 4, 6], rng))?;
            let input = x([2, 2, 2, 3], rng);
            probe(
                NoParams,
                vec![("x", input)],
                Some([2, 2, 4, 6]),
                rng,
                Box::new(move |_: &mut NoParams, xs, g| {
                    let y = max_unpool2x2(&xs[0], &idx)?;
                    let gx = match g {
                        Some(g) => vec![max_unpool2x2_backward(&idx, g)?],
                        None => vec![],
                    };
                    Ok((y, vec![], gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::Softmax => {
            let input = x([2, 4, 3, 3], rng);
            probe(
                NoParams,
                vec![("x", input)],
                Some([2, 4, 3, 3]),
                rng,
                Box::new(|_: &mut NoParams, xs, g| {
                    let p = softmax_channels(&xs[0]);
                    let gx = match g {
                        Some(g) => vec![softmax_backward(&p, g)?],
                        None => vec![],
                    };
                    Ok((p, vec![], gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::Concat => {
            let inputs = vec![("a", x([2, 1, 3, 3], rng)), ("b", x([2, 3, 3, 3], rng))];
            probe(
                NoParams,
                inputs,
                Some([2, 4, 3, 3]),
                rng,
                Box::new(|_: &mut NoParams, xs, g| {
                    let y = concat_channels(&[&xs[0], &xs[1]])?;
                    let gx = match g {
                        Some(g) => split_channels(g, &[1, 3])?,
                        None => vec![],
                    };
                    Ok((y, vec![], gx))
                }),
            )
            .check(unit, tol)
        }
        LayerKind::Loss => {
            let k = 3;
            let labels =
                LabelMap::from_vec([2, 3, 3], (0..18).map(|_| rng.below(k) as u32).collect())?;
            let mut weights = ClassWeights::uniform(k);
            weights.weights = (0..k).map(|_| rng.uniform(0.5, 2.0)).collect();
            let input = Tensor::uniform([2, k, 3, 3], -2.0, 2.0, rng);
            probe(
                NoParams,
                vec![("logits", input)],
                None,
                rng,
                Box::new(move |_: &mut NoParams, xs, g| {
                    let (parts, grad) = composite_loss(&xs[0], &labels, &weights)?;
                    let y = Tensor::full([1, 1, 1, 1], parts.total());
                    let gx = match g {
                        Some(g) => vec![grad.map(|v| v * g.data()[0])],
                        None => vec![],
                    };
                    Ok((y, vec![], gx))
                }),
            )
            .check(unit, tol)
        }
    }
}

fn block_report(kind: BlockKind, unit: String, tol: f64, rng: &mut Rng) -> Result<GradReport> {
    let x = |d: [usize; 4], rng: &mut Rng| Tensor::<f64>::uniform(d, -1.0, 1.0, rng);
    match kind {
        BlockKind::Dense | BlockKind::Cdb => {
            let (mode, c_in) = match kind {
                BlockKind::Dense => (BlockMode::Vanilla, 2),
                _ => (BlockMode::Competitive, 3),
            };
            let block = DenseBlock::<f64>::new(mode, c_in, 2, 3, 3, rng);
            let input = x([2, c_in, 4, 4], rng);
            probe(
                block,
                vec![("x", input)],
                Some([2, 3, 4, 4]),
                rng,
                Box::new(|m: &mut DenseBlock<f64>, xs, g| {
                    let (y, cache) = m.forward(&xs[0], Mode::Train)?;
                    let mut kinks = Vec::new();
                    cache.push_kinks(&mut kinks);
                    let gx = match g {
                        Some(g) => vec![m.backward(&cache, g)?],
                        None => vec![],
                    };
                    Ok((y, kinks, gx))
                }),
            )
            .check(unit, tol)
        }
        BlockKind::Unpool | BlockKind::Cub => {
            let mode = match kind {
                BlockKind::Unpool => BlockMode::Vanilla,
                _ => BlockMode::Competitive,
            };
            let block = UnpoolBlock::<f64>::new(mode, 2, 3, rng);
            let (_, idx) = maxpool2x2_forward(&x([2, 2, 4, 4], rng))?;
            let out_c = block.out_channels(2, 3);
            let inputs = vec![
                ("skip", x([2, 3, 4, 4], rng)),
                ("decoded", x([2, 2, 2, 2], rng)),
            ];
            probe(
                block,
                inputs,
                Some([2, out_c, 4, 4]),
                rng,
                Box::new(move |m: &mut UnpoolBlock<f64>, xs, g| {
                    let (y, cache) = m.forward(&xs[0], &xs[1], &idx)?;
                    let mut kinks = Vec::new();
                    cache.push_kinks(&mut kinks);
                    let gx = match g {
                        Some(g) => {
                            let (gs, gd) = m.backward(&cache, g)?;
                            vec![gs, gd]
                        }
                        None => vec![],
                    };
                    Ok((y, kinks, gx))
                }),
            )
            .check(unit, tol)
        }
    }
}

fn net_report(variant: Variant, unit: String, tol: f64, rng: &mut Rng) -> Result<GradReport> {
    let spec = VariantSpec {
        base_width: 2,
        num_classes: 2,
        ..VariantSpec::new(variant)
    };
    let mut model = Model::<f64>::build(spec, rng)?;
    // Non-trivial affine batch-norm parameters exercise their gradients.
    model.visit_mut("", &mut |name, e| {
        if let EntryMut::Param(p) = e {
            if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
                let lo = if name.ends_with("gamma") { 0.5 } else { -0.3 };
                p.value = Tensor::uniform(p.value.dims(), lo, lo + 1.0, rng);
            }
        }
    });
    let input = Tensor::uniform([4, 1, 16, 16], -1.0, 1.0, rng);
    probe(
        model,
        vec![("input", input)],
        Some([4, 2, 16, 16]),
        rng,
        Box::new(|m: &mut Model<f64>, xs, g| {
            let (y, cache) = m.forward(&xs[0], Mode::Train)?;
            let kinks = cache.kink_signature();
            let gx = match g {
                Some(g) => vec![m.backward(cache, g)?],
                None => vec![],
            };
            Ok((y, kinks, gx))
        }),
    )
    .check(unit, tol)
}

/// Checks one unit on a fixed random instance drawn from `seed`.
pub fn gradcheck(unit: CheckUnit, tolerance: f64, seed: u64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let name = unit.to_string();
    match unit {
        CheckUnit::Layer(k) => layer_report(k, name, tolerance, &mut rng),
        CheckUnit::Block(k) => block_report(k, name, tolerance, &mut rng),
        CheckUnit::Net(v) => net_report(v, name, tolerance, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_names_round_trip() {
        for u in CheckUnit::all() {
            assert_eq!(u.to_string().parse::<CheckUnit>().unwrap(), u);
        }
        assert!(matches!(
            "layer:nope".parse::<CheckUnit>(),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            "maxout".parse::<CheckUnit>(),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn maxout_layer_passes() {
        let r = gradcheck(CheckUnit::Layer(LayerKind::Maxout), LAYER_TOLERANCE, 1).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert_eq!(r.tensors.len(), 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = Rng::new(2);
        let input = Tensor::<f64>::uniform([1, 1, 2, 2], -1.0, 1.0, &mut rng);
        let p = probe(
            NoParams,
            vec![("x", input)],
            Some([1, 1, 2, 2]),
            &mut rng,
            Box::new(|_: &mut NoParams, xs, g| {
                let y = xs[0].map(|v| v * v);
                let gx = match g {
                    Some(g) => vec![g.clone()],
                    None => vec![],
                };
                Ok((y, vec![], gx))
            }),
        );
        let r = p.check("square".into(), 1e-5).unwrap();
        assert!(!r.passed());
        assert!(matches!(r.into_result(), Err(Error::GradCheck(_))));
    }
}
