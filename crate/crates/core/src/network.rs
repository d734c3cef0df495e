//! Encoder-decoder segmentation network in four variants.
//!
//! ```text
//! x -> stem -> enc1 -> pool -> enc2 -> pool -> enc3 -> pool -> enc4 -> pool -> bottleneck
//!               |skip1         |skip2         |skip3         |skip4              |
//!  logits <- classifier <- dec1 <- cub1 <- dec2 <- cub2 <- dec3 <- cub3 <- dec4 <- cub4
//! ```
//!
//! Local competition makes the encoder, bottleneck and decoder blocks
//! competitive; global competition makes the `cub*` fusion blocks
//! competitive. The four on/off combinations are [`Variant::Bl0`] (neither),
//! [`Variant::Bl1`] (local), [`Variant::Bl2`] (global) and
//! [`Variant::CdfNet`] (both).
//!
//! # Parameter names
//!
//! Checkpoint entries use dot-joined paths, in this order:
//!
//! - `stem.weight`, `stem.bias`
//! - `enc{1..4}.h{1..3}.conv.{weight,bias}` and
//!   `enc{1..4}.h{1..3}.bn.{gamma,beta,running_mean,running_var}`
//! - `bottleneck.h{1..3}.…` as for the encoders
//! - `cub{1..4}.joint.conv.{weight,bias}`, present only with global competition
//! - `dec{1..4}.h{1..3}.…` as for the encoders
//! - `classifier.weight`, `classifier.bias`
//!
//! Level 1 is full resolution, level 4 the coarsest skip.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::blocks::{BlockMode, DenseBlock, DenseCache, UnpoolBlock, UnpoolCache};
use crate::error::{dim_err, Error, Result};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::layers::{maxpool2x2_backward, maxpool2x2_forward, Conv2d, Mode, PoolIndices};
use crate::params::{join, Entry, EntryMut, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const LEVELS: usize = 4;

/// Input height and width must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 1 << LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Vanilla dense blocks, concatenating unpool.
    Bl0,
    /// Competitive dense blocks, concatenating unpool.
    Bl1,
    /// Vanilla dense blocks, competitive unpool.
    Bl2,
    /// Competitive dense blocks and competitive unpool.
    CdfNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Bl0, Variant::Bl1, Variant::Bl2, Variant::CdfNet];

    pub fn local_competition(self) -> bool {
        matches!(self, Variant::Bl1 | Variant::CdfNet)
    }

    pub fn global_competition(self) -> bool {
        matches!(self, Variant::Bl2 | Variant::CdfNet)
    }

    pub fn block_mode(self) -> BlockMode {
        if self.local_competition() {
            BlockMode::Competitive
        } else {
            BlockMode::Vanilla
        }
    }

    pub fn unpool_mode(self) -> BlockMode {
        if self.global_competition() {
            BlockMode::Competitive
        } else {
            BlockMode::Vanilla
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bl0 => "bl0",
            Variant::Bl1 => "bl1",
            Variant::Bl2 => "bl2",
            Variant::CdfNet => "cdfnet",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bl0" => Ok(Variant::Bl0),
            "bl1" => Ok(Variant::Bl1),
            "bl2" => Ok(Variant::Bl2),
            "cdfnet" => Ok(Variant::CdfNet),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}, expected bl0, bl1, bl2 or cdfnet"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub base_width: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub kernel_size: usize,
}

impl VariantSpec {
    pub fn new(variant: Variant) -> Self {
        VariantSpec {
            variant,
            base_width: 8,
            num_classes: 5,
            input_channels: 1,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.base_width == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "base_width and input_channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-module learnable scalar counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: VariantSpec,
    pub stem: Conv2d<T>,
    pub encoders: Vec<DenseBlock<T>>,
    pub bottleneck: DenseBlock<T>,
    pub unpools: Vec<UnpoolBlock<T>>,
    pub decoders: Vec<DenseBlock<T>>,
    pub classifier: Conv2d<T>,
    id: u64,
    generation: u64,
}

/// Activations retained by [`Model::forward`] for [`Model::backward`].
#[derive(Debug)]
pub struct Cache<T> {
    model_id: u64,
    generation: u64,
    input: Tensor<T>,
    encoders: Vec<DenseCache<T>>,
    pools: Vec<PoolIndices>,
    bottleneck: DenseCache<T>,
    unpools: Vec<UnpoolCache<T>>,
    decoders: Vec<DenseCache<T>>,
    classifier_input: Tensor<T>,
}

impl<T> Cache<T> {
    /// Pooling indices per level, finest first.
    pub fn pool_indices(&self) -> &[PoolIndices] {
        &self.pools
    }
}

impl<T: Scalar> Cache<T> {
    /// Every piecewise-linear decision taken in the forward pass: ReLU signs,
    /// maxout winners and pooling positions. Two inputs with equal
    /// signatures lie on the same linear piece of the network.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for c in &self.encoders {
            c.push_kinks(&mut out);
        }
        for p in &self.pools {
            out.extend_from_slice(p.offsets());
        }
        self.bottleneck.push_kinks(&mut out);
        for (u, d) in self.unpools.iter().zip(&self.decoders) {
            u.push_kinks(&mut out);
            d.push_kinks(&mut out);
        }
        out
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh model with He-uniform convolutions, zero biases and identity
    /// batch norms.
    pub fn build(spec: VariantSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let k = spec.kernel_size;
        let block = spec.variant.block_mode();
        let unpool = spec.variant.unpool_mode();

        let stem = Conv2d::new(spec.input_channels, w, k, rng);
        let encoders = (0..LEVELS)
            .map(|_| DenseBlock::new(block, w, w, w, k, rng))
            .collect();
        let bottleneck = DenseBlock::new(block, w, w, w, k, rng);
        let unpools: Vec<UnpoolBlock<T>> = (0..LEVELS)
            .map(|_| UnpoolBlock::new(unpool, w, w, rng))
            .collect();
        let decoders = unpools
            .iter()
            .map(|u| DenseBlock::new(block, u.out_channels(w, w), w, w, k, rng))
            .collect();
        let classifier = Conv2d::new(w, spec.num_classes, 1, rng);
        Ok(Model {
            spec,
            stem,
            encoders,
            bottleneck,
            unpools,
            decoders,
            classifier,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if c != self.spec.input_channels {
            return Err(dim_err!(
                "model expects {} input channels, got {c}",
                self.spec.input_channels
            ));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(dim_err!(
                "input height and width must be multiples of {SPATIAL_MULTIPLE}, got {h}x{w}"
            ));
        }
        Ok(())
    }

    /// Logits of shape `(N, num_classes, H, W)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        self.check_input(x)?;
        self.generation += 1;

        let mut h = self.stem.forward(x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        let mut enc_caches = Vec::with_capacity(LEVELS);
        let mut pools = Vec::with_capacity(LEVELS);
        for enc in &mut self.encoders {
            let (e, cache) = enc.forward(&h, mode)?;
            let (p, idx) = maxpool2x2_forward(&e)?;
            skips.push(e);
            enc_caches.push(cache);
            pools.push(idx);
            h = p;
        }
        let (mut d, bottleneck) = self.bottleneck.forward(&h, mode)?;

        let mut unpool_caches: Vec<Option<UnpoolCache<T>>> = (0..LEVELS).map(|_| None).collect();
        let mut dec_caches: Vec<Option<DenseCache<T>>> = (0..LEVELS).map(|_| None).collect();
        for level in (0..LEVELS).rev() {
            let (fused, uc) = self.unpools[level].forward(&skips[level], &d, &pools[level])?;
            let (out, dc) = self.decoders[level].forward(&fused, mode)?;
            unpool_caches[level] = Some(uc);
            dec_caches[level] = Some(dc);
            d = out;
        }
        let logits = self.classifier.forward(&d)?;
        Ok((
            logits,
            Cache {
                model_id: self.id,
                generation: self.generation,
                input: x.clone(),
                encoders: enc_caches,
                pools,
                bottleneck,
                unpools: unpool_caches.into_iter().map(Option::unwrap).collect(),
                decoders: dec_caches.into_iter().map(Option::unwrap).collect(),
                classifier_input: d,
            },
        ))
    }

    /// Accumulates gradients into every parameter and returns the gradient
    /// with respect to the input. The cache must come from this model's most
    /// recent forward call.
    pub fn backward(&mut self, cache: Cache<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        if cache.model_id != self.id || cache.generation != self.generation {
            return Err(Error::Usage(
                "backward called with a cache that does not belong to the latest forward pass"
                    .into(),
            ));
        }
        let mut g = self
            .classifier
            .backward(&cache.classifier_input, grad_logits)?;
        let mut skip_grads = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            let g_fused = self.decoders[level].backward(&cache.decoders[level], &g)?;
            let (g_skip, g_small) =
                self.unpools[level].backward(&cache.unpools[level], &g_fused)?;
            skip_grads.push(g_skip);
            g = g_small;
        }
        g = self.bottleneck.backward(&cache.bottleneck, &g)?;
        for level in (0..LEVELS).rev() {
            let mut g_e = maxpool2x2_backward(&cache.pools[level], &g)?;
            g_e.add_assign(&skip_grads[level]);
            g = self.encoders[level].backward(&cache.encoders[level], &g_e)?;
        }
        self.stem.backward(&cache.input, &g)
    }

    pub fn param_counts(&self) -> ParamCount {
        let mut modules: Vec<(String, usize)> = Vec::new();
        self.visit("", &mut |name, e| {
            if let Entry::Param(p) = e {
                let module = name.split('.').next().unwrap_or(name).to_owned();
                match modules.last_mut() {
                    Some((m, n)) if *m == module => *n += p.value.len(),
                    _ => modules.push((module, p.value.len())),
                }
            }
        });
        let total = modules.iter().map(|(_, n)| n).sum();
        ParamCount { modules, total }
    }

    /// All parameters and running statistics, in schema order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, e| {
            out.push((name.to_owned(), e.tensor().clone()))
        });
        out
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.named_tensors();
        let refs: Vec<(String, &Tensor<T>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_checkpoint(&refs, path)
    }

    /// Rebuilds a model for `spec` and fills it from a checkpoint. Every
    /// schema entry must be present with matching extents and element type;
    /// unknown entries are rejected.
    pub fn load_checkpoint(spec: VariantSpec, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Model::build(spec, &mut Rng::new(0))?;
        let mut entries: HashMap<String, crate::io::Record> =
            read_checkpoint(path)?.into_iter().collect();
        let mut failure: Option<Error> = None;
        model.visit_mut("", &mut |name, mut e| {
            if failure.is_some() {
                return;
            }
            let Some(rec) = entries.remove(name) else {
                failure = Some(Error::Checkpoint(format!("missing tensor {name}")));
                return;
            };
            let target = e.tensor_mut();
            match rec.into_tensor::<T>() {
                Ok(t) if t.dims() == target.dims() => *target = t,
                Ok(t) => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor {name} has extents {:?}, spec expects {:?}",
                        t.dims(),
                        target.dims()
                    )))
                }
                Err(err) => failure = Some(Error::Checkpoint(format!("tensor {name}: {err}"))),
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if !entries.is_empty() {
            let mut extra: Vec<_> = entries.into_keys().collect();
            extra.sort();
            return Err(Error::Checkpoint(format!(
                "checkpoint has tensors not in the {} schema: {}",
                spec.variant,
                extra.join(", ")
            )));
        }
        Ok(model)
    }
}

impl<T: Scalar> ParamStore<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.encoders.iter().enumerate() {
            b.visit(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        for (i, u) in self.unpools.iter().enumerate() {
            u.visit(&join(prefix, &format!("cub{}", i + 1)), f);
        }
        for (i, b) in self.decoders.iter().enumerate() {
            b.visit(&join(prefix, &format!("dec{}", i + 1)), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.encoders.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        for (i, u) in self.unpools.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("cub{}", i + 1)), f);
        }
        for (i, b) in self.decoders.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("dec{}", i + 1)), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(v: Variant, w: usize) -> VariantSpec {
        VariantSpec {
            variant: v,
            base_width: w,
            num_classes: 3,
            input_channels: 1,
            kernel_size: 3,
        }
    }

    #[test]
    fn output_matches_input_resolution() {
        for v in Variant::ALL {
            let mut m = Model::<f32>::build(spec(v, 2), &mut Rng::new(1)).unwrap();
            let x = Tensor::uniform([1, 1, 32, 32], 0.0, 1.0, &mut Rng::new(2));
            let (y, _) = m.forward(&x, Mode::Eval).unwrap();
            assert_eq!(y.dims(), [1, 3, 32, 32]);
        }
    }

    #[test]
    fn block_modes_follow_variant() {
        for v in Variant::ALL {
            let m = Model::<f32>::build(spec(v, 2), &mut Rng::new(1)).unwrap();
            assert!(m
                .encoders
                .iter()
                .chain([&m.bottleneck])
                .chain(&m.decoders)
                .all(|b| b.mode() == v.block_mode()));
            assert!(m.unpools.iter().all(|u| u.mode() == v.unpool_mode()));
        }
    }

    #[test]
    fn stem_count() {
        let m = Model::<f32>::build(spec(Variant::CdfNet, 8), &mut Rng::new(1)).unwrap();
        assert_eq!(m.param_counts().modules[0], ("stem".to_string(), 80));
    }

    #[test]
    fn bad_spec_and_bad_input_are_rejected() {
        let mut s = spec(Variant::Bl0, 2);
        s.kernel_size = 2;
        assert!(matches!(
            Model::<f32>::build(s, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
        s.kernel_size = 3;
        s.num_classes = 0;
        assert!(matches!(
            Model::<f32>::build(s, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
        let mut m = Model::<f32>::build(spec(Variant::Bl0, 2), &mut Rng::new(0)).unwrap();
        assert!(m
            .forward(&Tensor::zeros([1, 1, 24, 32]), Mode::Eval)
            .is_err());
        assert!(m
            .forward(&Tensor::zeros([1, 2, 32, 32]), Mode::Eval)
            .is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = Model::<f64>::build(spec(Variant::CdfNet, 2), &mut Rng::new(0)).unwrap();
        let x = Tensor::uniform([1, 1, 16, 16], 0.0, 1.0, &mut Rng::new(2));
        let (y, old) = m.forward(&x, Mode::Train).unwrap();
        let (_, _fresh) = m.forward(&x, Mode::Train).unwrap();
        assert!(matches!(m.backward(old, &y), Err(Error::Usage(_))));
    }
}
