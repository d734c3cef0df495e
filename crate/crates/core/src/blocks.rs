//! Dense blocks and decoder fusion blocks, in vanilla (concatenation) and
//! competitive (maxout) form.
//!
//! For an input `x` with `C` channels, a dense block chains three composite
//! functions `h1, h2, h3`, each `conv -> ReLU -> batch norm`:
//!
//! ```text
//! vanilla:      y1 = [h1(x), x]          y2 = [h2(y1), y1]          out = h3(y2)
//! competitive:  y1 = max(h1(x), x)       y2 = max(h2(y1), y1)       out = h3(y2)
//! ```
//!
//! `[.]` stacks channels, `max` is maxout across feature maps. Vanilla inputs
//! to `h2`/`h3` grow to `C + g` and `C + 2g` channels for growth width `g`;
//! competitive ones stay at `C`.
//!
//! The decoder fusion block unpools the coarser decoder features with the
//! encoder's pooling indices and merges them with the skip connection, either
//! by concatenation or by letting a 1×1 convolution of both streams compete
//! against the skip features.

use crate::error::{dim_err, Result};
use crate::layers::{
    concat_channels, max_unpool2x2, max_unpool2x2_backward, maxout_backward, maxout_forward,
    relu_backward, relu_forward, split_channels, BatchNorm, BnCache, Conv2d, Mode, PoolIndices,
};
use crate::params::{join, Entry, EntryMut, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ArgIndex, Scalar, Tensor};

/// How feature maps are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// Channel concatenation.
    Vanilla,
    /// Maxout competition.
    Competitive,
}

/// `conv -> ReLU -> batch norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct CompositeCache<T> {
    input: Tensor<T>,
    activated: Tensor<T>,
    bn: BnCache<T>,
}

impl<T: Scalar> CompositeCache<T> {
    pub(crate) fn push_kinks(&self, out: &mut Vec<u32>) {
        out.extend(
            self.activated
                .data()
                .iter()
                .map(|&v| u32::from(v > T::zero())),
        );
    }
}

impl<T: Scalar> Composite<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        Composite {
            conv: Conv2d::new(c_in, c_out, k, rng),
            bn: BatchNorm::new(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.conv.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, CompositeCache<T>)> {
        let z = self.conv.forward(x)?;
        let activated = relu_forward(&z);
        let (y, bn) = self.bn.forward(&activated, mode)?;
        Ok((
            y,
            CompositeCache {
                input: x.clone(),
                activated,
                bn,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CompositeCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.bn.backward(&cache.bn, grad)?;
        let g = relu_backward(&cache.activated, &g)?;
        self.conv.backward(&cache.input, &g)
    }
}

impl<T: Scalar> ParamStore<T> for Composite<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Three densely connected composite functions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock<T> {
    mode: BlockMode,
    pub h: [Composite<T>; 3],
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    h: [CompositeCache<T>; 3],
    /// Maxout winners after `h1` and `h2`; empty in vanilla mode.
    winners: Vec<ArgIndex>,
}

impl<T: Scalar> DenseCache<T> {
    pub(crate) fn push_kinks(&self, out: &mut Vec<u32>) {
        for h in &self.h {
            h.push_kinks(out);
        }
        for w in &self.winners {
            out.extend(w.winners().iter().map(|&v| u32::from(v)));
        }
    }
}

impl<T: Scalar> DenseBlock<T> {
    /// `growth` is the output width of `h1` and `h2` in vanilla mode. In
    /// competitive mode those must match the input width and `growth` is
    /// ignored.
    pub fn new(
        mode: BlockMode,
        c_in: usize,
        growth: usize,
        c_out: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Self {
        let h = match mode {
            BlockMode::Vanilla => [
                Composite::new(c_in, growth, k, rng),
                Composite::new(c_in + growth, growth, k, rng),
                Composite::new(c_in + 2 * growth, c_out, k, rng),
            ],
            BlockMode::Competitive => [
                Composite::new(c_in, c_in, k, rng),
                Composite::new(c_in, c_in, k, rng),
                Composite::new(c_in, c_out, k, rng),
            ],
        };
        DenseBlock { mode, h }
    }

    pub fn mode(&self) -> BlockMode {
        self.mode
    }

    pub fn c_in(&self) -> usize {
        self.h[0].c_in()
    }

    pub fn c_out(&self) -> usize {
        self.h[2].c_out()
    }

    /// Channel count seen by each composite function.
    pub fn input_widths(&self) -> [usize; 3] {
        [self.h[0].c_in(), self.h[1].c_in(), self.h[2].c_in()]
    }

    fn check(&self, idx: usize, x: &Tensor<T>) -> Result<()> {
        let want = self.h[idx].c_in();
        if x.channels() != want {
            return Err(dim_err!(
                "dense block h{} expects {want} input channels, got {} (input {:?})",
                idx + 1,
                x.channels(),
                x.dims()
            ));
        }
        Ok(())
    }

    fn apply(
        &mut self,
        idx: usize,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, CompositeCache<T>)> {
        self.check(idx, x)?;
        self.h[idx].forward(x, mode)
    }

    fn merge(
        &self,
        fresh: &Tensor<T>,
        prev: &Tensor<T>,
        winners: &mut Vec<ArgIndex>,
    ) -> Result<Tensor<T>> {
        match self.mode {
            BlockMode::Vanilla => concat_channels(&[fresh, prev]),
            BlockMode::Competitive => {
                let (y, arg) = maxout_forward(&[fresh, prev])?;
                winners.push(arg);
                Ok(y)
            }
        }
    }

    /// Returns the block output and the intermediate maps `y1`, `y2` in the
    /// cache.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DenseCache<T>)> {
        let mut winners = Vec::new();
        let (a1, c1) = self.apply(0, x, mode)?;
        let y1 = self.merge(&a1, x, &mut winners)?;
        let (a2, c2) = self.apply(1, &y1, mode)?;
        let y2 = self.merge(&a2, &y1, &mut winners)?;
        let (out, c3) = self.apply(2, &y2, mode)?;
        Ok((
            out,
            DenseCache {
                h: [c1, c2, c3],
                winners,
            },
        ))
    }

    /// Splits a merged gradient into (fresh-branch, carried-input) parts.
    fn unmerge(
        &self,
        step: usize,
        grad: &Tensor<T>,
        cache: &DenseCache<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut parts = match self.mode {
            BlockMode::Vanilla => {
                let fresh = self.h[step].c_out();
                split_channels(grad, &[fresh, grad.channels() - fresh])?
            }
            BlockMode::Competitive => maxout_backward(&cache.winners[step], grad)?,
        };
        let carried = parts.pop().unwrap();
        let fresh = parts.pop().unwrap();
        Ok((fresh, carried))
    }

    pub fn backward(&mut self, cache: &DenseCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g_y2 = self.h[2].backward(&cache.h[2], grad)?;
        let (g_a2, mut g_y1) = self.unmerge(1, &g_y2, cache)?;
        g_y1.add_assign(&self.h[1].backward(&cache.h[1], &g_a2)?);
        let (g_a1, mut g_x) = self.unmerge(0, &g_y1, cache)?;
        g_x.add_assign(&self.h[0].backward(&cache.h[0], &g_a1)?);
        Ok(g_x)
    }
}

impl<T: Scalar> ParamStore<T> for DenseBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        for (i, h) in self.h.iter().enumerate() {
            h.visit(&join(prefix, &format!("h{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        for (i, h) in self.h.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("h{}", i + 1)), f);
        }
    }
}

/// Fuses an encoder skip connection with unpooled decoder features.
#[derive(Debug, Clone, PartialEq)]
pub enum UnpoolBlock<T> {
    /// `[unpool(decoded), skip]`.
    Vanilla,
    /// `max(joint([unpool(decoded), skip]), skip)` with a 1×1 convolution
    /// `joint` mapping back to the skip width.
    Competitive { joint: Box<Conv2d<T>> },
}

#[derive(Debug, Clone)]
pub struct UnpoolCache<T> {
    indices: PoolIndices,
    widths: [usize; 2],
    joint_input: Option<Tensor<T>>,
    winners: Option<ArgIndex>,
}

impl<T> UnpoolCache<T> {
    pub(crate) fn push_kinks(&self, out: &mut Vec<u32>) {
        if let Some(w) = &self.winners {
            out.extend(w.winners().iter().map(|&v| u32::from(v)));
        }
    }
}

impl<T: Scalar> UnpoolBlock<T> {
    pub fn new(mode: BlockMode, c_decoded: usize, c_skip: usize, rng: &mut Rng) -> Self {
        match mode {
            BlockMode::Vanilla => UnpoolBlock::Vanilla,
            BlockMode::Competitive => UnpoolBlock::Competitive {
                joint: Box::new(Conv2d::new(c_decoded + c_skip, c_skip, 1, rng)),
            },
        }
    }

    pub fn mode(&self) -> BlockMode {
        match self {
            UnpoolBlock::Vanilla => BlockMode::Vanilla,
            UnpoolBlock::Competitive { .. } => BlockMode::Competitive,
        }
    }

    pub fn out_channels(&self, c_decoded: usize, c_skip: usize) -> usize {
        match self {
            UnpoolBlock::Vanilla => c_decoded + c_skip,
            UnpoolBlock::Competitive { .. } => c_skip,
        }
    }

    pub fn forward(
        &self,
        skip: &Tensor<T>,
        decoded_small: &Tensor<T>,
        indices: &PoolIndices,
    ) -> Result<(Tensor<T>, UnpoolCache<T>)> {
        let [n, _, h, w] = skip.dims();
        let [dn, _, dh, dw] = decoded_small.dims();
        if dn != n || 2 * dh != h || 2 * dw != w {
            return Err(dim_err!(
                "unpool block: skip {:?} needs decoded features at half resolution, got {:?}",
                skip.dims(),
                decoded_small.dims()
            ));
        }
        let up = max_unpool2x2(decoded_small, indices)?;
        let fused = concat_channels(&[&up, skip])?;
        let widths = [up.channels(), skip.channels()];
        match self {
            UnpoolBlock::Vanilla => Ok((
                fused,
                UnpoolCache {
                    indices: indices.clone(),
                    widths,
                    joint_input: None,
                    winners: None,
                },
            )),
            UnpoolBlock::Competitive { joint } => {
                if joint.c_in() != fused.channels() || joint.c_out() != skip.channels() {
                    return Err(dim_err!(
                        "competitive unpool joint map is {}->{}, streams give {} channels with skip width {}",
                        joint.c_in(),
                        joint.c_out(),
                        fused.channels(),
                        skip.channels()
                    ));
                }
                let j = joint.forward(&fused)?;
                let (out, arg) = maxout_forward(&[&j, skip])?;
                Ok((
                    out,
                    UnpoolCache {
                        indices: indices.clone(),
                        widths,
                        joint_input: Some(fused),
                        winners: Some(arg),
                    },
                ))
            }
        }
    }

    /// Returns `(grad_skip, grad_decoded_small)`.
    pub fn backward(
        &mut self,
        cache: &UnpoolCache<T>,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (g_fused, g_skip_direct) = match self {
            UnpoolBlock::Vanilla => (grad.clone(), None),
            UnpoolBlock::Competitive { joint } => {
                let arg = cache.winners.as_ref().expect("competitive cache");
                let mut parts = maxout_backward(arg, grad)?;
                let g_skip = parts.pop().unwrap();
                let g_j = parts.pop().unwrap();
                let input = cache.joint_input.as_ref().expect("competitive cache");
                (joint.backward(input, &g_j)?, Some(g_skip))
            }
        };
        let mut parts = split_channels(&g_fused, &cache.widths)?;
        let mut g_skip = parts.pop().unwrap();
        let g_up = parts.pop().unwrap();
        if let Some(direct) = g_skip_direct {
            g_skip.add_assign(&direct);
        }
        let g_small = max_unpool2x2_backward(&cache.indices, &g_up)?;
        Ok((g_skip, g_small))
    }
}

impl<T: Scalar> ParamStore<T> for UnpoolBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        if let UnpoolBlock::Competitive { joint } = self {
            joint.visit(&join(prefix, "joint.conv"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        if let UnpoolBlock::Competitive { joint } = self {
            joint.visit_mut(&join(prefix, "joint.conv"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::maxpool2x2_forward;

    #[test]
    fn competitive_block_keeps_width() {
        let mut rng = Rng::new(1);
        for c in [2, 4, 8] {
            let mut b = DenseBlock::<f64>::new(BlockMode::Competitive, c, c, 5, 3, &mut rng);
            assert_eq!(b.input_widths(), [c, c, c]);
            let x = Tensor::uniform([1, c, 4, 4], -1.0, 1.0, &mut rng);
            let (y, _) = b.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.channels(), 5);
        }
    }

    #[test]
    fn vanilla_block_grows_width() {
        let mut rng = Rng::new(2);
        for (c, g) in [(2, 2), (4, 3), (8, 8)] {
            let mut b = DenseBlock::<f64>::new(BlockMode::Vanilla, c, g, c, 3, &mut rng);
            assert_eq!(b.input_widths(), [c, c + g, c + 2 * g]);
            let x = Tensor::uniform([1, c, 4, 4], -1.0, 1.0, &mut rng);
            let (y, _) = b.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.channels(), c);
        }
    }

    #[test]
    fn wrong_input_width_names_h1() {
        let mut rng = Rng::new(3);
        let mut b = DenseBlock::<f64>::new(BlockMode::Vanilla, 3, 2, 3, 3, &mut rng);
        let err = b
            .forward(&Tensor::zeros([1, 2, 4, 4]), Mode::Train)
            .unwrap_err();
        assert!(err.to_string().contains("h1"), "{err}");
    }

    #[test]
    fn identity_path_survives_losing_branches() {
        let mut rng = Rng::new(4);
        let mut b = DenseBlock::<f64>::new(BlockMode::Competitive, 2, 2, 2, 3, &mut rng);
        for h in &mut b.h[..2] {
            h.bn.beta.value.fill(-100.0);
            h.bn.gamma.value.fill(0.0);
        }
        let x = Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let (_, cache) = b.forward(&x, Mode::Train).unwrap();
        // y2 is what h3 saw
        assert_eq!(cache.h[2].input, x);
    }

    #[test]
    fn competitive_unpool_passes_skip_when_joint_loses() {
        let mut rng = Rng::new(5);
        let skip = Tensor::<f64>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let enc = Tensor::<f64>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let (_, idx) = maxpool2x2_forward(&enc).unwrap();
        let decoded = Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let joint = Conv2d::from_tensors(
            Tensor::zeros([2, 4, 1, 1]),
            Tensor::full([1, 2, 1, 1], -1e6),
        )
        .unwrap();
        let block = UnpoolBlock::Competitive {
            joint: Box::new(joint),
        };
        let (out, _) = block.forward(&skip, &decoded, &idx).unwrap();
        assert_eq!(out, skip);
    }

    #[test]
    fn vanilla_unpool_stacks_streams() {
        let mut rng = Rng::new(6);
        let skip = Tensor::<f64>::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let (_, idx) =
            maxpool2x2_forward(&Tensor::<f64>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng)).unwrap();
        let block = UnpoolBlock::<f64>::Vanilla;
        let (out, cache) = block
            .forward(&skip, &Tensor::zeros([1, 2, 4, 4]), &idx)
            .unwrap();
        assert_eq!(out.channels(), 5);
        assert_eq!(out.slice_channels(0, 2).unwrap().max_abs(), 0.0);
        assert_eq!(out.slice_channels(2, 5).unwrap(), skip);

        let g = Tensor::uniform([1, 5, 8, 8], -1.0, 1.0, &mut rng);
        let mut block = block;
        let (g_skip, g_small) = block.backward(&cache, &g).unwrap();
        assert_eq!(g_skip, g.slice_channels(2, 5).unwrap());
        assert_eq!(
            g_small,
            max_unpool2x2_backward(&idx, &g.slice_channels(0, 2).unwrap()).unwrap()
        );
    }

    #[test]
    fn unpool_rejects_resolution_mismatch() {
        let mut rng = Rng::new(7);
        let (_, idx) =
            maxpool2x2_forward(&Tensor::<f64>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng)).unwrap();
        let block = UnpoolBlock::<f64>::new(BlockMode::Competitive, 2, 2, &mut rng);
        let err = block.forward(
            &Tensor::zeros([1, 2, 6, 6]),
            &Tensor::zeros([1, 2, 4, 4]),
            &idx,
        );
        assert!(err.is_err());
    }
}
