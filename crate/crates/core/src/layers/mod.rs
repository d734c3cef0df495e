//! Differentiable primitive layers. Every forward has a matching hand-written
//! backward; caches carry exactly what the backward needs.

mod activation;
mod concat;
mod conv;
mod norm;
mod pool;
mod softmax;

pub use activation::{maxout_backward, maxout_forward, relu_backward, relu_forward};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads};
pub use norm::{BatchNorm, BnCache, BN_EPSILON, BN_MOMENTUM};
pub use pool::{
    max_unpool2x2, max_unpool2x2_backward, maxpool2x2_backward, maxpool2x2_forward, PoolIndices,
};
pub use softmax::{softmax_backward, softmax_channels};

use rayon::prelude::*;

/// Batch-norm behaviour selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Applies `f(plane_index, plane)` to consecutive `plane`-sized chunks.
///
/// Runs on the current rayon pool when it has more than one thread. Each
/// chunk is written by exactly one call, so results do not depend on the
/// thread count.
pub(crate) fn for_each_plane<T, F>(data: &mut [T], plane: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if rayon::current_num_threads() > 1 && data.len() / plane > 1 {
        data.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(plane)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
