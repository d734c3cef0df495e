//! Dense NCHW tensors, integer label maps and the elementwise maximum that
//! underlies maxout.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{dim_err, Result};
use crate::rng::Rng;

/// Element type stored in a payload of the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0x01,
            DType::F64 => 0x02,
            DType::U32 => 0x03,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(DType::F32),
            0x02 => Some(DType::F64),
            0x03 => Some(DType::U32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 | DType::U32 => 4,
        }
    }
}

/// Real scalar usable as a tensor element. Training runs in `f32`,
/// gradient checks in `f64`.
pub trait Scalar: Float + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Extents in (N, C, H, W) order.
pub type Dims = [usize; 4];

/// Dense 4D tensor in row-major NCHW layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(dim_err!("all extents must be >= 1, got {dims:?}"));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(dim_err!(
                "extents {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn uniform(dims: Dims, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = T::lit(rng.uniform(lo, hi));
        }
        t
    }

    /// Standard normal draws scaled by `std`.
    pub fn normal(dims: Dims, std: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = T::lit(std * rng.normal());
        }
        t
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((n * cc + c) * h + i) * w + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.offset(n, c, i, j)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, i: usize, j: usize) -> &mut T {
        let o = self.offset(n, c, i, j);
        &mut self.data[o]
    }

    /// The H×W plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(dim_err!(
                "{what}: extents {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims, "add_assign extents");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Copies channels `[start, end)`.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if start >= end || end > c {
            return Err(dim_err!("channel range {start}..{end} of {c} channels"));
        }
        let p = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * p);
        for s in 0..n {
            let base = s * c * p;
            data.extend_from_slice(&self.data[base + start * p..base + end * p]);
        }
        Ok(Tensor {
            dims: [n, end - start, h, w],
            data,
        })
    }

    /// Copies samples `[start, end)` of the batch extent.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if start >= end || end > n {
            return Err(dim_err!("batch range {start}..{end} of {n} samples"));
        }
        let s = c * h * w;
        Ok(Tensor {
            dims: [end - start, c, h, w],
            data: self.data[start * s..end * s].to_vec(),
        })
    }

    /// Stacks single- or multi-sample tensors along the batch extent.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("cannot stack an empty list"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(dim_err!("stack: {:?} vs {:?}", p.dims, first.dims));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Per-pixel class indices with extents (N, H, W).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u32>,
}

impl LabelMap {
    pub fn zeros(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        LabelMap {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(dim_err!("all extents must be >= 1, got {dims:?}"));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(dim_err!(
                "label extents {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        Ok(LabelMap { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    pub fn height(&self) -> usize {
        self.dims[1]
    }
    pub fn width(&self) -> usize {
        self.dims[2]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[u32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize) -> u32 {
        self.data[(n * self.dims[1] + i) * self.dims[2] + j]
    }

    /// Rejects any label that is not a valid class index.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|&l| l as usize >= num_classes) {
            return Err(crate::Error::Label(format!(
                "label {} at flat position {pos} >= num_classes {num_classes}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let [n, h, w] = self.dims;
        if start >= end || end > n {
            return Err(dim_err!("batch range {start}..{end} of {n} samples"));
        }
        Ok(LabelMap {
            dims: [end - start, h, w],
            data: self.data[start * h * w..end * h * w].to_vec(),
        })
    }

    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("cannot stack an empty list"))?;
        let [_, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != [h, w] {
                return Err(dim_err!("stack: {:?} vs {:?}", p.dims, first.dims));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(LabelMap {
            dims: [n, h, w],
            data,
        })
    }
}

/// Winning input index per element of an elementwise maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgIndex {
    dims: Dims,
    inputs: usize,
    winners: Vec<u8>,
}

impl ArgIndex {
    pub fn dims(&self) -> Dims {
        self.dims
    }
    /// Number of competing inputs.
    pub fn inputs(&self) -> usize {
        self.inputs
    }
    pub fn winners(&self) -> &[u8] {
        &self.winners
    }
}

/// Elementwise maximum over `L >= 2` equally shaped tensors. Ties go to the
/// lowest input index.
pub fn elementwise_max<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, ArgIndex)> {
    if inputs.len() < 2 {
        return Err(dim_err!(
            "elementwise max needs at least 2 inputs, got {}",
            inputs.len()
        ));
    }
    if inputs.len() > u8::MAX as usize {
        return Err(dim_err!("elementwise max supports at most 255 inputs"));
    }
    let first = inputs[0];
    for (l, x) in inputs.iter().enumerate().skip(1) {
        if x.dims != first.dims {
            return Err(dim_err!(
                "elementwise max input {l} has extents {:?}, input 0 has {:?}",
                x.dims,
                first.dims
            ));
        }
    }
    let mut out = first.data.clone();
    let mut winners = vec![0u8; out.len()];
    for (l, x) in inputs.iter().enumerate().skip(1) {
        for ((o, w), &v) in out.iter_mut().zip(winners.iter_mut()).zip(&x.data) {
            if v > *o {
                *o = v;
                *w = l as u8;
            }
        }
    }
    Ok((
        Tensor {
            dims: first.dims,
            data: out,
        },
        ArgIndex {
            dims: first.dims,
            inputs: inputs.len(),
            winners,
        },
    ))
}

/// Routes `grad_out` to the winning input of each element; losers get zero.
pub fn elementwise_max_backward<T: Scalar>(
    arg: &ArgIndex,
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if arg.dims != grad_out.dims {
        return Err(dim_err!(
            "maxout backward: index extents {:?}, gradient extents {:?}",
            arg.dims,
            grad_out.dims
        ));
    }
    let mut grads = vec![Tensor::zeros(arg.dims); arg.inputs];
    for (e, (&w, &g)) in arg.winners.iter().zip(&grad_out.data).enumerate() {
        grads[w as usize].data[e] = g;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: Dims, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn offset_is_row_major_nchw() {
        let x = Tensor::<f64>::zeros([2, 3, 4, 5]);
        assert_eq!(x.offset(1, 2, 3, 4), ((3 + 2) * 4 + 3) * 5 + 4);
        assert_eq!(x.offset(1, 2, 3, 4), x.len() - 1);
    }

    #[test]
    fn rejects_zero_extent_and_length_mismatch() {
        assert!(Tensor::<f32>::from_vec([1, 0, 1, 1], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn max_of_identical_inputs_is_identity_with_first_winner() {
        let x = t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.0]);
        let (y, arg) = elementwise_max(&[&x, &x]).unwrap();
        assert_eq!(y, x);
        assert!(arg.winners().iter().all(|&w| w == 0));
    }

    #[test]
    fn max_of_two_small_maps() {
        let a = t([1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let b = t([1, 1, 2, 2], &[2.0, 4.0, 1.0, 6.0]);
        let (y, arg) = elementwise_max(&[&a, &b]).unwrap();
        assert_eq!(y.data(), &[2.0, 5.0, 3.0, 6.0]);
        assert_eq!(arg.winners(), &[1, 0, 0, 1]);
    }

    #[test]
    fn max_shape_mismatch_names_extents() {
        let a = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let err = elementwise_max(&[&a, &b]).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 2, 2]"), "{err}");
        assert!(elementwise_max(&[&a]).is_err());
    }

    #[test]
    fn max_backward_routes_to_winner() {
        let a = t([1, 1, 1, 3], &[0.0, 2.0, 1.0]);
        let b = t([1, 1, 1, 3], &[1.0, 2.0, 0.0]);
        let (_, arg) = elementwise_max(&[&a, &b]).unwrap();
        let g = t([1, 1, 1, 3], &[10.0, 20.0, 30.0]);
        let grads = elementwise_max_backward(&arg, &g).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 20.0, 30.0]);
        assert_eq!(grads[1].data(), &[10.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_and_batch_slicing() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::uniform([2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let mid = x.slice_channels(1, 2).unwrap();
        assert_eq!(mid.dims(), [2, 1, 2, 2]);
        assert_eq!(mid.plane(1, 0), x.plane(1, 1));
        let a = x.slice_batch(0, 1).unwrap();
        let b = x.slice_batch(1, 2).unwrap();
        assert_eq!(Tensor::stack(&[&a, &b]).unwrap(), x);
    }
}
