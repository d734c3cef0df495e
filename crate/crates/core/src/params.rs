//! Learnable parameters and the visitor through which every model component
//! exposes them by hierarchical name.

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel. The only kind subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale.
    Gamma,
    /// Batch-norm shift.
    Beta,
}

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.dims());
        Param { value, grad, kind }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// Read-only view of one named slot.
pub enum Entry<'a, T> {
    Param(&'a Param<T>),
    /// Non-learnable state saved with checkpoints (batch-norm running stats).
    Buffer(&'a Tensor<T>),
}

pub enum EntryMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Tensor<T>),
}

impl<T> Entry<'_, T> {
    pub fn tensor(&self) -> &Tensor<T> {
        match self {
            Entry::Param(p) => &p.value,
            Entry::Buffer(t) => t,
        }
    }
}

impl<T> EntryMut<'_, T> {
    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        match self {
            EntryMut::Param(p) => &mut p.value,
            EntryMut::Buffer(t) => t,
        }
    }
}

/// A named, ordered collection of learnable tensors with paired gradient
/// buffers. Names are dot-joined paths such as `enc1.h2.conv.weight`; the
/// visiting order is fixed and defines checkpoint and optimizer order.
pub trait ParamStore<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>));

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, e| {
            if let Entry::Param(p) = e {
                total += p.value.len();
            }
        });
        total
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, e| {
            if let EntryMut::Param(p) = e {
                p.zero_grad();
            }
        });
    }

    /// Names of learnable parameters in visiting order.
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, e| {
            if let Entry::Param(_) = e {
                names.push(name.to_owned());
            }
        });
        names
    }
}

/// Joins a prefix and a child name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}
