//! Layers with explicit forward and backward passes.
//!
//! Every layer offers two forward paths: [`Module::forward`] is a pure evaluation-mode pass
//! over `&self` (safe to share across threads), while [`Module::forward_train`] uses batch
//! statistics and caches whatever [`Module::backward`] needs. Gradients accumulate into each
//! [`Param::grad`] until the optimizer consumes them.

pub mod attention;
pub mod init;
pub mod layers;
pub mod loss;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub use attention::SelfAttention;
pub use layers::{
    BatchNorm2d, Conv2d, Gelu, GlobalAvgPool, LayerNorm, Linear, MaxPool2d, Relu,
};
pub use loss::{softmax_cross_entropy, LossOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable and subject to weight decay.
    Weight,
    /// Trainable, excluded from weight decay (biases, norm affine terms, embeddings).
    NoDecay,
    /// Persistent state that is not trained, e.g. batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, kind }
    }

    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

pub trait Module<T: Scalar> {
    /// Evaluation-mode forward pass.
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Training-mode forward pass that records what `backward` needs.
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Accumulates parameter gradients and returns the gradient with respect to the input of
    /// the most recent `forward_train` call.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn trainable_param_count<T: Scalar, M: Module<T> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| {
        if p.trainable() {
            n += p.value.len();
        }
    });
    n
}

pub fn param_names<T: Scalar, M: Module<T> + ?Sized>(m: &M) -> Vec<String> {
    let mut names = Vec::new();
    m.visit("", &mut |name, _| names.push(name.to_string()));
    names
}

pub fn zero_grad<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) {
    m.visit_mut("", &mut |_, p| p.zero_grad());
}

/// Converts every parameter of `src` into the matching (same name, same shape) parameter of
/// `dst`, possibly at a different precision.
pub fn copy_params<S: Scalar, D: Scalar>(
    src: &dyn Module<S>,
    dst: &mut dyn Module<D>,
) -> Result<()> {
    let mut values = std::collections::HashMap::new();
    src.visit("", &mut |name, p| {
        values.insert(name.to_string(), p.value.cast::<D>());
    });
    let mut missing = Vec::new();
    dst.visit_mut("", &mut |name, p| match values.remove(name) {
        Some(v) if v.shape() == p.value.shape() => p.value = v,
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !values.is_empty() {
        let mut extra: Vec<_> = values.into_keys().collect();
        extra.sort();
        return Err(crate::error::Error::CheckpointMismatch(format!(
            "unmatched parameters: destination {missing:?}, source {extra:?}"
        )));
    }
    Ok(())
}
