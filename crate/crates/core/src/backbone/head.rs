use rand::Rng;

use super::blocks::expect_tokens;
use super::spec::{HeadKind, HEAD_EMBED_WIDTH};
use crate::error::{Error, Result};
use crate::nn::{join, GlobalAvgPool, LayerNorm, Linear, Module, Param, Relu};
use crate::tensor::{Scalar, Tensor};

/// Temporary CNN stage head: global average pool, 256-wide projection, ReLU, classifier.
/// The projection is a 1x1 convolution applied after pooling, which is the same map as an
/// affine layer on the pooled vector.
pub struct ProgressiveHead<T> {
    pool: GlobalAvgPool,
    pub proj: Linear<T>,
    relu: Relu<T>,
    pub fc: Linear<T>,
}

impl<T: Scalar> ProgressiveHead<T> {
    pub fn new(in_width: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        ProgressiveHead {
            pool: GlobalAvgPool::new(),
            proj: Linear::new(in_width, HEAD_EMBED_WIDTH, rng),
            relu: Relu::new(),
            fc: Linear::new(HEAD_EMBED_WIDTH, num_classes, rng),
        }
    }
}

impl<T: Scalar> Module<T> for ProgressiveHead<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.pool.forward(x)?;
        self.fc.forward(&self.relu.forward(&self.proj.forward(&h)?)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.pool.forward_train(x)?;
        let h = self.proj.forward_train(&h)?;
        let h = self.relu.forward_train(&h)?;
        self.fc.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc.backward(grad)?;
        let g = self.relu.backward(&g)?;
        let g = self.proj.backward(&g)?;
        <GlobalAvgPool as Module<T>>::backward(&mut self.pool, &g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Standard CNN classifier: global average pool followed by one affine map.
pub struct LinearHead<T> {
    pool: GlobalAvgPool,
    pub fc: Linear<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn new(in_width: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        LinearHead {
            pool: GlobalAvgPool::new(),
            fc: Linear::new(in_width, num_classes, rng),
        }
    }
}

impl<T: Scalar> Module<T> for LinearHead<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc.forward(&self.pool.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.pool.forward_train(x)?;
        self.fc.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc.backward(grad)?;
        <GlobalAvgPool as Module<T>>::backward(&mut self.pool, &g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc.visit_mut(prefix, f);
    }
}

/// Transformer classifier: class token, layer norm, affine map.
pub struct TokenHead<T> {
    pub norm: LayerNorm<T>,
    pub fc: Linear<T>,
    cache_tokens: Option<(usize, usize)>,
}

impl<T: Scalar> TokenHead<T> {
    pub fn new(dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        TokenHead {
            norm: LayerNorm::new(dim),
            fc: Linear::normal(dim, num_classes, 0.02, rng),
            cache_tokens: None,
        }
    }

    fn class_token(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t, d) = expect_tokens(x, "TokenHead input")?;
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            out.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(&x.data()[bi * t * d..bi * t * d + d]);
        }
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for TokenHead<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc.forward(&self.norm.forward(&Self::class_token(x)?)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cls = Self::class_token(x)?;
        self.cache_tokens = Some((x.dim(0), x.dim(1)));
        let h = self.norm.forward_train(&cls)?;
        self.fc.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t) = self.cache_tokens.take().ok_or(Error::NoForwardCache("TokenHead"))?;
        let g = self.fc.backward(grad)?;
        let g = self.norm.backward(&g)?;
        let d = g.dim(1);
        let mut dx = Tensor::zeros(&[b, t, d]);
        for bi in 0..b {
            dx.data_mut()[bi * t * d..bi * t * d + d].copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

pub enum Head<T> {
    Progressive(ProgressiveHead<T>),
    Linear(LinearHead<T>),
    Token(TokenHead<T>),
}

impl<T: Scalar> Head<T> {
    pub fn new(
        kind: HeadKind,
        convolutional: bool,
        in_width: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match (convolutional, kind) {
            (true, HeadKind::Progressive) => Head::Progressive(ProgressiveHead::new(in_width, num_classes, rng)),
            (true, HeadKind::Final) => Head::Linear(LinearHead::new(in_width, num_classes, rng)),
            (false, _) => Head::Token(TokenHead::new(in_width, num_classes, rng)),
        }
    }

    fn inner(&self) -> &dyn Module<T> {
        match self {
            Head::Progressive(h) => h,
            Head::Linear(h) => h,
            Head::Token(h) => h,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            Head::Progressive(h) => h,
            Head::Linear(h) => h,
            Head::Token(h) => h,
        }
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner().forward(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner_mut().forward_train(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner_mut().backward(grad)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.inner().visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.inner_mut().visit_mut(prefix, f)
    }
}
