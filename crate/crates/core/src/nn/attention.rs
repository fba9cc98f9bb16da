use rand::Rng;

use super::{join, Linear, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

struct AttnCache<T> {
    qkv: Tensor<T>,
    probs: Vec<T>,
}

/// Multi-head scaled dot-product self-attention over `[B, T, D]` token sequences.
///
/// Query, key and value projections share one fused `D -> 3D` affine map; heads are
/// strided views into its output, so no per-head copies are made.
pub struct SelfAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    dim: usize,
    cache: Option<AttnCache<T>>,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide dim");
        SelfAttention {
            qkv: Linear::normal(dim, 3 * dim, 0.02, rng),
            proj: Linear::normal(dim, dim, 0.02, rng),
            heads,
            dim,
            cache: None,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        x.expect_ndim("SelfAttention input", 3)?;
        if x.dim(2) != self.dim {
            return Err(Error::shape("SelfAttention width", self.dim, x.dim(2)));
        }
        Ok((x.dim(0), x.dim(1)))
    }

    /// Attention mixing given the fused projections; returns per-head outputs and probabilities.
    fn attend(&self, qkv: &Tensor<T>, b: usize, t: usize) -> (Tensor<T>, Vec<T>) {
        let d = self.dim;
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Tensor::zeros(&[b, t, d]);
        let mut probs = vec![T::zero(); b * self.heads * t * t];
        for bi in 0..b {
            let base = bi * t * 3 * d;
            for h in 0..self.heads {
                let q = MatRef::strided(&qkv.data()[base + h * dh..], t, dh, 3 * d, 1);
                let k = MatRef::strided(&qkv.data()[base + d + h * dh..], t, dh, 3 * d, 1);
                let v = MatRef::strided(&qkv.data()[base + 2 * d + h * dh..], t, dh, 3 * d, 1);
                let p = &mut probs[(bi * self.heads + h) * t * t..(bi * self.heads + h + 1) * t * t];
                gemm(scale, q, k.t(), T::zero(), MatMut::new(p, t, t));
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                let o = MatMut::strided(&mut out.data_mut()[bi * t * d + h * dh..], t, dh, d, 1);
                gemm(T::one(), MatRef::new(p, t, t), v, T::zero(), o);
            }
        }
        (out, probs)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

impl<T: Scalar> Module<T> for SelfAttention<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t) = self.check(x)?;
        let qkv = self.qkv.forward(x)?;
        let (mixed, _) = self.attend(&qkv, b, t);
        self.proj.forward(&mixed)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t) = self.check(x)?;
        let qkv = self.qkv.forward_train(x)?;
        let (mixed, probs) = self.attend(&qkv, b, t);
        self.cache = Some(AttnCache { qkv, probs });
        self.proj.forward_train(&mixed)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache("SelfAttention"))?;
        let dmixed = self.proj.backward(grad)?;
        let (b, t) = (cache.qkv.dim(0), cache.qkv.dim(1));
        let d = self.dim;
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dqkv = Tensor::zeros(cache.qkv.shape());
        let mut dp = vec![T::zero(); t * t];
        for bi in 0..b {
            let base = bi * t * 3 * d;
            for h in 0..self.heads {
                let p = &cache.probs[(bi * self.heads + h) * t * t..(bi * self.heads + h + 1) * t * t];
                let dout = MatRef::strided(&dmixed.data()[bi * t * d + h * dh..], t, dh, d, 1);
                let q = MatRef::strided(&cache.qkv.data()[base + h * dh..], t, dh, 3 * d, 1);
                let k = MatRef::strided(&cache.qkv.data()[base + d + h * dh..], t, dh, 3 * d, 1);
                let v = MatRef::strided(&cache.qkv.data()[base + 2 * d + h * dh..], t, dh, 3 * d, 1);

                // dV = P^T dO
                gemm(
                    T::one(),
                    MatRef::new(p, t, t).t(),
                    dout,
                    T::zero(),
                    MatMut::strided(&mut dqkv.data_mut()[base + 2 * d + h * dh..], t, dh, 3 * d, 1),
                );
                // dP = dO V^T, then the softmax Jacobian gives dS in place.
                gemm(T::one(), dout, v.t(), T::zero(), MatMut::new(&mut dp, t, t));
                for (ds_row, p_row) in dp.chunks_mut(t).zip(p.chunks(t)) {
                    let dot: T = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                    for (ds, &pv) in ds_row.iter_mut().zip(p_row) {
                        *ds = pv * (*ds - dot);
                    }
                }
                // dQ = scale * dS K ; dK = scale * dS^T Q
                gemm(
                    scale,
                    MatRef::new(&dp, t, t),
                    k,
                    T::zero(),
                    MatMut::strided(&mut dqkv.data_mut()[base + h * dh..], t, dh, 3 * d, 1),
                );
                gemm(
                    scale,
                    MatRef::new(&dp, t, t).t(),
                    q,
                    T::zero(),
                    MatMut::strided(&mut dqkv.data_mut()[base + d + h * dh..], t, dh, 3 * d, 1),
                );
            }
        }
        self.qkv.backward(&dqkv)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
