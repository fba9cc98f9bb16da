use rand::Rng;

use super::blocks::expect_tokens;
use super::spec::{InputShape, PatchTokenizerSpec, StemSpec};
use crate::error::{Error, Result};
use crate::nn::{init, join, BatchNorm2d, Conv2d, MaxPool2d, Module, Param, ParamKind, Relu};
use crate::tensor::{Scalar, Tensor};

pub struct ConvStem<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu<T>,
    pub pool: Option<MaxPool2d>,
}

impl<T: Scalar> Module<T> for ConvStem<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.relu.forward(&self.bn.forward(&self.conv.forward(x)?)?)?;
        match &self.pool {
            Some(p) => p.forward(&h),
            None => Ok(h),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv.forward_train(x)?;
        let h = self.bn.forward_train(&h)?;
        let h = self.relu.forward_train(&h)?;
        match &mut self.pool {
            Some(p) => p.forward_train(&h),
            None => Ok(h),
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match &mut self.pool {
            Some(p) => p.backward(grad)?,
            None => grad.clone(),
        };
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Turns an image into a token sequence: strided patch projection, a learned class token
/// at position 0, and learned positional encodings.
pub struct PatchEmbed<T> {
    pub proj: Conv2d<T>,
    pub cls_token: Param<T>,
    pub pos_embed: Param<T>,
    pub spec: PatchTokenizerSpec,
    grid: (usize, usize),
    cache_grid: Option<(usize, usize, usize)>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(spec: PatchTokenizerSpec, input: InputShape, rng: &mut impl Rng) -> Result<Self> {
        let grid = spec.grid(input.height, input.width)?;
        let d = spec.embed_dim;
        let tokens = grid.0 * grid.1 + 1;
        let mut proj = Conv2d::new(input.channels, d, spec.patch_size, spec.stride, 0, true, rng);
        let fan_in = input.channels * spec.patch_size * spec.patch_size;
        proj.weight.value = init::normal(proj.weight.value.shape(), (1.0 / fan_in as f64).sqrt(), rng);
        Ok(PatchEmbed {
            proj,
            cls_token: Param::new(init::normal(&[d], 0.02, rng), ParamKind::NoDecay),
            pos_embed: Param::new(init::normal(&[tokens, d], 0.02, rng), ParamKind::NoDecay),
            spec,
            grid,
            cache_grid: None,
        })
    }

    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }

    /// `[B, D, gh, gw]` patch projections -> `[B, 1 + gh*gw, D]` tokens.
    fn assemble(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, d) = (patches.dim(0), patches.dim(1));
        let n = patches.dim(2) * patches.dim(3);
        if (patches.dim(2), patches.dim(3)) != self.grid {
            return Err(Error::shape("PatchEmbed grid", self.grid, (patches.dim(2), patches.dim(3))));
        }
        let t = n + 1;
        let mut out = Tensor::zeros(&[b, t, d]);
        let pos = self.pos_embed.value.data();
        let cls = self.cls_token.value.data();
        for bi in 0..b {
            let dst = &mut out.data_mut()[bi * t * d..(bi + 1) * t * d];
            for c in 0..d {
                dst[c] = cls[c] + pos[c];
            }
            let src = &patches.data()[bi * d * n..(bi + 1) * d * n];
            for c in 0..d {
                for p in 0..n {
                    dst[(p + 1) * d + c] = src[c * n + p] + pos[(p + 1) * d + c];
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.assemble(&self.proj.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = self.proj.forward_train(x)?;
        self.cache_grid = Some((patches.dim(0), patches.dim(2), patches.dim(3)));
        self.assemble(&patches)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, gh, gw) = self.cache_grid.take().ok_or(Error::NoForwardCache("PatchEmbed"))?;
        let (gb, t, d) = expect_tokens(grad, "PatchEmbed grad")?;
        let n = gh * gw;
        if gb != b || t != n + 1 || d != self.spec.embed_dim {
            return Err(Error::shape("PatchEmbed grad", [b, n + 1, self.spec.embed_dim], grad.shape()));
        }
        let mut dpatches = Tensor::zeros(&[b, d, gh, gw]);
        for bi in 0..b {
            let g = &grad.data()[bi * t * d..(bi + 1) * t * d];
            for (acc, &v) in self.pos_embed.grad.data_mut().iter_mut().zip(g) {
                *acc += v;
            }
            for c in 0..d {
                self.cls_token.grad.data_mut()[c] += g[c];
            }
            let dst = &mut dpatches.data_mut()[bi * d * n..(bi + 1) * d * n];
            for p in 0..n {
                for c in 0..d {
                    dst[c * n + p] = g[(p + 1) * d + c];
                }
            }
        }
        self.proj.backward(&dpatches)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "cls_token"), &self.cls_token);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

pub enum Stem<T> {
    Conv(ConvStem<T>),
    Patch(PatchEmbed<T>),
}

impl<T: Scalar> Stem<T> {
    pub fn new(spec: &StemSpec, input: InputShape, rng: &mut impl Rng) -> Result<Self> {
        Ok(match *spec {
            StemSpec::Conv { out_channels, kernel, stride, max_pool } => Stem::Conv(ConvStem {
                conv: Conv2d::new(input.channels, out_channels, kernel, stride, kernel / 2, false, rng),
                bn: BatchNorm2d::new(out_channels),
                relu: Relu::new(),
                pool: max_pool.then(|| MaxPool2d::new(3, 2, 1)),
            }),
            StemSpec::Patch(p) => Stem::Patch(PatchEmbed::new(p, input, rng)?),
        })
    }

    fn inner(&self) -> &dyn Module<T> {
        match self {
            Stem::Conv(s) => s,
            Stem::Patch(s) => s,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            Stem::Conv(s) => s,
            Stem::Patch(s) => s,
        }
    }
}

impl<T: Scalar> Module<T> for Stem<T> {
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

/// Tokenizes one image batch `[B, C, H, W]` into `[B, 1 + patches, D]`.
pub fn tokenize<T: Scalar>(images: &Tensor<T>, embed: &PatchEmbed<T>) -> Result<Tensor<T>> {
    embed.forward(images)
}
