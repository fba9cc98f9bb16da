//! The atomic units of depth growth: residual blocks and transformer encoder layers.

use rand::Rng;

use super::spec::BlockSpec;
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Gelu, LayerNorm, Linear, Module, Param, Relu, SelfAttention};
use crate::tensor::{Scalar, Tensor};

/// 1x1 convolution + batch norm on the shortcut path when the block changes shape.
pub struct Projection<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> Projection<T> {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Projection {
            conv: Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }
}

impl<T: Scalar> Module<T> for Projection<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.bn.forward(&self.conv.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward_train(x)?;
        self.bn.forward_train(&y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.bn.backward(grad)?;
        self.conv.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "0"), f);
        self.bn.visit(&join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "0"), f);
        self.bn.visit_mut(&join(prefix, "1"), f);
    }
}

/// Two 3x3 convolutions with an identity (or projected) shortcut.
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub downsample: Option<Projection<T>>,
    relu_out: Relu<T>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng);
        let conv2 = Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| Projection::new(in_ch, out_ch, stride, rng));
        BasicBlock {
            conv1,
            bn1: BatchNorm2d::new(out_ch),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm2d::zero_init(out_ch),
            downsample,
            relu_out: Relu::new(),
        }
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.relu1.forward(&self.bn1.forward(&self.conv1.forward(x)?)?)?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?)?;
        let sc = match &self.downsample {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        self.relu_out.forward(&h.add(&sc)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward_train(x)?;
        let h = self.bn1.forward_train(&h)?;
        let h = self.relu1.forward_train(&h)?;
        let h = self.conv2.forward_train(&h)?;
        let h = self.bn2.forward_train(&h)?;
        let sc = match &mut self.downsample {
            Some(p) => p.forward_train(x)?,
            None => x.clone(),
        };
        self.relu_out.forward_train(&h.add(&sc)?)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu_out.backward(grad)?;
        let gb = self.bn2.backward(&g)?;
        let gb = self.conv2.backward(&gb)?;
        let gb = self.relu1.backward(&gb)?;
        let gb = self.bn1.backward(&gb)?;
        let mut dx = self.conv1.backward(&gb)?;
        match &mut self.downsample {
            Some(p) => dx.add_assign(&p.backward(&g)?)?,
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some(p) = &self.downsample {
            p.visit(&join(prefix, "downsample"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some(p) = &mut self.downsample {
            p.visit_mut(&join(prefix, "downsample"), f);
        }
    }
}

/// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand, with a shortcut.
pub struct Bottleneck<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
    pub conv3: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub downsample: Option<Projection<T>>,
    relu_out: Relu<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(in_ch: usize, mid: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(in_ch, mid, 1, 1, 0, false, rng);
        let conv2 = Conv2d::new(mid, mid, 3, stride, 1, false, rng);
        let conv3 = Conv2d::new(mid, out_ch, 1, 1, 0, false, rng);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| Projection::new(in_ch, out_ch, stride, rng));
        Bottleneck {
            conv1,
            bn1: BatchNorm2d::new(mid),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm2d::new(mid),
            relu2: Relu::new(),
            conv3,
            bn3: BatchNorm2d::zero_init(out_ch),
            downsample,
            relu_out: Relu::new(),
        }
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.relu1.forward(&self.bn1.forward(&self.conv1.forward(x)?)?)?;
        let h = self.relu2.forward(&self.bn2.forward(&self.conv2.forward(&h)?)?)?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?)?;
        let sc = match &self.downsample {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        self.relu_out.forward(&h.add(&sc)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward_train(x)?;
        let h = self.bn1.forward_train(&h)?;
        let h = self.relu1.forward_train(&h)?;
        let h = self.conv2.forward_train(&h)?;
        let h = self.bn2.forward_train(&h)?;
        let h = self.relu2.forward_train(&h)?;
        let h = self.conv3.forward_train(&h)?;
        let h = self.bn3.forward_train(&h)?;
        let sc = match &mut self.downsample {
            Some(p) => p.forward_train(x)?,
            None => x.clone(),
        };
        self.relu_out.forward_train(&h.add(&sc)?)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu_out.backward(grad)?;
        let gb = self.bn3.backward(&g)?;
        let gb = self.conv3.backward(&gb)?;
        let gb = self.relu2.backward(&gb)?;
        let gb = self.bn2.backward(&gb)?;
        let gb = self.conv2.backward(&gb)?;
        let gb = self.relu1.backward(&gb)?;
        let gb = self.bn1.backward(&gb)?;
        let mut dx = self.conv1.backward(&gb)?;
        match &mut self.downsample {
            Some(p) => dx.add_assign(&p.backward(&g)?)?,
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some(p) = &self.downsample {
            p.visit(&join(prefix, "downsample"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        if let Some(p) = &mut self.downsample {
            p.visit_mut(&join(prefix, "downsample"), f);
        }
    }
}

/// Pre-norm transformer encoder layer: `x + MSA(LN(x))`, then `h + MLP(LN(h))`.
pub struct EncoderLayer<T> {
    pub norm1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    act: Gelu<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(dim),
            attn: SelfAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::normal(dim, mlp_dim, 0.02, rng),
            act: Gelu::new(),
            fc2: Linear::normal(mlp_dim, dim, 0.02, rng),
        }
    }
}

impl<T: Scalar> Module<T> for EncoderLayer<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = x.add(&self.attn.forward(&self.norm1.forward(x)?)?)?;
        let m = self.fc2.forward(&self.act.forward(&self.fc1.forward(&self.norm2.forward(&h)?)?)?)?;
        h.add(&m)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.norm1.forward_train(x)?;
        let a = self.attn.forward_train(&a)?;
        let h = x.add(&a)?;
        let m = self.norm2.forward_train(&h)?;
        let m = self.fc1.forward_train(&m)?;
        let m = self.act.forward_train(&m)?;
        let m = self.fc2.forward_train(&m)?;
        h.add(&m)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let gm = self.fc2.backward(grad)?;
        let gm = self.act.backward(&gm)?;
        let gm = self.fc1.backward(&gm)?;
        let mut gh = self.norm2.backward(&gm)?;
        gh.add_assign(grad)?;
        let ga = self.attn.backward(&gh)?;
        let mut gx = self.norm1.backward(&ga)?;
        gx.add_assign(&gh)?;
        Ok(gx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

pub enum Block<T> {
    Basic(BasicBlock<T>),
    Bottleneck(Bottleneck<T>),
    Encoder(EncoderLayer<T>),
}

impl<T: Scalar> Block<T> {
    pub fn new(spec: &BlockSpec, rng: &mut impl Rng) -> Self {
        match *spec {
            BlockSpec::Basic { in_channels, out_channels, stride } => {
                Block::Basic(BasicBlock::new(in_channels, out_channels, stride, rng))
            }
            BlockSpec::Bottleneck { in_channels, mid_channels, out_channels, stride } => {
                Block::Bottleneck(Bottleneck::new(in_channels, mid_channels, out_channels, stride, rng))
            }
            BlockSpec::Encoder { dim, heads, mlp_dim } => Block::Encoder(EncoderLayer::new(dim, heads, mlp_dim, rng)),
        }
    }

    fn inner(&self) -> &dyn Module<T> {
        match self {
            Block::Basic(b) => b,
            Block::Bottleneck(b) => b,
            Block::Encoder(b) => b,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            Block::Basic(b) => b,
            Block::Bottleneck(b) => b,
            Block::Encoder(b) => b,
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
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

pub(crate) fn expect_tokens<T: Scalar>(x: &Tensor<T>, context: &str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::shape(context, "[batch, tokens, dim]", x.shape()));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::spec::block_param_count;
    use crate::nn::{init, trainable_param_count};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instantiated_blocks_match_analytic_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = [
            BlockSpec::Basic { in_channels: 8, out_channels: 8, stride: 1 },
            BlockSpec::Basic { in_channels: 8, out_channels: 16, stride: 2 },
            BlockSpec::Bottleneck { in_channels: 16, mid_channels: 4, out_channels: 16, stride: 1 },
            BlockSpec::Bottleneck { in_channels: 8, mid_channels: 4, out_channels: 16, stride: 2 },
            BlockSpec::Encoder { dim: 12, heads: 3, mlp_dim: 20 },
        ];
        for s in specs {
            let b: Block<f32> = Block::new(&s, &mut rng);
            assert_eq!(trainable_param_count(&b), block_param_count(&s), "{s:?}");
        }
    }

    #[test]
    fn fresh_residual_block_is_identity_on_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = BasicBlock::<f64>::new(4, 4, 1, &mut rng);
        let x = init::normal(&[2, 4, 5, 5], 1.0, &mut rng).map(f64::abs);
        assert_eq!(b.forward(&x).unwrap(), x);
    }

    #[test]
    fn encoder_preserves_token_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = EncoderLayer::<f32>::new(8, 2, 16, &mut rng);
        let x = init::normal(&[3, 5, 8], 1.0, &mut rng);
        assert_eq!(e.forward(&x).unwrap().shape(), &[3, 5, 8]);
    }
}
