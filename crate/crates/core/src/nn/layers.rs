use rand::Rng;

use super::{init, join, Module, Param, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-d convolution over NCHW input, lowered to GEMM via im2col.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = init::kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let bias = bias.then(|| {
            Param::new(
                init::fan_in_uniform(&[out_channels], fan_in, rng),
                ParamKind::NoDecay,
            )
        });
        Conv2d {
            weight: Param::new(weight, ParamKind::Weight),
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        conv_output_hw(h, w, self.kernel, self.stride, self.padding)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
        x.expect_ndim("Conv2d input", 4)?;
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if c != self.in_channels {
            return Err(Error::shape(
                "Conv2d input channels",
                self.in_channels,
                c,
            ));
        }
        let (oh, ow) = self.output_hw(h, w).ok_or_else(|| {
            Error::shape(
                "Conv2d input size",
                format!(">= kernel {} after padding", self.kernel),
                (h, w),
            )
        })?;
        Ok((b, h, w, oh, ow))
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, h, w, oh, ow) = self.geometry(x)?;
        let k = self.in_channels * self.kernel * self.kernel;
        let p = oh * ow;
        let mut out = Tensor::zeros(&[b, self.out_channels, oh, ow]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * p;
        for i in 0..b {
            let xi = &x.data()[i * in_stride..(i + 1) * in_stride];
            let cols_ref: &[T] = if self.is_pointwise() {
                xi
            } else {
                im2col(xi, self.in_channels, h, w, self.kernel, self.stride, self.padding, oh, ow, &mut cols);
                &cols
            };
            let oi = &mut out.data_mut()[i * out_stride..(i + 1) * out_stride];
            gemm(
                T::one(),
                MatRef::new(self.weight.value.data(), self.out_channels, k),
                MatRef::new(cols_ref, k, p),
                T::zero(),
                MatMut::new(oi, self.out_channels, p),
            );
            if let Some(bias) = &self.bias {
                for (oc, row) in oi.chunks_mut(p).enumerate() {
                    let bv = bias.value.data()[oc];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }
}

pub fn conv_output_hw(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kernel || wp < kernel || stride == 0 {
        return None;
    }
    Some(((hp - kernel) / stride + 1, (wp - kernel) / stride + 1))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.run(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::NoForwardCache("Conv2d"))?;
        let (b, h, w, oh, ow) = self.geometry(&x)?;
        grad.expect_shape("Conv2d grad", &[b, self.out_channels, oh, ow])?;
        let k = self.in_channels * self.kernel * self.kernel;
        let p = oh * ow;
        let pointwise = self.is_pointwise();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * p;
        for i in 0..b {
            let xi = &x.data()[i * in_stride..(i + 1) * in_stride];
            let gi = &grad.data()[i * out_stride..(i + 1) * out_stride];
            let cols_ref: &[T] = if pointwise {
                xi
            } else {
                im2col(xi, self.in_channels, h, w, self.kernel, self.stride, self.padding, oh, ow, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                MatRef::new(gi, self.out_channels, p),
                MatRef::new(cols_ref, k, p).t(),
                T::one(),
                MatMut::new(self.weight.grad.data_mut(), self.out_channels, k),
            );
            let dxi = &mut dx.data_mut()[i * in_stride..(i + 1) * in_stride];
            if pointwise {
                gemm(
                    T::one(),
                    MatRef::new(self.weight.value.data(), self.out_channels, k).t(),
                    MatRef::new(gi, self.out_channels, p),
                    T::zero(),
                    MatMut::new(dxi, k, p),
                );
            } else {
                gemm(
                    T::one(),
                    MatRef::new(self.weight.value.data(), self.out_channels, k).t(),
                    MatRef::new(gi, self.out_channels, p),
                    T::zero(),
                    MatMut::new(&mut dcols, k, p),
                );
                col2im(&dcols, self.in_channels, h, w, self.kernel, self.stride, self.padding, oh, ow, dxi);
            }
            if let Some(bias) = &mut self.bias {
                for (oc, row) in gi.chunks(p).enumerate() {
                    bias.grad.data_mut()[oc] += row.iter().copied().sum::<T>();
                }
            }
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// Batch normalization over the (N, H, W) axes of NCHW input.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one()), ParamKind::NoDecay),
            beta: Param::new(Tensor::zeros(&[channels]), ParamKind::NoDecay),
            running_mean: Param::new(Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: Param::new(Tensor::full(&[channels], T::one()), ParamKind::Buffer),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    /// Zero scale makes the owning residual branch start as the identity map.
    pub fn zero_init(channels: usize) -> Self {
        let mut bn = Self::new(channels);
        bn.gamma.value.fill(T::zero());
        bn
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        x.expect_ndim("BatchNorm2d input", 4)?;
        if x.dim(1) != self.channels() {
            return Err(Error::shape("BatchNorm2d channels", self.channels(), x.dim(1)));
        }
        Ok((x.dim(0), x.dim(1), x.dim(2) * x.dim(3)))
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, hw) = self.check(x)?;
        let eps = T::lit(self.eps);
        let mut out = x.clone();
        for ch in 0..c {
            let scale = self.gamma.value.data()[ch] / (self.running_var.value.data()[ch] + eps).sqrt();
            let shift = self.beta.value.data()[ch] - self.running_mean.value.data()[ch] * scale;
            for i in 0..b {
                let s = (i * c + ch) * hw;
                out.data_mut()[s..s + hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(out)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, hw) = self.check(x)?;
        let m = b * hw;
        if m == 0 {
            return Err(Error::shape("BatchNorm2d batch", "non-empty", x.shape()));
        }
        let mf = T::lit(m as f64);
        let eps = T::lit(self.eps);
        let mom = T::lit(self.momentum);
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_stds = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for i in 0..b {
                let s = (i * c + ch) * hw;
                sum += x.data()[s..s + hw].iter().copied().sum::<T>();
            }
            let mean = sum / mf;
            let mut sq = T::zero();
            for i in 0..b {
                let s = (i * c + ch) * hw;
                sq += x.data()[s..s + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            let var = sq / mf;
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds[ch] = inv_std;
            let g = self.gamma.value.data()[ch];
            let be = self.beta.value.data()[ch];
            for i in 0..b {
                let s = (i * c + ch) * hw;
                for j in s..s + hw {
                    let xh = (x.data()[j] - mean) * inv_std;
                    xhat[j] = xh;
                    out.data_mut()[j] = g * xh + be;
                }
            }
            let unbiased = if m > 1 { var * mf / T::lit((m - 1) as f64) } else { var };
            let rm = &mut self.running_mean.value.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mean;
            let rv = &mut self.running_var.value.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * unbiased;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std: inv_stds,
            shape: x.shape().to_vec(),
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache("BatchNorm2d"))?;
        grad.expect_shape("BatchNorm2d grad", &cache.shape)?;
        let (b, c, hw) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
        let mf = T::lit((b * hw) as f64);
        let mut dx = Tensor::zeros(&cache.shape);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..b {
                let s = (i * c + ch) * hw;
                for j in s..s + hw {
                    let dy = grad.data()[j];
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat[j];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            self.beta.grad.data_mut()[ch] += sum_dy;
            let k = self.gamma.value.data()[ch] * cache.inv_std[ch] / mf;
            for i in 0..b {
                let s = (i * c + ch) * hw;
                for j in s..s + hw {
                    dx.data_mut()[j] =
                        k * (mf * grad.data()[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
                }
            }
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { cache: None }
    }
}

impl<T: Scalar> Module<T> for Relu<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| v.max(T::zero())))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.cache.take().ok_or(Error::NoForwardCache("Relu"))?;
        grad.expect_shape("Relu grad", y.shape())?;
        let data = grad
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::from_vec(y.shape(), data)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

/// GELU with the tanh approximation.
#[derive(Clone, Debug, Default)]
pub struct Gelu<T> {
    cache: Option<Tensor<T>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Scalar> Gelu<T> {
    pub fn new() -> Self {
        Gelu { cache: None }
    }

    fn value(x: T) -> T {
        let c = T::lit(SQRT_2_OVER_PI);
        let a = T::lit(GELU_CUBIC);
        T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
    }

    fn derivative(x: T) -> T {
        let c = T::lit(SQRT_2_OVER_PI);
        let a = T::lit(GELU_CUBIC);
        let inner = c * (x + a * x * x * x);
        let t = inner.tanh();
        let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
        T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
    }
}

impl<T: Scalar> Module<T> for Gelu<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(Self::value))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.cache = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::NoForwardCache("Gelu"))?;
        grad.expect_shape("Gelu grad", x.shape())?;
        let data = grad
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| g * Self::derivative(v))
            .collect();
        Tensor::from_vec(x.shape(), data)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling over NCHW input; padded positions never win.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        x.expect_ndim("MaxPool2d input", 4)?;
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = conv_output_hw(h, w, self.kernel, self.stride, self.padding)
            .ok_or_else(|| Error::shape("MaxPool2d input size", "at least kernel", (h, w)))?;
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut arg = vec![0usize; b * c * oh * ow];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = x.data()[idx];
                            if best_idx == usize::MAX || v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        Ok((out, arg))
    }
}

impl<T: Scalar> Module<T> for MaxPool2d {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, arg) = self.run(x)?;
        self.cache = Some((arg, x.shape().to_vec()));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, shape) = self.cache.take().ok_or(Error::NoForwardCache("MaxPool2d"))?;
        if grad.len() != arg.len() {
            return Err(Error::shape("MaxPool2d grad", arg.len(), grad.shape()));
        }
        let mut dx = Tensor::zeros(&shape);
        for (o, &i) in arg.iter().enumerate() {
            dx.data_mut()[i] += grad.data()[o];
        }
        Ok(dx)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

/// `[B, C, H, W] -> [B, C]` by averaging over spatial positions.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache: None }
    }
}

impl<T: Scalar> Module<T> for GlobalAvgPool {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_ndim("GlobalAvgPool input", 4)?;
        let (b, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let scale = T::one() / T::lit(hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        Tensor::from_vec(&[b, c], data)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = <Self as Module<T>>::forward(self, x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.cache.take().ok_or(Error::NoForwardCache("GlobalAvgPool"))?;
        grad.expect_shape("GlobalAvgPool grad", &shape[..2])?;
        let hw = shape[2] * shape[3];
        let scale = T::one() / T::lit(hw as f64);
        let mut dx = Tensor::zeros(&shape);
        for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
            plane.iter_mut().for_each(|v| *v = g * scale);
        }
        Ok(dx)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map over the last axis: `y = x W^T + b`, weight stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let w = init::fan_in_uniform(&[out_features, in_features], in_features, rng);
        let b = init::fan_in_uniform(&[out_features], in_features, rng);
        Self::from_parts(w, b)
    }

    /// Weights from `N(0, std^2)`, zero bias.
    pub fn normal(in_features: usize, out_features: usize, std: f64, rng: &mut impl Rng) -> Self {
        let w = init::normal(&[out_features, in_features], std, rng);
        Self::from_parts(w, Tensor::zeros(&[out_features]))
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        let (out_features, in_features) = (weight.dim(0), weight.dim(1));
        Linear {
            weight: Param::new(weight, ParamKind::Weight),
            bias: Param::new(bias, ParamKind::NoDecay),
            in_features,
            out_features,
            cache: None,
        }
    }

    fn rows(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape().last() {
            Some(&d) if d == self.in_features => Ok(x.len() / d.max(1)),
            _ => Err(Error::shape("Linear input features", self.in_features, x.shape())),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = self.rows(x)?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = self.out_features;
        let mut out = Tensor::zeros(&shape);
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), rows, self.in_features),
            MatRef::new(self.weight.value.data(), self.out_features, self.in_features).t(),
            T::one(),
            MatMut::new(out.data_mut(), rows, self.out_features),
        );
        Ok(out)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::NoForwardCache("Linear"))?;
        let rows = self.rows(&x)?;
        if grad.len() != rows * self.out_features {
            return Err(Error::shape("Linear grad", [rows, self.out_features], grad.shape()));
        }
        gemm(
            T::one(),
            MatRef::new(grad.data(), rows, self.out_features).t(),
            MatRef::new(x.data(), rows, self.in_features),
            T::one(),
            MatMut::new(self.weight.grad.data_mut(), self.out_features, self.in_features),
        );
        for row in grad.data().chunks(self.out_features) {
            self.bias
                .grad
                .data_mut()
                .iter_mut()
                .zip(row)
                .for_each(|(b, &g)| *b += g);
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            T::one(),
            MatRef::new(grad.data(), rows, self.out_features),
            MatRef::new(self.weight.value.data(), self.out_features, self.in_features),
            T::zero(),
            MatMut::new(dx.data_mut(), rows, self.in_features),
        );
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    cache: Option<(Vec<T>, Vec<T>, Vec<usize>)>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Tensor::full(&[dim], T::one()), ParamKind::NoDecay),
            beta: Param::new(Tensor::zeros(&[dim]), ParamKind::NoDecay),
            eps: 1e-6,
            cache: None,
        }
    }

    fn dim(&self) -> usize {
        self.gamma.value.len()
    }

    fn normalize(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let d = self.dim();
        if x.shape().last() != Some(&d) {
            return Err(Error::shape("LayerNorm input", d, x.shape()));
        }
        let df = T::lit(d as f64);
        let eps = T::lit(self.eps);
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv = Vec::with_capacity(x.len() / d);
        for (r, row) in x.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let inv_std = T::one() / (var + eps).sqrt();
            inv.push(inv_std);
            for j in 0..d {
                let xh = (row[j] - mean) * inv_std;
                xhat[r * d + j] = xh;
                out.data_mut()[r * d + j] = xh * self.gamma.value.data()[j] + self.beta.value.data()[j];
            }
        }
        Ok((out, xhat, inv))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.normalize(x)?.0)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, xhat, inv) = self.normalize(x)?;
        self.cache = Some((xhat, inv, x.shape().to_vec()));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv, shape) = self.cache.take().ok_or(Error::NoForwardCache("LayerNorm"))?;
        grad.expect_shape("LayerNorm grad", &shape)?;
        let d = self.dim();
        let df = T::lit(d as f64);
        let mut dx = Tensor::zeros(&shape);
        for r in 0..grad.len() / d {
            let g = &grad.data()[r * d..(r + 1) * d];
            let xh = &xhat[r * d..(r + 1) * d];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..d {
                self.gamma.grad.data_mut()[j] += g[j] * xh[j];
                self.beta.grad.data_mut()[j] += g[j];
                let dxh = g[j] * self.gamma.value.data()[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[j];
            }
            let k = inv[r] / df;
            for j in 0..d {
                let dxh = g[j] * self.gamma.value.data()[j];
                dx.data_mut()[r * d + j] = k * (df * dxh - sum_dxh - xh[j] * sum_dxh_xh);
            }
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
}
