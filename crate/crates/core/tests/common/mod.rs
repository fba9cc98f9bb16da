//! Central-difference gradient checking shared by the gradcheck and acceptance targets.

#![allow(dead_code)]

use rand::Rng;

use progrow::nn::{softmax_cross_entropy, zero_grad, Module};
use progrow::rng::stream;
use progrow::Tensor;

pub const PROBES: usize = 10;
pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, "gradcheck-data", 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Scalar objective over a module's training-mode output.
pub trait Objective {
    fn value(&self, y: &Tensor<f64>) -> f64;
    fn grad(&self, y: &Tensor<f64>) -> Tensor<f64>;
}

/// `sum(y * r)` for a fixed random `r`.
pub struct Projection(pub Tensor<f64>);

impl Objective for Projection {
    fn value(&self, y: &Tensor<f64>) -> f64 {
        y.data().iter().zip(self.0.data()).map(|(a, b)| a * b).sum()
    }
    fn grad(&self, _: &Tensor<f64>) -> Tensor<f64> {
        self.0.clone()
    }
}

pub struct CrossEntropy(pub Vec<usize>);

impl Objective for CrossEntropy {
    fn value(&self, y: &Tensor<f64>) -> f64 {
        softmax_cross_entropy(y, &self.0).unwrap().loss
    }
    fn grad(&self, y: &Tensor<f64>) -> Tensor<f64> {
        softmax_cross_entropy(y, &self.0).unwrap().grad
    }
}

fn loss<M: Module<f64>>(m: &mut M, x: &Tensor<f64>, obj: &dyn Objective) -> f64 {
    obj.value(&m.forward_train(x).unwrap())
}

fn nudge<M: Module<f64>>(m: &mut M, target: &str, i: usize, delta: f64) {
    m.visit_mut("", &mut |n, p| {
        if n == target {
            p.value.data_mut()[i] += delta;
        }
    });
}

/// Worst relative error over `PROBES` coordinates of every trainable tensor and of the input.
pub fn check_with<M: Module<f64>>(
    label: &str,
    m: &mut M,
    x: &Tensor<f64>,
    obj: &dyn Objective,
    seed: u64,
) -> Result<f64, String> {
    zero_grad(m);
    let y = m.forward_train(x).unwrap();
    let dx = m.backward(&obj.grad(&y)).unwrap();
    if dx.shape() != x.shape() {
        return Err(format!("{label}: input gradient shape {:?} vs {:?}", dx.shape(), x.shape()));
    }

    let mut grads = Vec::new();
    m.visit("", &mut |n, p| {
        if p.trainable() {
            grads.push((n.to_string(), p.grad.data().to_vec()));
        }
    });
    if grads.is_empty() {
        return Err(format!("{label} has no trainable parameters"));
    }
    let mut r = stream(seed, "gradcheck-probe", 0);
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        for _ in 0..PROBES.min(g.len()) {
            let i = r.random_range(0..g.len());
            nudge(m, name, i, STEP);
            let up = loss(m, x, obj);
            nudge(m, name, i, -2.0 * STEP);
            let down = loss(m, x, obj);
            nudge(m, name, i, STEP);
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(g[i], numeric);
            if !(e < TOLERANCE) {
                return Err(format!("{label}: {name}[{i}] analytic {} numeric {numeric} (rel {e:.2e})", g[i]));
            }
            worst = worst.max(e);
        }
    }
    let mut xp = x.clone();
    for _ in 0..PROBES {
        let i = r.random_range(0..x.len());
        xp.data_mut()[i] += STEP;
        let up = loss(m, &xp, obj);
        xp.data_mut()[i] -= 2.0 * STEP;
        let down = loss(m, &xp, obj);
        xp.data_mut()[i] += STEP;
        let numeric = (up - down) / (2.0 * STEP);
        let e = rel_err(dx.data()[i], numeric);
        if !(e < TOLERANCE) {
            return Err(format!("{label}: input[{i}] analytic {} numeric {numeric} (rel {e:.2e})", dx.data()[i]));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Moves every trainable parameter off its initial value. Zero-initialized residual scales
/// make a block output exactly `relu(x)`, and the stem's ReLU feeds it exact zeros, which
/// would put central differences on a kink.
pub fn jitter<M: Module<f64>>(m: &mut M, seed: u64) {
    let mut r = stream(seed, "gradcheck-jitter", 0);
    m.visit_mut("", &mut |_, p| {
        if p.trainable() {
            for v in p.value.data_mut() {
                *v += r.random_range(-0.1..0.1);
            }
        }
    });
}

pub fn check<M: Module<f64>>(label: &str, m: &mut M, x: &Tensor<f64>, seed: u64) -> Result<f64, String> {
    let y = m.forward_train(x).map_err(|e| format!("{label}: {e}"))?;
    let obj = Projection(random(y.shape(), seed + 1000));
    check_with(label, m, x, &obj, seed)
}
