//! Training-step throughput of the tiny presets on random data.

use std::time::Instant;

use progrow::backbone::{HeadKind, InputShape, Preset, PrefixNetwork};
use progrow::nn::{softmax_cross_entropy, zero_grad, Module};
use progrow::{StagePlan, Tensor};

fn main() -> progrow::Result<()> {
    let cases = [
        (Preset::TinyResNet, InputShape::square(3, 96), 5),
        (Preset::TinyResNet, InputShape::square(3, 64), 5),
        (Preset::TinyVit, InputShape::square(3, 32), 10),
    ];
    let batch = 64;
    for (preset, input, classes) in cases {
        let spec = preset.spec_with_input(classes, input)?;
        let plan = StagePlan::new(spec.block_count(), 1)?;
        let mut net = PrefixNetwork::<f32>::new(&spec, &plan, 1, HeadKind::Final, 0)?;
        let n = batch * input.channels * input.height * input.width;
        let x = Tensor::from_vec(
            &[batch, input.channels, input.height, input.width],
            (0..n).map(|i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0).collect(),
        )?;
        let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
        let steps = 5;
        let t = Instant::now();
        for _ in 0..steps {
            zero_grad(&mut net);
            let logits = net.forward_train(&x)?;
            let out = softmax_cross_entropy(&logits, &labels)?;
            net.backward(&out.grad)?;
        }
        let train = t.elapsed().as_secs_f64() / (steps * batch) as f64;
        let t = Instant::now();
        net.forward(&x)?;
        let eval = t.elapsed().as_secs_f64() / batch as f64;
        println!(
            "{:<12} {:>3}px  train {:>7.1} img/s  eval {:>7.1} img/s",
            preset.name(),
            input.height,
            1.0 / train,
            1.0 / eval
        );
    }
    Ok(())
}
