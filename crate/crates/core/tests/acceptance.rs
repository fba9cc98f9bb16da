//! Acceptance criteria A1-A7. Prints one PASS/FAIL line per criterion.
//!
//! A4 needs the CIFAR-10 binary archive under `$PROGROW_DATA/cifar-10-batches-bin` and
//! several hours of CPU time, so it only trains when `PROGROW_ACCEPT_A4=1`. Without the data
//! it reports FAIL (blocked). Blocked criteria do not change the exit status unless
//! `PROGROW_ACCEPT_STRICT=1`; any criterion that ran and failed always does.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use progrow::backbone::{grow, Block, BlockSpec, Head, InputShape, Stem, StemSpec};
use progrow::checkpoint::Checkpoint;
use progrow::data::{generate_synth_fusion, load_cifar10, AugmentPolicy, CifarOptions, SynthFusionConfig};
use progrow::nn::{softmax_cross_entropy, zero_grad, Module};
use progrow::optim::{LrSchedule, Optimizer, OptimizerConfig};
use progrow::rng::stream;
use progrow::trainer::RunOptions;
use progrow::{
    balanced_partition, run_curriculum, run_paired, HeadKind, Preset, PrefixNetwork, ProgressiveSchedule,
    StagePlan, Tensor,
};

/// Percentage-point tolerance on the reported computation fractions.
const A2_TOLERANCE: f64 = 0.015;
/// A4: progressive may trail entire by at most this much (fraction, not points).
const A4_MARGIN: f64 = 0.005;
const A4_FLOOR: f64 = 0.40;
const A4_SEEDS: u64 = 3;
const A5_FLOOR: f64 = 0.85;
const IDENTITY_TOLERANCE: f64 = 1e-9;

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, v: Verdict) -> Verdict {
    match v {
        Verdict::Pass(d) if elapsed > limit => {
            Verdict::Fail(format!("{d}; took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
        }
        v => v,
    }
}

// -- A1 ----------------------------------------------------------------------------------------

fn a1() -> Verdict {
    let rows: [(Preset, usize, &[usize]); 12] = [
        (Preset::ResNet18, 4, &[2, 2, 2, 2]),
        (Preset::ResNet34, 4, &[4, 4, 4, 4]),
        (Preset::ResNet50, 4, &[4, 4, 4, 4]),
        (Preset::ResNet101, 4, &[8, 8, 8, 9]),
        (Preset::ResNet152, 4, &[12, 12, 13, 13]),
        (Preset::ResNet18, 2, &[4, 4]),
        (Preset::ResNet34, 2, &[8, 8]),
        (Preset::ResNet50, 2, &[8, 8]),
        (Preset::ResNet101, 2, &[16, 17]),
        (Preset::ResNet152, 2, &[25, 25]),
        (Preset::VitB16, 2, &[6, 6]),
        (Preset::VitL16, 2, &[12, 12]),
    ];
    for (p, k, want) in &rows {
        let n = match p.spec(5) {
            Ok(s) => s.block_count(),
            Err(e) => return Verdict::Fail(format!("{p}: {e}")),
        };
        match balanced_partition(n, *k) {
            Ok(got) if got == *want => {}
            other => return Verdict::Fail(format!("{p} N={n} K={k}: {other:?}, expected {want:?}")),
        }
    }
    let mut checked = 0;
    for n in 1..=200 {
        for k in 1..=n {
            let s = match balanced_partition(n, k) {
                Ok(s) => s,
                Err(e) => return Verdict::Fail(format!("N={n} K={k}: {e}")),
            };
            let ok = s.len() == k
                && s.iter().sum::<usize>() == n
                && s.iter().all(|&v| v >= 1)
                && s.windows(2).all(|w| w[0] <= w[1])
                && s[k - 1] - s[0] <= 1;
            if !ok {
                return Verdict::Fail(format!("N={n} K={k}: {s:?} breaks an invariant"));
            }
            checked += 1;
        }
    }
    if balanced_partition(3, 4).is_ok() || balanced_partition(3, 0).is_ok() {
        return Verdict::Fail("K > N or K = 0 was accepted".into());
    }
    Verdict::Pass(format!("{} table rows exact; {checked} (N, K) pairs satisfy the invariants", rows.len()))
}

// -- A2 ----------------------------------------------------------------------------------------

fn a2() -> Verdict {
    use progrow::accounting::{overall_computation, CostMode};
    let rows: [(Preset, usize, &[usize], f64); 5] = [
        (Preset::ResNet18, 5, &[5, 5, 30, 280], 0.893),
        (Preset::ResNet18, 5, &[10, 290], 0.968),
        (Preset::ResNet101, 5, &[5, 5, 30, 280], 0.932),
        (Preset::VitB16, 5, &[50, 350], 0.938),
        (Preset::VitB16, 10, &[3, 22], 0.941),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (p, classes, epochs, want) in rows {
        let got = p.spec(classes).and_then(|spec| {
            let plan = StagePlan::new(spec.block_count(), epochs.len())?;
            overall_computation(&spec, &plan, epochs, HeadKind::Final, CostMode::ParameterUpdates)
        });
        match got {
            Ok(g) => {
                ok &= (g - want).abs() <= A2_TOLERANCE;
                parts.push(format!("{p} {epochs:?} {:.1}% vs {:.1}%", 100.0 * g, 100.0 * want));
            }
            Err(e) => return Verdict::Fail(format!("{p} {epochs:?}: {e}")),
        }
    }
    verdict(ok, parts.join("; "))
}

// -- A3 ----------------------------------------------------------------------------------------

fn tiny_spec(p: Preset) -> progrow::Result<progrow::BackboneSpec> {
    match p {
        Preset::TinyResNet | Preset::TinyBottleneck | Preset::TinyVit => p.spec_with_input(5, InputShape::square(3, 32)),
        _ => p.scaled(16, 5, InputShape::square(3, 64)),
    }
}

fn one_step(net: &mut PrefixNetwork<f32>, x: &Tensor<f32>) -> progrow::Result<()> {
    let mut opt = Optimizer::<f32>::new(OptimizerConfig::sgd(0.1))?;
    zero_grad(net);
    let logits = net.forward_train(x)?;
    let out = softmax_cross_entropy(&logits, &[0, 1, 2, 3])?;
    net.backward(&out.grad)?;
    opt.step(net, 0.1);
    Ok(())
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn a3_preset(p: Preset) -> Result<usize, String> {
    let fail = |e: progrow::Error| format!("{p}: {e}");
    let spec = tiny_spec(p).map_err(fail)?;
    let k_max = spec.block_count().min(4);
    let plan = StagePlan::new(spec.block_count(), k_max).map_err(fail)?;
    let input = spec.input;
    let mut r = stream(17, "a3-probe", 0);
    let n = 4 * input.channels * input.height * input.width;
    use rand::Rng;
    let probe = Tensor::from_vec(&[4, input.channels, input.height, input.width], (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .map_err(fail)?;
    let mut net = PrefixNetwork::<f32>::new(&spec, &plan, 1, HeadKind::Progressive, 5).map_err(fail)?;
    let mut compared = 0;
    for k in 1..k_max {
        one_step(&mut net, &probe).map_err(fail)?;
        let cuts: Vec<usize> = std::iter::once(0).chain(plan.cut_points()[..k].iter().copied()).collect();
        let before: Vec<Vec<u32>> = cuts.iter().map(|&c| net.features(&probe, c).map(|t| bits(&t))).collect::<Result<_, _>>().map_err(fail)?;
        let old_head = net.head_name().to_string();
        let head = if k + 1 == k_max { HeadKind::Final } else { HeadKind::Progressive };
        net = grow(net, head, 5).map_err(fail)?;
        for (&c, b) in cuts.iter().zip(&before) {
            let after = bits(&net.features(&probe, c).map_err(fail)?);
            if &after != b {
                return Err(format!("{p}: activations after block {c} changed when growing to stage {}", k + 1));
            }
            compared += 1;
        }
        let ckpt = Checkpoint::from_network(&net, k);
        let stale = format!("{old_head}.");
        if let Some(name) = ckpt.names().into_iter().find(|n| n.starts_with(&stale)) {
            return Err(format!("{p}: stage-{k} head parameter {name} survived the grow step"));
        }
    }
    Ok(compared)
}

fn a3() -> Verdict {
    let mut total = 0;
    for p in Preset::ALL {
        match a3_preset(p) {
            Ok(c) => total += c,
            Err(e) => return Verdict::Fail(e),
        }
    }
    Verdict::Pass(format!("{} presets, {total} cut-point activations bit-identical, no stale heads", Preset::ALL.len()))
}

// -- A4 ----------------------------------------------------------------------------------------

fn cifar_dir() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("PROGROW_DATA")?);
    [root.join("cifar-10-batches-bin"), root].into_iter().find(|d| d.join("test_batch.bin").is_file())
}

fn a4() -> Verdict {
    let Some(dir) = cifar_dir() else {
        return Verdict::Blocked(
            "CIFAR-10 binary archive not found; set PROGROW_DATA to a directory holding cifar-10-batches-bin".into(),
        );
    };
    if std::env::var("PROGROW_ACCEPT_A4").as_deref() != Ok("1") {
        return Verdict::Blocked(format!(
            "data found at {} but the multi-hour run is opt-in; set PROGROW_ACCEPT_A4=1",
            dir.display()
        ));
    }
    let spec = match Preset::TinyVit.scaled(2, 10, InputShape::square(3, 32)) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let (mut entire, mut prog) = (Vec::new(), Vec::new());
    for seed in 0..A4_SEEDS {
        let data = match load_cifar10(&dir, &CifarOptions { val_fraction: 0.1, train_subset: Some(10_000) }, seed) {
            Ok(d) => d,
            Err(e) => return Verdict::Fail(format!("loading CIFAR-10: {e}")),
        };
        let mut s = ProgressiveSchedule::new(StagePlan::new(spec.block_count(), 2).unwrap(), vec![3, 22]);
        s.seed = seed;
        s.batch_size = 64;
        s.optimizer = OptimizerConfig::adamw(1e-3, 0.05);
        s.lr_schedule = LrSchedule { warmup_epochs: 1, ..Default::default() };
        s.augment = AugmentPolicy { hflip: 0.5, crop_padding: 4, ..Default::default() };
        let opts = RunOptions { skip_epoch_validation: true, ..Default::default() };
        match run_paired(&spec, &s, 25, &data, &opts) {
            Ok(p) => {
                entire.push(p.rows[0].accuracy);
                prog.push(p.rows[1].accuracy);
            }
            Err(f) => return Verdict::Fail(format!("seed {seed}: {}", f.error)),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (e, p) = (mean(&entire), mean(&prog));
    verdict(
        p >= e - A4_MARGIN && e > A4_FLOOR && p > A4_FLOOR,
        format!("mean test accuracy over {A4_SEEDS} seeds: entire {e:.4}, progressive {p:.4} ({:+.2} pp)", 100.0 * (p - e)),
    )
}

// -- A5 ----------------------------------------------------------------------------------------

fn a5() -> Verdict {
    let data = match generate_synth_fusion(&SynthFusionConfig::default()) {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let spec = Preset::TinyResNet.spec(5).unwrap();
    let mut s = ProgressiveSchedule::new(StagePlan::new(spec.block_count(), 2).unwrap(), vec![10, 20]);
    s.batch_size = 32;
    s.optimizer = OptimizerConfig::sgd(0.05);
    s.augment = AugmentPolicy { hflip: 0.5, ..Default::default() };
    let p = match run_paired(&spec, &s, 30, &data, &RunOptions::default()) {
        Ok(p) => p,
        Err(f) => return Verdict::Fail(f.error.to_string()),
    };
    let mut gap = 0.0f64;
    for r in [&p.entire, &p.progressive] {
        for m in [&r.val, &r.test].into_iter().flatten() {
            gap = gap.max(m.recall_identity_gap());
        }
    }
    let (e, g) = (p.rows[0].accuracy, p.rows[1].accuracy);
    verdict(
        e >= A5_FLOOR && g >= A5_FLOOR && gap <= IDENTITY_TOLERANCE,
        format!("test accuracy entire {e:.4}, progressive {g:.4}; max |weighted recall - accuracy| {gap:.1e}"),
    )
}

// -- A6 ----------------------------------------------------------------------------------------

fn a6_once() -> progrow::Result<String> {
    let data = generate_synth_fusion(&SynthFusionConfig { image_size: 32, seed: 9, ..Default::default() })?;
    let spec = Preset::TinyResNet.spec_with_input(5, InputShape::square(3, 32))?;
    let mut s = ProgressiveSchedule::new(StagePlan::new(spec.block_count(), 2)?, vec![1, 2]);
    s.seed = 9;
    s.batch_size = 32;
    s.augment = AugmentPolicy { hflip: 0.5, crop_padding: 2, brightness: 0.1, contrast: 0.1 };
    let mut r = run_curriculum(&spec, &s, &data, &RunOptions::default()).map_err(|f| f.error)?;
    r.strip_timing();
    r.to_json()
}

fn a6() -> Verdict {
    match (a6_once(), a6_once()) {
        (Ok(a), Ok(b)) => {
            let hash = a.contains("\"final_weights_hash\": \"");
            verdict(a == b && hash, format!("two runs, {} report bytes, identical: {}", a.len(), a == b))
        }
        (Err(e), _) | (_, Err(e)) => Verdict::Fail(e.to_string()),
    }
}

// -- A7 ----------------------------------------------------------------------------------------

fn a7() -> Verdict {
    use common::{check, random};
    let mut r = stream(71, "a7", 0);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut run = |res: Result<f64, String>| -> Result<(), String> {
        worst = worst.max(res?);
        count += 1;
        Ok(())
    };
    let result = (|| -> Result<(), String> {
        let blocks = [
            (BlockSpec::Basic { in_channels: 4, out_channels: 4, stride: 1 }, vec![2, 4, 6, 6]),
            (BlockSpec::Basic { in_channels: 4, out_channels: 8, stride: 2 }, vec![2, 4, 6, 6]),
            (BlockSpec::Bottleneck { in_channels: 8, mid_channels: 2, out_channels: 8, stride: 1 }, vec![2, 8, 5, 5]),
            (BlockSpec::Bottleneck { in_channels: 4, mid_channels: 2, out_channels: 8, stride: 2 }, vec![2, 4, 6, 6]),
            (BlockSpec::Encoder { dim: 8, heads: 2, mlp_dim: 16 }, vec![2, 5, 8]),
        ];
        for (i, (spec, shape)) in blocks.iter().enumerate() {
            let mut b = Block::<f64>::new(spec, &mut r);
            run(check(&format!("{spec:?}"), &mut b, &random(shape, i as u64), i as u64))?;
        }
        let input = InputShape::square(3, 8);
        let stems = [
            StemSpec::Conv { out_channels: 4, kernel: 3, stride: 1, max_pool: true },
            StemSpec::Patch(progrow::backbone::PatchTokenizerSpec::half_overlap(4, 6)),
        ];
        for (i, spec) in stems.iter().enumerate() {
            let mut s = Stem::<f64>::new(spec, input, &mut r).map_err(|e| e.to_string())?;
            run(check(&format!("{spec:?}"), &mut s, &random(&[2, 3, 8, 8], 10 + i as u64), 10))?;
        }
        let fmap = random(&[2, 6, 3, 3], 20);
        for kind in [HeadKind::Progressive, HeadKind::Final] {
            run(check(&format!("cnn {kind:?} head"), &mut Head::<f64>::new(kind, true, 6, 3, &mut r), &fmap, 20))?;
        }
        run(check("token head", &mut Head::<f64>::new(HeadKind::Final, false, 6, 3, &mut r), &random(&[2, 4, 6], 21), 21))?;
        Ok(())
    })();
    match result {
        Ok(()) => Verdict::Pass(format!("{count} modules, worst relative error {worst:.1e} (limit {:.0e})", common::TOLERANCE)),
        Err(e) => Verdict::Fail(e),
    }
}

fn main() {
    let criteria: [(&str, &str, fn() -> Verdict, Duration); 7] = [
        ("A1", "partition exactness", a1, Duration::from_secs(1)),
        ("A2", "compute accounting", a2, Duration::from_secs(1)),
        ("A3", "weight-reuse identity", a3, Duration::from_secs(60)),
        ("A4", "CIFAR-10 reduced-scale trend", a4, Duration::from_secs(6 * 3600)),
        ("A5", "synthetic fusion end-to-end", a5, Duration::from_secs(30 * 60)),
        ("A6", "determinism", a6, Duration::from_secs(30 * 60)),
        ("A7", "gradient correctness", a7, Duration::from_secs(60)),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| a.starts_with('A'));
    let strict = std::env::var("PROGROW_ACCEPT_STRICT").as_deref() == Ok("1");
    let mut failed = false;
    for (id, name, f, limit) in criteria {
        if only.as_deref().is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        let v = within(start.elapsed(), limit, v);
        let secs = start.elapsed().as_secs_f64();
        match v {
            Verdict::Pass(d) => println!("PASS {id} {name} ({secs:.1}s): {d}"),
            Verdict::Fail(d) => {
                failed = true;
                println!("FAIL {id} {name} ({secs:.1}s): {d}");
            }
            Verdict::Blocked(d) => {
                failed |= strict;
                println!("FAIL {id} {name} (blocked): {d}");
            }
        }
    }
    if failed {
        std::process::exit(1);
    }
}
