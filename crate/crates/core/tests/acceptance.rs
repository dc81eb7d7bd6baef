//! One PASS/FAIL line per acceptance criterion; exits nonzero if any fail.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use action_kit::autodiff::Graph;
use action_kit::cost::{build_backbone, count_cost, efficiency, published_delta_top1, Backbone, CostReport, Variant};
use action_kit::data::{gen_direction_dataset, save_dataset, segment_indices, ClipDataset, SampleMode};
use action_kit::excitation::{
    action_forward, ce_forward, ce_graph, me_forward, me_graph, ste_forward, ste_graph, ActionWeights, CeWeights, MeWeights, SegmentBatch,
    SteWeights,
};
use action_kit::gradcheck::{suite, worst_per_op};
use action_kit::tensor::Tensor;
use action_kit::toynet::{TemporalModule, ToyConfig, ToyNet};
use action_kit::train::{evaluate, train, TrainConfig};
use common::{ce_oracle, input, max_rel, me_oracle, ste_oracle, SHAPES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn stages(b: Backbone) -> Vec<String> {
    b.stages().iter().map(|s| s.to_string()).collect()
}

fn cost(b: Backbone, v: Variant) -> CostReport {
    count_cost(&build_backbone(b, v, 8, 83, &stages(b)).unwrap()).unwrap()
}

fn timed_cost_cli() -> Duration {
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_action-kit")).args(["cost", "--table3"]).output().unwrap();
    assert!(o.status.success());
    start.elapsed()
}

fn criterion1() -> Outcome {
    let elapsed = timed_cost_cli();
    let (tsn, tsm, act) =
        (cost(Backbone::Resnet50, Variant::Tsn), cost(Backbone::Resnet50, Variant::Tsm), cost(Backbone::Resnet50, Variant::Action));
    let pass = within(tsm.macs_g(), 33.0, 0.03)
        && within(tsm.params_m(), 23.68, 0.02)
        && within(act.macs_g(), 34.75, 0.04)
        && within(act.params_m(), 28.08, 0.10)
        && tsn == tsm
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "baseline {:.3} G / {:.3} M, action {:.3} G / {:.3} M, tsm == tsn: {}, cli {:.0} ms",
            tsm.macs_g(),
            tsm.params_m(),
            act.macs_g(),
            act.params_m(),
            tsn == tsm,
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn criterion2() -> Outcome {
    let base = cost(Backbone::Resnet50, Variant::Tsm);
    let d = |v| {
        let c = cost(Backbone::Resnet50, v);
        ((c.macs as f64 - base.macs as f64) / 1e9, (c.params as f64 - base.params as f64) / 1e6)
    };
    let (ste, ce, me, act) = (d(Variant::Ste), d(Variant::Ce), d(Variant::Me), d(Variant::Action));
    let ordered = ste.0 < ce.0 && ce.0 < me.0 && me.0 < act.0;
    let pass = ordered && within(me.0, 1.69, 0.40) && within(ce.1, 2.40, 0.15) && within(me.1, 2.22, 0.15);
    outcome(
        pass,
        format!(
            "dFLOPs ste {:.3} < ce {:.3} < me {:.3} < action {:.3} G: {ordered}; dParams ce {:.3} M, me {:.3} M",
            ste.0, ce.0, me.0, act.0, ce.1, me.1
        ),
    )
}

fn criterion3() -> Outcome {
    let (base, act) = (cost(Backbone::MobilenetV2, Variant::Tsm), cost(Backbone::MobilenetV2, Variant::Action));
    let pct = 100.0 * (act.macs as f64 - base.macs as f64) / base.macs as f64;
    let pass = within(base.macs_g(), 2.55, 0.05)
        && within(base.params_m(), 2.33, 0.05)
        && within(act.macs_g(), 2.57, 0.05)
        && within(act.params_m(), 2.36, 0.10)
        && (0.5..=1.2).contains(&pct);
    outcome(
        pass,
        format!(
            "baseline {:.3} G / {:.3} M, action {:.3} G / {:.3} M, dFLOPs {pct:.2}%",
            base.macs_g(),
            base.params_m(),
            act.macs_g(),
            act.params_m()
        ),
    )
}

fn criterion4() -> Outcome {
    // (backbone, variant, published dFLOPs %, published dTop-1, published eta)
    let rows = [
        (Backbone::Resnet50, Variant::Ste, 0.3, 1.7, 0.18),
        (Backbone::Resnet50, Variant::Ce, 0.5, 1.7, 0.29),
        (Backbone::Resnet50, Variant::Me, 5.1, 1.8, 2.83),
        (Backbone::Resnet50, Variant::Action, 5.3, 2.1, 2.52),
        (Backbone::MobilenetV2, Variant::Action, 0.8, 1.1, 0.71),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (b, v, flops, top1, eta) in rows {
        let got = efficiency(flops, top1).unwrap();
        let ok = (got - eta).abs() <= 0.02 && published_delta_top1(b, v) == Some(top1);
        pass &= ok;
        parts.push(format!("{} {v} {got:.3}", b.name()));
    }
    outcome(pass, format!("eta {}", parts.join(", ")))
}

fn criterion5() -> Outcome {
    let start = Instant::now();
    let entries = suite(0).unwrap();
    let elapsed = start.elapsed();
    let required = [
        "conv1d",
        "conv1d_grouped",
        "conv2d",
        "conv2d_grouped",
        "conv3d",
        "conv3d_grouped",
        "sigmoid",
        "mean",
        "broadcast_mul_add",
        "ste",
        "ce",
        "me",
        "action",
    ];
    let fewest = required.iter().map(|op| entries.iter().filter(|e| e.op == *op).count()).min().unwrap();
    let worst = worst_per_op(&entries);
    let (op, err) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = fewest >= 5 && err < 1e-4 && elapsed < Duration::from_secs(120);
    outcome(pass, format!("{} ops, >= {fewest} configs each, worst {err:.2e} ({op}), {:.1} s", worst.len(), elapsed.as_secs_f64()))
}

fn criterion6() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, (d, r)) in SHAPES.iter().enumerate() {
        let x = input(*d, i as u64);
        let b = SegmentBatch::new(x.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + i as u64);
        let (s, c, m) = (SteWeights::random(&mut rng), CeWeights::random(d[2], *r, &mut rng), MeWeights::random(d[2], *r, &mut rng));
        worst = worst.max(max_rel(ste_forward(&b, &s).unwrap().tensor().data(), &ste_oracle(&x, &s)));
        worst = worst.max(max_rel(ce_forward(&b, &c).unwrap().tensor().data(), &ce_oracle(&x, &c)));
        worst = worst.max(max_rel(me_forward(&b, &m).unwrap().tensor().data(), &me_oracle(&x, &m)));
    }
    outcome(worst <= 1e-10, format!("{} shapes, worst relative error {worst:.2e}", SHAPES.len()))
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn criterion7() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..32 {
        let d = [rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..5), rng.random_range(1..5)];
        let x = Tensor::<f64>::randn(&d, 1.0, &mut rng);
        let c = d[2];
        let (ste, ce, me) = (SteWeights::random(&mut rng), CeWeights::random(c, 2, &mut rng), MeWeights::random(c, 2, &mut rng));
        let g = Graph::new();
        let xv = g.constant(x.clone());
        for p in
            [ste_graph(&g, xv, &ste.bind(&g)).unwrap(), ce_graph(&g, xv, &ce.bind(&g)).unwrap(), me_graph(&g, xv, &me.bind(&g)).unwrap()]
        {
            if !g.value(p.mask).data().iter().all(|&v| v > 0.0 && v < 1.0) {
                failures.push(format!("mask range case {case}"));
            }
            if g.value(p.y).shape() != x.shape() {
                failures.push(format!("shape case {case}"));
            }
        }
        let perm: Vec<usize> = (0..c).map(|i| (i + case) % c).collect();
        let run = |t: &Tensor<f64>| ste_forward(&SegmentBatch::new(t.clone()).unwrap(), &ste).unwrap().into_tensor();
        if !close(&run(&x.select(2, &perm).unwrap()), &run(&x).select(2, &perm).unwrap(), 1e-12) {
            failures.push(format!("ste equivariance case {case}"));
        }
        let pair = Tensor::<f64>::randn(&[2, d[1], c, d[3], d[4]], 1.0, &mut rng);
        let w = ActionWeights::random(c, 2, &mut rng);
        let whole = action_forward(&SegmentBatch::new(pair.clone()).unwrap(), &w).unwrap().into_tensor();
        for i in 0..2 {
            let yi = action_forward(&SegmentBatch::new(pair.select(0, &[i]).unwrap()).unwrap(), &w).unwrap().into_tensor();
            if !close(&whole.select(0, &[i]).unwrap(), &yi, 1e-12) {
                failures.push(format!("batch independence case {case}"));
            }
        }
    }
    let x = Tensor::<f64>::randn(&[2, 6, 8, 4, 4], 1.0, &mut rng);
    let w = ActionWeights::random(8, 4, &mut rng);
    let fwd = action_forward(&SegmentBatch::new(x.clone()).unwrap(), &w).unwrap().into_tensor();
    let rev = action_forward(&SegmentBatch::new(x.flip_axis(1).unwrap()).unwrap(), &w).unwrap().into_tensor();
    let sensitivity = fwd.flip_axis(1).unwrap().max_abs_diff(&rev);
    if sensitivity <= 1e-3 {
        failures.push(format!("reversal sensitivity {sensitivity:e}"));
    }
    let ds = gen_direction_dataset(4, 16, 32, 32, 0.05, 5).unwrap();
    let net = ToyNet::<f32>::new(ToyConfig::default().with_module(TemporalModule::None), 3).unwrap();
    let idx = segment_indices(16, 8, SampleMode::Center, &mut rng).unwrap();
    for v in &ds.videos {
        let clip = v.frames.select(0, &idx).unwrap().reshape(&[1, 8, 1, 32, 32]).unwrap();
        let base = net.forward(&clip).unwrap();
        for order in [vec![7, 6, 5, 4, 3, 2, 1, 0], vec![3, 0, 6, 1, 7, 2, 5, 4]] {
            if net.forward(&clip.select(1, &order).unwrap()).unwrap() != base {
                failures.push("blind model permutation invariance".into());
            }
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("32 random cases, reversal sensitivity {sensitivity:.3}, blind model bit-exact under {} permuted clips", 2 * ds.len())
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

struct Run {
    net: ToyNet<f32>,
    top1: f64,
}

fn datasets(seed: u64) -> (ClipDataset, ClipDataset) {
    (gen_direction_dataset(50, 40, 32, 32, 0.05, 100 + seed).unwrap(), gen_direction_dataset(20, 40, 32, 32, 0.05, 900 + seed).unwrap())
}

fn train_run(module: TemporalModule, stages: &[usize], seed: u64, tr: &ClipDataset, va: &ClipDataset) -> Run {
    let cfg = ToyConfig { stages: stages.to_vec(), ..ToyConfig::default().with_module(module) };
    let tc = TrainConfig { seed, ..TrainConfig::default() };
    let mut net = ToyNet::<f32>::new(cfg, seed).unwrap();
    train(&mut net, tr, &tc).unwrap();
    let top1 = evaluate(&net, va, tc.segments).unwrap().top1;
    Run { net, top1 }
}

fn criterion8(seed0_action: &mut Option<Run>) -> Outcome {
    let start = Instant::now();
    let mut gap_ok = 0;
    let mut shift_between = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let (tr, va) = datasets(seed);
        let action = train_run(TemporalModule::Action, &[1, 2, 3], seed, &tr, &va);
        let none = train_run(TemporalModule::None, &[1, 2, 3], seed, &tr, &va);
        let shift = train_run(TemporalModule::Shift, &[1, 2, 3], seed, &tr, &va);
        if action.top1 >= 90.0 && none.top1 <= 60.0 {
            gap_ok += 1;
        }
        if none.top1 < shift.top1 && shift.top1 < action.top1 {
            shift_between += 1;
        }
        parts.push(format!("seed {seed}: action {:.1} none {:.1} shift {:.1}", action.top1, none.top1, shift.top1));
        if seed == 0 {
            *seed0_action = Some(action);
        }
    }
    let elapsed = start.elapsed();
    let pass = gap_ok == 3 && shift_between >= 2 && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "{}; gap on {gap_ok}/3 seeds, shift strictly between on {shift_between}/3, {:.0} s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion9(full: &Run) -> Outcome {
    let (tr, va) = datasets(0);
    let one = train_run(TemporalModule::Action, &[1], 0, &tr, &va).top1;
    let two = train_run(TemporalModule::Action, &[1, 2], 0, &tr, &va).top1;
    let three = full.top1;
    let pass = two >= one - 2.0 && three >= two - 2.0;
    outcome(pass, format!("stage1 {one:.1}, stages 1-2 {two:.1}, stages 1-3 {three:.1}"))
}

fn criterion10(action: &Run) -> Outcome {
    let (_, va) = datasets(0);
    let dir = tempfile::tempdir().unwrap();
    let (model, data, out) = (dir.path().join("model"), dir.path().join("val"), dir.path().join("cams"));
    action.net.save(&model).unwrap();
    save_dataset(&va, &data).unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let (mut frames, mut near, mut near_input, mut pgms) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..10 {
        let index = i * 8 + i % 4;
        let clip_out = out.join(format!("{i}"));
        let args = ["cam", "--model", &p(&model), "--data", &p(&data), "--index", &index.to_string(), "--out", &p(&clip_out)];
        let o = Command::new(env!("CARGO_BIN_EXE_action-kit")).args(args).output().unwrap();
        if !o.status.success() {
            return outcome(false, format!("cam failed on clip {index}: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let clips: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let distances = clips[0]["distances"].as_array().unwrap();
        let clip_dir = clip_out.join(clips[0]["dir"].as_str().unwrap());
        let feat = action_kit::atnz::read::<f32>(clip_dir.join("cam.atnz")).unwrap();
        let scale = 32.0 / feat.shape()[2] as f64;
        for (t, d) in distances.iter().enumerate() {
            let d = d.as_f64().unwrap();
            frames += 1;
            near += usize::from(d <= 5.0);
            near_input += usize::from(d * scale <= 5.0);
            pgms += usize::from(clip_dir.join(format!("frame_{t:02}.pgm")).exists());
        }
    }
    let rate = near as f64 / frames as f64;
    let input_rate = near_input as f64 / frames as f64;
    let pass = pgms == frames && rate >= 0.70;
    outcome(
        pass,
        format!(
            "{near}/{frames} frames within 5 feature px ({:.0}%), {pgms} PGMs; at input scale {near_input}/{frames} ({:.0}%)",
            100.0 * rate,
            100.0 * input_rate
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion1());
    report(2, criterion2());
    report(3, criterion3());
    report(4, criterion4());
    report(5, criterion5());
    report(6, criterion6());
    report(7, criterion7());
    let mut action = None;
    report(8, criterion8(&mut action));
    let action = action.unwrap();
    report(9, criterion9(&action));
    report(10, criterion10(&action));
    let failed: Vec<String> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
