//! Release acceptance checks. Each criterion prints one PASS/FAIL line to
//! stdout (uncaptured) and the test fails if any criterion fails.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use liteseg::autograd::Graph;
use liteseg::blocks::{uafm_blend, AttentionKind, Fusion, UafmBlock};
use liteseg::checkpoint::Checkpoint;
use liteseg::eval::{bench, evaluate, BenchConfig, ConfusionMatrix};
use liteseg::gradcheck::{run_suite, REL_TOL};
use liteseg::labels::{argmax, LabelMap};
use liteseg::model::{Model, ModelConfig};
use liteseg::nn::{init_rng, Mode, ParamBuilder, ParamStore, Session};
use liteseg::parallel;
use liteseg::tensor::Tensor;
use liteseg::train::augment::AugmentConfig;
use liteseg::train::dataset::SyntheticShapes;
use liteseg::train::loss::{ohem_cross_entropy, OhemConfig};
use liteseg::train::{train, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
const DESK_LOSS_RATIO: f64 = 0.5;
const DESK_MIOU: f64 = 0.70;
const FLOAT_ORACLE_TOL: f64 = 1e-6;
const BLEND_ENDPOINT_TOL: f64 = 1e-7;
const AVERAGE_TOL: f64 = 1e-6;
const OHEM_TOL: f64 = 1e-6;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let reports = run_suite(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    ensure(failed.is_empty(), || format!("failing cases: {failed:?}"))?;
    ensure(worst < REL_TOL, || format!("max relative error {worst:.3e}"))?;
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{} cases, max rel error {worst:.2e} (< {REL_TOL:e}), {:.1}s", reports.len(), elapsed.as_secs_f64()))
}

fn blend_identities() -> Check {
    let mut worst_end = 0.0f64;
    for seed in 0..10 {
        let up = Tensor::<f32>::rand_uniform(vec![2, 4, 8, 8], -2.0, 2.0, &mut rng(seed));
        let low = Tensor::<f32>::rand_uniform(vec![2, 4, 8, 8], -2.0, 2.0, &mut rng(seed + 100));
        let g = Graph::<f32>::no_grad();
        let (u, l) = (g.constant(up.clone()), g.constant(low.clone()));
        for (alpha, want) in [(1.0, &up), (0.0, &low)] {
            let a = g.constant(Tensor::full(vec![2, 1, 8, 8], alpha));
            let out = uafm_blend(&g, &u, &l, &a).map_err(|e| e.to_string())?.into_value();
            worst_end = worst_end.max(out.max_abs_diff(want).unwrap());
        }
    }
    ensure(worst_end <= BLEND_ENDPOINT_TOL, || format!("endpoint error {worst_end:e}"))?;

    let mut store = ParamStore::<f64>::new();
    let mut r = init_rng(0);
    let block =
        UafmBlock::new(&mut ParamBuilder::new(&mut store, &mut r), "u", 4, 4, 4, AttentionKind::None, Fusion::Blend)
            .map_err(|e| e.to_string())?;
    let mut worst_avg = 0.0f64;
    for seed in 0..10 {
        let high = Tensor::rand_uniform(vec![2, 4, 4, 4], -2.0, 2.0, &mut rng(seed));
        let low = Tensor::rand_uniform(vec![2, 4, 8, 8], -2.0, 2.0, &mut rng(seed + 50));
        let g = Graph::no_grad();
        let s = Session::new(&g, &store, Mode::Eval);
        let out = block.forward(&s, &g.constant(high.clone()), &g.constant(low.clone())).map_err(|e| e.to_string())?;
        let up = common::bilinear(&high, 8, 8);
        let want: Vec<f64> = up.data().iter().zip(low.data()).map(|(a, b)| 0.5 * (a + b)).collect();
        worst_avg = worst_avg.max(common::max_abs_diff(out.value().data(), &want));
    }
    ensure(worst_avg <= AVERAGE_TOL, || format!("averaging error {worst_avg:e}"))?;
    Ok(format!("endpoint error {worst_end:.1e} (<= {BLEND_ENDPOINT_TOL:e}), averaging error {worst_avg:.1e} (<= {AVERAGE_TOL:e})"))
}

fn shape_suite() -> Check {
    let (h, w) = (512, 1024);
    let x = Tensor::<f32>::rand_uniform(vec![1, 3, h, w], -1.0, 1.0, &mut rng(0));
    let mut parts = Vec::new();
    for (name, cfg, taper) in
        [("T", ModelConfig::pp_liteseg_t(19), [128, 64, 32]), ("B", ModelConfig::pp_liteseg_b(19), [128, 96, 64])]
    {
        let model = Model::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
        let g = Graph::no_grad();
        let s = Session::new(&g, &model.params, Mode::Eval);
        let tr = model.forward_trace(&s, &g.constant(x.clone())).map_err(|e| e.to_string())?;
        for (level, stride) in tr.pyramid.levels().iter().zip([2, 4, 8, 16, 32]) {
            let got = (level.shape()[2], level.shape()[3]);
            ensure(got == (h / stride, w / stride), || format!("{name}: stride {stride} level is {got:?}"))?;
        }
        let f32_size = (tr.pyramid.f32.shape()[2], tr.pyramid.f32.shape()[3]);
        ensure(f32_size == (16, 32), || format!("{name}: f32 is {f32_size:?}"))?;
        let expect = [
            ("sppm", tr.context.shape().to_vec(), vec![1, taper[0], 16, 32]),
            ("uafm 1/16", tr.fused16.shape().to_vec(), vec![1, taper[1], 32, 64]),
            ("uafm 1/8", tr.fused8.shape().to_vec(), vec![1, taper[2], 64, 128]),
            ("logits", tr.logits.shape().to_vec(), vec![1, 19, h, w]),
        ];
        for (stage, got, want) in expect {
            ensure(got == want, || format!("{name} {stage}: {got:?} != {want:?}"))?;
        }
        parts.push(format!("{name} {}→{}→{}", taper[0], taper[1], taper[2]));
    }
    Ok(format!("strides 2..32, f32 16x32, {}, logits 19x512x1024", parts.join(", ")))
}

fn oracle_equivalences() -> Check {
    let g = Graph::<f64>::no_grad();
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = Tensor::rand_uniform(vec![2, 3, 8, 8], -2.0, 2.0, &mut r);
        let wt = Tensor::rand_uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut r);
        let y = g.conv2d(&g.constant(x.clone()), &g.constant(wt.clone()), None, 1, 1).unwrap().into_value();
        worst = worst.max(common::max_abs_diff(y.data(), common::conv2d(&x, &wt, None, 1, 1).data()));
        let y = g.conv2d(&g.constant(x.clone()), &g.constant(wt.clone()), None, 2, 1).unwrap().into_value();
        worst = worst.max(common::max_abs_diff(y.data(), common::conv2d(&x, &wt, None, 2, 1).data()));
        for bins in [1, 2, 3, 4] {
            let y = g.adaptive_avg_pool(&g.constant(x.clone()), bins, bins).unwrap().into_value();
            worst = worst.max(common::max_abs_diff(y.data(), common::adaptive_avg_pool(&x, bins, bins).data()));
        }
        for (oh, ow) in [(16, 16), (13, 21), (32, 32)] {
            let y = g.bilinear_upsample(&g.constant(x.clone()), oh, ow).unwrap().into_value();
            worst = worst.max(common::max_abs_diff(y.data(), common::bilinear(&x, oh, ow).data()));
        }
        let (m, mx) = g.channel_mean_max(&g.constant(x.clone())).unwrap();
        let (om, omx) = common::channel_mean_max(&x);
        worst =
            worst.max(common::max_abs_diff(m.value().data(), &om)).max(common::max_abs_diff(mx.value().data(), &omx));
        let (a, sm) = g.spatial_avg_max(&g.constant(x.clone())).unwrap();
        let (oa, osm) = common::spatial_avg_max(&x);
        worst =
            worst.max(common::max_abs_diff(a.value().data(), &oa)).max(common::max_abs_diff(sm.value().data(), &osm));
    }
    ensure(worst <= FLOAT_ORACLE_TOL, || format!("float ops differ by {worst:e}"))?;

    for seed in 0..5 {
        let logits = Tensor::<f64>::rand_normal(vec![2, 19, 8, 8], 0.0, 1.0, &mut rng(seed));
        let got: Vec<Vec<u8>> = argmax(&logits).unwrap().into_iter().map(|m| m.data).collect();
        ensure(got == common::argmax(&logits), || "argmax differs from loop oracle".into())?;

        let mut r = rng(seed + 10);
        let pred: Vec<u8> = (0..64).map(|_| r.random_range(0..3)).collect();
        let gt: Vec<u8> = (0..64).map(|_| if r.random::<f64>() < 0.1 { 255 } else { r.random_range(0..3) }).collect();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&LabelMap::new(8, 8, pred.clone()).unwrap(), &LabelMap::new(8, 8, gt.clone()).unwrap())
            .map_err(|e| e.to_string())?;
        ensure(cm.counts() == common::confusion(&pred, &gt, 3).as_slice(), || "confusion counts differ".into())?;
    }
    Ok(format!("float ops max abs diff {worst:.1e} (<= {FLOAT_ORACLE_TOL:e}); argmax and confusion exact"))
}

fn ohem_degenerate() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let logits = Tensor::<f64>::rand_normal(vec![2, 4, 8, 8], 0.0, 2.0, &mut r);
        let labels: Vec<u8> =
            (0..128).map(|_| if r.random::<f64>() < 0.1 { 255 } else { r.random_range(0..4) }).collect();
        let g = Graph::no_grad();
        let loss = ohem_cross_entropy(&g, &g.constant(logits.clone()), &labels, &OhemConfig::disabled())
            .map_err(|e| e.to_string())?
            .value()
            .data()[0];
        let ce: Vec<f64> = common::pixel_ce(&logits, &labels, 255).into_iter().flatten().collect();
        let want = ce.iter().sum::<f64>() / ce.len() as f64;
        worst = worst.max((loss - want).abs());
    }
    ensure(worst <= OHEM_TOL, || format!("max difference {worst:e}"))?;
    Ok(format!("20 batches, max |ohem - mean ce| {worst:.1e} (<= {OHEM_TOL:e})"))
}

fn desk_training() -> Check {
    let start = Instant::now();
    let opts = TrainOptions::desk(500);
    let data = SyntheticShapes::new(0, 512);
    let mut model = Model::<f32>::build(&ModelConfig::tiny(4), 0).map_err(|e| e.to_string())?;
    let report = train(&mut model, &data, &opts, |_| {}).map_err(|e| e.to_string())?;
    let first = report.mean_loss(0..50);
    let last = report.mean_loss(450..500);
    let ratio = last / first;
    let held_out = SyntheticShapes::new(1_000_003, 64);
    let cm = evaluate(&model, &held_out, &AugmentConfig::desk(64, 128)).map_err(|e| e.to_string())?;
    let miou = cm.miou().map_err(|e| e.to_string())?.miou;
    let elapsed = start.elapsed();
    let detail = format!(
        "loss {first:.3} -> {last:.3} (ratio {ratio:.3} < {DESK_LOSS_RATIO}), held-out mIoU {miou:.3} (>= {DESK_MIOU}), {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure(ratio < DESK_LOSS_RATIO && miou >= DESK_MIOU && elapsed < DESK_BUDGET, || detail.clone())?;
    Ok(detail)
}

fn ablation() -> Check {
    let data = SyntheticShapes::new(0, 256);
    let opts = TrainOptions::desk(100);
    let mut rows = Vec::new();
    for use_sppm in [true, false] {
        for attention in [AttentionKind::Spatial, AttentionKind::None] {
            let cfg = ModelConfig { use_sppm, attention, ..ModelConfig::tiny(4) };
            let mut model = Model::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
            let report = train(&mut model, &data, &opts, |_| {}).map_err(|e| format!("{cfg:?}: {e}"))?;
            ensure(report.records.len() == 100 && report.records.iter().all(|r| r.loss.is_finite()), || {
                format!("sppm={use_sppm} attention={attention:?}: incomplete run")
            })?;
            rows.push((use_sppm, attention, model.parameter_count(), report.mean_loss(90..100)));
        }
    }
    let mut counts: Vec<_> = rows.iter().map(|r| r.2).collect();
    counts.sort_unstable();
    counts.dedup();
    ensure(counts.len() == 4, || format!("parameter counts not distinct: {rows:?}"))?;
    let summary: Vec<_> = rows
        .iter()
        .map(|(s, a, n, l)| {
            format!(
                "{}sppm/{}att {n} params loss {l:.3}",
                if *s { "+" } else { "-" },
                if *a == AttentionKind::None { "-" } else { "+" }
            )
        })
        .collect();
    Ok(summary.join("; "))
}

fn bench_ordering() -> Check {
    let t = Model::<f32>::build(&ModelConfig::pp_liteseg_t(19), 0).map_err(|e| e.to_string())?;
    let b = Model::<f32>::build(&ModelConfig::pp_liteseg_b(19), 0).map_err(|e| e.to_string())?;
    let mut fps = Vec::new();
    for (h, w) in [(256, 512), (512, 1024)] {
        let cfg = BenchConfig::new(h, w);
        let ft = bench(&t, &cfg).map_err(|e| e.to_string())?.fps;
        let fb = bench(&b, &cfg).map_err(|e| e.to_string())?.fps;
        ensure(ft > fb, || format!("{h}x{w}: T {ft:.2} FPS <= B {fb:.2} FPS"))?;
        fps.push((h, w, ft, fb));
    }
    let (small, large) = (fps[0], fps[1]);
    ensure(large.2 <= small.2 && large.3 <= small.3, || format!("FPS rose with area: {fps:?}"))?;
    let lines: Vec<_> = fps.iter().map(|(h, w, ft, fb)| format!("{h}x{w} T {ft:.2} > B {fb:.2} FPS")).collect();
    Ok(lines.join("; "))
}

fn determinism_and_serialization() -> Check {
    let data = SyntheticShapes::new(7, 32);
    let opts = TrainOptions { batch_size: 4, ..TrainOptions::desk(5) };
    let run = |threads| {
        parallel::install(Some(threads), || {
            let mut model = Model::<f32>::build(&ModelConfig::tiny(4), 9).unwrap();
            let report = train(&mut model, &data, &opts, |_| {}).unwrap();
            (model, report.to_csv())
        })
    };
    let (a, ca) = run(1);
    let (b, cb) = run(1);
    let (c, cc) = run(4);
    ensure(ca == cb && ca == cc, || "loss curves differ between runs".into())?;
    for ((_, pa), ((_, pb), (_, pc))) in a.params.iter().zip(b.params.iter().zip(c.params.iter())) {
        ensure(pa.value.bit_eq(&pb.value) && pa.value.bit_eq(&pc.value), || format!("weights differ at {}", pa.name))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("desk.ppls");
    Checkpoint::from_model(&a).save(&path).map_err(|e| e.to_string())?;
    let back = Model::<f32>::from_checkpoint(&Checkpoint::load(&path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(back.config == a.config, || "config did not round-trip".into())?;
    for ((_, pa), (_, pb)) in a.params.iter().zip(back.params.iter()) {
        ensure(pa.name == pb.name && pa.value.bit_eq(&pb.value), || format!("{} changed on reload", pa.name))?;
    }
    let resaved = Checkpoint::from_model(&back).to_bytes().map_err(|e| e.to_string())?;
    ensure(resaved == std::fs::read(&path).map_err(|e| e.to_string())?, || "re-saved bytes differ".into())?;

    let ckpt_t = Checkpoint::from_model(&Model::<f32>::build(&ModelConfig::pp_liteseg_t(19), 0).unwrap());
    let mut model_b = Model::<f32>::build(&ModelConfig::pp_liteseg_b(19), 0).unwrap();
    let err_tb = model_b.load_state(&ckpt_t).err().ok_or("T checkpoint loaded into B")?;
    let wide = ModelConfig { decoder_channels: [16, 48, 64], ..ModelConfig::tiny(4) };
    let mut model_wide = Model::<f32>::build(&wide, 0).unwrap();
    let err_tiny =
        model_wide.load_state(&Checkpoint::from_model(&a)).err().ok_or("tiny checkpoint loaded into wider decoder")?;
    Ok(format!(
        "3 runs (1 and 4 workers) bit-identical; checkpoint round-trip bit-exact; cross-config rejected ({err_tb}; {err_tiny})"
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("blend identities", blend_identities),
        ("shape suite", shape_suite),
        ("oracle equivalences", oracle_equivalences),
        ("ohem degenerate equivalence", ohem_degenerate),
        ("desk-scale training", desk_training),
        ("ablation structure", ablation),
        ("bench ordering", bench_ordering),
        ("determinism & serialization", determinism_and_serialization),
    ];
    let mut failed = Vec::new();
    writeln!(std::io::stdout().lock()).unwrap();
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let line = match &outcome {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(detail) => format!("FAIL  {name}: {detail}"),
        };
        // Written to the raw handle so the lines survive libtest output capture.
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
        if outcome.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
