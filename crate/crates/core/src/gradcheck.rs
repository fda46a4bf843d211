//! Central finite-difference checks of every differentiable op and block.
//!
//! Each case maps inputs (and optionally block parameters) to a tensor; the
//! checked objective is `sum(out * R)` for a fixed random `R`, evaluated in
//! `f64`. Probes where the two one-sided differences disagree sharply sit on
//! a kink (ReLU, max, OHEM selection) and are reported as skipped.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NormStats, Var};
use crate::blocks::{channel_attention, spatial_attention, AttentionKind, Fusion, SegHead, SppmBlock, UafmBlock};
use crate::error::Result;
use crate::nn::{init_rng, Mode, ParamBuilder, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;
use crate::train::loss::{ohem_cross_entropy, OhemConfig};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;
/// Second difference (scaled by `1/h`) above which a probe counts as a kink.
const KINK: f64 = 1e-2;
const MAX_PROBES: usize = 48;
/// Largest tolerated share of skipped probes per case.
const MAX_SKIP_FRACTION: f64 = 0.1;

type CaseFn = Box<dyn Fn(&Session<'_, f64>, &[Var<f64>]) -> Result<Var<f64>> + Send + Sync>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub params: ParamStore<f64>,
    pub mode: Mode,
    pub f: CaseFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&Session<'_, f64>, &[Var<f64>]) -> Result<Var<f64>> + Send + Sync + 'static,
    ) -> Self {
        GradCase { name: name.into(), inputs, params: ParamStore::new(), mode: Mode::Train, f: Box::new(f) }
    }

    pub fn with_params(mut self, params: ParamStore<f64>, mode: Mode) -> Self {
        self.params = params;
        self.mode = mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
    pub probes: usize,
    pub skipped: usize,
    pub passed: bool,
}

fn probe_indices(len: usize) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|i| i * len / MAX_PROBES).collect()
    }
}

fn objective(case: &GradCase, inputs: &[Tensor<f64>], params: &ParamStore<f64>, proj: &Tensor<f64>) -> Result<f64> {
    let g = Graph::no_grad();
    let s = Session::new(&g, params, case.mode);
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.f)(&s, &vars)?;
    Ok(out.value().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

fn with_element(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut v = t.to_vec();
    v[i] += delta;
    Tensor::from_parts(t.shape().to_vec(), v)
}

/// Runs the finite-difference comparison for one case.
pub fn check(case: &GradCase, seed: u64) -> Result<GradReport> {
    let mut rng = init_rng(seed);
    // Output shape, then the fixed projection.
    let shape = {
        let g = Graph::no_grad();
        let s = Session::new(&g, &case.params, case.mode);
        let vars: Vec<_> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        (case.f)(&s, &vars)?.shape().to_vec()
    };
    let proj = Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, &mut rng);

    let g = Graph::new();
    let s = Session::new(&g, &case.params, case.mode);
    let leaves: Vec<_> = case.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.f)(&s, &leaves)?;
    let loss = g.sum(&g.mul(&out, &g.constant(proj.clone()))?)?;
    g.backward(&loss)?;
    let f0 = loss.value().data()[0];

    // (label, analytic gradient, evaluation with one element perturbed)
    type Probe<'a> = (String, Vec<f64>, Box<dyn Fn(usize, f64) -> Result<f64> + 'a>);
    let mut targets: Vec<Probe<'_>> = Vec::new();
    let proj = &proj;
    for (k, (leaf, t)) in leaves.iter().zip(&case.inputs).enumerate() {
        let grad = g.grad(leaf).map_or_else(|| vec![0.0; t.numel()], |g| g.to_vec());
        targets.push((
            format!("input{k}"),
            grad,
            Box::new(move |i, d| {
                let mut inputs = case.inputs.clone();
                inputs[k] = with_element(t, i, d);
                objective(case, &inputs, &case.params, proj)
            }),
        ));
    }
    let param_grads = s.param_grads();
    for (id, p) in case.params.iter() {
        if !p.kind.trainable() {
            continue;
        }
        let grad = param_grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map_or_else(|| vec![0.0; p.value.numel()], |(_, g)| g.to_vec());
        targets.push((
            p.name.clone(),
            grad,
            Box::new(move |i, d| {
                let mut params = case.params.clone();
                params.set(id, with_element(case.params.value(id), i, d))?;
                objective(case, &case.inputs, &params, proj)
            }),
        ));
    }

    let mut report =
        GradReport { name: case.name.clone(), max_rel_error: 0.0, worst: None, probes: 0, skipped: 0, passed: true };
    let h = FD_STEP;
    for (label, grad, eval) in &targets {
        for i in probe_indices(grad.len()) {
            let fp = eval(i, h)?;
            let fm = eval(i, -h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grad[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.probes += 1;
            if rel >= REL_TOL && ((fp - 2.0 * f0 + fm) / h).abs() > KINK {
                report.skipped += 1;
                continue;
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((label.clone(), i));
            }
        }
    }
    report.passed =
        report.max_rel_error < REL_TOL && (report.skipped as f64) <= MAX_SKIP_FRACTION * report.probes as f64;
    Ok(report)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -2.0, 2.0, rng)
}

/// Distinct values in [-2, 2] spaced well beyond the finite-difference
/// step, so max reductions have no near-ties.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let step = 4.0 / n.max(2) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| -2.0 + step * (i as f64 + 0.5 + rng.random_range(-0.2..0.2))).collect();
    v.shuffle(rng);
    Tensor::from_parts(shape.to_vec(), v)
}

/// Values in [-2, -0.1] ∪ [0.1, 2], away from the ReLU kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), 0.5, 1.5, rng)
}

/// Moves block parameters away from their initial values so that BN scale,
/// shifts and biases take generic values.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = match p.kind {
            ParamKind::ConvWeight => p.value.clone(),
            ParamKind::NormScale | ParamKind::RunningVar => positive(&shape, rng),
            ParamKind::NormShift | ParamKind::Bias | ParamKind::RunningMean => {
                Tensor::rand_uniform(shape, -0.5, 0.5, rng)
            }
        };
    }
}

fn block_store(seed: u64, build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<()>) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    randomize(&mut store, &mut rng);
    Ok(store)
}

/// Two outputs as one tensor, so both enter the objective.
fn pair(g: &Graph<f64>, (a, b): (Var<f64>, Var<f64>)) -> Result<Var<f64>> {
    g.concat(&[&a, &b], 1)
}

/// Every op and composite block on seeded inputs no larger than 2×4×8×8.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = init_rng(seed);
    let r = &mut rng;
    let mut cases = vec![
        GradCase::new(
            "conv2d 3x3 pad 1",
            vec![uniform(&[2, 3, 6, 6], r), uniform(&[4, 3, 3, 3], r), uniform(&[4], r)],
            |s, v| s.graph.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1),
        ),
        GradCase::new("conv2d 3x3 stride 2", vec![uniform(&[2, 2, 7, 7], r), uniform(&[3, 2, 3, 3], r)], |s, v| {
            s.graph.conv2d(&v[0], &v[1], None, 2, 1)
        }),
        GradCase::new(
            "conv2d 1x1",
            vec![uniform(&[2, 4, 5, 5], r), uniform(&[3, 4, 1, 1], r), uniform(&[3], r)],
            |s, v| s.graph.conv2d(&v[0], &v[1], Some(&v[2]), 1, 0),
        ),
        GradCase::new(
            "batch_norm train",
            vec![uniform(&[2, 3, 4, 4], r), positive(&[3], r), uniform(&[3], r)],
            |s, v| Ok(s.graph.batch_norm(&v[0], &v[1], &v[2], NormStats::Batch, 1e-5)?.0),
        ),
        {
            let (mean, var) = (uniform(&[3], r).to_vec(), positive(&[3], r).to_vec());
            GradCase::new(
                "batch_norm eval",
                vec![uniform(&[2, 3, 4, 4], r), positive(&[3], r), uniform(&[3], r)],
                move |s, v| {
                    Ok(s.graph.batch_norm(&v[0], &v[1], &v[2], NormStats::Running { mean: &mean, var: &var }, 1e-5)?.0)
                },
            )
        },
        GradCase::new("relu", vec![off_zero(&[2, 4, 8, 8], r)], |s, v| s.graph.relu(&v[0])),
        GradCase::new("sigmoid", vec![uniform(&[2, 4, 8, 8], r)], |s, v| s.graph.sigmoid(&v[0])),
        GradCase::new("bilinear_upsample x2", vec![uniform(&[2, 3, 4, 4], r)], |s, v| {
            s.graph.bilinear_upsample(&v[0], 8, 8)
        }),
        GradCase::new("bilinear_upsample uneven", vec![uniform(&[2, 3, 3, 5], r)], |s, v| {
            s.graph.bilinear_upsample(&v[0], 7, 8)
        }),
        GradCase::new("resize_bilinear down", vec![uniform(&[2, 2, 8, 8], r)], |s, v| {
            s.graph.resize_bilinear(&v[0], 3, 5)
        }),
        GradCase::new("adaptive_avg_pool 2x2", vec![uniform(&[2, 3, 6, 6], r)], |s, v| {
            s.graph.adaptive_avg_pool(&v[0], 2, 2)
        }),
        GradCase::new("adaptive_avg_pool uneven", vec![uniform(&[2, 3, 5, 7], r)], |s, v| {
            s.graph.adaptive_avg_pool(&v[0], 4, 4)
        }),
        GradCase::new("adaptive_avg_pool overlapping", vec![uniform(&[2, 2, 2, 3], r)], |s, v| {
            s.graph.adaptive_avg_pool(&v[0], 4, 4)
        }),
        GradCase::new("channel_mean_max", vec![spaced(&[2, 4, 6, 6], r)], |s, v| {
            pair(s.graph, s.graph.channel_mean_max(&v[0])?)
        }),
        GradCase::new("channel_mean", vec![uniform(&[2, 4, 6, 6], r)], |s, v| s.graph.channel_mean(&v[0])),
        GradCase::new("spatial_avg_max", vec![spaced(&[2, 4, 6, 6], r)], |s, v| {
            pair(s.graph, s.graph.spatial_avg_max(&v[0])?)
        }),
        GradCase::new(
            "concat",
            vec![uniform(&[2, 1, 4, 4], r), uniform(&[2, 3, 4, 4], r), uniform(&[2, 2, 4, 4], r)],
            |s, v| s.graph.concat(&[&v[0], &v[1], &v[2]], 1),
        ),
        GradCase::new("add broadcast spatial", vec![uniform(&[2, 3, 4, 4], r), uniform(&[2, 1, 4, 4], r)], |s, v| {
            s.graph.add(&v[0], &v[1])
        }),
        GradCase::new("add broadcast channel", vec![uniform(&[2, 3, 4, 4], r), uniform(&[2, 3, 1, 1], r)], |s, v| {
            s.graph.add(&v[0], &v[1])
        }),
        GradCase::new("mul broadcast spatial", vec![uniform(&[2, 3, 4, 4], r), uniform(&[2, 1, 4, 4], r)], |s, v| {
            s.graph.mul(&v[0], &v[1])
        }),
        GradCase::new("mul broadcast channel", vec![uniform(&[2, 3, 4, 4], r), uniform(&[2, 3, 1, 1], r)], |s, v| {
            s.graph.mul(&v[0], &v[1])
        }),
        GradCase::new("mul scalar", vec![uniform(&[2, 3, 4, 4], r), uniform(&[1], r)], |s, v| {
            s.graph.mul(&v[0], &v[1])
        }),
        GradCase::new("affine", vec![uniform(&[2, 3, 4, 4], r)], |s, v| s.graph.affine(&v[0], -0.75, 0.25)),
        GradCase::new(
            "blend spatial alpha",
            vec![
                uniform(&[2, 3, 4, 4], r),
                uniform(&[2, 3, 4, 4], r),
                Tensor::rand_uniform(vec![2, 1, 4, 4], 0.05, 0.95, r),
            ],
            |s, v| s.graph.blend(&v[0], &v[1], &v[2]),
        ),
        GradCase::new(
            "blend channel alpha",
            vec![
                uniform(&[2, 3, 4, 4], r),
                uniform(&[2, 3, 4, 4], r),
                Tensor::rand_uniform(vec![2, 3, 1, 1], 0.05, 0.95, r),
            ],
            |s, v| s.graph.blend(&v[0], &v[1], &v[2]),
        ),
        GradCase::new("sum", vec![uniform(&[2, 3, 4, 4], r)], |s, v| s.graph.sum(&v[0])),
        GradCase::new("mean", vec![uniform(&[2, 3, 4, 4], r)], |s, v| s.graph.mean(&v[0])),
    ];

    let labels: Vec<u8> = (0..2 * 16).map(|_| if r.random_bool(0.15) { 255 } else { r.random_range(0..3) }).collect();
    let weights: Vec<f64> = labels.iter().map(|&l| if l == 255 { 0.0 } else { r.random_range(0.0..1.0) }).collect();
    let ce_labels = labels.clone();
    cases.push(GradCase::new("softmax_cross_entropy", vec![uniform(&[2, 3, 4, 4], r)], move |s, v| {
        s.graph.softmax_cross_entropy(&v[0], &ce_labels, &weights)
    }));
    let ohem_labels = labels;
    cases.push(GradCase::new("ohem loss", vec![uniform(&[2, 3, 4, 4], r)], move |s, v| {
        let cfg = OhemConfig { prob_threshold: 0.7, min_kept: Some(6), ignore_index: 255 };
        ohem_cross_entropy(s.graph, &v[0], &ohem_labels, &cfg)
    }));

    cases.push(GradCase::new(
        "spatial attention",
        vec![spaced(&[2, 4, 6, 6], r), spaced(&[2, 4, 6, 6], r), uniform(&[1, 4, 3, 3], r), uniform(&[1], r)],
        |s, v| spatial_attention(s.graph, &v[0], &v[1], &v[2], Some(&v[3]), true),
    ));
    cases.push(GradCase::new(
        "spatial attention without max",
        vec![uniform(&[2, 4, 6, 6], r), uniform(&[2, 4, 6, 6], r), uniform(&[1, 2, 3, 3], r), uniform(&[1], r)],
        |s, v| spatial_attention(s.graph, &v[0], &v[1], &v[2], Some(&v[3]), false),
    ));
    cases.push(GradCase::new(
        "channel attention",
        vec![spaced(&[2, 3, 5, 5], r), spaced(&[2, 3, 5, 5], r), uniform(&[3, 12, 1, 1], r), uniform(&[3], r)],
        |s, v| channel_attention(s.graph, &v[0], &v[1], &v[2], Some(&v[3])),
    ));

    let kinds = [
        ("spatial", AttentionKind::Spatial, Fusion::Blend),
        ("spatial without max", AttentionKind::SpatialNoMax, Fusion::Blend),
        ("channel", AttentionKind::Channel, Fusion::Blend),
        ("none", AttentionKind::None, Fusion::Blend),
        ("sum", AttentionKind::None, Fusion::Sum),
    ];
    for (i, (label, kind, fusion)) in kinds.into_iter().enumerate() {
        let mut block = None;
        let store = block_store(seed.wrapping_add(100 + i as u64), |b| {
            block = Some(UafmBlock::new(b, "uafm", 4, 3, 2, kind, fusion)?);
            Ok(())
        })?;
        let block = block.unwrap();
        cases.push(
            GradCase::new(
                format!("uafm_fuse {label}"),
                vec![uniform(&[2, 4, 2, 3], r), uniform(&[2, 3, 4, 6], r)],
                move |s, v| block.forward(s, &v[0], &v[1]),
            )
            .with_params(store, Mode::Train),
        );
    }

    for (label, mode) in [("train", Mode::Train), ("eval", Mode::Eval)] {
        let mut block = None;
        let store = block_store(seed.wrapping_add(200), |b| {
            block = Some(SppmBlock::new(b, "sppm", 4, 3, 3)?);
            Ok(())
        })?;
        let block = block.unwrap();
        cases.push(
            GradCase::new(format!("sppm_forward {label}"), vec![uniform(&[2, 4, 4, 4], r)], move |s, v| {
                block.forward(s, &v[0])
            })
            .with_params(store, mode),
        );
    }

    let mut head = None;
    let store = block_store(seed.wrapping_add(300), |b| {
        head = Some(SegHead::new(b, "head", 4, 3, 3)?);
        Ok(())
    })?;
    let head = head.unwrap();
    cases.push(
        GradCase::new("seg_head", vec![uniform(&[2, 4, 2, 2], r)], move |s, v| head.forward(s, &v[0], 8, 8))
            .with_params(store, Mode::Train),
    );
    Ok(cases)
}

/// Checks every case of [`standard_suite`].
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>> {
    standard_suite(seed)?.iter().enumerate().map(|(i, c)| check(c, seed.wrapping_add(i as u64))).collect()
}
