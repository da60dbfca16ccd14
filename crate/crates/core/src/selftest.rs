//! Built-in numerical self-checks: finite-difference gradients, attention
//! normalization, logit reuse, baseline reduction and memory gating.

use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::grad_check_store;
use crate::graph::{Fault, Graph, Var};
use crate::params::{ParamStore, RngSeed};
use crate::temporal::{temporal_correlation_vars, CalibrationWeight, TemplateMemory};
use crate::tensor::Tensor;
use crate::transformer::{mutual_attention, AttentionConfig, DecoderLayer, MutualTransformer, TransformerSwitches};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const SOFTMAX_TOL: f64 = 1e-6;
pub const REUSE_TOL: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn within(name: impl Into<String>, max_error: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            detail: detail.into(),
        }
    }
}

fn randn(shape: &[usize], seed: RngSeed) -> Tensor {
    Tensor::randn(shape, &mut seed.rng())
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes a distinct amount to the checked scalar.
fn probe_loss(g: &mut Graph, y: Var, seed: RngSeed) -> Result<Var> {
    let w = g.constant(randn(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![4, 3], vec![3, 5]], |g, v| g.matmul(v[0], v[1])),
        ("batch_matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], |g, v| g.batch_matmul(v[0], v[1], false)),
        ("batch_matmul_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, v| g.batch_matmul(v[0], v[1], true)),
        ("softmax_axis0", vec![vec![3, 4, 2]], |g, v| g.softmax(v[0], 0)),
        ("softmax_axis1", vec![vec![3, 4, 2]], |g, v| g.softmax(v[0], 1)),
        ("softmax_axis2", vec![vec![3, 4, 2]], |g, v| g.softmax(v[0], 2)),
        ("layer_norm", vec![vec![2, 8], vec![8], vec![8]], |g, v| g.layer_norm(v[0], v[1], v[2])),
        ("relu", vec![vec![5, 3]], |g, v| Ok(g.relu(v[0]))),
        ("sigmoid", vec![vec![5, 3]], |g, v| Ok(g.sigmoid(v[0]))),
        ("scale", vec![vec![5, 3]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("global_avg_pool", vec![vec![4, 4, 2]], |g, v| g.global_avg_pool(v[0])),
        ("mean_rows", vec![vec![6, 3]], |g, v| g.mean_rows(v[0])),
        ("concat", vec![vec![4, 4, 2], vec![4, 4, 3]], |g, v| g.concat(&[v[0], v[1]], 2)),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], |g, v| g.concat(&[v[0], v[1]], 0)),
        ("conv2d", vec![vec![8, 8, 2], vec![3, 3, 2, 3]], |g, v| g.conv2d(v[0], v[1], 1, 0)),
        ("conv2d_stride2_pad1", vec![vec![8, 8, 2], vec![3, 3, 2, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1)),
        ("depthwise_correlate", vec![vec![3, 3, 4], vec![6, 6, 4]], |g, v| g.depthwise_correlate(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("add_last", vec![vec![3, 4], vec![4]], |g, v| g.add_last(v[0], v[1])),
        ("mul_last", vec![vec![3, 3, 4], vec![4]], |g, v| g.mul_last(v[0], v[1])),
        ("mul_scalar", vec![vec![3, 4], vec![1]], |g, v| g.mul_scalar(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("swap_last2", vec![vec![2, 3, 4]], |g, v| g.swap_last2(v[0])),
        ("swap_first2", vec![vec![2, 3, 4]], |g, v| g.swap_first2(v[0])),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("slice", vec![vec![3, 6]], |g, v| g.slice(v[0], 1, 2, 3)),
        ("gather_rows", vec![vec![5, 4]], |g, v| g.gather_rows(v[0], &[4, 1, 1])),
        ("sum", vec![vec![3, 2]], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![3, 2]], |g, v| Ok(g.mean(v[0]))),
    ]
}

/// Finite-difference check of every differentiable op and both losses.
pub fn op_gradient_checks(seed: RngSeed) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (ci, (name, shapes, op)) in op_cases().into_iter().enumerate() {
        let case_seed = seed.derive(ci as u64);
        let mut s = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, sh)| s.add(format!("x{i}"), randn(sh, case_seed.derive(i as u64))))
            .collect::<Result<Vec<_>>>()?;
        let r = grad_check_store(
            |g, st| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
                let y = op(g, &vars)?;
                probe_loss(g, y, case_seed.derive(99))
            },
            &s,
            GRAD_EPS,
        )?;
        out.push(CheckResult::within(
            format!("grad/{name}"),
            r.max_rel_error,
            GRAD_TOL,
            format!("{} coordinates", r.coordinates),
        ));
    }

    let mut s = ParamStore::new();
    let logits = s.add("logits", randn(&[6], seed.derive(1000)))?;
    let target = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let weight = [0.5, 0.1, 0.1, 0.5, 0.1, 0.1];
    let r = grad_check_store(
        |g, st| {
            let x = g.param(st, logits);
            g.bce_with_logits(x, &target, &weight)
        },
        &s,
        GRAD_EPS,
    )?;
    out.push(CheckResult::within("grad/bce_with_logits", r.max_rel_error, GRAD_TOL, ""));

    let mut s = ParamStore::new();
    let pred = s.add("pred", Tensor::new(&[2, 4], vec![3.1, 2.2, 5.3, 1.4, 4.0, 6.5, 2.5, 3.5])?)?;
    let tgt = [4.0, 1.5, 4.0, 2.0, 3.0, 7.0, 3.0, 3.0];
    let r = grad_check_store(
        |g, st| {
            let x = g.param(st, pred);
            g.iou_loss(x, &tgt)
        },
        &s,
        GRAD_EPS,
    )?;
    out.push(CheckResult::within("grad/iou_loss", r.max_rel_error, GRAD_TOL, ""));
    Ok(out)
}

/// Small mutual transformer used by the composed checks: 12 channels,
/// 3 heads, one encoder and two decoder layers.
pub fn small_transformer(store: &mut ParamStore, seed: RngSeed) -> Result<MutualTransformer> {
    let cfg = AttentionConfig {
        heads: 3,
        model_dim: 12,
        encoder_layers: 1,
        decoder_layers: 2,
        reduction: 2,
    };
    MutualTransformer::new(store, "transformer", cfg, &mut seed.rng())
}

/// Gradient check of the full encoder + decoder stack on 6x6x12 maps with
/// respect to every parameter and both input maps.
pub fn transformer_gradient_check(seed: RngSeed) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mt = small_transformer(&mut store, seed)?;
    let cur = store.add("input.cur", randn(&[6, 6, 12], seed.derive(1)))?;
    let hist = store.add("input.hist", randn(&[36, 12], seed.derive(2)))?;
    let r = grad_check_store(
        |g, st| {
            let (c, h) = (g.param(st, cur), g.param(st, hist));
            let h = mt.encode(g, st, h)?;
            let trace = mt.forward(g, st, c, h, TransformerSwitches::default())?;
            let a = probe_loss(g, trace.refined, seed.derive(3))?;
            let b = probe_loss(g, trace.hist, seed.derive(4))?;
            g.add(a, b)
        },
        &store,
        GRAD_EPS,
    )?;
    Ok(CheckResult::within(
        "grad/mutual_transformer_stack",
        r.max_rel_error,
        GRAD_TOL,
        format!("{} coordinates", r.coordinates),
    ))
}

/// Largest deviation from 1 of any softmax row in either mutual-attention
/// branch, over `seeds` random transformers and inputs.
pub fn attention_normalization(seeds: u64, fault: Fault) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    for s in 0..seeds {
        let seed = RngSeed(s).derive(0xA77E);
        let mut store = ParamStore::new();
        let mt = small_transformer(&mut store, seed)?;
        let mut g = Graph::with_fault(fault);
        // logits are scaled up so some rows are close to one-hot
        let cur = g.constant(randn(&[4, 5, 12], seed.derive(1)));
        let hist = g.constant(randn(&[20, 12], seed.derive(2)));
        let hist = g.scale(hist, 1.0 + s as f64 / 10.0);
        let trace = mt.forward(&mut g, &store, cur, hist, TransformerSwitches::default())?;
        for (_, m) in &trace.layers {
            for a in [m.attn_hist, m.attn_cur] {
                let t = g.value(a);
                let n = *t.shape().last().expect("rank 3");
                for row in t.data().chunks(n) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    Ok(CheckResult::within(
        "attention/softmax_rows_sum_to_one",
        worst,
        SOFTMAX_TOL,
        format!("{rows} rows over {seeds} seeds"),
    ))
}

/// Compares the current-branch attention built from transposed shared logits
/// with an independently computed no-reuse path, and checks that reuse saves
/// exactly one matrix product per decoder layer.
pub fn logits_reuse_equivalence(seeds: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut saved_ok = true;
    for s in 0..seeds {
        let seed = RngSeed(s).derive(0x2E05E);
        let cfg = AttentionConfig {
            heads: 3,
            model_dim: 12,
            encoder_layers: 1,
            decoder_layers: 1,
            reduction: 2,
        };
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, "dec", &cfg, &mut seed.rng())?;
        let h = randn(&[15, 12], seed.derive(1));
        let c = randn(&[15, 12], seed.derive(2));
        let run = |reuse: bool| -> Result<(Tensor, usize)> {
            let mut g = Graph::new();
            let (hv, cv) = (g.constant(h.clone()), g.constant(c.clone()));
            let out = mutual_attention(&mut g, &store, &layer, &cfg, hv, cv, reuse)?;
            Ok((g.value(out.attn_cur).clone(), g.matmul_count()))
        };
        let (shared, n_shared) = run(true)?;
        let (own, n_own) = run(false)?;
        worst = worst.max(shared.max_abs_diff(&own));
        saved_ok &= n_own == n_shared + 1;
    }
    let mut r = CheckResult::within(
        "attention/logits_reuse_equivalence",
        worst,
        REUSE_TOL,
        format!("{seeds} seeds; one matmul saved per layer: {saved_ok}"),
    );
    r.passed &= saved_ok;
    Ok(r)
}

/// With beta = 0 the temporal path must reproduce plain depth-wise
/// correlation with the initial template bit for bit.
pub fn baseline_reduction(seeds: u64) -> Result<CheckResult> {
    let mut mismatches = 0usize;
    for s in 0..seeds {
        let seed = RngSeed(s).derive(0xBA5E);
        let mut store = ParamStore::new();
        let cw = CalibrationWeight::new(&mut store, "temporal", 6, 3, &mut seed.rng())?;
        let mut g = Graph::new();
        let t0 = g.constant(randn(&[3, 3, 6], seed.derive(1)));
        let t_prev = g.constant(randn(&[3, 3, 6], seed.derive(2)));
        let feats: Vec<Var> = (0..3)
            .map(|i| g.constant(randn(&[7, 7, 6], seed.derive(10 + i))))
            .collect();
        let search = g.constant(randn(&[7, 7, 6], seed.derive(3)));
        let fused = temporal_correlation_vars(&mut g, &store, &cw, t0, t_prev, &feats, search)?;
        let plain = g.depthwise_correlate(t0, search)?;
        if !g.value(fused.map).bit_eq(g.value(plain)) {
            mismatches += 1;
        }
    }
    Ok(CheckResult::within(
        "temporal/beta_zero_is_plain_correlation",
        mismatches as f64,
        0.0,
        format!("{mismatches} of {seeds} maps differ"),
    ))
}

/// One scripted gating scenario: scores for frames `1..`, and the frame ids
/// expected in the queue (oldest first) afterwards.
pub struct GatingScenario {
    pub scores: &'static [f64],
    pub expected: [usize; 3],
}

pub const GATING_SCENARIOS: [GatingScenario; 5] = [
    GatingScenario { scores: &[4.0, 2.0, 5.0], expected: [0, 1, 3] },
    GatingScenario { scores: &[3.0, 3.0, 3.0], expected: [0, 0, 0] },
    GatingScenario { scores: &[3.0001, 10.0, 7.0, 4.0], expected: [2, 3, 4] },
    GatingScenario { scores: &[1.0, -5.0, 2.9999], expected: [0, 0, 0] },
    GatingScenario { scores: &[5.0, 1.0, 5.0, 1.0, 5.0], expected: [1, 3, 5] },
];

/// Replays [`GATING_SCENARIOS`] against a memory with tau = 3 and capacity 3.
/// Frame `i` contributes a feature filled with `i`.
pub fn memory_gating() -> Result<CheckResult> {
    let fill = |i: usize| Tensor::full(&[2, 2, 1], i as f64);
    let mut failures = Vec::new();
    for (k, sc) in GATING_SCENARIOS.iter().enumerate() {
        let mut mem = TemplateMemory::new(fill(0), fill(0), 3, 3.0)?;
        let mut last_template = 0;
        for (i, &s) in sc.scores.iter().enumerate() {
            let frame = i + 1;
            if mem.update(fill(frame), fill(frame), s)? {
                last_template = frame;
            }
        }
        let got: Vec<usize> = mem.feats().map(|f| f.data()[0] as usize).collect();
        let prev = mem.t_prev().data()[0] as usize;
        if got != sc.expected || prev != last_template {
            failures.push(format!("scenario {k}: queue {got:?}, expected {:?}", sc.expected));
        }
    }
    Ok(CheckResult::within(
        "temporal/memory_gating_fifo",
        failures.len() as f64,
        0.0,
        if failures.is_empty() {
            format!("{} scenarios", GATING_SCENARIOS.len())
        } else {
            failures.join("; ")
        },
    ))
}

/// Every core check; `fault` is injected into the attention check only.
pub fn run_core_checks(fault: Fault) -> Result<Vec<CheckResult>> {
    let mut out = op_gradient_checks(RngSeed(7))?;
    out.push(transformer_gradient_check(RngSeed(8))?);
    out.push(attention_normalization(100, fault)?);
    out.push(logits_reuse_equivalence(100)?);
    out.push(baseline_reduction(10)?);
    out.push(memory_gating()?);
    Ok(out)
}
