//! Temporal correlation: depth-wise correlation against a template that is
//! refreshed by multi-template fusion from a confidence-gated memory.
//!
//! The fused template is
//!
//! ```text
//! T_t   = T_0 + beta * (alpha_t ⊙ T_{t-1})
//! alpha = W1 · GAP(concat_channels(F_{b-n}, ..., F_{b-1}))
//! ```
//!
//! where `F_{b-i}` are search features zero-masked outside the predicted box
//! and `⊙` scales each channel of `T_{t-1}` by the matching entry of `alpha`.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default memory length.
pub const DEFAULT_CAPACITY: usize = 3;
/// Default acceptance threshold on the raw confidence logit.
pub const DEFAULT_TAU: f64 = 3.0;

/// Valid-mode correlation output `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub map: Tensor,
}

impl CorrelationMap {
    pub fn new(map: Tensor) -> Result<Self> {
        if map.rank() != 3 {
            return Err(dim_err("correlation_map", format!("expected [H, W, C], got {:?}", map.shape())));
        }
        Ok(Self { map })
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[2]
    }
}

/// Depth-wise correlation of two plain tensors (no gradient tracking).
pub fn depthwise_correlate(template: &Tensor, search: &Tensor) -> Result<CorrelationMap> {
    let mut g = Graph::new();
    let t = g.constant(template.clone());
    let s = g.constant(search.clone());
    let m = g.depthwise_correlate(t, s)?;
    CorrelationMap::new(g.value(m).clone())
}

/// Learnable pieces of the temporal correlation: the fusion weight `beta`
/// (starts at zero) and the calibration map `W1: nC -> C` (with bias).
#[derive(Debug, Clone)]
pub struct CalibrationWeight {
    pub beta: ParamId,
    pub w1: Linear,
    pub history: usize,
    pub channels: usize,
}

impl CalibrationWeight {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        history: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if history == 0 {
            return Err(Error::Input("calibration weight needs at least one memory slot".into()));
        }
        let beta = store.add_const(format!("{name}.beta"), &[1], 0.0)?;
        let w1 = Linear::new(store, &format!("{name}.w1"), history * channels, channels, rng)?;
        Ok(Self {
            beta,
            w1,
            history,
            channels,
        })
    }

    pub fn num_params(channels: usize, history: usize) -> usize {
        1 + Linear::num_params(history * channels, channels)
    }
}

/// Initial template, previous fused template and a FIFO of bbox-masked
/// search features. The queue always holds exactly `capacity` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMemory {
    t0: Tensor,
    t_prev: Tensor,
    feats: VecDeque<Tensor>,
    capacity: usize,
    tau: f64,
}

impl TemplateMemory {
    /// Starts a memory from the first frame: `t_prev = t0` and the queue is
    /// `capacity` copies of the first masked feature.
    pub fn new(t0: Tensor, first_masked: Tensor, capacity: usize, tau: f64) -> Result<Self> {
        if t0.rank() != 3 || first_masked.rank() != 3 || t0.shape()[2] != first_masked.shape()[2] {
            return Err(dim_err(
                "template_memory",
                format!("template {:?} vs feature {:?}", t0.shape(), first_masked.shape()),
            ));
        }
        if !tau.is_finite() && tau != f64::INFINITY {
            return Err(Error::Input(format!("invalid threshold {tau}")));
        }
        Ok(Self {
            t_prev: t0.clone(),
            t0,
            feats: std::iter::repeat(first_masked).take(capacity).collect(),
            capacity,
            tau,
        })
    }

    pub fn t0(&self) -> &Tensor {
        &self.t0
    }

    pub fn t_prev(&self) -> &Tensor {
        &self.t_prev
    }

    /// Oldest first.
    pub fn feats(&self) -> impl Iterator<Item = &Tensor> {
        self.feats.iter()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    /// Accepts the frame when `score > tau`: pushes `masked_feat`, drops the
    /// oldest entry and replaces `t_prev`. Returns whether it was accepted.
    pub fn update(&mut self, masked_feat: Tensor, new_template: Tensor, score: f64) -> Result<bool> {
        if !score.is_finite() {
            return Err(Error::Input(format!("non-finite confidence score {score}")));
        }
        if score <= self.tau {
            return Ok(false);
        }
        if self.capacity > 0 {
            self.feats.pop_front();
            self.feats.push_back(masked_feat);
        }
        self.t_prev = new_template;
        Ok(true)
    }

    /// Scalars held by the memory; constant for a fixed configuration.
    pub fn numel(&self) -> usize {
        self.t0.numel() + self.t_prev.numel() + self.feats.iter().map(Tensor::numel).sum::<usize>()
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        for t in std::iter::once(&self.t0).chain([&self.t_prev]).chain(self.feats.iter()) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Result of [`mask_by_bbox`].
#[derive(Debug, Clone)]
pub struct MaskedFeature {
    pub feature: Tensor,
    /// True when the box projected onto no grid cell.
    pub empty: bool,
}

/// Zeroes every cell of `feature[H, W, C]` outside the box. The box is in
/// image pixels aligned with the grid (cell `i` covers
/// `[i * stride, (i + 1) * stride)`); its extent is divided by `stride` and
/// rounded outward.
pub fn mask_by_bbox(feature: &Tensor, bbox: &BBox, stride: usize) -> Result<MaskedFeature> {
    bbox.validate()?;
    if feature.rank() != 3 || stride == 0 {
        return Err(dim_err("mask_by_bbox", format!("feature {:?}, stride {stride}", feature.shape())));
    }
    let (h, w, c) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let s = stride as f64;
    let span = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let a = (lo / s).floor().clamp(0.0, n as f64) as usize;
        let b = (hi / s).ceil().clamp(0.0, n as f64) as usize;
        (a, b.max(a))
    };
    let (xa, xb) = span(bbox.x0(), bbox.x1(), w);
    let (ya, yb) = span(bbox.y0(), bbox.y1(), h);
    let mut out = Tensor::zeros(feature.shape());
    let src = feature.data();
    let dst = out.data_mut();
    for y in ya..yb {
        for x in xa..xb {
            let o = (y * w + x) * c;
            dst[o..o + c].copy_from_slice(&src[o..o + c]);
        }
    }
    Ok(MaskedFeature {
        feature: out,
        empty: xa == xb || ya == yb,
    })
}

/// `alpha = W1(GAP(concat_channels(feats)))`, a length-C vector.
pub fn compute_alpha(g: &mut Graph, store: &ParamStore, cw: &CalibrationWeight, feats: &[Var]) -> Result<Var> {
    if feats.is_empty() {
        return Err(dim_err("compute_alpha", "empty feature queue"));
    }
    let cat = g.concat(feats, 2)?;
    let pooled = g.global_avg_pool(cat)?;
    if g.shape(pooled)[0] != cw.w1.in_dim {
        return Err(dim_err(
            "compute_alpha",
            format!(
                "{} pooled channels from {} features, but W1 expects {}",
                g.shape(pooled)[0],
                feats.len(),
                cw.w1.in_dim
            ),
        ));
    }
    cw.w1.forward_vec(g, store, pooled)
}

/// `T_t = T_0 + beta * (alpha ⊙ T_{t-1})`.
pub fn fuse_templates(g: &mut Graph, t0: Var, t_prev: Var, alpha: Var, beta: Var) -> Result<Var> {
    let c = *g.shape(t0).last().expect("rank 3");
    if g.shape(alpha) != [c] {
        return Err(dim_err(
            "fuse_templates",
            format!("alpha {:?} does not match {c} template channels", g.shape(alpha)),
        ));
    }
    let scaled = g.mul_last(t_prev, alpha)?;
    let weighted = g.mul_scalar(scaled, beta)?;
    g.add(t0, weighted)
}

/// Output of [`temporal_correlation_forward`].
#[derive(Debug, Clone, Copy)]
pub struct TemporalOutput {
    pub map: Var,
    pub fused: Var,
    pub alpha: Var,
}

/// Computes alpha, fuses the template and correlates it with `search`.
/// Memory contents enter the graph as constants.
pub fn temporal_correlation_forward(
    g: &mut Graph,
    store: &ParamStore,
    cw: &CalibrationWeight,
    mem: &TemplateMemory,
    search: Var,
) -> Result<TemporalOutput> {
    let feats: Vec<Var> = mem.feats().map(|f| g.constant(f.clone())).collect();
    let t0 = g.constant(mem.t0().clone());
    let t_prev = g.constant(mem.t_prev().clone());
    temporal_correlation_vars(g, store, cw, t0, t_prev, &feats, search)
}

/// Same as [`temporal_correlation_forward`] with every input already bound
/// to the graph (used by gradient checks and training).
pub fn temporal_correlation_vars(
    g: &mut Graph,
    store: &ParamStore,
    cw: &CalibrationWeight,
    t0: Var,
    t_prev: Var,
    feats: &[Var],
    search: Var,
) -> Result<TemporalOutput> {
    let alpha = compute_alpha(g, store, cw, feats)?;
    let beta = g.param(store, cw.beta);
    let fused = fuse_templates(g, t0, t_prev, alpha, beta)?;
    let map = g.depthwise_correlate(fused, search)?;
    Ok(TemporalOutput { map, fused, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::RngSeed;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut RngSeed(seed).rng())
    }

    #[test]
    fn identity_and_zero_templates() {
        let s = randn(&[5, 6, 3], 1);
        let m = depthwise_correlate(&Tensor::full(&[1, 1, 3], 1.0), &s).unwrap();
        assert!(m.map.bit_eq(&s));
        let z = depthwise_correlate(&Tensor::zeros(&[2, 2, 3]), &s).unwrap();
        assert!(z.map.data().iter().all(|&v| v == 0.0));
        assert_eq!((z.height(), z.width()), (4, 5));
        assert!(depthwise_correlate(&Tensor::zeros(&[7, 2, 3]), &s).is_err());
    }

    #[test]
    fn full_frame_box_keeps_feature() {
        let f = randn(&[8, 8, 2], 2);
        let b = BBox::from_corner(0.0, 0.0, 64.0, 64.0).unwrap();
        let m = mask_by_bbox(&f, &b, 8).unwrap();
        assert!(m.feature.bit_eq(&f) && !m.empty);
    }

    #[test]
    fn outside_box_gives_empty_zero_map() {
        let f = randn(&[8, 8, 2], 2);
        let b = BBox::from_corner(100.0, 100.0, 10.0, 10.0).unwrap();
        let m = mask_by_bbox(&f, &b, 8).unwrap();
        assert!(m.empty);
        assert!(m.feature.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_box_matches_index_projection() {
        let f = Tensor::full(&[8, 8, 1], 1.0);
        // pixels [20, 44) -> cells floor(2.5)=2 .. ceil(5.5)=6
        let b = BBox::from_corner(20.0, 20.0, 24.0, 24.0).unwrap();
        let m = mask_by_bbox(&f, &b, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..6).contains(&x) && (2..6).contains(&y);
                assert_eq!(m.feature.at(&[y, x, 0]), if inside { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn update_is_strict_and_fifo() {
        let t0 = Tensor::zeros(&[1, 1, 1]);
        let f = |v: f64| Tensor::full(&[2, 2, 1], v);
        let mut mem = TemplateMemory::new(t0.clone(), f(0.0), 3, 3.0).unwrap();
        assert!(!mem.update(f(9.0), Tensor::full(&[1, 1, 1], 9.0), 3.0).unwrap());
        assert!(mem.t_prev().bit_eq(&t0));
        assert!(mem.update(f(1.0), Tensor::full(&[1, 1, 1], 1.0), 4.0).unwrap());
        let firsts: Vec<f64> = mem.feats().map(|t| t.data()[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 1.0]);
        assert_eq!(mem.t_prev().data()[0], 1.0);
        assert!(mem.update(f(1.0), t0.clone(), f64::NAN).is_err());
    }

    #[test]
    fn wrong_history_length_is_dimension_error() {
        let mut store = ParamStore::new();
        let cw = CalibrationWeight::new(&mut store, "tc", 2, 3, &mut RngSeed(1).rng()).unwrap();
        let mut g = Graph::new();
        let feats: Vec<Var> = (0..2).map(|i| g.constant(randn(&[3, 3, 2], i))).collect();
        let err = compute_alpha(&mut g, &store, &cw, &feats).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
