use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{context_side, crop_patch, crop_window, CropWindow, Image};
use crate::params::{ParamStore, RngSeed, Sgd};
use crate::temporal::mask_by_bbox;
use crate::tensor::Tensor;

use super::model::{MtModel, Network};
use super::{Ablation, Switches, TrackerConfig};

/// Frames and ground-truth boxes of one training sequence.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub frames: Vec<Image>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Largest frame-index gap between template and search frames.
    pub max_gap: usize,
    /// Historical frames are drawn from this many frames before the search
    /// frame (never before the template frame).
    pub hist_span: usize,
    /// Uniform search-center jitter, in search-crop pixels.
    pub shift_jitter: f64,
    /// Log-uniform jitter of the search crop side.
    pub scale_jitter: f64,
    /// IoU a cell-centered ground-truth-sized box needs to be positive.
    pub pos_iou: f64,
    pub grad_clip: f64,
    pub ablation: Ablation,
    pub seed: RngSeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            samples_per_epoch: 512,
            lr_start: 5e-3,
            lr_end: 5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_gap: 100,
            hist_span: 10,
            shift_jitter: 24.0,
            scale_jitter: 0.15,
            pos_iou: 0.6,
            grad_clip: 10.0,
            ablation: Ablation::Full,
            seed: RngSeed::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(Error::Input("epochs, batch_size and samples_per_epoch must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Input("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate of `epoch`, interpolated geometrically from `start` at the
/// first epoch to `end` at the last.
pub fn lr_at(epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    start * (end / start).powf(t)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean sample loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
}

/// Classification labels and regression targets on the correlation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    /// 1 for positive cells, 0 otherwise; row-major.
    pub labels: Vec<f64>,
    /// Positive cells whose center lies inside the box.
    pub reg_cells: Vec<usize>,
    /// `(l, t, r, b)` per regression cell, in crop pixels.
    pub reg_targets: Vec<f64>,
}

/// A cell is positive when its center lies inside `gt` (crop coordinates)
/// and a `gt`-sized box centered on it has IoU above `pos_iou`. When no
/// cell qualifies the cell nearest the box center is used.
pub fn assign_targets(cfg: &TrackerConfig, gt: &BBox, pos_iou: f64) -> CellTargets {
    let n = cfg.map_size();
    let mut labels = vec![0.0; n * n];
    let mut positives = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (cfg.cell_center(j), cfg.cell_center(i));
            let cand = BBox { cx: x, cy: y, ..*gt };
            if gt.contains_point(x, y) && cand.iou(gt) > pos_iou {
                positives.push(i * n + j);
            }
        }
    }
    if positives.is_empty() {
        let dist = |c: usize| {
            let (x, y) = (cfg.cell_center(c % n), cfg.cell_center(c / n));
            (x - gt.cx).hypot(y - gt.cy)
        };
        let nearest = (0..n * n)
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
            .expect("non-empty grid");
        positives.push(nearest);
    }
    let mut reg_cells = Vec::new();
    let mut reg_targets = Vec::new();
    for &c in &positives {
        labels[c] = 1.0;
        let (x, y) = (cfg.cell_center(c % n), cfg.cell_center(c / n));
        if gt.contains_point(x, y) {
            reg_cells.push(c);
            reg_targets.extend([x - gt.x0(), y - gt.y0(), gt.x1() - x, gt.y1() - y]);
        }
    }
    CellTargets {
        labels,
        reg_cells,
        reg_targets,
    }
}

/// Freezes the parameters a variant never uses, so they keep their initial
/// values (in particular beta stays 0 without temporal fusion).
fn freeze_unused(store: &mut ParamStore, sw: Switches) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| {
            let n = p.name.as_str();
            (!sw.temporal && n.starts_with("temporal."))
                || (!sw.transformer && n.starts_with("transformer."))
                || (!sw.encoder && n.starts_with("transformer.encoder"))
                || (!sw.filter && n.contains(".filter."))
        })
        .map(|(id, _)| id)
        .collect();
    store.unfreeze_all();
    for id in ids {
        store.freeze(id);
    }
}

struct Sampler<'a> {
    model: &'a MtModel,
    store: &'a ParamStore,
    data: &'a [TrainSequence],
    tc: &'a TrainConfig,
    sw: Switches,
}

impl Sampler<'_> {
    fn cfg(&self) -> &TrackerConfig {
        &self.model.cfg
    }

    /// Search-crop window around `gt`, optionally jittered.
    fn window(&self, gt: &BBox, rng: Option<&mut ChaCha8Rng>) -> CropWindow {
        let cfg = self.cfg();
        let side = cfg.search_factor() * context_side(gt);
        let (mut cx, mut cy, mut side) = (gt.cx, gt.cy, side);
        if let Some(rng) = rng {
            let s = self.tc.scale_jitter;
            if s > 0.0 {
                side *= rng.gen_range(-s..s).exp();
            }
            let j = self.tc.shift_jitter * side / cfg.search_size as f64;
            if j > 0.0 {
                cx += rng.gen_range(-j..j);
                cy += rng.gen_range(-j..j);
            }
        }
        CropWindow::centered(cx, cy, side, cfg.search_size)
    }

    fn search_features(&self, g: &mut Graph, frame: &Image, window: CropWindow) -> Result<Var> {
        let crop = crop_window(frame, window)?;
        let x = g.constant(crop.pixels);
        self.model.extract(g, self.store, x)
    }

    fn masked(&self, feat: &Tensor, window: &CropWindow, gt: &BBox) -> Result<Tensor> {
        let off = self.cfg().feature_offset();
        let b = window.box_to_crop(gt);
        let b = BBox {
            cx: b.cx - off,
            cy: b.cy - off,
            ..b
        };
        Ok(mask_by_bbox(feat, &b, self.cfg().stride)?.feature)
    }

    /// Builds the loss graph of one sample and runs backward on it.
    fn run(&self, rng: &mut ChaCha8Rng, loss_scale: f64) -> Result<(Graph, f64)> {
        let cfg = self.cfg();
        let seq = &self.data[rng.gen_range(0..self.data.len())];
        let n = seq.frames.len();
        let b = rng.gen_range(1..n);
        let a = rng.gen_range(b.saturating_sub(self.tc.max_gap)..b);
        let lo = a.max(b.saturating_sub(self.tc.hist_span.max(1)));
        let mut hist_idx: Vec<usize> = (0..cfg.l_train).map(|_| rng.gen_range(lo..b)).collect();
        hist_idx.sort_unstable();

        let mut g = Graph::new();
        let tcrop = crop_patch(&seq.frames[a], &seq.boxes[a], 1.0, cfg.template_size)?;
        let tx = g.constant(tcrop.pixels);
        let t0 = self.model.extract(&mut g, self.store, tx)?;

        // Memory and historical map are replayed without gradients.
        let mut h = Graph::new();
        let t0h = h.constant(g.value(t0).clone());
        let wa = self.window(&seq.boxes[a], None);
        let fa = self.search_features(&mut h, &seq.frames[a], wa)?;
        let first = self.masked(h.value(fa), &wa, &seq.boxes[a])?;
        let mut feats: std::collections::VecDeque<Tensor> =
            std::iter::repeat(first).take(cfg.n_hist).collect();
        let mut t_prev = g.value(t0).clone();
        let map0 = h.depthwise_correlate(t0h, fa)?;
        let mut hist = self.model.initial_history(&mut h, self.store, self.sw, map0)?;
        for &i in &hist_idx {
            let w = self.window(&seq.boxes[i], Some(rng));
            let f = self.search_features(&mut h, &seq.frames[i], w)?;
            let tp = h.constant(t_prev.clone());
            let fv: Vec<Var> = feats.iter().map(|t| h.constant(t.clone())).collect();
            let (map, fused) = self.model.correlate(&mut h, self.store, self.sw, t0h, tp, &fv, f)?;
            let (_, next) = self.model.refine(&mut h, self.store, self.sw, map, hist)?;
            hist = next;
            if cfg.n_hist > 0 {
                feats.pop_front();
                feats.push_back(self.masked(h.value(f), &w, &seq.boxes[i])?);
            }
            t_prev = h.value(fused).clone();
        }

        let w = self.window(&seq.boxes[b], Some(rng));
        let search = self.search_features(&mut g, &seq.frames[b], w)?;
        let tp = g.constant(t_prev);
        let fv: Vec<Var> = feats.into_iter().map(|t| g.constant(t)).collect();
        let hv = g.constant(h.value(hist).clone());
        drop(h);
        let (map, _) = self.model.correlate(&mut g, self.store, self.sw, t0, tp, &fv, search)?;
        let (refined, _) = self.model.refine(&mut g, self.store, self.sw, map, hv)?;
        let (cls, reg) = self.model.head(&mut g, self.store, refined)?;

        let targets = assign_targets(cfg, &w.box_to_crop(&seq.boxes[b]), self.tc.pos_iou);
        let cells = targets.labels.len();
        let npos = targets.labels.iter().filter(|&&l| l > 0.5).count();
        let nneg = cells - npos;
        let weights: Vec<f64> = targets
            .labels
            .iter()
            .map(|&l| if l > 0.5 { 0.5 / npos as f64 } else { 0.5 / nneg.max(1) as f64 })
            .collect();
        let logits = g.reshape(cls, &[cells])?;
        let mut loss = g.bce_with_logits(logits, &targets.labels, &weights)?;
        if !targets.reg_cells.is_empty() {
            let rows = g.reshape(reg, &[cells, 4])?;
            let picked = g.gather_rows(rows, &targets.reg_cells)?;
            let iou = g.iou_loss(picked, &targets.reg_targets)?;
            loss = g.add(loss, iou)?;
        }
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite training loss {value}")));
        }
        let scaled = g.scale(loss, loss_scale);
        g.backward(scaled)?;
        Ok((g, value))
    }
}

/// Trains `net` in place with momentum SGD on random template/search pairs.
///
/// Samples of a batch are evaluated in parallel; each draws from its own
/// seeded stream and gradients are summed in sample order, so the result
/// does not depend on the thread count.
pub fn toy_train(net: &mut Network, data: &[TrainSequence], tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    for (i, s) in data.iter().enumerate() {
        if s.frames.len() < 2 || s.frames.len() != s.boxes.len() {
            return Err(Error::Input(format!(
                "training sequence {i} has {} frames and {} boxes (need >= 2, equal)",
                s.frames.len(),
                s.boxes.len()
            )));
        }
    }
    let sw = tc.ablation.switches();
    freeze_unused(&mut net.store, sw);
    let mut opt = Sgd::new(tc.momentum, tc.weight_decay);
    let mut report = TrainReport::default();
    let steps = tc.samples_per_epoch.div_ceil(tc.batch_size);
    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc.epochs, tc.lr_start, tc.lr_end);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let lo = step * tc.batch_size;
            let hi = (lo + tc.batch_size).min(tc.samples_per_epoch);
            let scale = 1.0 / (hi - lo) as f64;
            let sampler = Sampler {
                model: &net.model,
                store: &net.store,
                data,
                tc,
                sw,
            };
            let results: Vec<Result<(Graph, f64)>> = (lo..hi)
                .into_par_iter()
                .map(|i| {
                    let stream = ((epoch as u64) << 32) | i as u64;
                    sampler.run(&mut tc.seed.derive(stream).rng(), scale)
                })
                .collect();
            net.store.zero_grad();
            let mut batch_loss = 0.0;
            for r in results {
                let (g, loss) = r?;
                net.store.accumulate_grads(&g);
                batch_loss += loss;
            }
            net.store.clip_grad_norm(tc.grad_clip);
            opt.step(&mut net.store, lr);
            net.store.zero_grad();
            let mean = batch_loss * scale;
            report.step_losses.push(mean);
            epoch_loss += mean;
            log::debug!("epoch {epoch} step {step} loss {mean:.4} lr {lr:.2e}");
        }
        report.epoch_losses.push(epoch_loss / steps as f64);
        report.epoch_lrs.push(lr);
        log::info!("epoch {epoch}: loss {:.4}", epoch_loss / steps as f64);
    }
    net.store.unfreeze_all();
    Ok(report)
}
