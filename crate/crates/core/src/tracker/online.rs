use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::bbox::BBox;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::image::{context_side, crop_patch, crop_window, CropWindow, Image};
use crate::temporal::{mask_by_bbox, TemplateMemory};
use crate::tensor::Tensor;
use crate::transformer::{HistoricalMapState, TokenizedMap};

use super::model::{check_crop, Network};
use super::post::select_target;
use super::{Ablation, Switches, TrackerConfig};

/// Per-sequence tracking state. Its size depends only on the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub bbox: BBox,
    pub score: f64,
    pub frame_index: u64,
    pub mem: TemplateMemory,
    pub hist_map: HistoricalMapState,
}

impl TrackerState {
    /// Flat little-endian serialization of every value the state carries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.bbox.cx, self.bbox.cy, self.bbox.w, self.bbox.h, self.score] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        self.mem.write_bytes(&mut out);
        for v in self.hist_map.m_hist.tokens.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Result of one tracked frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackStep {
    pub bbox: BBox,
    /// Raw classification logit of the chosen cell.
    pub score: f64,
    /// Whether the frame entered the template memory.
    pub accepted: bool,
}

/// Wall-clock milliseconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub backbone_ms: f64,
    pub temporal_ms: f64,
    pub transformer_ms: f64,
    pub head_ms: f64,
}

impl StageTimes {
    pub fn add(&mut self, other: &StageTimes) {
        self.backbone_ms += other.backbone_ms;
        self.temporal_ms += other.temporal_ms;
        self.transformer_ms += other.transformer_ms;
        self.head_ms += other.head_ms;
    }

    pub fn scaled(&self, k: f64) -> StageTimes {
        StageTimes {
            backbone_ms: self.backbone_ms * k,
            temporal_ms: self.temporal_ms * k,
            transformer_ms: self.transformer_ms * k,
            head_ms: self.head_ms * k,
        }
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Stateless tracker front-end over a shared network; one
/// [`TrackerState`] per sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    net: Arc<Network>,
    ablation: Ablation,
    tau: f64,
}

impl Tracker {
    pub fn new(net: Arc<Network>, ablation: Ablation) -> Self {
        let tau = net.cfg().tau;
        Self { net, ablation, tau }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn cfg(&self) -> &TrackerConfig {
        self.net.cfg()
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn switches(&self) -> Switches {
        self.ablation.switches()
    }

    /// Frame box mapped into the masking grid of a search crop.
    fn grid_box(&self, window: &CropWindow, bbox: &BBox) -> BBox {
        let off = self.cfg().feature_offset();
        let b = window.box_to_crop(bbox);
        BBox {
            cx: b.cx - off,
            cy: b.cy - off,
            ..b
        }
    }

    fn features(&self, g: &mut Graph, pixels: Tensor, size: usize) -> Result<Var> {
        check_crop(&pixels, size)?;
        let x = g.constant(pixels);
        self.net.model.extract(g, &self.net.store, x)
    }

    /// Initializes the memory and historical map from the first frame.
    pub fn init(&self, frame: &Image, bbox: BBox) -> Result<TrackerState> {
        bbox.validate()?;
        let cfg = self.cfg();
        let (model, store) = (&self.net.model, &self.net.store);
        let mut g = Graph::new();
        let tcrop = crop_patch(frame, &bbox, 1.0, cfg.template_size)?;
        let t0 = self.features(&mut g, tcrop.pixels, cfg.template_size)?;
        let scrop = crop_patch(frame, &bbox, cfg.search_factor(), cfg.search_size)?;
        let f0 = self.features(&mut g, scrop.pixels, cfg.search_size)?;
        let masked = mask_by_bbox(g.value(f0), &self.grid_box(&scrop.window, &bbox), cfg.stride)?;
        let mem = TemplateMemory::new(g.value(t0).clone(), masked.feature, cfg.n_hist, self.tau)?;
        let map = g.depthwise_correlate(t0, f0)?;
        let hist = model.initial_history(&mut g, store, self.switches(), map)?;
        let side = cfg.map_size();
        Ok(TrackerState {
            bbox,
            score: 0.0,
            frame_index: 0,
            mem,
            hist_map: HistoricalMapState {
                m_hist: TokenizedMap {
                    tokens: g.value(hist).clone(),
                    spatial: (side, side),
                },
            },
        })
    }

    pub fn track(&self, state: &mut TrackerState, frame: &Image) -> Result<TrackStep> {
        self.track_timed(state, frame).map(|(step, _)| step)
    }

    /// Tracks one frame, updating `state` in place.
    pub fn track_timed(&self, state: &mut TrackerState, frame: &Image) -> Result<(TrackStep, StageTimes)> {
        let cfg = self.cfg();
        let sw = self.switches();
        let (model, store) = (&self.net.model, &self.net.store);
        let mut times = StageTimes::default();
        let mut g = Graph::new();

        let t = Instant::now();
        let side = cfg.search_factor() * context_side(&state.bbox);
        let window = CropWindow::centered(state.bbox.cx, state.bbox.cy, side, cfg.search_size);
        let crop = crop_window(frame, window)?;
        let search = self.features(&mut g, crop.pixels, cfg.search_size)?;
        times.backbone_ms = elapsed_ms(t);

        let t = Instant::now();
        let t0 = g.constant(state.mem.t0().clone());
        let t_prev = g.constant(state.mem.t_prev().clone());
        let feats: Vec<Var> = state.mem.feats().map(|f| g.constant(f.clone())).collect();
        let (map, fused) = model.correlate(&mut g, store, sw, t0, t_prev, &feats, search)?;
        times.temporal_ms = elapsed_ms(t);

        let t = Instant::now();
        let hist = g.constant(state.hist_map.m_hist.tokens.clone());
        let (refined, new_hist) = model.refine(&mut g, store, sw, map, hist)?;
        times.transformer_ms = elapsed_ms(t);

        let t = Instant::now();
        let (cls, reg) = model.head(&mut g, store, refined)?;
        let (bbox, score) = select_target(
            g.value(cls),
            g.value(reg),
            &window,
            &state.bbox,
            cfg,
            (frame.width(), frame.height()),
        )?;
        times.head_ms = elapsed_ms(t);

        let masked = mask_by_bbox(g.value(search), &self.grid_box(&window, &bbox), cfg.stride)?;
        let accepted = state.mem.update(masked.feature, g.value(fused).clone(), score)?;
        if sw.transformer {
            state.hist_map.m_hist.tokens = g.value(new_hist).clone();
        }
        state.bbox = bbox;
        state.score = score;
        state.frame_index += 1;
        Ok((TrackStep { bbox, score, accepted }, times))
    }
}
