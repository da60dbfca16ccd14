use serde::Serialize;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv;
use crate::params::ParamStore;
use crate::temporal::{temporal_correlation_vars, CalibrationWeight};
use crate::tensor::Tensor;
use crate::transformer::MutualTransformer;

use super::{Switches, TrackerConfig};

/// Three 3x3 stride-2 valid convolutions with ReLU, then a 1x1 projection to
/// the model width. Total stride 8.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: [Conv; 3],
    pub proj: Conv,
}

impl Backbone {
    fn new(store: &mut ParamStore, cfg: &TrackerConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let [w0, w1, w2] = cfg.backbone_widths;
        Ok(Self {
            stages: [
                Conv::new(store, "backbone.conv0", 3, 3, w0, 2, 0, rng)?,
                Conv::new(store, "backbone.conv1", 3, w0, w1, 2, 0, rng)?,
                Conv::new(store, "backbone.conv2", 3, w1, w2, 2, 0, rng)?,
            ],
            proj: Conv::new(store, "backbone.proj", 1, w2, cfg.channels, 1, 0, rng)?,
        })
    }

    pub fn num_params(cfg: &TrackerConfig) -> usize {
        let [w0, w1, w2] = cfg.backbone_widths;
        Conv::num_params(3, 3, w0)
            + Conv::num_params(3, w0, w1)
            + Conv::num_params(3, w1, w2)
            + Conv::num_params(1, w2, cfg.channels)
    }

    /// `x` is a `[S, S, 3]` crop with values in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shift = g.constant(Tensor::full(&[3], -0.5));
        let mut h = g.add_last(x, shift)?;
        for conv in &self.stages {
            h = conv.forward(g, store, h)?;
            h = g.relu(h);
        }
        self.proj.forward(g, store, h)
    }
}

/// Classification and box-regression towers (3x3 conv + ReLU, then 1x1).
#[derive(Debug, Clone)]
pub struct Head {
    pub cls: [Conv; 2],
    pub reg: [Conv; 2],
    pub stride: usize,
}

impl Head {
    fn new(store: &mut ParamStore, cfg: &TrackerConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let (c, h) = (cfg.channels, cfg.head_hidden);
        let head = Self {
            cls: [
                Conv::new(store, "head.cls0", 3, c, h, 1, 1, rng)?,
                Conv::new(store, "head.cls1", 1, h, 1, 1, 0, rng)?,
            ],
            reg: [
                Conv::new(store, "head.reg0", 3, c, h, 1, 1, rng)?,
                Conv::new(store, "head.reg1", 1, h, 4, 1, 0, rng)?,
            ],
            stride: cfg.stride,
        };
        // Start the regression near a box of half the template crop so the
        // ReLU is active from the first step.
        let init = cfg.template_size as f64 / (4 * cfg.stride) as f64;
        store.tensor_mut(head.reg[1].bias).data_mut().fill(init);
        Ok(head)
    }

    pub fn num_params(cfg: &TrackerConfig) -> usize {
        let (c, h) = (cfg.channels, cfg.head_hidden);
        2 * Conv::num_params(3, c, h) + Conv::num_params(1, h, 1) + Conv::num_params(1, h, 4)
    }

    /// Returns raw logits `[H, W, 1]` and `(l, t, r, b)` offsets `[H, W, 4]`
    /// in crop pixels.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, m: Var) -> Result<(Var, Var)> {
        let tower = |g: &mut Graph, convs: &[Conv; 2]| -> Result<Var> {
            let h = convs[0].forward(g, store, m)?;
            let h = g.relu(h);
            convs[1].forward(g, store, h)
        };
        let cls = tower(g, &self.cls)?;
        let reg = tower(g, &self.reg)?;
        let reg = g.relu(reg);
        let reg = g.scale(reg, self.stride as f64);
        Ok((cls, reg))
    }
}

/// Parameter counts per module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub temporal: usize,
    pub transformer: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamBreakdown {
    /// Closed-form counts for a configuration.
    pub fn analytic(cfg: &TrackerConfig) -> Self {
        let backbone = Backbone::num_params(cfg);
        let temporal = if cfg.n_hist > 0 {
            CalibrationWeight::num_params(cfg.channels, cfg.n_hist)
        } else {
            0
        };
        let transformer = MutualTransformer::num_params(&cfg.attention());
        let head = Head::num_params(cfg);
        Self {
            backbone,
            temporal,
            transformer,
            head,
            total: backbone + temporal + transformer + head,
        }
    }

    /// Counts of the tensors actually held by a store.
    pub fn measured(store: &ParamStore) -> Self {
        let backbone = store.numel_with_prefix("backbone.");
        let temporal = store.numel_with_prefix("temporal.");
        let transformer = store.numel_with_prefix("transformer.");
        let head = store.numel_with_prefix("head.");
        Self {
            backbone,
            temporal,
            transformer,
            head,
            total: store.numel(),
        }
    }
}

/// Module structure of the tracker; parameter values live in a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MtModel {
    pub cfg: TrackerConfig,
    pub backbone: Backbone,
    /// Absent when the memory holds no historical features.
    pub calib: Option<CalibrationWeight>,
    pub transformer: MutualTransformer,
    pub head: Head,
}

impl MtModel {
    /// Creates the modules, registering freshly initialized parameters.
    pub fn build(cfg: &TrackerConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = cfg.seed.derive(0).rng();
        let backbone = Backbone::new(store, cfg, &mut rng)?;
        let calib = if cfg.n_hist > 0 {
            Some(CalibrationWeight::new(store, "temporal", cfg.channels, cfg.n_hist, &mut rng)?)
        } else {
            None
        };
        let transformer = MutualTransformer::new(store, "transformer", cfg.attention(), &mut rng)?;
        let head = Head::new(store, cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            calib,
            transformer,
            head,
        })
    }

    /// Backbone features of a crop tensor.
    pub fn extract(&self, g: &mut Graph, store: &ParamStore, crop: Var) -> Result<Var> {
        self.backbone.forward(g, store, crop)
    }

    /// Fused template and its correlation with `search`. With the temporal
    /// switch off (or an empty memory) the template is `t0` unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn correlate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sw: Switches,
        t0: Var,
        t_prev: Var,
        feats: &[Var],
        search: Var,
    ) -> Result<(Var, Var)> {
        match &self.calib {
            Some(cw) if sw.temporal => {
                let out = temporal_correlation_vars(g, store, cw, t0, t_prev, feats, search)?;
                Ok((out.map, out.fused))
            }
            _ => Ok((g.depthwise_correlate(t0, search)?, t0)),
        }
    }

    /// Initial historical tokens for a frame-0 correlation map.
    pub fn initial_history(&self, g: &mut Graph, store: &ParamStore, sw: Switches, map: Var) -> Result<Var> {
        let s = g.shape(map).to_vec();
        let tokens = g.reshape(map, &[s[0] * s[1], s[2]])?;
        if sw.transformer && sw.encoder {
            self.transformer.encode(g, store, tokens)
        } else {
            Ok(tokens)
        }
    }

    /// Refined map and new historical tokens. With the transformer off the
    /// map passes through and the history is returned unchanged.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, sw: Switches, map: Var, hist: Var) -> Result<(Var, Var)> {
        if !sw.transformer {
            return Ok((map, hist));
        }
        let trace = self
            .transformer
            .forward(g, store, map, hist, sw.transformer_switches())?;
        Ok((trace.refined, trace.hist))
    }

    pub fn head(&self, g: &mut Graph, store: &ParamStore, m: Var) -> Result<(Var, Var)> {
        self.head.forward(g, store, m)
    }
}

/// A model together with its parameter values.
#[derive(Debug, Clone)]
pub struct Network {
    pub model: MtModel,
    pub store: ParamStore,
}

impl Network {
    pub fn new(cfg: &TrackerConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = MtModel::build(cfg, &mut store)?;
        Ok(Self { model, store })
    }

    pub fn cfg(&self) -> &TrackerConfig {
        &self.model.cfg
    }

    /// Copy of the network resized to a memory of `n` historical features.
    /// The calibration map's input blocks are replaced by their mean so that
    /// `n` identical features produce the same alpha as before; `n = 0`
    /// removes the temporal parameters.
    pub fn with_history(&self, n: usize) -> Result<Network> {
        if n == self.cfg().n_hist {
            return Ok(self.clone());
        }
        let mut cfg = self.cfg().clone();
        cfg.n_hist = n;
        let mut out = Network::new(&cfg)?;
        for (_, p) in self.store.iter() {
            if let Some(id) = out.store.id(&p.name) {
                if out.store.tensor(id).shape() == p.tensor.shape() {
                    *out.store.tensor_mut(id) = p.tensor.clone();
                }
            }
        }
        if let (Some(old), Some(new)) = (&self.model.calib, &out.model.calib) {
            let c = cfg.channels;
            let w = self.store.tensor(old.w1.weight);
            let mut sum = vec![0.0; c * c];
            for block in w.data().chunks_exact(c * c) {
                sum.iter_mut().zip(block).for_each(|(s, v)| *s += v);
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let data: Vec<f64> = (0..n).flat_map(|_| mean.iter().copied()).collect();
            *out.store.tensor_mut(new.w1.weight) = Tensor::new(&[n * c, c], data)?;
            let bias = self.store.tensor(old.w1.bias).clone();
            *out.store.tensor_mut(new.w1.bias) = bias;
            let beta = self.store.tensor(old.beta).clone();
            *out.store.tensor_mut(new.beta) = beta;
        }
        Ok(out)
    }
}

/// Crop pixels must form a `[S, S, 3]` tensor of the expected size.
pub(crate) fn check_crop(t: &Tensor, size: usize) -> Result<()> {
    if t.shape() != [size, size, 3] {
        return Err(dim_err("crop", format!("expected [{size}, {size}, 3], got {:?}", t.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::RngSeed;

    #[test]
    fn default_parameter_count_matches_store() {
        let net = Network::new(&TrackerConfig::default()).unwrap();
        let analytic = ParamBreakdown::analytic(net.cfg());
        assert_eq!(analytic, ParamBreakdown::measured(&net.store));
    }

    #[test]
    fn backbone_output_sizes() {
        let cfg = TrackerConfig::toy();
        let net = Network::new(&cfg).unwrap();
        let mut g = Graph::new();
        for size in [cfg.template_size, cfg.search_size] {
            let x = g.constant(Tensor::uniform(&[size, size, 3], 1.0, &mut RngSeed(1).rng()));
            let f = net.model.extract(&mut g, &net.store, x).unwrap();
            let k = cfg.feature_size(size);
            assert_eq!(g.shape(f), &[k, k, cfg.channels]);
        }
    }

    #[test]
    fn zeroed_head_outputs_zero() {
        let cfg = TrackerConfig::toy();
        let mut net = Network::new(&cfg).unwrap();
        for conv in [&net.model.head.cls[1], &net.model.head.reg[1]] {
            for id in [conv.kernel, conv.bias] {
                net.store.tensor_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let m = g.constant(Tensor::zeros(&[9, 9, cfg.channels]));
        let (cls, reg) = net.model.head(&mut g, &net.store, m).unwrap();
        assert_eq!(g.shape(cls), &[9, 9, 1]);
        assert_eq!(g.shape(reg), &[9, 9, 4]);
        assert!(g.value(cls).data().iter().chain(g.value(reg).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn history_resize_preserves_alpha_for_repeated_features() {
        let net = Network::new(&TrackerConfig::toy()).unwrap();
        let c = net.cfg().channels;
        let feat = Tensor::randn(&[15, 15, c], &mut RngSeed(5).rng());
        let alpha = |net: &Network| {
            let cw = net.model.calib.as_ref().unwrap();
            let mut g = Graph::new();
            let feats: Vec<Var> = (0..cw.history).map(|_| g.constant(feat.clone())).collect();
            let a = crate::temporal::compute_alpha(&mut g, &net.store, cw, &feats).unwrap();
            g.value(a).clone()
        };
        let base = alpha(&net);
        for n in [1, 2, 4, 5] {
            let resized = net.with_history(n).unwrap();
            assert!(alpha(&resized).max_abs_diff(&base) < 1e-9, "n = {n}");
        }
        assert!(net.with_history(0).unwrap().model.calib.is_none());
    }
}
