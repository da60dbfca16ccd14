//! Mutual transformer: a self-attention encoder applied to the current and
//! historical correlation maps, followed by decoder layers of mutual
//! attention with a channel-gating filter.
//!
//! In every decoder layer the historical branch queries the current map and
//! the current branch queries the historical map. The query/key projections
//! are tied across branches (the historical query projection is the current
//! key projection and vice versa), so the current branch's logits are exactly
//! the transpose of the historical branch's logits and are computed once.
//! Value and output projections and the norms are per branch.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Norm};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::temporal::CorrelationMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Filter bottleneck ratio `r`: hidden width is `model_dim / r`.
    pub reduction: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize) -> Self {
        Self {
            heads: 6,
            model_dim,
            encoder_layers: 1,
            decoder_layers: 2,
            reduction: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Input(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.reduction == 0 || self.model_dim % self.reduction != 0 {
            return Err(Error::Input(format!(
                "model dim {} is not divisible by reduction {}",
                self.model_dim, self.reduction
            )));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Correlation map flattened row-major into `[H*W, C]` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedMap {
    pub tokens: Tensor,
    pub spatial: (usize, usize),
}

impl TokenizedMap {
    pub fn from_map(m: &CorrelationMap) -> Self {
        let (h, w, c) = (m.height(), m.width(), m.channels());
        Self {
            tokens: m.map.reshape(&[h * w, c]).expect("same numel"),
            spatial: (h, w),
        }
    }

    pub fn to_map(&self) -> CorrelationMap {
        let c = self.tokens.shape()[1];
        CorrelationMap::new(
            self.tokens
                .reshape(&[self.spatial.0, self.spatial.1, c])
                .expect("same numel"),
        )
        .expect("rank 3")
    }
}

/// Historical correlation map carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalMapState {
    pub m_hist: TokenizedMap,
}

/// Query/key/value/output projections of one attention block.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MhaParams {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), c, c, rng)?,
            k: Linear::new(store, &format!("{name}.k"), c, c, rng)?,
            v: Linear::new(store, &format!("{name}.v"), c, c, rng)?,
            o: Linear::new(store, &format!("{name}.o"), c, c, rng)?,
        })
    }
}

/// `[N, C] -> [heads, N, C/heads]`.
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[1] % heads != 0 {
        return Err(dim_err("split_heads", format!("{s:?} with {heads} heads")));
    }
    let r = g.reshape(x, &[s[0], heads, s[1] / heads])?;
    g.swap_first2(r)
}

/// `[heads, N, d] -> [N, heads * d]`.
pub fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.swap_first2(x)?;
    g.reshape(t, &[s[1], s[0] * s[2]])
}

fn check_tokens(g: &Graph, op: &'static str, cfg: &AttentionConfig, xs: &[Var]) -> Result<()> {
    cfg.validate()?;
    for &x in xs {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != cfg.model_dim {
            return Err(dim_err(op, format!("tokens {s:?} do not match model dim {}", cfg.model_dim)));
        }
    }
    Ok(())
}

/// Scaled dot-product attention over all heads; returns the merged head
/// outputs (before the output projection) and the attention weights.
fn attend(g: &mut Graph, cfg: &AttentionConfig, qh: Var, kh: Var, vh: Var) -> Result<(Var, Var)> {
    let logits = g.batch_matmul(qh, kh, true)?;
    let logits = g.scale(logits, cfg.scale());
    let weights = g.softmax(logits, 2)?;
    let heads = g.batch_matmul(weights, vh, false)?;
    Ok((merge_heads(g, heads)?, weights))
}

/// `Concat(head_1..head_h) W` with `head_i = Att(q Wq_i, k Wk_i, v Wv_i)`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &MhaParams,
    cfg: &AttentionConfig,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    check_tokens(g, "multi_head_attention", cfg, &[q, k, v])?;
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(dim_err("multi_head_attention", "key and value token counts differ"));
    }
    let qp = p.q.forward(g, store, q)?;
    let kp = p.k.forward(g, store, k)?;
    let vp = p.v.forward(g, store, v)?;
    let qh = split_heads(g, qp, cfg.heads)?;
    let kh = split_heads(g, kp, cfg.heads)?;
    let vh = split_heads(g, vp, cfg.heads)?;
    let (merged, _) = attend(g, cfg, qh, kh, vh)?;
    p.o.forward(g, store, merged)
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub mha: MhaParams,
    pub norm: Norm,
}

/// `Norm(m + MHA(m, m, m))`.
pub fn encode(g: &mut Graph, store: &ParamStore, enc: &EncoderLayer, cfg: &AttentionConfig, m: Var) -> Result<Var> {
    let att = multi_head_attention(g, store, &enc.mha, cfg, m, m, m)?;
    let res = g.add(m, att)?;
    enc.norm.forward(g, store, res)
}

/// Squeeze-excitation style gate `omega = sigmoid(W2 relu(W1 d))` where `d`
/// is the token-mean of the channel concatenation of both maps.
#[derive(Debug, Clone)]
pub struct FilterWeights {
    pub w1: Linear,
    pub w2: Linear,
    pub reduction: usize,
}

impl FilterWeights {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = c / reduction;
        Ok(Self {
            w1: Linear::new(store, &format!("{name}.w1"), 2 * c, hidden, rng)?,
            w2: Linear::new(store, &format!("{name}.w2"), hidden, 2 * c, rng)?,
            reduction,
        })
    }

    pub fn num_params(c: usize, reduction: usize) -> usize {
        let hidden = c / reduction;
        Linear::num_params(2 * c, hidden) + Linear::num_params(hidden, 2 * c)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FilterOutput {
    pub cur: Var,
    pub hist: Var,
    /// Gate vector `[2C]`; first half gates the current map.
    pub omega: Var,
}

/// Gates both maps channel-wise. The gate is computed from the unfiltered
/// maps and split into halves: `cur * omega[..C]`, `hist * omega[C..]`.
pub fn filter_maps(g: &mut Graph, store: &ParamStore, fw: &FilterWeights, cur: Var, hist: Var) -> Result<FilterOutput> {
    if g.shape(cur) != g.shape(hist) || g.shape(cur).len() != 2 {
        return Err(dim_err(
            "filter_maps",
            format!("current {:?} vs historical {:?}", g.shape(cur), g.shape(hist)),
        ));
    }
    let c = g.shape(cur)[1];
    let cat = g.concat(&[cur, hist], 1)?;
    let desc = g.mean_rows(cat)?;
    let hidden = fw.w1.forward_vec(g, store, desc)?;
    let hidden = g.relu(hidden);
    let logits = fw.w2.forward_vec(g, store, hidden)?;
    let omega = g.sigmoid(logits);
    let d1 = g.slice(omega, 0, 0, c)?;
    let d2 = g.slice(omega, 0, c, c)?;
    Ok(FilterOutput {
        cur: g.mul_last(cur, d1)?,
        hist: g.mul_last(hist, d2)?,
        omega,
    })
}

/// One decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    /// Projects the historical map: query of the historical branch, key of
    /// the current branch.
    pub proj_hist: Linear,
    /// Projects the current map: key of the historical branch, query of the
    /// current branch.
    pub proj_cur: Linear,
    pub value_cur: Linear,
    pub out_hist: Linear,
    pub norm_hist: Norm,
    pub value_hist: Linear,
    pub out_cur: Linear,
    pub norm_cur: Norm,
    pub filter: FilterWeights,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.model_dim;
        Ok(Self {
            proj_hist: Linear::new(store, &format!("{name}.proj_hist"), c, c, rng)?,
            proj_cur: Linear::new(store, &format!("{name}.proj_cur"), c, c, rng)?,
            value_cur: Linear::new(store, &format!("{name}.hist_branch.v"), c, c, rng)?,
            out_hist: Linear::new(store, &format!("{name}.hist_branch.o"), c, c, rng)?,
            norm_hist: Norm::new(store, &format!("{name}.hist_branch.norm"), c)?,
            value_hist: Linear::new(store, &format!("{name}.cur_branch.v"), c, c, rng)?,
            out_cur: Linear::new(store, &format!("{name}.cur_branch.o"), c, c, rng)?,
            norm_cur: Norm::new(store, &format!("{name}.cur_branch.norm"), c)?,
            filter: FilterWeights::new(store, &format!("{name}.filter"), c, cfg.reduction, rng)?,
        })
    }

    pub fn num_params(cfg: &AttentionConfig) -> usize {
        let c = cfg.model_dim;
        6 * Linear::num_params(c, c) + 2 * Norm::num_params(c) + FilterWeights::num_params(c, cfg.reduction)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MutualOutput {
    /// Updated historical map `M_t^m`.
    pub hist: Var,
    /// Refined current map `M_t^*`.
    pub cur: Var,
    /// Historical-branch attention `[heads, N_hist, N_cur]`.
    pub attn_hist: Var,
    /// Current-branch attention `[heads, N_cur, N_hist]`.
    pub attn_cur: Var,
}

/// Mutual attention between filtered historical and current maps.
///
/// With `reuse_logits` the current branch takes the transpose of the
/// historical logits; otherwise it recomputes its own query-key product
/// (kept as an oracle and for instrumentation).
pub fn mutual_attention(
    g: &mut Graph,
    store: &ParamStore,
    layer: &DecoderLayer,
    cfg: &AttentionConfig,
    hist: Var,
    cur: Var,
    reuse_logits: bool,
) -> Result<MutualOutput> {
    check_tokens(g, "mutual_attention", cfg, &[hist, cur])?;
    let ph = layer.proj_hist.forward(g, store, hist)?;
    let pc = layer.proj_cur.forward(g, store, cur)?;
    let qh = split_heads(g, ph, cfg.heads)?;
    let kc = split_heads(g, pc, cfg.heads)?;

    let logits = g.batch_matmul(qh, kc, true)?;
    let logits = g.scale(logits, cfg.scale());
    let logits_t = if reuse_logits {
        g.swap_last2(logits)?
    } else {
        let own = g.batch_matmul(kc, qh, true)?;
        g.scale(own, cfg.scale())
    };

    let attn_hist = g.softmax(logits, 2)?;
    let vc = layer.value_cur.forward(g, store, cur)?;
    let vc = split_heads(g, vc, cfg.heads)?;
    let hist_heads = g.batch_matmul(attn_hist, vc, false)?;
    let hist_att = merge_heads(g, hist_heads)?;
    let hist_att = layer.out_hist.forward(g, store, hist_att)?;
    let hist_res = g.add(hist, hist_att)?;
    let hist_out = layer.norm_hist.forward(g, store, hist_res)?;

    let attn_cur = g.softmax(logits_t, 2)?;
    let vh = layer.value_hist.forward(g, store, hist)?;
    let vh = split_heads(g, vh, cfg.heads)?;
    let cur_heads = g.batch_matmul(attn_cur, vh, false)?;
    let cur_att = merge_heads(g, cur_heads)?;
    let cur_att = layer.out_cur.forward(g, store, cur_att)?;
    let cur_res = g.add(cur, cur_att)?;
    let cur_out = layer.norm_cur.forward(g, store, cur_res)?;

    Ok(MutualOutput {
        hist: hist_out,
        cur: cur_out,
        attn_hist,
        attn_cur,
    })
}

/// Which parts of the transformer run. The defaults run everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerSwitches {
    pub encoder: bool,
    /// When false the filter gate is the constant 1.
    pub filter: bool,
    pub reuse_logits: bool,
}

impl Default for TransformerSwitches {
    fn default() -> Self {
        Self {
            encoder: true,
            filter: true,
            reuse_logits: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MutualTransformer {
    pub cfg: AttentionConfig,
    pub encoders: Vec<EncoderLayer>,
    pub decoders: Vec<DecoderLayer>,
}

/// Intermediate maps of one transformer pass, kept for inspection.
#[derive(Debug, Clone)]
pub struct TransformerTrace {
    /// Refined current map `[H, W, C]`.
    pub refined: Var,
    /// Final historical tokens `[N, C]`.
    pub hist: Var,
    pub encoded_cur: Var,
    pub encoded_hist: Var,
    pub layers: Vec<(FilterOutput, MutualOutput)>,
}

impl MutualTransformer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.model_dim;
        let encoders = (0..cfg.encoder_layers)
            .map(|i| {
                Ok(EncoderLayer {
                    mha: MhaParams::new(store, &format!("{name}.encoder{i}.mha"), c, rng)?,
                    norm: Norm::new(store, &format!("{name}.encoder{i}.norm"), c)?,
                })
            })
            .collect::<Result<_>>()?;
        let decoders = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.decoder{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, encoders, decoders })
    }

    /// Closed-form parameter count.
    pub fn num_params(cfg: &AttentionConfig) -> usize {
        let c = cfg.model_dim;
        let encoder = 4 * c * c + 4 * c + 2 * c;
        cfg.encoder_layers * encoder + cfg.decoder_layers * DecoderLayer::num_params(cfg)
    }

    /// Runs the stacked encoders on a token map.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, m: Var) -> Result<Var> {
        self.encoders
            .iter()
            .try_fold(m, |x, enc| encode(g, store, enc, &self.cfg, x))
    }

    /// Encodes both maps, then runs each decoder layer as filter followed by
    /// mutual attention; layer `j`'s `(hist, cur)` outputs feed layer `j+1`.
    /// `cur_raw` is `[H, W, C]`, `hist` is `[H*W, C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cur_raw: Var,
        hist: Var,
        sw: TransformerSwitches,
    ) -> Result<TransformerTrace> {
        let shape = g.shape(cur_raw).to_vec();
        if shape.len() != 3 {
            return Err(dim_err("mutual_transformer", format!("expected [H, W, C], got {shape:?}")));
        }
        let n = shape[0] * shape[1];
        if g.shape(hist) != [n, shape[2]] {
            return Err(dim_err(
                "mutual_transformer",
                format!("historical state {:?} does not match map {shape:?}", g.shape(hist)),
            ));
        }
        let cur = g.reshape(cur_raw, &[n, shape[2]])?;
        let (mut cur, mut hist) = if sw.encoder {
            (self.encode(g, store, cur)?, self.encode(g, store, hist)?)
        } else {
            (cur, hist)
        };
        let (encoded_cur, encoded_hist) = (cur, hist);
        let mut layers = Vec::with_capacity(self.decoders.len());
        for layer in &self.decoders {
            let filtered = if sw.filter {
                filter_maps(g, store, &layer.filter, cur, hist)?
            } else {
                let ones = g.constant(Tensor::full(&[2 * shape[2]], 1.0));
                FilterOutput { cur, hist, omega: ones }
            };
            let out = mutual_attention(g, store, layer, &self.cfg, filtered.hist, filtered.cur, sw.reuse_logits)?;
            cur = out.cur;
            hist = out.hist;
            layers.push((filtered, out));
        }
        let refined = g.reshape(cur, &shape)?;
        Ok(TransformerTrace {
            refined,
            hist,
            encoded_cur,
            encoded_hist,
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::RngSeed;
    use proptest::prelude::*;

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(12).validate().is_ok());
        assert!(AttentionConfig::new(13).validate().is_err());
        assert_eq!(AttentionConfig::new(192).head_dim(), 32);
    }

    #[test]
    fn heads_split_and_merge_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[5, 12], &mut RngSeed(1).rng()));
        let s = split_heads(&mut g, x, 6).unwrap();
        assert_eq!(g.shape(s), &[6, 5, 2]);
        // head 1 of token 3 holds columns 2..4
        assert_eq!(g.value(s).at(&[1, 3, 0]), g.value(x).at(&[3, 2]));
        let m = merge_heads(&mut g, s).unwrap();
        assert!(g.value(m).bit_eq(g.value(x)));
    }

    #[test]
    fn encoder_preserves_shape() {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(12);
        let mt = MutualTransformer::new(&mut store, "mt", cfg, &mut RngSeed(3).rng()).unwrap();
        let mut g = Graph::new();
        let m = g.constant(Tensor::randn(&[7, 12], &mut RngSeed(4).rng()));
        let e = mt.encode(&mut g, &store, m).unwrap();
        assert_eq!(g.shape(e), &[7, 12]);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut store = ParamStore::new();
        let mt = MutualTransformer::new(&mut store, "mt", AttentionConfig::new(12), &mut RngSeed(3).rng()).unwrap();
        let mut g = Graph::new();
        let cur = g.constant(Tensor::zeros(&[3, 3, 12]));
        let hist = g.constant(Tensor::zeros(&[8, 12]));
        assert!(mt.forward(&mut g, &store, cur, hist, TransformerSwitches::default()).is_err());
    }

    proptest! {
        #[test]
        fn tokenized_roundtrip(h in 1usize..6, w in 1usize..6, c in 1usize..5, seed in 0u64..1000) {
            let m = CorrelationMap::new(Tensor::randn(&[h, w, c], &mut RngSeed(seed).rng())).unwrap();
            let t = TokenizedMap::from_map(&m);
            prop_assert_eq!(t.tokens.shape(), &[h * w, c]);
            prop_assert_eq!(t.to_map(), m);
        }
    }
}
