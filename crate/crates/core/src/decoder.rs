//! Category-query decoder: learnable per-category queries refined against an
//! image feature grid by stacked attention layers, plus the image-level
//! classification head and cross-attention heatmaps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Standard deviation of the initial query embeddings.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sublayer {
    /// Queries attend to image tokens.
    Cross,
    /// Queries attend to each other.
    SelfAttn,
    /// Per-query feed-forward block.
    Ffn,
}

impl Sublayer {
    pub fn letter(self) -> char {
        match self {
            Sublayer::Cross => 'C',
            Sublayer::SelfAttn => 'S',
            Sublayer::Ffn => 'F',
        }
    }
}

/// Ordered list of sublayers inside one decoder layer, e.g. `C,S,F`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerOrder(Vec<Sublayer>);

impl LayerOrder {
    pub fn new(seq: Vec<Sublayer>) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::InvalidConfig("layer order is empty".into()));
        }
        for (i, s) in seq.iter().enumerate() {
            if seq[..i].contains(s) {
                return Err(Error::InvalidConfig(format!("sublayer {} repeated", s.letter())));
            }
        }
        Ok(Self(seq))
    }

    pub fn sublayers(&self) -> &[Sublayer] {
        &self.0
    }

    pub fn contains(&self, s: Sublayer) -> bool {
        self.0.contains(&s)
    }
}

impl Default for LayerOrder {
    fn default() -> Self {
        Self(vec![Sublayer::Cross, Sublayer::SelfAttn, Sublayer::Ffn])
    }
}

impl fmt::Display for LayerOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<String> = self.0.iter().map(|s| s.letter().to_string()).collect();
        f.write_str(&letters.join(","))
    }
}

impl FromStr for LayerOrder {
    type Err = Error;

    /// Accepts `C,S,F`, `CSF`, `C->S->F` and `C→S→F`.
    fn from_str(s: &str) -> Result<Self> {
        let mut seq = Vec::new();
        for ch in s.chars() {
            match ch.to_ascii_uppercase() {
                'C' => seq.push(Sublayer::Cross),
                'S' => seq.push(Sublayer::SelfAttn),
                'F' => seq.push(Sublayer::Ffn),
                ',' | '-' | '>' | '→' | ' ' => {}
                other => return Err(Error::InvalidConfig(format!("unknown sublayer `{other}` in order `{s}`"))),
            }
        }
        Self::new(seq)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub order: LayerOrder,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Adds a fixed sinusoidal code to image tokens before attention.
    pub positional: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            order: LayerOrder::default(),
            heads: 4,
            ffn_hidden: 64,
            positional: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "width {width} not divisible by {} heads",
                self.heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::InvalidConfig("ffn_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// The K×D matrix of learnable category queries. Row k belongs to category k.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryQueryBank {
    queries: Tensor,
}

impl CategoryQueryBank {
    pub fn new(queries: Tensor) -> Result<Self> {
        let (k, d) = queries.dims2("query_bank")?;
        if k == 0 || d == 0 {
            return Err(Error::InvalidConfig("query bank needs K >= 1 and D >= 1".into()));
        }
        Ok(Self { queries })
    }

    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        Self::new(Tensor::random_normal(vec![k, d], QUERY_INIT_STD, rng))
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn categories(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.queries.shape()[1]
    }
}

/// Image features flattened to `height * width` tokens of width D.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    tokens: Tensor,
    height: usize,
    width: usize,
}

impl FeatureGrid {
    pub fn new(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        let (n, _) = tokens.dims2("feature_grid")?;
        if n != height * width || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "feature_grid",
                lhs: tokens.shape().to_vec(),
                rhs: vec![height, width],
            });
        }
        Ok(Self { tokens, height, width })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Cross-attention weights per layer, each `heads × K × (H·W)`.
/// Layers without a cross-attention sublayer hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub layers: Vec<Option<Tensor>>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MhaWeights<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnWeights<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct NormWeights<'t> {
    pub gain: Var<'t>,
    pub bias: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerWeights<'t> {
    pub cross: Option<(MhaWeights<'t>, NormWeights<'t>)>,
    pub self_attn: Option<(MhaWeights<'t>, NormWeights<'t>)>,
    pub ffn: Option<(FfnWeights<'t>, NormWeights<'t>)>,
}

/// Multi-head scaled dot-product attention of `q` over `kv`.
///
/// Returns the output-projected result and the post-softmax weights as a
/// `heads × n_q × n_kv` tensor.
pub fn mha<'t>(q: Var<'t>, kv: Var<'t>, w: &MhaWeights<'t>, heads: usize) -> Result<(Var<'t>, Tensor)> {
    let (n_q, d) = q.value().dims2("mha")?;
    let (n_kv, d_kv) = kv.value().dims2("mha")?;
    if d != d_kv {
        return Err(Error::ShapeMismatch {
            op: "mha",
            lhs: vec![n_q, d],
            rhs: vec![n_kv, d_kv],
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qp = q.linear(w.wq, w.bq)?;
    let kp = kv.linear(w.wk, w.bk)?;
    let vp = kv.linear(w.wv, w.bv)?;

    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads * n_q * n_kv);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = qp.slice_cols(lo, hi)?;
        let kh = kp.slice_cols(lo, hi)?;
        let vh = vp.slice_cols(lo, hi)?;
        let a = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax(1)?;
        attn.extend_from_slice(a.value().data());
        outs.push(a.matmul(vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { q.tape().concat_cols(&outs)? };
    let out = merged.linear(w.wo, w.bo)?;
    Ok((out, Tensor::new(vec![heads, n_q, n_kv], attn)?))
}

/// One pre-norm decoder layer: each sublayer in `order` computes
/// `q + sublayer(layer_norm(q))`.
pub fn decoder_layer<'t>(
    q: Var<'t>,
    tokens: Var<'t>,
    weights: &LayerWeights<'t>,
    cfg: &DecoderConfig,
) -> Result<(Var<'t>, Option<Tensor>)> {
    let mut x = q;
    let mut cross_attn = None;
    for sub in cfg.order.sublayers() {
        let update = match sub {
            Sublayer::Cross => {
                let (w, n) = weights.cross.as_ref().ok_or_else(|| missing("cross"))?;
                let h = x.layer_norm(n.gain, n.bias, LAYER_NORM_EPS)?;
                let (o, a) = mha(h, tokens, w, cfg.heads)?;
                cross_attn = Some(a);
                o
            }
            Sublayer::SelfAttn => {
                let (w, n) = weights.self_attn.as_ref().ok_or_else(|| missing("self"))?;
                let h = x.layer_norm(n.gain, n.bias, LAYER_NORM_EPS)?;
                mha(h, h, w, cfg.heads)?.0
            }
            Sublayer::Ffn => {
                let (w, n) = weights.ffn.as_ref().ok_or_else(|| missing("ffn"))?;
                let h = x.layer_norm(n.gain, n.bias, LAYER_NORM_EPS)?;
                h.linear(w.w1, w.b1)?.relu()?.linear(w.w2, w.b2)?
            }
        };
        x = x.add(update)?;
    }
    Ok((x, cross_attn))
}

fn missing(which: &str) -> Error {
    Error::InvalidConfig(format!("layer order needs {which} weights that were not bound"))
}

/// Runs `layers.len()` decoder layers over the queries.
pub fn decode<'t>(
    queries: Var<'t>,
    tokens: Var<'t>,
    layers: &[LayerWeights<'t>],
    cfg: &DecoderConfig,
    grid_hw: (usize, usize),
) -> Result<(Var<'t>, AttentionMaps)> {
    let tokens = if cfg.positional {
        let (n, d) = tokens.value().dims2("decode")?;
        if n != grid_hw.0 * grid_hw.1 {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: vec![n, d],
                rhs: vec![grid_hw.0, grid_hw.1],
            });
        }
        tokens.add(tokens.tape().constant(positional_code(grid_hw.0, grid_hw.1, d)))?
    } else {
        tokens
    };
    let mut q = queries;
    let mut maps = Vec::with_capacity(layers.len());
    for lw in layers {
        let (next, a) = decoder_layer(q, tokens, lw, cfg)?;
        q = next;
        maps.push(a);
    }
    Ok((
        q,
        AttentionMaps {
            layers: maps,
            height: grid_hw.0,
            width: grid_hw.1,
        },
    ))
}

/// Fixed 2-D sinusoidal code: the first half of the channels encodes the
/// row, the second half the column.
pub fn positional_code(height: usize, width: usize, d: usize) -> Tensor {
    let half = (d / 2).max(1);
    let mut data = Vec::with_capacity(height * width * d);
    for r in 0..height {
        for c in 0..width {
            for j in 0..d {
                let (pos, jj) = if j < half { (r, j) } else { (c, j - half) };
                let freq = 1.0 / 100f64.powf((jj / 2 * 2) as f64 / half as f64);
                let angle = pos as f64 * freq;
                data.push(if jj % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::from_parts(vec![height * width, d], data)
}

/// Image-level probabilities: `p_k = sigmoid(head_k · q'_k + b_k)`.
///
/// Row k of the head only ever meets row k of the refined queries.
pub fn image_classify<'t>(refined: Var<'t>, head_w: Var<'t>, head_b: Var<'t>) -> Result<Var<'t>> {
    let (k, _) = refined.value().dims2("image_classify")?;
    if head_w.shape() != refined.shape() || head_b.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "image_classify",
            lhs: refined.shape(),
            rhs: head_w.shape(),
        });
    }
    refined.mul(head_w)?.sum_last()?.add(head_b)?.sigmoid()
}

/// Head-averaged cross-attention of one category over the grid, `H × W`.
pub fn attention_heatmap(maps: &AttentionMaps, layer: usize, category: usize) -> Result<Tensor> {
    let n_layers = maps.layers.len();
    let attn = maps
        .layers
        .get(layer)
        .ok_or(Error::IndexOutOfRange {
            index: layer,
            len: n_layers,
        })?
        .as_ref()
        .ok_or_else(|| Error::Domain(format!("layer {layer} has no cross-attention")))?;
    let (heads, k, n) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    if category >= k {
        return Err(Error::IndexOutOfRange { index: category, len: k });
    }
    let mut cells = vec![0.0; n];
    for h in 0..heads {
        let row = &attn.data()[(h * k + category) * n..(h * k + category + 1) * n];
        for (c, v) in cells.iter_mut().zip(row) {
            *c += v;
        }
    }
    for c in &mut cells {
        *c /= heads as f64;
    }
    Tensor::new(vec![maps.height, maps.width], cells)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MhaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerParams {
    pub cross: Option<(MhaParams, NormParams)>,
    pub self_attn: Option<(MhaParams, NormParams)>,
    pub ffn: Option<(FfnParams, NormParams)>,
}

/// Parameter handles for a full decoder stack living in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub layers: Vec<LayerParams>,
}

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::random_normal(vec![fan_in, fan_out], std, rng)
}

impl Decoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &DecoderConfig,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let d = width;
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let base = format!("{prefix}.layers.{l}");
            let norm = |store: &mut ParamStore, name: &str| -> Result<NormParams> {
                Ok(NormParams {
                    gain: store.add(format!("{base}.{name}_norm.gain"), Tensor::full(vec![d], 1.0))?,
                    bias: store.add(format!("{base}.{name}_norm.bias"), Tensor::zeros(vec![d]))?,
                })
            };
            let attention = |store: &mut ParamStore, name: &str, rng: &mut R| -> Result<(MhaParams, NormParams)> {
                let mut w = |suffix: &str, rng: &mut R| store.add(format!("{base}.{name}.{suffix}"), xavier(d, d, rng));
                let (wq, wk, wv, wo) = (w("wq", rng)?, w("wk", rng)?, w("wv", rng)?, w("wo", rng)?);
                let mut b = |suffix: &str| store.add(format!("{base}.{name}.{suffix}"), Tensor::zeros(vec![d]));
                let (bq, bk, bv, bo) = (b("bq")?, b("bk")?, b("bv")?, b("bo")?);
                let n = norm(store, name)?;
                Ok((
                    MhaParams {
                        wq,
                        bq,
                        wk,
                        bk,
                        wv,
                        bv,
                        wo,
                        bo,
                    },
                    n,
                ))
            };
            let mut lp = LayerParams {
                cross: None,
                self_attn: None,
                ffn: None,
            };
            // registration follows the sublayer order so names stay stable per config
            for sub in cfg.order.sublayers() {
                match sub {
                    Sublayer::Cross => lp.cross = Some(attention(store, "cross", rng)?),
                    Sublayer::SelfAttn => lp.self_attn = Some(attention(store, "self", rng)?),
                    Sublayer::Ffn => {
                        let h = cfg.ffn_hidden;
                        let w1 = store.add(format!("{base}.ffn.w1"), xavier(d, h, rng))?;
                        let b1 = store.add(format!("{base}.ffn.b1"), Tensor::zeros(vec![h]))?;
                        let w2 = store.add(format!("{base}.ffn.w2"), xavier(h, d, rng))?;
                        let b2 = store.add(format!("{base}.ffn.b2"), Tensor::zeros(vec![d]))?;
                        lp.ffn = Some((FfnParams { w1, b1, w2, b2 }, norm(store, "ffn")?));
                    }
                }
            }
            layers.push(lp);
        }
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Vec<LayerWeights<'t>> {
        let p = |id| tape.param(store, id);
        let norm = |n: &NormParams| NormWeights {
            gain: p(n.gain),
            bias: p(n.bias),
        };
        let attn = |(m, n): &(MhaParams, NormParams)| {
            (
                MhaWeights {
                    wq: p(m.wq),
                    bq: p(m.bq),
                    wk: p(m.wk),
                    bk: p(m.bk),
                    wv: p(m.wv),
                    bv: p(m.bv),
                    wo: p(m.wo),
                    bo: p(m.bo),
                },
                norm(n),
            )
        };
        self.layers
            .iter()
            .map(|lp| LayerWeights {
                cross: lp.cross.as_ref().map(attn),
                self_attn: lp.self_attn.as_ref().map(attn),
                ffn: lp.ffn.as_ref().map(|(f, n)| {
                    (
                        FfnWeights {
                            w1: p(f.w1),
                            b1: p(f.b1),
                            w2: p(f.w2),
                            b2: p(f.b2),
                        },
                        norm(n),
                    )
                }),
            })
            .collect()
    }

    /// Zeroes every sublayer's output projection so each layer reduces to
    /// its residual path.
    pub fn zero_output_projections(&self, store: &mut ParamStore) -> Result<()> {
        for lp in &self.layers {
            let mut ids = Vec::new();
            for (m, _) in lp.cross.iter().chain(lp.self_attn.iter()) {
                ids.extend([m.wo, m.bo]);
            }
            if let Some((f, _)) = &lp.ffn {
                ids.extend([f.w2, f.b2]);
            }
            for id in ids {
                let shape = store.value(id).shape().to_vec();
                store.set(id, Tensor::zeros(shape))?;
            }
        }
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        grid: &FeatureGrid,
    ) -> Result<(Var<'t>, AttentionMaps)> {
        let layers = self.bind(tape, store);
        let tokens = tape.constant(grid.tokens().clone());
        decode(queries, tokens, &layers, &self.cfg, (grid.height(), grid.width()))
    }
}
