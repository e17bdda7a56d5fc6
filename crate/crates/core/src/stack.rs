//! Post-norm encoder and decoder stacks, plus parameter-count arithmetic.
//!
//! Encoder layer: `x → LN(x + MHA(x)) → LN(· + FFN(·))`.
//! Decoder layer: masked self-attention, cross-attention to the context and
//! FFN, each followed by a residual add and LayerNorm. No positional terms
//! are added inside a stack.

use serde::{Deserialize, Serialize};

use crate::attention::{check_heads, g_multi_head, init_multi_head, MultiHeadParams};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Matrix, MlpSpec, Var};
use crate::params::{Graph, Init, ParamStore, TrainMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackKind {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads_self: usize,
    /// Only read by decoders.
    #[serde(default = "default_heads")]
    pub n_heads_cross: usize,
    pub d_ffn_inner: usize,
    pub activation: Activation,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_epsilon: f64,
}

fn default_heads() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl StackConfig {
    /// Toy default: d=32, 2 layers, 4 heads, inner 64.
    pub fn toy(activation: Activation) -> Self {
        StackConfig {
            n_layers: 2,
            d_model: 32,
            n_heads_self: 4,
            n_heads_cross: 4,
            d_ffn_inner: 64,
            activation,
            layer_norm_epsilon: 1e-5,
        }
    }

    pub fn with_width(mut self, d_model: usize, d_ffn_inner: usize) -> Self {
        self.d_model = d_model;
        self.d_ffn_inner = d_ffn_inner;
        self
    }

    pub fn validate(&self, kind: StackKind) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("a stack needs at least one layer".into()));
        }
        check_heads(self.d_model, self.n_heads_self)?;
        if kind == StackKind::Decoder {
            check_heads(self.d_model, self.n_heads_cross)?;
        }
        match self.activation {
            Activation::Geglu if self.d_ffn_inner % 2 != 0 => {
                Err(Error::Config("geglu needs an even FFN inner width".into()))
            }
            Activation::Softmax => Err(Error::Config("softmax is not a valid FFN activation".into())),
            _ if self.d_ffn_inner == 0 => Err(Error::Config("FFN inner width must be positive".into())),
            _ => Ok(()),
        }
    }

    fn ffn_activations(&self) -> [Activation; 2] {
        [self.activation, Activation::Identity]
    }
}

/// Counting convention for the large-scale configurations: per layer, the
/// per-head Q/K/V matrices plus the output projection (twice for a decoder)
/// plus the two FFN matrices. Biases and LayerNorm scalars are excluded.
pub fn param_count(config: &StackConfig, kind: StackKind) -> u64 {
    let d = config.d_model as u64;
    let blocks = match kind {
        StackKind::Encoder => 1,
        StackKind::Decoder => 2,
    };
    let heads = config.n_heads_self as u64;
    let d_head = d / heads.max(1);
    let attention = heads * 3 * d_head * d + d * d;
    let ffn = 2 * d * config.d_ffn_inner as u64;
    config.n_layers as u64 * (blocks * attention + ffn)
}

pub fn init_ffn(init: &Init, store: &mut ParamStore, prefix: &str, cfg: &StackConfig) {
    let d = cfg.d_model;
    init.mlp(store, prefix, &[d, cfg.d_ffn_inner, d], &cfg.ffn_activations());
}

pub fn init_encoder(init: &Init, store: &mut ParamStore, prefix: &str, cfg: &StackConfig) {
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.l{l}");
        init_multi_head(init, store, &format!("{p}.attn"), cfg.d_model, cfg.n_heads_self);
        init.layer_norm(store, &format!("{p}.ln1"));
        init_ffn(init, store, &format!("{p}.ffn"), cfg);
        init.layer_norm(store, &format!("{p}.ln2"));
    }
}

pub fn init_decoder(init: &Init, store: &mut ParamStore, prefix: &str, cfg: &StackConfig) {
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.l{l}");
        init_multi_head(init, store, &format!("{p}.self"), cfg.d_model, cfg.n_heads_self);
        init.layer_norm(store, &format!("{p}.ln1"));
        init_multi_head(init, store, &format!("{p}.cross"), cfg.d_model, cfg.n_heads_cross);
        init.layer_norm(store, &format!("{p}.ln2"));
        init_ffn(init, store, &format!("{p}.ffn"), cfg);
        init.layer_norm(store, &format!("{p}.ln3"));
    }
}

fn add_norm(g: &mut Graph, x: Var, y: Var, ln: &str, eps: f64) -> Result<Var> {
    let s = g.add(x, y)?;
    g.layer_norm(s, ln, eps)
}

pub fn g_encode(g: &mut Graph, x: Var, prefix: &str, cfg: &StackConfig) -> Result<Var> {
    let rows = g.value(x)?.rows();
    if rows != cfg.d_model {
        return Err(Error::shape("encode", format!("input has {rows} rows, stack width is {}", cfg.d_model)));
    }
    let eps = cfg.layer_norm_epsilon;
    let mut h = x;
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.l{l}");
        let a = g_multi_head(g, h, h, &format!("{p}.attn"), cfg.n_heads_self, false)?;
        h = add_norm(g, h, a, &format!("{p}.ln1"), eps)?;
        let f = g.mlp(h, &format!("{p}.ffn"), &cfg.ffn_activations())?;
        h = add_norm(g, h, f, &format!("{p}.ln2"), eps)?;
    }
    Ok(h)
}

pub fn g_decode(g: &mut Graph, s: Var, ctx: Var, prefix: &str, cfg: &StackConfig) -> Result<Var> {
    for (what, v) in [("sequence", s), ("context", ctx)] {
        let m = g.value(v)?;
        if m.rows() != cfg.d_model || m.cols() == 0 {
            return Err(Error::shape("decode_step", format!("{what} is {:?}, stack width is {}", m.shape(), cfg.d_model)));
        }
    }
    let eps = cfg.layer_norm_epsilon;
    let mut h = s;
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}.l{l}");
        let a = g_multi_head(g, h, h, &format!("{p}.self"), cfg.n_heads_self, true)?;
        h = add_norm(g, h, a, &format!("{p}.ln1"), eps)?;
        let c = g_multi_head(g, h, ctx, &format!("{p}.cross"), cfg.n_heads_cross, false)?;
        h = add_norm(g, h, c, &format!("{p}.ln2"), eps)?;
        let f = g.mlp(h, &format!("{p}.ffn"), &cfg.ffn_activations())?;
        h = add_norm(g, h, f, &format!("{p}.ln3"), eps)?;
    }
    Ok(h)
}

/// LayerNorm gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for LayerNormParams {
    fn default() -> Self {
        LayerNormParams { gamma: 1.0, beta: 0.0 }
    }
}

impl LayerNormParams {
    fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.gamma"), Matrix::filled(1, 1, self.gamma));
        store.insert(format!("{prefix}.beta"), Matrix::filled(1, 1, self.beta));
    }

    fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let read = |name: &str| -> Result<f64> {
            store
                .get(&format!("{prefix}.{name}"))?
                .item()
                .ok_or_else(|| Error::shape("LayerNormParams", "gain and shift are scalars"))
        };
        Ok(LayerNormParams { gamma: read("gamma")?, beta: read("beta")? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub attention: MultiHeadParams,
    pub ln1: LayerNormParams,
    pub ffn: MlpSpec,
    pub ln2: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: StackConfig,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn init(config: StackConfig, seed: u64) -> Result<Self> {
        config.validate(StackKind::Encoder)?;
        let mut store = ParamStore::new();
        init_encoder(&Init::new(seed), &mut store, "enc", &config);
        EncoderParams::from_store(&store, "enc", config)
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.l{l}");
            layer.attention.store_into(store, &format!("{p}.attn"));
            layer.ln1.store_into(store, &format!("{p}.ln1"));
            store.insert_mlp(&format!("{p}.ffn"), &layer.ffn);
            layer.ln2.store_into(store, &format!("{p}.ln2"));
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str, config: StackConfig) -> Result<Self> {
        config.validate(StackKind::Encoder)?;
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                Ok(EncoderLayerParams {
                    attention: MultiHeadParams::from_store(store, &format!("{p}.attn"), config.n_heads_self)?,
                    ln1: LayerNormParams::from_store(store, &format!("{p}.ln1"))?,
                    ffn: store.mlp(&format!("{p}.ffn"), &config.ffn_activations())?,
                    ln2: LayerNormParams::from_store(store, &format!("{p}.ln2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams { config, layers })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerParams {
    pub self_attention: MultiHeadParams,
    pub ln1: LayerNormParams,
    pub cross_attention: MultiHeadParams,
    pub ln2: LayerNormParams,
    pub ffn: MlpSpec,
    pub ln3: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: StackConfig,
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn init(config: StackConfig, seed: u64) -> Result<Self> {
        config.validate(StackKind::Decoder)?;
        let mut store = ParamStore::new();
        init_decoder(&Init::new(seed), &mut store, "dec", &config);
        DecoderParams::from_store(&store, "dec", config)
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.l{l}");
            layer.self_attention.store_into(store, &format!("{p}.self"));
            layer.ln1.store_into(store, &format!("{p}.ln1"));
            layer.cross_attention.store_into(store, &format!("{p}.cross"));
            layer.ln2.store_into(store, &format!("{p}.ln2"));
            store.insert_mlp(&format!("{p}.ffn"), &layer.ffn);
            layer.ln3.store_into(store, &format!("{p}.ln3"));
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str, config: StackConfig) -> Result<Self> {
        config.validate(StackKind::Decoder)?;
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                Ok(DecoderLayerParams {
                    self_attention: MultiHeadParams::from_store(store, &format!("{p}.self"), config.n_heads_self)?,
                    ln1: LayerNormParams::from_store(store, &format!("{p}.ln1"))?,
                    cross_attention: MultiHeadParams::from_store(store, &format!("{p}.cross"), config.n_heads_cross)?,
                    ln2: LayerNormParams::from_store(store, &format!("{p}.ln2"))?,
                    ffn: store.mlp(&format!("{p}.ffn"), &config.ffn_activations())?,
                    ln3: LayerNormParams::from_store(store, &format!("{p}.ln3"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderParams { config, layers })
    }
}

pub fn encode(x: &Matrix, p: &EncoderParams) -> Result<Matrix> {
    let mut store = ParamStore::new();
    p.store_into(&mut store, "enc");
    let mask = TrainMask::frozen();
    let mut g = Graph::new(&store, &mask);
    let xv = g.constant(x.clone());
    let out = g_encode(&mut g, xv, "enc", &p.config)?;
    Ok(g.value(out)?.clone())
}

/// Runs the decoder over the whole prefix `s` attending to `context`.
pub fn decode_step(s: &Matrix, context: &Matrix, p: &DecoderParams) -> Result<Matrix> {
    let mut store = ParamStore::new();
    p.store_into(&mut store, "dec");
    let mask = TrainMask::frozen();
    let mut g = Graph::new(&store, &mask);
    let sv = g.constant(s.clone());
    let cv = g.constant(context.clone());
    let out = g_decode(&mut g, sv, cv, "dec", &p.config)?;
    Ok(g.value(out)?.clone())
}

/// One row of the large-scale parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub component: String,
    pub count: u64,
    /// The rounded figure quoted for this component.
    pub reference: u64,
}

impl ParamCountRow {
    pub fn relative_error(&self) -> f64 {
        (self.count as f64 - self.reference as f64).abs() / self.reference as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub rows: Vec<ParamCountRow>,
    pub total: u64,
    pub reference_total: u64,
}

/// Large-scale stack configurations used only for counting.
pub mod large_scale {
    use super::StackConfig;
    use crate::numerics::Activation;

    fn cfg(n_layers: usize, d_model: usize, heads: usize, inner: usize, activation: Activation) -> StackConfig {
        StackConfig {
            n_layers,
            d_model,
            n_heads_self: heads,
            n_heads_cross: heads,
            d_ffn_inner: inner,
            activation,
            layer_norm_epsilon: 1e-5,
        }
    }

    pub fn text_encoder() -> StackConfig {
        cfg(24, 1024, 16, 4096, Activation::Gelu)
    }

    pub fn image_encoder() -> StackConfig {
        cfg(45, 3200, 25, 12800, Activation::Gelu)
    }

    pub fn fusion_encoder() -> StackConfig {
        cfg(24, 1024, 128, 65536, Activation::Geglu)
    }

    pub fn intention_decoder() -> StackConfig {
        cfg(24, 1024, 128, 65536, Activation::Geglu)
    }

    /// Flattened patch width feeding the image encoder.
    pub const PATCH_INPUT: u64 = 588;
    pub const D: u64 = 1024;
    pub const D_IMAGE: u64 = 3200;
    pub const CLASSIFIER_INNER: u64 = 4096;
    pub const FAMILY_SIZE: u64 = 100_000;
}

/// The component table for the large-scale configuration.
pub fn large_scale_param_report() -> ParamCountReport {
    use large_scale::*;
    let text = param_count(&text_encoder(), StackKind::Encoder);
    let image = PATCH_INPUT * D_IMAGE + param_count(&image_encoder(), StackKind::Encoder);
    let document = text + image + text;
    let fusion = param_count(&fusion_encoder(), StackKind::Encoder);
    let decoder = param_count(&intention_decoder(), StackKind::Decoder);
    let sq = D * D;
    let per_stage = sq + 3 * sq + D_IMAGE * D + 3 * sq + sq + 3 * sq;
    let heads = 2 * per_stage + D_IMAGE * D + (sq + 3 * sq);
    let classifier = CLASSIFIER_INNER * D + CLASSIFIER_INNER * FAMILY_SIZE;
    let mlps = 7 * 3 * classifier + CLASSIFIER_INNER * D + CLASSIFIER_INNER * 2;

    let row = |component: &str, count: u64, reference: u64| ParamCountRow {
        component: component.to_string(),
        count,
        reference,
    };
    let rows = vec![
        row("text encoder", text, 300_000_000),
        row("image encoder", image, 5_500_000_000),
        row("document encoder", document, 6_000_000_000),
        row("fusion encoder", fusion, 3_300_000_000),
        row("intention decoder", decoder, 3_500_000_000),
        row("projection heads", heads, 38_000_000),
        row("classifier MLPs", mlps, 8_700_000_000),
    ];
    let total = rows.iter().map(|r| r.count).sum();
    ParamCountReport {
        rows,
        total,
        reference_total: 27_500_000_000,
    }
}
