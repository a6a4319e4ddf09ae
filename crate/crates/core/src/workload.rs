//! Transformer workload accounting: parameters, per-token flops, KV-cache
//! footprint and the per-layer kernel list consumed by the simulator.
//!
//! Every decoder layer is treated as three stages of roughly equal weight:
//! attention (QKV + output projection), FFN-in and FFN-out. Embeddings and
//! the unembedding are not mapped to chiplets and are excluded throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of a decoder-only transformer.
///
/// Deserializes from JSON with the documented defaults filled in
/// (`d_ff = 4·d_model`, `d_attn = d_model`, `n_kv_heads = n_heads`,
/// two bytes per parameter and activation, two FFN matrices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec")]
pub struct ModelSpec {
    pub name: String,
    pub d_model: u64,
    pub n_layers: u64,
    pub d_ff: u64,
    pub d_attn: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub max_context: u64,
    pub bytes_per_param: f64,
    pub bytes_per_act: f64,
    /// 2 for a plain MLP, 3 for gated variants (SwiGLU: gate, up, down).
    pub ffn_matrices: u64,
    /// Flops charged per element for activations, norms and residual adds.
    pub elementwise_flops: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelSpec {
    name: String,
    d_model: u64,
    n_layers: u64,
    d_ff: Option<u64>,
    d_attn: Option<u64>,
    n_heads: u64,
    n_kv_heads: Option<u64>,
    max_context: u64,
    bytes_per_param: Option<f64>,
    bytes_per_act: Option<f64>,
    ffn_matrices: Option<u64>,
    elementwise_flops: Option<u64>,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        let spec = ModelSpec {
            d_ff: raw.d_ff.unwrap_or(4 * raw.d_model),
            d_attn: raw.d_attn.unwrap_or(raw.d_model),
            n_kv_heads: raw.n_kv_heads.unwrap_or(raw.n_heads),
            bytes_per_param: raw.bytes_per_param.unwrap_or(2.0),
            bytes_per_act: raw.bytes_per_act.unwrap_or(2.0),
            ffn_matrices: raw.ffn_matrices.unwrap_or(2),
            elementwise_flops: raw.elementwise_flops.unwrap_or(DEFAULT_ELEMENTWISE_FLOPS),
            name: raw.name,
            d_model: raw.d_model,
            n_layers: raw.n_layers,
            n_heads: raw.n_heads,
            max_context: raw.max_context,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub const DEFAULT_ELEMENTWISE_FLOPS: u64 = 4;

impl ModelSpec {
    /// Standard multi-head model with `d_ff = 4d`, `d_attn = d`.
    pub fn standard(name: &str, d_model: u64, n_layers: u64, n_heads: u64, max_context: u64) -> Self {
        ModelSpec {
            name: name.to_string(),
            d_model,
            n_layers,
            d_ff: 4 * d_model,
            d_attn: d_model,
            n_heads,
            n_kv_heads: n_heads,
            max_context,
            bytes_per_param: 2.0,
            bytes_per_act: 2.0,
            ffn_matrices: 2,
            elementwise_flops: DEFAULT_ELEMENTWISE_FLOPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidModel {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        let dims = [
            self.d_model,
            self.n_layers,
            self.d_ff,
            self.d_attn,
            self.n_heads,
            self.n_kv_heads,
            self.max_context,
        ];
        if dims.iter().any(|&v| v == 0) {
            return fail("all dimensions must be >= 1");
        }
        if self.n_kv_heads > self.n_heads || self.n_heads % self.n_kv_heads != 0 {
            return fail("n_kv_heads must divide n_heads");
        }
        if self.d_attn % self.n_heads != 0 {
            return fail("d_attn must be divisible by n_heads");
        }
        if !(self.bytes_per_param > 0.0) || !(self.bytes_per_act > 0.0) {
            return fail("byte widths must be positive");
        }
        if !(2..=3).contains(&self.ffn_matrices) {
            return fail("ffn_matrices must be 2 or 3");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.d_attn / self.n_heads
    }

    /// Width of the K (or V) projection: `head_dim · n_kv_heads`.
    pub fn kv_dim(&self) -> u64 {
        self.head_dim() * self.n_kv_heads
    }

    pub fn kv_ratio(&self) -> f64 {
        self.n_kv_heads as f64 / self.n_heads as f64
    }
}

/// Per-stage parameter counts of one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Q and output projections plus K and V (shrunk by the KV-head ratio).
    pub attention: u64,
    pub ffn_in: u64,
    pub ffn_out: u64,
}

impl LayerParams {
    pub fn total(&self) -> u64 {
        self.attention + self.ffn_in + self.ffn_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub layer: LayerParams,
    pub total: u64,
}

pub fn param_count(spec: &ModelSpec) -> ParamCount {
    let d = spec.d_model;
    let layer = LayerParams {
        attention: 2 * d * spec.d_attn + 2 * d * spec.kv_dim(),
        ffn_in: (spec.ffn_matrices - 1) * d * spec.d_ff,
        ffn_out: spec.d_ff * d,
    };
    ParamCount {
        total: layer.total() * spec.n_layers,
        layer,
    }
}

/// Flops of one layer for a single token at a given context position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub qkvo: u64,
    pub ffn_in: u64,
    pub ffn_out: u64,
    pub attn_score: u64,
    pub attn_context: u64,
    pub elementwise: u64,
}

impl LayerFlops {
    pub fn fc(&self) -> u64 {
        self.qkvo + self.ffn_in + self.ffn_out
    }

    pub fn attention(&self) -> u64 {
        self.attn_score + self.attn_context
    }

    pub fn total(&self) -> u64 {
        self.fc() + self.attention() + self.elementwise
    }

    /// Fraction of multiply-accumulates spent in FC layers.
    pub fn fc_mac_share(&self) -> f64 {
        self.fc() as f64 / (self.fc() + self.attention()) as f64
    }
}

pub fn flops_per_token(spec: &ModelSpec, context_pos: u64) -> Result<LayerFlops> {
    if context_pos == 0 || context_pos > spec.max_context {
        return Err(Error::ContextOutOfRange {
            pos: context_pos,
            max: spec.max_context,
        });
    }
    let p = param_count(spec).layer;
    let attn = 2 * context_pos * spec.d_attn;
    Ok(LayerFlops {
        qkvo: 2 * p.attention,
        ffn_in: 2 * p.ffn_in,
        ffn_out: 2 * p.ffn_out,
        attn_score: attn,
        attn_context: attn,
        elementwise: spec.elementwise_flops * elementwise_width(spec),
    })
}

fn elementwise_width(spec: &ModelSpec) -> u64 {
    // two norms + residual on the model width, activation on the FFN width
    2 * spec.d_model + spec.d_ff
}

pub fn kv_cache_bytes(spec: &ModelSpec, batch: u64, context: u64) -> Result<f64> {
    if batch == 0 {
        return Err(Error::ZeroBatch);
    }
    if context > spec.max_context {
        return Err(Error::ContextOutOfRange {
            pos: context,
            max: spec.max_context,
        });
    }
    Ok(kv_bytes_per_token(spec) * spec.n_layers as f64 * context as f64 * batch as f64)
}

/// K and V bytes stored per token per layer.
pub fn kv_bytes_per_token(spec: &ModelSpec) -> f64 {
    2.0 * spec.kv_dim() as f64 * spec.bytes_per_act
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Prefill,
    Generate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "FC-QKVO")]
    FcQkvo,
    #[serde(rename = "FC-FFN-IN")]
    FcFfnIn,
    #[serde(rename = "FC-FFN-OUT")]
    FcFfnOut,
    #[serde(rename = "ATTN-SCORE")]
    AttnScore,
    #[serde(rename = "ATTN-CONTEXT")]
    AttnContext,
    #[serde(rename = "ELEMENTWISE")]
    Elementwise,
}

impl KernelKind {
    pub fn is_fc(self) -> bool {
        matches!(self, KernelKind::FcQkvo | KernelKind::FcFfnIn | KernelKind::FcFfnOut)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, KernelKind::AttnScore | KernelKind::AttnContext)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub layer: u64,
    pub flops: u64,
    pub weight_bytes: u64,
    pub act_bytes: u64,
    pub kv_bytes_touched: u64,
}

impl Kernel {
    pub fn total_bytes(&self) -> u64 {
        self.weight_bytes + self.act_bytes + self.kv_bytes_touched
    }
}

fn bytes(count: u64, width: f64) -> u64 {
    (count as f64 * width).round() as u64
}

/// Kernels of a single layer, in execution order.
///
/// For `Generate`, one new token per sequence attends to `context` cached
/// positions. For `Prefill`, `context` tokens per sequence are processed in
/// one pass with causal attention.
pub fn layer_kernels(spec: &ModelSpec, phase: Phase, context: u64, batch: u64, layer: u64) -> [Kernel; 6] {
    let seq = match phase {
        Phase::Generate => 1,
        Phase::Prefill => context,
    };
    let tokens = batch * seq;
    let p = param_count(spec).layer;
    let d = spec.d_model;
    let (bpp, bpa) = (spec.bytes_per_param, spec.bytes_per_act);
    let kv_dim = spec.kv_dim();

    // query-key products per sequence
    let attn_macs_per_seq = match phase {
        Phase::Generate => context * spec.d_attn,
        Phase::Prefill => context * (context + 1) / 2 * spec.d_attn,
    };
    let kv_rows = batch * context;

    let fc = |kind, params: u64, act_width: u64| Kernel {
        kind,
        layer,
        flops: 2 * tokens * params,
        weight_bytes: bytes(params, bpp),
        act_bytes: bytes(tokens * act_width, bpa),
        kv_bytes_touched: 0,
    };
    let attn = |kind| Kernel {
        kind,
        layer,
        flops: 2 * batch * attn_macs_per_seq,
        weight_bytes: 0,
        act_bytes: bytes(tokens * spec.d_attn, bpa),
        kv_bytes_touched: bytes(kv_rows * kv_dim, bpa),
    };
    let ew = elementwise_width(spec);
    [
        fc(
            KernelKind::FcQkvo,
            p.attention,
            d + spec.d_attn + 2 * kv_dim + spec.d_attn + d,
        ),
        attn(KernelKind::AttnScore),
        attn(KernelKind::AttnContext),
        fc(
            KernelKind::FcFfnIn,
            p.ffn_in,
            d + (spec.ffn_matrices - 1) * spec.d_ff,
        ),
        fc(KernelKind::FcFfnOut, p.ffn_out, spec.d_ff + d),
        Kernel {
            kind: KernelKind::Elementwise,
            layer,
            flops: spec.elementwise_flops * tokens * ew,
            weight_bytes: 0,
            act_bytes: bytes(2 * tokens * ew, bpa),
            kv_bytes_touched: 0,
        },
    ]
}

pub fn decompose_kernels(spec: &ModelSpec, phase: Phase, context: u64, batch: u64) -> Vec<Kernel> {
    (0..spec.n_layers)
        .flat_map(|layer| layer_kernels(spec, phase, context, batch, layer))
        .collect()
}

pub fn operational_intensity(k: &Kernel) -> Result<f64> {
    match k.total_bytes() {
        0 => Err(Error::ZeroByteKernel),
        b => Ok(k.flops as f64 / b as f64),
    }
}

/// Models from the case study, with hyperparameters from their public
/// releases.
pub mod presets {
    use super::ModelSpec;

    pub fn gpt2() -> ModelSpec {
        ModelSpec::standard("GPT-2", 1600, 48, 25, 16 * 1024)
    }

    pub fn megatron() -> ModelSpec {
        ModelSpec::standard("Megatron", 3072, 72, 32, 256 * 1024)
    }

    pub fn gpt3() -> ModelSpec {
        ModelSpec::standard("GPT-3", 12288, 96, 96, 8 * 1024)
    }

    pub fn gopher() -> ModelSpec {
        ModelSpec::standard("Gopher", 16384, 80, 128, 16 * 1024)
    }

    pub fn mt_nlg() -> ModelSpec {
        ModelSpec::standard("MT-NLG", 20480, 105, 128, 16 * 1024)
    }

    pub fn bloom() -> ModelSpec {
        ModelSpec::standard("BLOOM", 14336, 70, 112, 16 * 1024)
    }

    /// Multi-query attention, SwiGLU FFN, 256-wide heads.
    pub fn palm() -> ModelSpec {
        ModelSpec {
            d_ff: 73728,
            d_attn: 48 * 256,
            n_kv_heads: 1,
            ffn_matrices: 3,
            ..ModelSpec::standard("PaLM", 18432, 118, 48, 2 * 1024)
        }
    }

    /// Grouped-query attention with 8 KV heads, SwiGLU FFN.
    pub fn llama2_70b() -> ModelSpec {
        ModelSpec {
            d_ff: 28672,
            n_kv_heads: 8,
            ffn_matrices: 3,
            ..ModelSpec::standard("Llama-2", 8192, 80, 64, 4 * 1024)
        }
    }

    pub fn all() -> Vec<ModelSpec> {
        vec![
            gpt2(),
            megatron(),
            gpt3(),
            gopher(),
            mt_nlg(),
            bloom(),
            palm(),
            llama2_70b(),
        ]
    }

    /// Case-insensitive lookup ignoring punctuation, so `gpt3`, `GPT-3`
    /// and `llama2` all resolve.
    pub fn by_name(name: &str) -> Option<ModelSpec> {
        let norm = |s: &str| -> String {
            s.chars()
                .filter(char::is_ascii_alphanumeric)
                .map(|c| c.to_ascii_lowercase())
                .collect()
        };
        let want = norm(name);
        all().into_iter().find(|m| norm(&m.name) == want)
    }
}
