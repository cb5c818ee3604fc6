use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::scene_graph::DEFAULT_FRAMES;

/// Architecture variants. `G`: MR-GCN, `L`: LSTM, `MA`: multi-head
/// attention, `SA`: single-head attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "G+L+MA")]
    GraphLstmMultiHead,
    #[serde(rename = "G+L+SA")]
    GraphLstmSingleHead,
    #[serde(rename = "G+L")]
    GraphLstm,
    #[serde(rename = "G+SA")]
    GraphSingleHead,
    #[serde(rename = "L")]
    Lstm,
    #[serde(rename = "L+MA")]
    LstmMultiHead,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::GraphLstmMultiHead,
        Variant::GraphLstmSingleHead,
        Variant::GraphLstm,
        Variant::GraphSingleHead,
        Variant::Lstm,
        Variant::LstmMultiHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GraphLstmMultiHead => "G+L+MA",
            Variant::GraphLstmSingleHead => "G+L+SA",
            Variant::GraphLstm => "G+L",
            Variant::GraphSingleHead => "G+SA",
            Variant::Lstm => "L",
            Variant::LstmMultiHead => "L+MA",
        }
    }

    pub fn uses_graph(self) -> bool {
        !matches!(self, Variant::Lstm | Variant::LstmMultiHead)
    }

    pub fn uses_lstm(self) -> bool {
        self != Variant::GraphSingleHead
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::GraphLstm | Variant::Lstm)
    }

    /// Default (heads, d_k, d_v) for a temporal input width `d`.
    pub fn default_attention(self, d: usize) -> (usize, usize, usize) {
        match self {
            Variant::GraphLstmSingleHead | Variant::GraphSingleHead => (1, d, d),
            _ => (4, d / 4, d / 4),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().replace(' ', "");
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(&wanted))
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

/// Hyperparameters of one model instance. Serialized as JSON.
///
/// Missing JSON fields take the defaults of the named variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialModelConfig")]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the learned object-type embeddings fed to the first MR-GCN layer.
    pub embed_dim: usize,
    /// Output width of each MR-GCN layer.
    pub mrgcn_dims: Vec<usize>,
    /// LSTM hidden width.
    pub hidden_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub frames: usize,
    /// Node budget for positional baseline features (target included).
    pub max_nodes: usize,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModelConfig {
    variant: Option<Variant>,
    embed_dim: Option<usize>,
    mrgcn_dims: Option<Vec<usize>>,
    hidden_dim: Option<usize>,
    heads: Option<usize>,
    d_k: Option<usize>,
    d_v: Option<usize>,
    frames: Option<usize>,
    max_nodes: Option<usize>,
    seed: Option<u64>,
}

impl From<PartialModelConfig> for ModelConfig {
    fn from(p: PartialModelConfig) -> Self {
        let base = ModelConfig::for_variant(p.variant.unwrap_or(Variant::GraphLstmMultiHead));
        ModelConfig {
            variant: base.variant,
            embed_dim: p.embed_dim.unwrap_or(base.embed_dim),
            mrgcn_dims: p.mrgcn_dims.unwrap_or(base.mrgcn_dims),
            hidden_dim: p.hidden_dim.unwrap_or(base.hidden_dim),
            heads: p.heads.unwrap_or(base.heads),
            d_k: p.d_k.unwrap_or(base.d_k),
            d_v: p.d_v.unwrap_or(base.d_v),
            frames: p.frames.unwrap_or(base.frames),
            max_nodes: p.max_nodes.unwrap_or(base.max_nodes),
            seed: p.seed.unwrap_or(base.seed),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(Variant::GraphLstmMultiHead)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let hidden_dim = 32;
        let (heads, d_k, d_v) = variant.default_attention(hidden_dim);
        Self {
            variant,
            embed_dim: 128,
            mrgcn_dims: vec![128, 32],
            hidden_dim,
            heads,
            d_k,
            d_v,
            frames: DEFAULT_FRAMES,
            max_nodes: 24,
            seed: 0,
        }
    }

    /// Width of the features entering attention or pooling.
    pub fn temporal_dim(&self) -> usize {
        if self.variant.uses_lstm() {
            self.hidden_dim
        } else {
            *self.mrgcn_dims.last().unwrap_or(&self.embed_dim)
        }
    }

    pub fn baseline_feature_dim(&self) -> usize {
        (self.max_nodes - 1) * 4
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.variant.uses_graph() && (self.mrgcn_dims.is_empty() || self.embed_dim == 0) {
            return bad("graph variants need an embedding width and at least one MR-GCN layer".into());
        }
        if self.mrgcn_dims.contains(&0) || self.hidden_dim == 0 || self.frames == 0 {
            return bad("dimensions and frame count must be positive".into());
        }
        if !self.variant.uses_graph() && self.max_nodes < 2 {
            return bad("baselines need max_nodes >= 2".into());
        }
        if self.variant.uses_attention() {
            if self.heads == 0 || self.d_k == 0 || self.d_v == 0 {
                return bad("attention needs heads, d_k, d_v > 0".into());
            }
            let d = self.temporal_dim();
            if self.heads * self.d_v != d {
                return bad(format!(
                    "heads·d_v = {}·{} must equal the attention input width {d}",
                    self.heads, self.d_v
                ));
            }
        }
        Ok(())
    }
}
