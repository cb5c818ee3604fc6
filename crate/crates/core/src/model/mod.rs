//! Spatio-temporal maneuver classifier: stacked MR-GCN over per-frame scene
//! graphs, a shared LSTM over time, per-node temporal self-attention and an
//! average-pool linear head. Also hosts the positional-feature baselines.

mod config;
mod layers;

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Checkpoint, ParamStore, Tape, Tensor, TensorError, Var};
use crate::scene_graph::{Behavior, NodeType, Relation, SceneError, SceneSequence, NUM_CLASSES};
use crate::seed::derive_seed;

pub use config::{ModelConfig, Variant};
pub use layers::{
    attention_weights, classify, lstm_sequence, lstm_step, mrgcn_layer, multi_head_attention,
    spatial_encode, AttentionVars, ClassifierVars, HeadVars, LstmState, LstmVars, MrGcnLayerVars,
};

/// Number of node types (vehicle, landmark).
pub const NUM_NODE_TYPES: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training: {0}")]
    Training(String),
}

pub fn mrgcn_weight_name(layer: usize, r: Relation) -> String {
    format!("mrgcn.{layer}.W_r.{}", r.name())
}

pub fn mrgcn_self_name(layer: usize) -> String {
    format!("mrgcn.{layer}.W_s")
}

pub fn attention_name(head: usize, which: &str) -> String {
    format!("attn.head{head}.{which}")
}

/// Every parameter the variant instantiates, with its shape.
pub fn parameter_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    config.validate()?;
    let mut shapes = Vec::new();
    let spatial_in;
    if config.variant.uses_graph() {
        shapes.push(("embed.E_o".to_string(), vec![NUM_NODE_TYPES, config.embed_dim]));
        let mut d_in = config.embed_dim;
        for (k, &d_out) in config.mrgcn_dims.iter().enumerate() {
            for r in Relation::ALL {
                shapes.push((mrgcn_weight_name(k, r), vec![d_in, d_out]));
            }
            shapes.push((mrgcn_self_name(k), vec![d_in, d_out]));
            d_in = d_out;
        }
        spatial_in = d_in;
    } else {
        spatial_in = config.baseline_feature_dim();
    }
    if config.variant.uses_lstm() {
        let h = config.hidden_dim;
        shapes.push(("lstm.W_x".to_string(), vec![spatial_in, 4 * h]));
        shapes.push(("lstm.W_h".to_string(), vec![h, 4 * h]));
        shapes.push(("lstm.b".to_string(), vec![4 * h]));
    }
    let d = config.temporal_dim();
    if config.variant.uses_attention() {
        for m in 0..config.heads {
            shapes.push((attention_name(m, "W_q"), vec![d, config.d_k]));
            shapes.push((attention_name(m, "W_k"), vec![d, config.d_k]));
            shapes.push((attention_name(m, "W_v"), vec![d, config.d_v]));
        }
    }
    shapes.push(("head.W_l".to_string(), vec![d, NUM_CLASSES]));
    shapes.push(("head.b".to_string(), vec![NUM_CLASSES]));
    Ok(shapes)
}

/// Seeded initialization. Each tensor draws from its own stream keyed by
/// name, so variants sharing a parameter name and shape start identical.
pub fn init_params(config: &ModelConfig) -> Result<ParamStore, ModelError> {
    let mut store = ParamStore::new();
    let embed_dist = Normal::new(0.0, 0.02).expect("valid normal");
    for (name, shape) in parameter_shapes(config)? {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &name));
        let len: usize = shape.iter().product();
        let data: Vec<f64> = if name == "embed.E_o" {
            (0..len).map(|_| embed_dist.sample(&mut rng)).collect()
        } else if name == "lstm.b" {
            let h = config.hidden_dim;
            (0..len).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
        } else if name == "head.b" {
            vec![0.0; len]
        } else {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Tape variables for one bound copy of the parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embeddings: Option<Var>,
    pub mrgcn: Vec<MrGcnLayerVars>,
    pub lstm: Option<LstmVars>,
    pub attention: Option<AttentionVars>,
    pub head: ClassifierVars,
}

impl ModelVars {
    pub fn from_bound(config: &ModelConfig, bound: &BTreeMap<String, Var>) -> Result<Self, ModelError> {
        let get = |name: &str| {
            bound
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))
        };
        let variant = config.variant;
        let (embeddings, mrgcn) = if variant.uses_graph() {
            let layers = (0..config.mrgcn_dims.len())
                .map(|k| {
                    Ok(MrGcnLayerVars {
                        relation: [
                            get(&mrgcn_weight_name(k, Relation::TopLeft))?,
                            get(&mrgcn_weight_name(k, Relation::TopRight))?,
                            get(&mrgcn_weight_name(k, Relation::BottomLeft))?,
                            get(&mrgcn_weight_name(k, Relation::BottomRight))?,
                        ],
                        self_loop: get(&mrgcn_self_name(k))?,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            (Some(get("embed.E_o")?), layers)
        } else {
            (None, Vec::new())
        };
        let lstm = if variant.uses_lstm() {
            Some(LstmVars {
                w_x: get("lstm.W_x")?,
                w_h: get("lstm.W_h")?,
                bias: get("lstm.b")?,
                hidden: config.hidden_dim,
            })
        } else {
            None
        };
        let attention = if variant.uses_attention() {
            let heads = (0..config.heads)
                .map(|m| {
                    Ok(HeadVars {
                        query: get(&attention_name(m, "W_q"))?,
                        key: get(&attention_name(m, "W_k"))?,
                        value: get(&attention_name(m, "W_v"))?,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            Some(AttentionVars { heads, d_k: config.d_k })
        } else {
            None
        };
        let head = ClassifierVars { weight: get("head.W_l")?, bias: get("head.b")? };
        Ok(Self { embeddings, mrgcn, lstm, attention, head })
    }
}

/// Logits on the tape. Row `k` of `logits` belongs to sequence row `rows[k]`.
#[derive(Clone, Debug)]
pub struct Output {
    pub logits: Var,
    pub rows: Vec<usize>,
}

/// Per-frame positional features for every vehicle, in the vehicle's row
/// order: `[distance, angle, onehot(type)]` for each other node by
/// ascending id, zero-padded or truncated to `max_nodes - 1` nodes.
///
/// Returns the vehicle rows and one `vehicles × F` tensor per frame.
pub fn baseline_features(
    seq: &SceneSequence,
    max_nodes: usize,
) -> Result<(Vec<usize>, Vec<Tensor>), ModelError> {
    if max_nodes < 2 {
        return Err(ModelError::Config("max_nodes must be at least 2".into()));
    }
    let slots = max_nodes - 1;
    let width = slots * 4;
    let by_id = seq.canonical_order();
    let vehicles: Vec<usize> = (0..seq.n())
        .filter(|&i| seq.node_types()[i] == NodeType::Vehicle)
        .collect();
    let frames = seq
        .positions()
        .iter()
        .map(|frame| {
            let mut data = vec![0.0; vehicles.len() * width];
            for (v, &target) in vehicles.iter().enumerate() {
                let row = &mut data[v * width..(v + 1) * width];
                let others = by_id.iter().filter(|&&j| j != target).take(slots);
                for (slot, &j) in others.enumerate() {
                    let dx = frame[j][0] - frame[target][0];
                    let dy = frame[j][1] - frame[target][1];
                    let cell = &mut row[slot * 4..slot * 4 + 4];
                    cell[0] = dx.hypot(dy);
                    cell[1] = dy.atan2(dx);
                    cell[2 + seq.node_types()[j].index()] = 1.0;
                }
            }
            Tensor::new(vec![vehicles.len(), width], data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((vehicles, frames))
}

/// Temporal stack shared by every variant: optional LSTM, optional
/// attention, pooling and the linear head over `rows × d` per-frame inputs.
fn temporal_head(tape: &mut Tape, inputs: &[Var], vars: &ModelVars) -> Result<Var, ModelError> {
    let states = match &vars.lstm {
        Some(lstm) => lstm_sequence(tape, inputs, lstm)?,
        None => inputs.to_vec(),
    };
    let mut z = tape.stack(&states, 1)?;
    if let Some(attn) = &vars.attention {
        z = multi_head_attention(tape, z, attn)?;
    }
    classify(tape, z, &vars.head)
}

/// Records the forward pass for `seq` onto `tape`.
///
/// Graph variants return a row for every node (landmark rows carry logits
/// that the loss ignores); baselines return vehicle rows only. Nodes are
/// processed in ascending id order and mapped back, so the result depends
/// on node identity rather than row order.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &ModelVars,
    seq: &SceneSequence,
) -> Result<Output, ModelError> {
    let order = seq.canonical_order();
    let canonical: Cow<SceneSequence> = if order.iter().enumerate().all(|(k, &i)| k == i) {
        Cow::Borrowed(seq)
    } else {
        Cow::Owned(seq.permuted(&order)?)
    };
    let mut position = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        position[i] = k;
    }

    if config.variant.uses_graph() {
        let embeddings = vars
            .embeddings
            .ok_or_else(|| ModelError::Config("graph variant without embeddings".into()))?;
        let spatial = spatial_encode(tape, canonical.frames(), embeddings, &vars.mrgcn)?;
        let logits = temporal_head(tape, &spatial, vars)?;
        let logits = tape.gather_rows(logits, &position)?;
        Ok(Output { logits, rows: (0..seq.n()).collect() })
    } else {
        let (vehicle_rows, features) = baseline_features(&canonical, config.max_nodes)?;
        let inputs: Vec<Var> = features.into_iter().map(|f| tape.constant(f)).collect();
        let logits = temporal_head(tape, &inputs, vars)?;
        // Canonical vehicle rank of every original vehicle row.
        let mut rank = vec![usize::MAX; order.len()];
        for (k, &row) in vehicle_rows.iter().enumerate() {
            rank[row] = k;
        }
        let rows: Vec<usize> = (0..seq.n())
            .filter(|&i| seq.node_types()[i] == NodeType::Vehicle)
            .collect();
        let gather: Vec<usize> = rows.iter().map(|&i| rank[position[i]]).collect();
        let logits = tape.gather_rows(logits, &gather)?;
        Ok(Output { logits, rows })
    }
}

/// Mean cross-entropy over the labelled rows of `output`.
pub fn sequence_loss(tape: &mut Tape, output: &Output, seq: &SceneSequence) -> Result<Var, ModelError> {
    let labels: Vec<Option<Behavior>> = output.rows.iter().map(|&i| seq.label_of(i)).collect();
    let targets: Vec<usize> = labels.iter().map(|l| l.map_or(0, Behavior::index)).collect();
    let mask: Vec<bool> = labels.iter().map(Option::is_some).collect();
    Ok(tape.cross_entropy(output.logits, &targets, &mask)?)
}

/// Logits for one sequence as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `rows.len() × 6`.
    pub logits: Tensor,
    pub rows: Vec<usize>,
}

impl Prediction {
    /// `(row, true label, predicted class)` for every labelled row.
    pub fn labelled(&self, seq: &SceneSequence) -> Vec<(usize, Behavior, Behavior)> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(k, &row)| {
                let truth = seq.label_of(row)?;
                let scores = self.logits.row(k);
                let best = argmax(scores);
                Some((row, truth, Behavior::ALL[best]))
            })
            .collect()
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// A config plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model, checking that the stored tensors match the config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(ckpt.model_config.clone())
            .map_err(|e| ModelError::Checkpoint(format!("bad model_config: {e}")))?;
        let params = ParamStore::from_checkpoint(ckpt)?;
        let expected = parameter_shapes(&config)?;
        if expected.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors for {}, found {}",
                expected.len(),
                config.variant,
                params.len()
            )));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Checkpoint(format!(
                        "{name} has shape {:?}, config needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        self.params.to_checkpoint(config)
    }

    pub fn predict(&self, seq: &SceneSequence) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = ModelVars::from_bound(&self.config, &bound)?;
        let out = forward(&mut tape, &self.config, &vars, seq)?;
        Ok(Prediction { logits: tape.value(out.logits).clone(), rows: out.rows })
    }

    pub fn loss(&self, seq: &SceneSequence) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = ModelVars::from_bound(&self.config, &bound)?;
        let out = forward(&mut tape, &self.config, &vars, seq)?;
        let loss = sequence_loss(&mut tape, &out, seq)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and per-parameter gradients for one sequence, on a fresh tape.
    pub fn loss_and_grads(
        &self,
        seq: &SceneSequence,
    ) -> Result<(f64, BTreeMap<String, Tensor>), ModelError> {
        self.loss_and_grads_on(&mut Tape::new(), seq)
    }

    /// As [`Self::loss_and_grads`] but records onto `tape` (which is reset first).
    pub fn loss_and_grads_on(
        &self,
        tape: &mut Tape,
        seq: &SceneSequence,
    ) -> Result<(f64, BTreeMap<String, Tensor>), ModelError> {
        tape.reset();
        let bound = self.params.bind(tape);
        let vars = ModelVars::from_bound(&self.config, &bound)?;
        let out = forward(tape, &self.config, &vars, seq)?;
        let loss = sequence_loss(tape, &out, seq)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        Ok((value, ParamStore::collect_grads(&bound, &mut grads)))
    }
}
