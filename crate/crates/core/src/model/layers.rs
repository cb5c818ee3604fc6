//! Differentiable building blocks. Each function records onto a caller-owned
//! tape and takes its weights as already-bound tape variables.

use crate::autodiff::{Tape, Tensor, Var};
use crate::scene_graph::{Relation, SceneGraph};

use super::ModelError;

/// One MR-GCN layer: a weight per quadrant relation plus a self-loop weight,
/// all `d_in × d_out`.
#[derive(Clone, Copy, Debug)]
pub struct MrGcnLayerVars {
    pub relation: [Var; 4],
    pub self_loop: Var,
}

/// Fused LSTM weights. Gate column blocks are ordered input, forget,
/// candidate, output: `w_x` is `d_in × 4h`, `w_h` is `h × 4h`, `bias` is `4h`.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub heads: Vec<HeadVars>,
    pub d_k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

/// Hidden and cell state, each `rows × h`. `None` means the zero state.
#[derive(Clone, Copy, Debug, Default)]
pub struct LstmState {
    pub hidden: Option<Var>,
    pub cell: Option<Var>,
}

/// `ReLU(Σ_r Â_r·H·W_r + H·W_s)` for a single frame.
pub fn mrgcn_layer(
    tape: &mut Tape,
    graph: &SceneGraph,
    h: Var,
    layer: &MrGcnLayerVars,
) -> Result<Var, ModelError> {
    if tape.shape(h)[0] != graph.n() {
        return Err(ModelError::Dimension(format!(
            "feature rows {} != graph nodes {}",
            tape.shape(h)[0],
            graph.n()
        )));
    }
    let mut acc = tape.matmul(h, layer.self_loop)?;
    for r in Relation::ALL {
        let a_hat = tape.constant(graph.normalized(r));
        let agg = tape.matmul(a_hat, h)?;
        let term = tape.matmul(agg, layer.relation[r.index()])?;
        acc = tape.add(acc, term)?;
    }
    Ok(tape.relu(acc)?)
}

/// Stacked MR-GCN over every frame, returning one `n × d_K` embedding per frame.
///
/// The first layer's input is the type-embedding lookup, so `Â_r·H⁰·W_r`
/// is evaluated as `(Â_r·onehot)·(E_o·W_r)`; later layers project all
/// frames at once and aggregate per frame. Both are algebraically the same
/// as applying [`mrgcn_layer`] frame by frame.
pub fn spatial_encode(
    tape: &mut Tape,
    frames: &[SceneGraph],
    embeddings: Var,
    layers: &[MrGcnLayerVars],
) -> Result<Vec<Var>, ModelError> {
    let first = layers
        .first()
        .ok_or_else(|| ModelError::Config("spatial encoder needs at least one layer".into()))?;
    let graph0 = frames
        .first()
        .ok_or_else(|| ModelError::Dimension("sequence has no frames".into()))?;
    let n = graph0.n();
    let types: Vec<usize> = graph0.node_types().iter().map(|t| t.index()).collect();
    let num_types = tape.shape(embeddings)[0];

    // Per-type projections, stacked as [E_o W_tl; E_o W_tr; E_o W_bl; E_o W_br; E_o W_s].
    let mut blocks = Vec::with_capacity(5);
    for r in Relation::ALL {
        blocks.push(tape.matmul(embeddings, first.relation[r.index()])?);
    }
    blocks.push(tape.matmul(embeddings, first.self_loop)?);
    let projected = tape.concat(&blocks, 0)?;

    // Per-frame mixing rows [Â_tl·1_type | … | Â_br·1_type | 1_type].
    let width = 5 * num_types;
    let mut mix = vec![0.0; frames.len() * n * width];
    for (t, graph) in frames.iter().enumerate() {
        for r in Relation::ALL {
            let a_hat = graph.normalized(r);
            for i in 0..n {
                let row = &mut mix[(t * n + i) * width..(t * n + i + 1) * width];
                for (j, &w) in a_hat.row(i).iter().enumerate() {
                    if w != 0.0 {
                        row[r.index() * num_types + types[j]] += w;
                    }
                }
            }
        }
        for (i, &ty) in types.iter().enumerate() {
            mix[(t * n + i) * width + 4 * num_types + ty] = 1.0;
        }
    }
    let mix = tape.constant(Tensor::new(vec![frames.len() * n, width], mix)?);
    let pre = tape.matmul(mix, projected)?;
    let mut h_all = tape.relu(pre)?;

    let normalized: Vec<[Tensor; 4]> = if layers.len() > 1 {
        frames.iter().map(|g| Relation::ALL.map(|r| g.normalized(r))).collect()
    } else {
        Vec::new()
    };
    for layer in &layers[1..] {
        let d_out = tape.shape(layer.self_loop)[1];
        let mut weights: Vec<Var> = layer.relation.to_vec();
        weights.push(layer.self_loop);
        let w_cat = tape.concat(&weights, 1)?;
        let y = tape.matmul(h_all, w_cat)?;
        let mut outs = Vec::with_capacity(frames.len());
        for (t, a_hats) in normalized.iter().enumerate() {
            let y_t = tape.slice(y, 0, t * n, n)?;
            let mut acc = tape.slice(y_t, 1, 4 * d_out, d_out)?;
            for r in Relation::ALL {
                let block = tape.slice(y_t, 1, r.index() * d_out, d_out)?;
                let a = tape.constant(a_hats[r.index()].clone());
                let term = tape.matmul(a, block)?;
                acc = tape.add(acc, term)?;
            }
            outs.push(acc);
        }
        let stacked = tape.concat(&outs, 0)?;
        h_all = tape.relu(stacked)?;
    }

    (0..frames.len()).map(|t| Ok(tape.slice(h_all, 0, t * n, n)?)).collect()
}

/// One LSTM step applied row-wise.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    state: LstmState,
    lstm: &LstmVars,
) -> Result<LstmState, ModelError> {
    let h = lstm.hidden;
    let proj = tape.matmul(x, lstm.w_x)?;
    let mut gates = tape.add_row(proj, lstm.bias)?;
    if let Some(prev) = state.hidden {
        if tape.shape(prev) != [tape.shape(x)[0], h] {
            return Err(ModelError::Dimension(format!(
                "state {:?} for {} rows of width {h}",
                tape.shape(prev),
                tape.shape(x)[0]
            )));
        }
        let rec = tape.matmul(prev, lstm.w_h)?;
        gates = tape.add(gates, rec)?;
    }
    let i_pre = tape.slice(gates, 1, 0, h)?;
    let f_pre = tape.slice(gates, 1, h, h)?;
    let g_pre = tape.slice(gates, 1, 2 * h, h)?;
    let o_pre = tape.slice(gates, 1, 3 * h, h)?;
    let input = tape.sigmoid(i_pre)?;
    let candidate = tape.tanh(g_pre)?;
    let output = tape.sigmoid(o_pre)?;
    let mut cell = tape.mul(input, candidate)?;
    if let Some(prev_cell) = state.cell {
        let forget = tape.sigmoid(f_pre)?;
        let kept = tape.mul(forget, prev_cell)?;
        cell = tape.add(kept, cell)?;
    }
    let squashed = tape.tanh(cell)?;
    let hidden = tape.mul(output, squashed)?;
    Ok(LstmState { hidden: Some(hidden), cell: Some(cell) })
}

/// Runs the LSTM over per-frame inputs from the zero state; returns the
/// hidden output of every step.
pub fn lstm_sequence(tape: &mut Tape, inputs: &[Var], lstm: &LstmVars) -> Result<Vec<Var>, ModelError> {
    let mut state = LstmState::default();
    let mut outs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = lstm_step(tape, x, state, lstm)?;
        outs.push(state.hidden.expect("set by lstm_step"));
    }
    Ok(outs)
}

/// Self-attention over the time axis, independently for each row.
///
/// `c` is `rows × T × d`; the result is `rows × T × (M·d_v)` with heads
/// concatenated in order.
pub fn multi_head_attention(tape: &mut Tape, c: Var, attn: &AttentionVars) -> Result<Var, ModelError> {
    let shape = tape.shape(c).to_vec();
    if shape.len() != 3 {
        return Err(ModelError::Dimension(format!("attention input must be rows×T×d, got {shape:?}")));
    }
    let (rows, t) = (shape[0], shape[1]);
    let flat = tape.reshape(c, &[rows * t, shape[2]])?;
    let mut outs = Vec::with_capacity(attn.heads.len());
    for head in &attn.heads {
        let weights = head_weights(tape, flat, [rows, t], head, attn.d_k)?;
        let v = project(tape, flat, [rows, t], head.value)?;
        outs.push(tape.batch_matmul(weights, v)?);
    }
    Ok(tape.concat(&outs, 2)?)
}

/// Attention weights of one head, `rows × T × T`; row `[i, s, :]` is the
/// distribution over time steps attended from step `s`.
pub fn attention_weights(tape: &mut Tape, c: Var, head: &HeadVars, d_k: usize) -> Result<Var, ModelError> {
    let shape = tape.shape(c).to_vec();
    if shape.len() != 3 {
        return Err(ModelError::Dimension(format!("attention input must be rows×T×d, got {shape:?}")));
    }
    let flat = tape.reshape(c, &[shape[0] * shape[1], shape[2]])?;
    head_weights(tape, flat, [shape[0], shape[1]], head, d_k)
}

fn project(tape: &mut Tape, flat: Var, [rows, t]: [usize; 2], w: Var) -> Result<Var, ModelError> {
    let width = tape.shape(w)[1];
    let p = tape.matmul(flat, w)?;
    Ok(tape.reshape(p, &[rows, t, width])?)
}

fn head_weights(
    tape: &mut Tape,
    flat: Var,
    dims: [usize; 2],
    head: &HeadVars,
    d_k: usize,
) -> Result<Var, ModelError> {
    let q = project(tape, flat, dims, head.query)?;
    let k = project(tape, flat, dims, head.key)?;
    let kt = tape.transpose_last(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    Ok(tape.softmax(scores, 2)?)
}

/// Mean over time followed by a dense projection to class logits.
pub fn classify(tape: &mut Tape, z: Var, head: &ClassifierVars) -> Result<Var, ModelError> {
    let pooled = tape.mean_pool(z, 1)?;
    let logits = tape.matmul(pooled, head.weight)?;
    Ok(tape.add_row(logits, head.bias)?)
}
