//! Analytic vs central finite-difference gradients of the full model loss.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardFault, Tape};
use crate::model::{Model, ModelConfig, ModelError};
use crate::scene_graph::{Behavior, NodeType, SceneSequence};
use crate::seed::derive_seed;

pub const FD_EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const COORDS_PER_TENSOR: usize = 30;
/// Denominator floor: below this magnitude both gradients count as zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub variant: String,
    pub nodes: usize,
    pub frames: usize,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A small random sequence: two vehicles and `nodes - 2` landmarks.
pub fn toy_sequence(nodes: usize, frames: usize, seed: u64) -> Result<SceneSequence, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck.sequence"));
    let vehicles = 2.min(nodes);
    let ids: Vec<u32> = (0..nodes as u32).map(|i| 10 + 3 * i).collect();
    let types: Vec<NodeType> = (0..nodes)
        .map(|i| if i < vehicles { NodeType::Vehicle } else { NodeType::Landmark })
        .collect();
    let start: Vec<[f64; 2]> =
        (0..nodes).map(|_| [rng.random_range(-6.0..6.0), rng.random_range(-10.0..30.0)]).collect();
    let velocity: Vec<[f64; 2]> =
        (0..nodes).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)]).collect();
    let positions = (0..frames)
        .map(|t| {
            start
                .iter()
                .zip(&velocity)
                .map(|(p, v)| [p[0] + v[0] * t as f64, p[1] + v[1] * t as f64])
                .collect()
        })
        .collect();
    let labels: BTreeMap<u32, Behavior> = ids[..vehicles]
        .iter()
        .map(|&id| (id, Behavior::ALL[rng.random_range(0..Behavior::ALL.len())]))
        .collect();
    Ok(SceneSequence::new(ids, types, positions, labels)?)
}

/// Checks every parameter tensor of a freshly initialized `config` model on
/// a toy sequence. `fault` corrupts the analytic backward pass.
pub fn gradcheck(
    config: &ModelConfig,
    nodes: usize,
    frames: usize,
    seed: u64,
    fault: BackwardFault,
) -> Result<GradcheckReport, ModelError> {
    let mut config = config.clone();
    config.seed = seed;
    config.frames = frames;
    let seq = toy_sequence(nodes, frames, seed)?;
    let mut model = Model::new(config.clone())?;
    let (_, analytic) = model.loss_and_grads_on(&mut Tape::with_fault(fault), &seq)?;

    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let len = model.params.get(&name).map_or(0, |t| t.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("gradcheck.{name}")));
        let picks = index::sample(&mut rng, len, COORDS_PER_TENSOR.min(len)).into_vec();
        let grad = analytic.get(&name);
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let original = model.params.get(&name).expect("listed").data()[i];
            let mut eval = |value: f64| -> Result<f64, ModelError> {
                model.params.get_mut(&name).expect("listed").value.data_mut()[i] = value;
                model.loss(&seq)
            };
            let plus = eval(original + FD_EPSILON)?;
            let minus = eval(original - FD_EPSILON)?;
            eval(original)?;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        tensors.push(TensorCheck { name, coords: picks.len(), max_rel_err: worst });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        variant: config.variant.to_string(),
        nodes,
        frames,
        tolerance: TOLERANCE,
        tensors,
        max_rel_err,
        passed: max_rel_err < TOLERANCE,
    })
}
