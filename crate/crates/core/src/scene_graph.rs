//! Per-frame quadrant scene graphs and labelled frame sequences.
//!
//! Positions are bird's-eye-view `[lateral, forward]` metres. For a subject
//! `i` and object `j`, the relation `S[i][j]` is the quadrant that `j`
//! occupies around `i`: "top" means at least as far forward, "right" means
//! at least as far to the right. Each ordered pair of distinct nodes gets
//! exactly one relation, so the four adjacency matrices partition `𝟙 − I`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

/// Frames per sequence used throughout training and evaluation.
pub const DEFAULT_FRAMES: usize = 10;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("non-finite position for node {node} in frame {frame}")]
    NonFinite { frame: usize, node: usize },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("landmark keep fraction must lie in (0, 1], got {0}")]
    KeepFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Vehicle,
    Landmark,
}

impl NodeType {
    /// Row of the object-type embedding table.
    pub fn index(self) -> usize {
        match self {
            NodeType::Vehicle => 0,
            NodeType::Landmark => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Relation {
    pub const ALL: [Relation; 4] =
        [Relation::TopLeft, Relation::TopRight, Relation::BottomLeft, Relation::BottomRight];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Snake-case name used in parameter paths.
    pub fn name(self) -> &'static str {
        match self {
            Relation::TopLeft => "top_left",
            Relation::TopRight => "top_right",
            Relation::BottomLeft => "bottom_left",
            Relation::BottomRight => "bottom_right",
        }
    }

    /// The relation seen from the other end of the pair.
    pub fn opposite(self) -> Relation {
        match self {
            Relation::TopLeft => Relation::BottomRight,
            Relation::TopRight => Relation::BottomLeft,
            Relation::BottomLeft => Relation::TopRight,
            Relation::BottomRight => Relation::TopLeft,
        }
    }
}

/// Maneuver classes, in the fixed label-encoding order 0..=5.
///
/// Serialized by abbreviation (`"MVA"`, ...); dataset records use the index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Behavior {
    /// Moving away from the camera.
    #[serde(rename = "MVA")]
    MovingAway,
    /// Moving towards the camera (oncoming).
    #[serde(rename = "MTU")]
    MovingTowards,
    #[serde(rename = "PRK")]
    Parked,
    /// Lane change, left lane to right lane.
    #[serde(rename = "LCL")]
    LaneChangeLeftToRight,
    /// Lane change, right lane to left lane.
    #[serde(rename = "LCR")]
    LaneChangeRightToLeft,
    /// Passing another moving vehicle.
    #[serde(rename = "OVT")]
    Overtaking,
}

pub const NUM_CLASSES: usize = 6;

impl Behavior {
    pub const ALL: [Behavior; NUM_CLASSES] = [
        Behavior::MovingAway,
        Behavior::MovingTowards,
        Behavior::Parked,
        Behavior::LaneChangeLeftToRight,
        Behavior::LaneChangeRightToLeft,
        Behavior::Overtaking,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Behavior> {
        Self::ALL.get(i).copied()
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Behavior::MovingAway => "MVA",
            Behavior::MovingTowards => "MTU",
            Behavior::Parked => "PRK",
            Behavior::LaneChangeLeftToRight => "LCL",
            Behavior::LaneChangeRightToLeft => "LCR",
            Behavior::Overtaking => "OVT",
        }
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Behavior::LaneChangeLeftToRight | Behavior::LaneChangeRightToLeft)
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|b| b.abbrev().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown behavior class {s:?}"))
    }
}

/// Quadrant of `object` relative to `subject`.
///
/// A zero lateral offset counts as right and a zero forward offset counts as
/// top; only strictly negative offsets map to left or bottom.
pub fn quadrant_relation(subject: [f64; 2], object: [f64; 2]) -> Relation {
    let lateral = object[0] - subject[0];
    let forward = object[1] - subject[1];
    match (forward >= 0.0, lateral >= 0.0) {
        (true, true) => Relation::TopRight,
        (true, false) => Relation::TopLeft,
        (false, true) => Relation::BottomRight,
        (false, false) => Relation::BottomLeft,
    }
}

/// One frame: four binary relation matrices over typed nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    n: usize,
    node_types: Vec<NodeType>,
    node_ids: Vec<u32>,
    adjacency: [Vec<u8>; 4],
}

impl SceneGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn node_ids(&self) -> &[u32] {
        &self.node_ids
    }

    /// Row-major `n × n` 0/1 matrix for `r`.
    pub fn adjacency(&self, r: Relation) -> &[u8] {
        &self.adjacency[r.index()]
    }

    pub fn relation(&self, i: usize, j: usize) -> Option<Relation> {
        Relation::ALL
            .into_iter()
            .find(|r| self.adjacency[r.index()][i * self.n + j] == 1)
    }

    /// `D_r⁻¹ A_r` as a dense tensor.
    pub fn normalized(&self, r: Relation) -> Tensor {
        let data = degree_normalize(self.adjacency(r), self.n);
        Tensor::from_parts(vec![self.n, self.n], data)
    }
}

/// Builds the all-pairs quadrant graph for one frame.
pub fn build_scene_graph(
    positions: &[[f64; 2]],
    node_types: &[NodeType],
    node_ids: &[u32],
) -> Result<SceneGraph, SceneError> {
    build_scene_graph_with_radius(positions, node_types, node_ids, None)
}

/// Like [`build_scene_graph`], optionally omitting pairs farther apart than
/// `radius` metres. With a radius the partition property no longer holds.
pub fn build_scene_graph_with_radius(
    positions: &[[f64; 2]],
    node_types: &[NodeType],
    node_ids: &[u32],
    radius: Option<f64>,
) -> Result<SceneGraph, SceneError> {
    let n = positions.len();
    if n == 0 {
        return Err(SceneError::Invalid("scene graph needs at least one node".into()));
    }
    if node_types.len() != n || node_ids.len() != n {
        return Err(SceneError::Invalid(format!(
            "{n} positions but {} types and {} ids",
            node_types.len(),
            node_ids.len()
        )));
    }
    if let Some(node) = positions.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(SceneError::NonFinite { frame: 0, node });
    }
    let mut adjacency: [Vec<u8>; 4] = std::array::from_fn(|_| vec![0u8; n * n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if let Some(r) = radius {
                let (dx, dy) = (positions[j][0] - positions[i][0], positions[j][1] - positions[i][1]);
                if dx.hypot(dy) > r {
                    continue;
                }
            }
            let rel = quadrant_relation(positions[i], positions[j]);
            adjacency[rel.index()][i * n + j] = 1;
        }
    }
    Ok(SceneGraph { n, node_types: node_types.to_vec(), node_ids: node_ids.to_vec(), adjacency })
}

/// Divides each row of a 0/1 `n × n` matrix by its out-degree; empty rows stay zero.
pub fn degree_normalize(adjacency: &[u8], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &adjacency[i * n..(i + 1) * n];
        let degree = row.iter().filter(|&&a| a != 0).count();
        if degree == 0 {
            continue;
        }
        let inv = 1.0 / degree as f64;
        for (o, &a) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            if a != 0 {
                *o = inv;
            }
        }
    }
    out
}

/// `T` frames over a fixed node set, with vehicle behavior labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    node_ids: Vec<u32>,
    node_types: Vec<NodeType>,
    positions: Vec<Vec<[f64; 2]>>,
    labels: BTreeMap<u32, Behavior>,
    frames: Vec<SceneGraph>,
}

impl SceneSequence {
    pub fn new(
        node_ids: Vec<u32>,
        node_types: Vec<NodeType>,
        positions: Vec<Vec<[f64; 2]>>,
        labels: BTreeMap<u32, Behavior>,
    ) -> Result<Self, SceneError> {
        let n = node_ids.len();
        if n == 0 || positions.is_empty() {
            return Err(SceneError::Invalid("sequence needs at least one node and one frame".into()));
        }
        if node_types.len() != n {
            return Err(SceneError::Invalid(format!("{n} ids but {} types", node_types.len())));
        }
        let unique: BTreeSet<u32> = node_ids.iter().copied().collect();
        if unique.len() != n {
            return Err(SceneError::Invalid("duplicate node ids".into()));
        }
        for (t, frame) in positions.iter().enumerate() {
            if frame.len() != n {
                return Err(SceneError::Invalid(format!(
                    "frame {t} has {} positions for {n} nodes",
                    frame.len()
                )));
            }
        }
        let vehicles: BTreeSet<u32> = node_ids
            .iter()
            .zip(&node_types)
            .filter(|(_, ty)| **ty == NodeType::Vehicle)
            .map(|(id, _)| *id)
            .collect();
        if vehicles.is_empty() {
            return Err(SceneError::Invalid("sequence has no vehicle nodes".into()));
        }
        let labelled: BTreeSet<u32> = labels.keys().copied().collect();
        if labelled != vehicles {
            return Err(SceneError::Invalid(format!(
                "labels must cover exactly the vehicle nodes; vehicles {vehicles:?}, labelled {labelled:?}"
            )));
        }
        let frames = positions
            .iter()
            .enumerate()
            .map(|(t, p)| {
                build_scene_graph(p, &node_types, &node_ids).map_err(|e| match e {
                    SceneError::NonFinite { node, .. } => SceneError::NonFinite { frame: t, node },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { node_ids, node_types, positions, labels, frames })
    }

    /// Number of frames.
    pub fn t(&self) -> usize {
        self.frames.len()
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[u32] {
        &self.node_ids
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    /// `positions()[t][i]` is node `i`'s `[lateral, forward]` in frame `t`.
    pub fn positions(&self) -> &[Vec<[f64; 2]>] {
        &self.positions
    }

    pub fn labels(&self) -> &BTreeMap<u32, Behavior> {
        &self.labels
    }

    pub fn frames(&self) -> &[SceneGraph] {
        &self.frames
    }

    pub fn vehicle_count(&self) -> usize {
        self.node_types.iter().filter(|t| **t == NodeType::Vehicle).count()
    }

    pub fn landmark_count(&self) -> usize {
        self.n() - self.vehicle_count()
    }

    /// Label of row `i`, `None` for landmarks.
    pub fn label_of(&self, i: usize) -> Option<Behavior> {
        self.labels.get(&self.node_ids[i]).copied()
    }

    /// Reorders nodes so that new row `k` is old row `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<SceneSequence, SceneError> {
        let n = self.n();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(SceneError::Invalid("not a permutation of the node rows".into()));
        }
        Self::new(
            order.iter().map(|&i| self.node_ids[i]).collect(),
            order.iter().map(|&i| self.node_types[i]).collect(),
            self.positions
                .iter()
                .map(|f| order.iter().map(|&i| f[i]).collect())
                .collect(),
            self.labels.clone(),
        )
    }

    /// Keeps only the listed rows (in the given order).
    pub fn select_nodes(&self, rows: &[usize]) -> Result<SceneSequence, SceneError> {
        let kept: BTreeSet<u32> = rows.iter().map(|&i| self.node_ids[i]).collect();
        Self::new(
            rows.iter().map(|&i| self.node_ids[i]).collect(),
            rows.iter().map(|&i| self.node_types[i]).collect(),
            self.positions.iter().map(|f| rows.iter().map(|&i| f[i]).collect()).collect(),
            self.labels
                .iter()
                .filter(|(id, _)| kept.contains(id))
                .map(|(id, b)| (*id, *b))
                .collect(),
        )
    }

    /// Rows in ascending node-id order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by_key(|&i| self.node_ids[i]);
        order
    }

    pub fn to_record(&self) -> SequenceRecord {
        SequenceRecord {
            frames: self.t(),
            node_ids: self.node_ids.clone(),
            node_types: self.node_types.clone(),
            positions: self.positions.clone(),
            labels: self.labels.iter().map(|(id, b)| (id.to_string(), b.index() as u8)).collect(),
        }
    }

    pub fn from_record(record: SequenceRecord) -> Result<Self, SceneError> {
        if record.positions.len() != record.frames {
            return Err(SceneError::Invalid(format!(
                "T = {} but {} frames of positions",
                record.frames,
                record.positions.len()
            )));
        }
        let mut labels = BTreeMap::new();
        for (key, class) in record.labels {
            let id: u32 = key
                .parse()
                .map_err(|_| SceneError::Invalid(format!("label key {key:?} is not a node id")))?;
            let behavior = Behavior::from_index(class as usize)
                .ok_or_else(|| SceneError::Invalid(format!("class {class} out of range 0..=5")))?;
            labels.insert(id, behavior);
        }
        Self::new(record.node_ids, record.node_types, record.positions, labels)
    }
}

/// One JSON Lines record of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    #[serde(rename = "T")]
    pub frames: usize,
    pub node_ids: Vec<u32>,
    pub node_types: Vec<NodeType>,
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Vehicle id (as string) → class index.
    pub labels: BTreeMap<String, u8>,
}

pub fn write_jsonl<W: Write>(mut out: W, sequences: &[SceneSequence]) -> Result<(), SceneError> {
    for seq in sequences {
        let line = serde_json::to_string(&seq.to_record()).map_err(std::io::Error::other)?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a JSON Lines dataset; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<SceneSequence>, SceneError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord = serde_json::from_str(&line)
            .map_err(|e| SceneError::Parse { line: line_no, detail: e.to_string() })?;
        let seq = SceneSequence::from_record(record)
            .map_err(|e| SceneError::Parse { line: line_no, detail: e.to_string() })?;
        out.push(seq);
    }
    Ok(out)
}

/// Retains `floor(keep_fraction · L)` of the `L` landmarks, chosen uniformly
/// once per sequence, plus every vehicle.
pub fn landmark_dropout(
    seq: &SceneSequence,
    keep_fraction: f64,
    seed: u64,
) -> Result<SceneSequence, SceneError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(SceneError::KeepFraction(keep_fraction));
    }
    if keep_fraction == 1.0 {
        return Ok(seq.clone());
    }
    let landmarks: Vec<usize> =
        (0..seq.n()).filter(|&i| seq.node_types[i] == NodeType::Landmark).collect();
    let keep = (keep_fraction * landmarks.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, landmarks.len(), keep)
        .into_iter()
        .map(|k| landmarks[k])
        .collect();
    let rows: Vec<usize> = (0..seq.n())
        .filter(|&i| seq.node_types[i] == NodeType::Vehicle || chosen.contains(&i))
        .collect();
    seq.select_nodes(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_frame_sequence(landmarks: usize) -> SceneSequence {
        let n = 2 + landmarks;
        let ids: Vec<u32> = (0..n as u32).map(|i| 10 + i).collect();
        let mut types = vec![NodeType::Vehicle, NodeType::Vehicle];
        types.extend(std::iter::repeat_n(NodeType::Landmark, landmarks));
        let frame = |shift: f64| -> Vec<[f64; 2]> {
            (0..n).map(|i| [i as f64 * 0.7 - 1.0, (i * i) as f64 * 0.3 - shift]).collect()
        };
        let labels = BTreeMap::from([(10, Behavior::Parked), (11, Behavior::Overtaking)]);
        SceneSequence::new(ids, types, vec![frame(0.0), frame(1.5)], labels).unwrap()
    }

    #[test]
    fn quadrant_examples() {
        assert_eq!(quadrant_relation([0.0, 0.0], [1.0, 1.0]), Relation::TopRight);
        assert_eq!(quadrant_relation([0.0, 0.0], [-2.0, -3.0]), Relation::BottomLeft);
        assert_eq!(quadrant_relation([0.0, 0.0], [0.0, 5.0]), Relation::TopRight);
        assert_eq!(quadrant_relation([0.0, 0.0], [-1.0, 0.0]), Relation::TopLeft);
        assert_eq!(quadrant_relation([0.0, 0.0], [2.0, -0.1]), Relation::BottomRight);
    }

    #[test]
    fn single_node_graph_is_empty() {
        let g = build_scene_graph(&[[3.0, 4.0]], &[NodeType::Vehicle], &[0]).unwrap();
        for r in Relation::ALL {
            assert_eq!(g.adjacency(r), &[0]);
        }
    }

    #[test]
    fn two_node_graph_is_antisymmetric() {
        let g = build_scene_graph(
            &[[0.0, 0.0], [1.0, 2.0]],
            &[NodeType::Vehicle, NodeType::Landmark],
            &[0, 1],
        )
        .unwrap();
        assert_eq!(g.adjacency(Relation::TopRight), &[0, 1, 0, 0]);
        assert_eq!(g.adjacency(Relation::BottomLeft), &[0, 0, 1, 0]);
        assert_eq!(g.adjacency(Relation::TopLeft), &[0; 4]);
        assert_eq!(g.adjacency(Relation::BottomRight), &[0; 4]);
    }

    #[test]
    fn non_finite_position_is_rejected() {
        let err = build_scene_graph(
            &[[0.0, 0.0], [f64::NAN, 1.0]],
            &[NodeType::Vehicle, NodeType::Vehicle],
            &[0, 1],
        );
        assert!(matches!(err, Err(SceneError::NonFinite { node: 1, .. })));
    }

    #[test]
    fn radius_drops_far_pairs() {
        let g = build_scene_graph_with_radius(
            &[[0.0, 0.0], [0.0, 1.0], [0.0, 50.0]],
            &[NodeType::Vehicle; 3],
            &[0, 1, 2],
            Some(10.0),
        )
        .unwrap();
        assert_eq!(g.relation(0, 1), Some(Relation::TopRight));
        assert_eq!(g.relation(0, 2), None);
    }

    #[test]
    fn degree_normalize_examples() {
        assert_eq!(degree_normalize(&[0, 1, 0, 0], 2), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(
            degree_normalize(&[0, 1, 1, 0, 0, 0, 0, 0, 0], 3)[..3],
            [0.0, 0.5, 0.5]
        );
        assert_eq!(degree_normalize(&[0; 9], 3), vec![0.0; 9]);
    }

    #[test]
    fn validation_rejects_bad_sequences() {
        let labels = BTreeMap::from([(0, Behavior::Parked)]);
        // No vehicles.
        assert!(SceneSequence::new(
            vec![0],
            vec![NodeType::Landmark],
            vec![vec![[0.0, 0.0]]],
            BTreeMap::new()
        )
        .is_err());
        // Landmark with a label.
        assert!(SceneSequence::new(
            vec![0, 1],
            vec![NodeType::Vehicle, NodeType::Landmark],
            vec![vec![[0.0, 0.0], [1.0, 1.0]]],
            BTreeMap::from([(0, Behavior::Parked), (1, Behavior::Parked)])
        )
        .is_err());
        // Ragged frame.
        assert!(SceneSequence::new(
            vec![0, 1],
            vec![NodeType::Vehicle, NodeType::Landmark],
            vec![vec![[0.0, 0.0]]],
            labels.clone()
        )
        .is_err());
        // Duplicate ids.
        assert!(SceneSequence::new(
            vec![0, 0],
            vec![NodeType::Vehicle, NodeType::Landmark],
            vec![vec![[0.0, 0.0], [1.0, 1.0]]],
            labels
        )
        .is_err());
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let seq = two_frame_sequence(3);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[seq.clone(), seq.clone()]).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![seq.clone(), seq]);
    }

    #[test]
    fn record_uses_documented_field_names() {
        let v = serde_json::to_value(two_frame_sequence(1).to_record()).unwrap();
        assert_eq!(v["T"], 2);
        assert_eq!(v["node_types"][2], "landmark");
        assert_eq!(v["labels"]["11"], 5);
        assert_eq!(v["positions"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn malformed_files_report_line() {
        let seq = two_frame_sequence(1);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[seq.clone(), seq]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated = &text[..text.len() - 20];
        match read_jsonl(truncated.as_bytes()) {
            Err(SceneError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error on line 2, got {other:?}"),
        }
        let no_vehicle = r#"{"T":1,"node_ids":[0],"node_types":["landmark"],"positions":[[[0.0,0.0]]],"labels":{}}"#;
        assert!(matches!(read_jsonl(no_vehicle.as_bytes()), Err(SceneError::Parse { line: 1, .. })));
        let missing = r#"{"T":1,"node_ids":[0]}"#;
        let err = read_jsonl(missing.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("missing field"), "{err}");
    }

    #[test]
    fn landmark_dropout_examples() {
        let seq = two_frame_sequence(8);
        assert_eq!(landmark_dropout(&seq, 1.0, 3).unwrap(), seq);
        let half = landmark_dropout(&seq, 0.5, 3).unwrap();
        assert_eq!(half.landmark_count(), 4);
        assert_eq!(half.vehicle_count(), 2);
        assert_eq!(half.labels(), seq.labels());
        for frame in half.frames() {
            assert_eq!(frame.node_ids(), half.node_ids());
        }
        let three_q = landmark_dropout(&seq, 0.75, 3).unwrap();
        assert_eq!(three_q.landmark_count(), 6);
        assert_eq!(landmark_dropout(&seq, 0.5, 3).unwrap(), half);
        assert!(matches!(landmark_dropout(&seq, 0.0, 3), Err(SceneError::KeepFraction(_))));
        assert!(matches!(landmark_dropout(&seq, 1.5, 3), Err(SceneError::KeepFraction(_))));
    }

    #[test]
    fn behavior_names_parse() {
        for b in Behavior::ALL {
            assert_eq!(b.abbrev().parse::<Behavior>().unwrap(), b);
            assert_eq!(Behavior::from_index(b.index()), Some(b));
        }
        assert!("XYZ".parse::<Behavior>().is_err());
    }
}
