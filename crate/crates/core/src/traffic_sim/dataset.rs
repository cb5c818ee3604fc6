use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_scenario_for, simulate, SimError, WorldConfig};
use crate::scene_graph::{read_jsonl, write_jsonl, Behavior, SceneSequence, NUM_CLASSES};
use crate::seed::derive_seed;

pub const DATASET_FORMAT: &str = "maneuver-graph-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: WorldConfig,
    pub n_sequences: usize,
    pub class_mix: [f64; NUM_CLASSES],
    /// Scripted (primary) class of each sequence, by index.
    pub primary_classes: Vec<Behavior>,
    pub class_counts: BTreeMap<String, usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SceneSequence>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn select(&self, indices: &[usize]) -> Vec<SceneSequence> {
        indices.iter().map(|&i| self.sequences[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<SceneSequence> {
        self.select(&self.manifest.split.train)
    }

    pub fn val(&self) -> Vec<SceneSequence> {
        self.select(&self.manifest.split.val)
    }

    pub fn test(&self) -> Vec<SceneSequence> {
        self.select(&self.manifest.split.test)
    }
}

/// Per-class counts for `n` items by largest remainder.
pub fn stratified_counts(n: usize, mix: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let exact: Vec<f64> = mix.iter().map(|w| w * n as f64).collect();
    let mut counts = [0usize; NUM_CLASSES];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        counts[c] += 1;
    }
    counts
}

/// Generates `n` sequences with stratified primary classes and a 80/10/10
/// split taken round-robin within each class.
pub fn generate_dataset(
    n: usize,
    class_mix: &[f64; NUM_CLASSES],
    config: &WorldConfig,
    seed: u64,
) -> Result<Dataset, SimError> {
    super::check_mix(class_mix)?;
    config.validate()?;
    let counts = stratified_counts(n, class_mix);
    // Interleave classes so any prefix is roughly balanced.
    let mut remaining = counts;
    let mut classes = Vec::with_capacity(n);
    while classes.len() < n {
        for (c, left) in remaining.iter_mut().enumerate() {
            if *left > 0 {
                *left -= 1;
                classes.push(Behavior::ALL[c]);
            }
        }
    }

    let mut sequences = Vec::with_capacity(n);
    for (i, &class) in classes.iter().enumerate() {
        let scenario = generate_scenario_for(class, config, derive_seed(seed, &format!("sequence.{i}")))?;
        sequences.push(simulate(&scenario)?);
    }

    let mut split = Split::default();
    let mut seen = [0usize; NUM_CLASSES];
    for (i, class) in classes.iter().enumerate() {
        let k = seen[class.index()];
        seen[class.index()] += 1;
        match k % 10 {
            0 => split.test.push(i),
            1 => split.val.push(i),
            _ => split.train.push(i),
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        seed,
        config_hash: config.hash(),
        config: config.clone(),
        n_sequences: n,
        class_mix: *class_mix,
        primary_classes: classes,
        class_counts: Behavior::ALL.iter().map(|b| (b.abbrev().to_string(), counts[b.index()])).collect(),
        split,
    };
    Ok(Dataset { sequences, manifest })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.display().to_string(), source }
}

/// Writes `sequences.jsonl` and `manifest.json` into `dir`, creating it.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let seq_path = dir.join(SEQUENCES_FILE);
    let file = fs::File::create(&seq_path).map_err(io_err(&seq_path))?;
    let mut out = BufWriter::new(file);
    write_jsonl(&mut out, &dataset.sequences)?;
    out.flush().map_err(io_err(&seq_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SimError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| SimError::Dataset(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
        return Err(SimError::Dataset(format!(
            "unsupported dataset format {:?} v{}",
            manifest.format, manifest.version
        )));
    }
    let seq_path = dir.join(SEQUENCES_FILE);
    let file = fs::File::open(&seq_path).map_err(io_err(&seq_path))?;
    let sequences = read_jsonl(BufReader::new(file))?;
    if sequences.len() != manifest.n_sequences {
        return Err(SimError::Dataset(format!(
            "manifest lists {} sequences, file has {}",
            manifest.n_sequences,
            sequences.len()
        )));
    }
    let split = &manifest.split;
    if split.train.iter().chain(&split.val).chain(&split.test).any(|&i| i >= sequences.len()) {
        return Err(SimError::Dataset("split index out of range".into()));
    }
    Ok(Dataset { sequences, manifest })
}
