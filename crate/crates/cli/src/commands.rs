use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maneuver_core::autodiff::BackwardFault;
use maneuver_core::experiments::{self, RunSpec};
use maneuver_core::gradcheck::gradcheck as check_gradients;
use maneuver_core::metrics::evaluate;
use maneuver_core::scene_graph::NUM_CLASSES;
use maneuver_core::seed::sha256_hex;
use maneuver_core::traffic_sim::{generate_dataset, load_dataset, write_dataset, Dataset, SEQUENCES_FILE};
use maneuver_core::{Checkpoint, Model, ModelConfig, TrainConfig, Variant, WorldConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::*;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(CliError::json(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(CliError::io(path))
}

fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

fn to_value<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("report serializes")
}

fn open_dataset(path: &Path, manifest: &mut RunManifest) -> Result<Dataset, CliError> {
    let dataset = load_dataset(path)?;
    manifest.dataset_paths.push(path.display().to_string());
    manifest.config_hashes.insert("world".into(), dataset.manifest.config_hash.clone());
    manifest.seeds.insert("dataset".into(), dataset.manifest.seed);
    Ok(dataset)
}

fn model_config(config: Option<&PathBuf>, variant: Option<Variant>) -> Result<ModelConfig, CliError> {
    let mut cfg = match config {
        Some(path) => read_json::<ModelConfig>(path)?,
        None => ModelConfig::for_variant(variant.unwrap_or(Variant::GraphLstmMultiHead)),
    };
    if let (Some(_), Some(v)) = (config, variant) {
        if v != cfg.variant {
            cfg.variant = v;
            let (heads, d_k, d_v) = v.default_attention(cfg.temporal_dim());
            cfg.heads = heads;
            cfg.d_k = d_k;
            cfg.d_v = d_v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_frames(model: &ModelConfig, dataset: &Dataset) -> Result<(), CliError> {
    let frames = dataset.manifest.config.frames;
    if model.frames != frames {
        return Err(CliError::Usage(format!(
            "model expects T={} frames but the dataset has T={frames}",
            model.frames
        )));
    }
    Ok(())
}

fn finish(manifest: &mut RunManifest, dir: Option<&Path>, start: Instant) -> Result<(), CliError> {
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    match dir {
        Some(d) => manifest.append_to(d),
        None => Ok(()),
    }
}

pub fn generate(a: &GenerateArgs) -> Result<Output, CliError> {
    let start = Instant::now();
    let config: WorldConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => a.preset.config(),
    };
    let mix: [f64; NUM_CLASSES] = match &a.mix {
        Some(v) => v
            .as_slice()
            .try_into()
            .map_err(|_| CliError::Usage(format!("--mix needs {NUM_CLASSES} weights")))?,
        None => [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
    };
    let dataset = generate_dataset(a.n, &mix, &config, a.seed)?;
    write_dataset(&dataset, &a.out)?;
    let seq_path = a.out.join(SEQUENCES_FILE);
    let bytes = std::fs::read(&seq_path).map_err(CliError::io(&seq_path))?;
    let split = &dataset.manifest.split;
    let report = json!({
        "n_sequences": dataset.manifest.n_sequences,
        "split": { "train": split.train.len(), "val": split.val.len(), "test": split.test.len() },
        "class_counts": dataset.manifest.class_counts,
        "config_hash": dataset.manifest.config_hash,
        "sequences_sha256": sha256_hex(&bytes),
    });
    let text = format!(
        "wrote {} sequences ({} train / {} val / {} test) to {}\nsequences sha256 {}\n",
        a.n,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        a.out.display(),
        report["sequences_sha256"].as_str().unwrap_or_default()
    );
    let mut manifest = RunManifest::new("generate");
    manifest.config_hashes.insert("world".into(), dataset.manifest.config_hash.clone());
    manifest.seeds.insert("dataset".into(), a.seed);
    manifest.dataset_paths.push(a.out.display().to_string());
    manifest.metrics_summary = report.clone();
    finish(&mut manifest, Some(&a.out), start)?;
    Ok(Output { text, json: report, success: true })
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<Output, CliError> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("train");
    let dataset = open_dataset(&a.dataset, &mut manifest)?;
    let model = model_config(a.config.as_ref(), a.variant)?;
    check_frames(&model, &dataset)?;
    let spec = RunSpec {
        model,
        train: TrainConfig { epochs: a.epochs, ..TrainConfig::default() },
        seed: a.seed,
        keep_fraction: 1.0,
    }
    .seeded();
    let result = ctx.runner.run(&dataset, &spec)?;

    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    std::fs::create_dir_all(&a.out).map_err(CliError::io(&a.out))?;
    result.model.to_checkpoint().save(&ckpt_path).map_err(CliError::io(&ckpt_path))?;
    write_json(&a.out.join(METRICS_FILE), &result.test)?;

    let report = json!({
        "variant": spec.model.variant,
        "seed": a.seed,
        "epochs": a.epochs,
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "test": result.test,
    });
    let mut text = format!(
        "{} trained {} epochs max, best epoch {} (val acc {:.1}%)\ncheckpoint {}\n\n",
        spec.model.variant,
        a.epochs,
        result.best_epoch,
        100.0 * result.best_val_accuracy,
        ckpt_path.display()
    );
    text.push_str(&result.test.to_table());

    manifest.config_hashes.insert("model".into(), hash_json(&spec.model));
    manifest.config_hashes.insert("train".into(), hash_json(&spec.train));
    manifest.seeds.insert("master".into(), a.seed);
    manifest.seeds.insert("model".into(), spec.model.seed);
    manifest.seeds.insert("train".into(), spec.train.seed);
    manifest.checkpoint_path = Some(ckpt_path.display().to_string());
    manifest.metrics_summary = json!({
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "test_overall_accuracy": result.test.overall_accuracy,
        "test_mean_accuracy": result.test.mean_accuracy,
    });
    finish(&mut manifest, Some(&a.out), start)?;
    Ok(Output { text, json: report, success: true })
}

pub fn eval(a: &EvalArgs) -> Result<Output, CliError> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("eval");
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(CliError::io(&a.checkpoint))?;
    let model = Model::from_checkpoint(&ckpt)?;
    let dataset = open_dataset(&a.dataset, &mut manifest)?;
    check_frames(&model.config, &dataset)?;
    let sequences = match a.split {
        SplitName::Train => dataset.train(),
        SplitName::Val => dataset.val(),
        SplitName::Test => dataset.test(),
        SplitName::All => dataset.sequences.clone(),
    };
    let classes = parse_classes(&a.classes)?;
    let report = evaluate(&model, &sequences, Some(&classes))?;

    let dir = a
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    write_json(&dir.join(EVAL_FILE), &report)?;
    manifest.config_hashes.insert("model".into(), hash_json(&model.config));
    manifest.checkpoint_path = Some(a.checkpoint.display().to_string());
    manifest.metrics_summary = json!({
        "split": format!("{:?}", a.split).to_lowercase(),
        "overall_accuracy": report.overall_accuracy,
        "mean_accuracy": report.mean_accuracy,
        "samples": report.samples,
    });
    finish(&mut manifest, Some(&dir), start)?;
    Ok(Output { text: report.to_table(), json: to_value(&report), success: true })
}

fn experiment_output<T: Serialize>(
    name: &str,
    report: &T,
    text: String,
    out: Option<&PathBuf>,
    mut manifest: RunManifest,
    seeds: &[u64],
    start: Instant,
) -> Result<Output, CliError> {
    let json = to_value(report);
    if let Some(dir) = out {
        write_json(&dir.join(format!("{name}.json")), report)?;
    }
    for (k, s) in seeds.iter().enumerate() {
        manifest.seeds.insert(format!("master.{k}"), *s);
    }
    manifest.metrics_summary = json.clone();
    finish(&mut manifest, out.map(PathBuf::as_path), start)?;
    Ok(Output { text, json, success: true })
}

pub fn ablate_landmarks(ctx: &Context, a: &AblateLandmarksArgs) -> Result<Output, CliError> {
    let start = Instant::now();
    if let Some(f) = a.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Usage(format!("landmark fractions must lie in (0, 1], got {f}")));
    }
    let mut manifest = RunManifest::new("ablate-landmarks");
    let dataset = open_dataset(&a.dataset, &mut manifest)?;
    let seeds = a.run.seeds();
    let report =
        experiments::ablate_landmarks(&ctx.runner, &dataset, a.variant, &a.fractions, &seeds, a.run.epochs)?;
    let text = format!("{} landmark ablation, seeds {seeds:?}\n{}", a.variant, report.to_table());
    experiment_output("ablate_landmarks", &report, text, a.out.as_ref(), manifest, &seeds, start)
}

pub fn ablate_model(ctx: &Context, a: &AblateModelArgs) -> Result<Output, CliError> {
    let start = Instant::now();
    if a.variants.is_empty() {
        return Err(CliError::Usage("no variants requested".into()));
    }
    let mut manifest = RunManifest::new("ablate-model");
    let dataset = open_dataset(&a.dataset, &mut manifest)?;
    let seeds = a.run.seeds();
    let report = experiments::ablate_model(&ctx.runner, &dataset, &a.variants, &seeds, a.run.epochs)?;
    let text = format!("model ablation, seeds {seeds:?}\n{}", report.to_table());
    experiment_output("ablate_model", &report, text, a.out.as_ref(), manifest, &seeds, start)
}

pub fn transfer(ctx: &Context, a: &TransferArgs) -> Result<Output, CliError> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("transfer");
    let mix = [1.0 / NUM_CLASSES as f64; NUM_CLASSES];
    let source = match &a.dataset {
        Some(path) => open_dataset(path, &mut manifest)?,
        None => {
            manifest.seeds.insert("dataset".into(), a.data_seed);
            generate_dataset(a.n, &mix, &a.train_dist.config(), a.data_seed)?
        }
    };
    let source_name = source.manifest.config.distribution_id.clone();
    let targets: Vec<(String, Dataset)> = a
        .eval_dists
        .iter()
        .map(|p| Ok((p.name().to_string(), generate_dataset(a.n, &mix, &p.config(), a.data_seed)?)))
        .collect::<Result<_, CliError>>()?;
    for (name, d) in &targets {
        manifest.config_hashes.insert(format!("world.{name}"), d.manifest.config_hash.clone());
    }
    let target_refs: Vec<(&str, &Dataset)> = targets.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let seeds = a.run.seeds();
    let report = experiments::transfer(
        &ctx.runner,
        a.variant,
        (&source_name, &source),
        &target_refs,
        &seeds,
        a.run.epochs,
    )?;
    let text = format!("{} trained on {source_name}, seeds {seeds:?}\n{}", a.variant, report.to_table());
    experiment_output("transfer", &report, text, a.out.as_ref(), manifest, &seeds, start)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Output, CliError> {
    let configs: Vec<ModelConfig> = match (&a.config, a.variant) {
        (None, None) => Variant::ALL.iter().map(|&v| ModelConfig::for_variant(v)).collect(),
        (config, variant) => vec![model_config(config.as_ref(), variant)?],
    };
    let mut text = String::new();
    let mut reports = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let start = Instant::now();
        let report = check_gradients(cfg, a.nodes, a.frames, a.seed, BackwardFault::None)?;
        let _ = writeln!(
            text,
            "{:<7} {}  max rel err {:.3e}  ({:.1}s)",
            cfg.variant.name(),
            if report.passed { "PASS" } else { "FAIL" },
            report.max_rel_err,
            start.elapsed().as_secs_f64()
        );
        for t in &report.tensors {
            let _ = writeln!(text, "    {:<28} {:>3} coords  {:.3e}", t.name, t.coords, t.max_rel_err);
        }
        reports.push(report);
    }
    let success = reports.iter().all(|r| r.passed);
    Ok(Output { text, json: to_value(&reports), success })
}
