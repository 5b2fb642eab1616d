//! One function per subcommand. Every stage writes into
//! `<output_dir>/<subcommand>/` and reads earlier stages from siblings.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lapaction::augment::{materialize, plan_balance};
use lapaction::dataset::{build_one_vs_rest, extract_clips, load_manifest, ActionLabel, ClipDataset, DatasetError, Split, VideoManifest};
use lapaction::evaluator::{
    compute_metrics, evaluate_clips, render_report, sliding_window_infer, timelines_csv, ClipScorer, ConfusionCounts,
    MetricsReport, MetricsRow,
};
use lapaction::fixture::{generate, FixtureSpec};
use lapaction::frames::{validate_layout, FrameGeometry, FrameStore};
use lapaction::network::{BackboneConfig, BackboneKind, Classifier, ConvStage, HeadConfig, HeadKind};
use lapaction::sampler::{ClipSource, MemoryClips};
use lapaction::seed::derive_seed;
use lapaction::trainer::{train_all, train_binary, TrainConfig, TrainError, TrainSummary};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Decoded-frame budget for in-memory caching.
const CACHE_LIMIT_BYTES: usize = 2 << 30;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {} ({hint})", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Create the run directory and echo the resolved config into it.
fn run_dir(config: &ExperimentConfig, stage: &str) -> Result<PathBuf> {
    let dir = config.output_dir.join(stage);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join(RESOLVED_CONFIG), config.to_json())?;
    Ok(dir)
}

/// Load every manifest, mapping a missing frame directory to a config error.
fn load_manifests(config: &ExperimentConfig) -> Result<Vec<VideoManifest>> {
    let mut out = Vec::new();
    for (i, path) in config.dataset_model.manifests.iter().enumerate() {
        let m = load_manifest(path).map_err(|e| match e {
            DatasetError::MissingFrameDir { video_id, path: dir } => anyhow!(ConfigError::new(
                "dataset_model.frame_dir",
                format!("video {video_id} (manifest {}): directory {} does not exist", path.display(), dir.display()),
            )),
            DatasetError::Io { .. } => anyhow!(ConfigError::new(format!("dataset_model.manifests[{i}]"), e.to_string())),
            other => anyhow!(lapaction::Error::from(other)),
        })?;
        out.push(m);
    }
    let mut seen = BTreeSet::new();
    for m in &out {
        if !seen.insert(m.video_id.clone()) {
            bail!(ConfigError::new("dataset_model.manifests", format!("video {} listed twice", m.video_id)));
        }
    }
    let ds = &config.dataset_model;
    for (field, list) in [("train_videos", &ds.train_videos), ("test_videos", &ds.test_videos)] {
        for (i, v) in list.iter().enumerate() {
            if !seen.contains(v) {
                bail!(ConfigError::new(format!("dataset_model.{field}[{i}]"), format!("no manifest for video {v}")));
            }
        }
    }
    Ok(out)
}

fn check_frames(config: &ExperimentConfig, manifests: &[VideoManifest]) -> Result<()> {
    for m in manifests {
        validate_layout(m, config.dataset_model.frame_geometry).map_err(lapaction::Error::from)?;
    }
    Ok(())
}

fn prepare(config: &ExperimentConfig) -> Result<Vec<VideoManifest>> {
    config.check()?;
    load_manifests(config)
}

pub fn validate(config: &ExperimentConfig) -> Result<()> {
    let manifests = prepare(config)?;
    check_frames(config, &manifests)?;
    let dir = run_dir(config, "validate")?;
    println!("config ok: {} videos, {} actions, {} heads", manifests.len(), config.actions.len(), config.network.heads.len());
    println!("resolved config: {}", dir.join(RESOLVED_CONFIG).display());
    Ok(())
}

#[derive(Serialize)]
struct SplitCounts {
    train: [usize; 2],
    validation: [usize; 2],
    test: [usize; 2],
}

fn split_counts(ds: &ClipDataset) -> SplitCounts {
    let c = |s| {
        let c = ds.counts(s);
        [c.target, c.rest]
    };
    SplitCounts {
        train: c(Split::Train),
        validation: c(Split::Validation),
        test: c(Split::Test),
    }
}

fn dataset_path(config: &ExperimentConfig, stage: &str, action: ActionLabel) -> PathBuf {
    config.output_dir.join(stage).join("datasets").join(format!("{action}.json"))
}

pub fn extract(config: &ExperimentConfig) -> Result<()> {
    let manifests = prepare(config)?;
    check_frames(config, &manifests)?;
    let dir = run_dir(config, "extract-clips")?;
    let mut clips = Vec::new();
    for m in &manifests {
        clips.extend(extract_clips(m, &config.dataset_model.clip).map_err(lapaction::Error::from)?);
    }
    write_json(&dir.join("clips.json"), &clips)?;
    let train: BTreeSet<String> = config.dataset_model.train_videos.iter().cloned().collect();
    let test: BTreeSet<String> = config.dataset_model.test_videos.iter().cloned().collect();
    let mut counts = BTreeMap::new();
    for &action in &config.actions {
        let seed = derive_seed(config.seed, &["split", action.as_str()]);
        let ds = build_one_vs_rest(&clips, action, &train, &test, config.dataset_model.validation_fraction, seed)
            .map_err(lapaction::Error::from)?;
        counts.insert(action, split_counts(&ds));
        write_json(&dataset_path(config, "extract-clips", action), &ds)?;
    }
    write_json(&dir.join("counts.json"), &counts)?;
    println!("{} clips from {} videos", clips.len(), manifests.len());
    for (action, c) in &counts {
        println!(
            "{action}: train {}/{} validation {}/{} test {}/{} (target/rest)",
            c.train[0], c.train[1], c.validation[0], c.validation[1], c.test[0], c.test[1]
        );
    }
    Ok(())
}

fn augmented_root(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("balance").join("augmented")
}

fn frame_store(config: &ExperimentConfig, manifests: &[VideoManifest]) -> FrameStore {
    FrameStore::from_manifests(manifests).with_augmented_root(augmented_root(config))
}

pub fn balance(config: &ExperimentConfig) -> Result<()> {
    let manifests = prepare(config)?;
    let dir = run_dir(config, "balance")?;
    let store = frame_store(config, &manifests);
    let mut counts = BTreeMap::new();
    for &action in &config.actions {
        let mut ds: ClipDataset = read_json(&dataset_path(config, "extract-clips", action), "run extract-clips first")?;
        let targets: Vec<_> = ds
            .clips_in(Split::Train)
            .into_iter()
            .filter(|(_, t)| *t)
            .map(|(c, _)| c.clone())
            .collect();
        let rest = ds.counts(Split::Train).rest;
        let seed = derive_seed(config.seed, &["balance", action.as_str()]);
        let plan = plan_balance(&targets, rest, &config.augment, seed).map_err(lapaction::Error::from)?;
        plan.write_jsonl(&dir.join("plans").join(format!("{action}.jsonl")))
            .map_err(lapaction::Error::from)?;
        let augmented = materialize(&plan, &store).map_err(lapaction::Error::from)?;
        let added = augmented.len();
        ds.add_augmented(augmented);
        counts.insert(action, split_counts(&ds));
        write_json(&dataset_path(config, "balance", action), &ds)?;
        println!("{action}: {} target + {added} augmented = {rest} rest", targets.len());
    }
    write_json(&dir.join("counts.json"), &counts)?;
    Ok(())
}

/// A dataset file read inside a per-action training run.
fn read_dataset(path: &Path) -> lapaction::Result<ClipDataset> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = fs::read_to_string(path).map_err(io)?;
    Ok(serde_json::from_str(&text).map_err(|e| io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?)
}

fn clip_source(
    config: &ExperimentConfig,
    store: &FrameStore,
    ds: &ClipDataset,
    splits: &[Split],
) -> lapaction::Result<Box<dyn ClipSource>> {
    let clips: Vec<_> = splits.iter().flat_map(|&s| ds.clips_in(s)).map(|(c, _)| c).collect();
    let g = config.dataset_model.frame_geometry;
    let bytes: usize = clips.iter().map(|c| c.length).sum::<usize>() * g.width as usize * g.height as usize * 3 * 8;
    if config.sampler.cache_frames && bytes <= CACHE_LIMIT_BYTES {
        Ok(Box::new(MemoryClips::preload(store, clips)?))
    } else {
        Ok(Box::new(store.clone()))
    }
}

fn head_dir(config: &ExperimentConfig, head: HeadKind) -> PathBuf {
    config.output_dir.join("train").join(head.as_str())
}

pub fn train(config: &ExperimentConfig) -> Result<()> {
    let manifests = prepare(config)?;
    run_dir(config, "train")?;
    let store = frame_store(config, &manifests);
    let mut failed = Vec::new();
    for head in &config.network.heads {
        let dir = head_dir(config, head.kind);
        let global = derive_seed(config.seed, &["train", head.kind.as_str()]);
        let summary = train_all(&config.actions, global, &dir, |action, seed| {
            let ds = read_dataset(&dataset_path(config, "balance", action))?;
            let source = clip_source(config, &store, &ds, &[Split::Train, Split::Validation])?;
            let train_config = TrainConfig {
                rng_seed: seed,
                ..config.trainer.clone()
            };
            let outcome = train_binary(
                &ds,
                source.as_ref(),
                &config.network.backbone,
                head,
                config.sampler.sequence_length,
                &train_config,
            )?;
            println!(
                "{} / {action}: best epoch {} of {}, val loss {:.4}",
                head.kind,
                outcome.best_epoch,
                outcome.history.len(),
                outcome.best_val_loss
            );
            Ok(outcome)
        })?;
        for (action, message) in &summary.failures {
            eprintln!("{} / {action} failed: {message}", head.kind);
            failed.push(format!("{}/{action}", head.kind));
        }
    }
    if !failed.is_empty() {
        bail!(
            "trainer: {} run(s) failed ({}); the others were saved",
            failed.len(),
            failed.join(", ")
        );
    }
    Ok(())
}

/// Trained models for one head, in config action order.
fn load_models(config: &ExperimentConfig, head: HeadKind) -> Result<Vec<(ActionLabel, Classifier)>> {
    let dir = head_dir(config, head);
    let summary = TrainSummary::load(&dir)
        .map_err(lapaction::Error::from)
        .context("run train first")?;
    let mut models = Vec::new();
    for &action in &config.actions {
        if summary.trained.contains_key(&action) {
            let model = Classifier::load(&dir.join(action.as_str())).map_err(lapaction::Error::from)?;
            models.push((action, model));
        }
    }
    Ok(models)
}

fn backbone_title(kind: BackboneKind) -> &'static str {
    kind.title()
}

pub fn evaluate(config: &ExperimentConfig) -> Result<()> {
    let manifests = prepare(config)?;
    let dir = run_dir(config, "evaluate")?;
    let store = FrameStore::from_manifests(&manifests);
    let mut report = MetricsReport::default();
    let mut confusion: BTreeMap<HeadKind, BTreeMap<ActionLabel, ConfusionCounts>> = BTreeMap::new();
    for head in &config.network.heads {
        for (action, model) in load_models(config, head.kind)? {
            let ds: ClipDataset = read_json(&dataset_path(config, "extract-clips", action), "run extract-clips first")?;
            let test = ds.clips_in(Split::Test);
            let counts = evaluate_clips(&model, &test, &store, config.sampler.sequence_length)
                .with_context(|| format!("evaluating {} / {action}", head.kind))?;
            let metrics = compute_metrics(&counts).map_err(lapaction::Error::from)?;
            report.rows.push(MetricsRow {
                backbone: backbone_title(model.backbone().kind).to_string(),
                head: head.kind,
                action,
                metrics,
            });
            confusion.entry(head.kind).or_default().insert(action, counts);
        }
    }
    if report.rows.is_empty() {
        bail!("evaluator: no trained models found under {}", config.output_dir.join("train").display());
    }
    let rendered = render_report(&report).map_err(lapaction::Error::from)?;
    write(&dir.join("metrics.csv"), &rendered.csv)?;
    write(&dir.join("table.txt"), &rendered.table)?;
    write(&dir.join("f1_bars.csv"), &rendered.f1_csv)?;
    write_json(&dir.join("confusion.json"), &confusion)?;
    print!("{}", rendered.table);
    Ok(())
}

pub fn infer(config: &ExperimentConfig) -> Result<()> {
    let manifests = prepare(config)?;
    let dir = run_dir(config, "infer")?;
    let store = FrameStore::from_manifests(&manifests);
    let videos = if config.evaluator.infer_videos.is_empty() {
        &config.dataset_model.test_videos
    } else {
        &config.evaluator.infer_videos
    };
    let by_id: BTreeMap<&str, &VideoManifest> = manifests.iter().map(|m| (m.video_id.as_str(), m)).collect();
    for (i, v) in videos.iter().enumerate() {
        if !by_id.contains_key(v.as_str()) {
            bail!(ConfigError::new(format!("evaluator.infer_videos[{i}]"), format!("no manifest for video {v}")));
        }
    }
    for head in &config.network.heads {
        let models = load_models(config, head.kind)?;
        let scorers: Vec<(ActionLabel, &dyn ClipScorer)> =
            models.iter().map(|(a, m)| (*a, m as &dyn ClipScorer)).collect();
        let mut timelines = Vec::new();
        for v in videos {
            timelines.extend(sliding_window_infer(
                by_id[v.as_str()],
                &scorers,
                &store,
                config.evaluator.window_len,
                config.evaluator.stride,
                config.sampler.sequence_length,
            )?);
        }
        let path = dir.join(head.kind.as_str()).join("timelines.csv");
        write(&path, timelines_csv(&timelines))?;
        println!("{}: {} timelines -> {}", head.kind, timelines.len(), path.display());
    }
    Ok(())
}

fn metrics_file(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("metrics.csv")
    } else {
        input.to_path_buf()
    }
}

pub fn report(config: &ExperimentConfig, extra_inputs: &[PathBuf]) -> Result<()> {
    let dir = run_dir(config, "report")?;
    let inputs: Vec<PathBuf> = if !extra_inputs.is_empty() {
        extra_inputs.to_vec()
    } else if !config.report.inputs.is_empty() {
        config.report.inputs.clone()
    } else {
        vec![config.output_dir.join("evaluate")]
    };
    let mut report = MetricsReport::default();
    for input in &inputs {
        let path = metrics_file(input);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        report.extend(
            MetricsReport::from_csv(&text)
                .map_err(lapaction::Error::from)
                .with_context(|| format!("parsing {}", path.display()))?,
        );
    }
    let rendered = render_report(&report).map_err(lapaction::Error::from)?;
    write(&dir.join("report.csv"), &rendered.csv)?;
    write(&dir.join("table.txt"), &rendered.table)?;
    write(&dir.join("f1_bars.csv"), &rendered.f1_csv)?;
    print!("{}", rendered.table);
    Ok(())
}

/// Generate the moving-dot fixture and a config that runs on it.
pub fn fixture(out: &Path, seed: u64) -> Result<PathBuf> {
    let spec = FixtureSpec {
        seed,
        ..FixtureSpec::default()
    };
    let videos = out.join("videos");
    let layout = generate(&spec, &videos)?;
    let manifests: Vec<String> = layout
        .manifests
        .iter()
        .map(|p| format!("videos/{}", p.file_name().expect("file").to_string_lossy()))
        .collect();
    let head = |kind| HeadConfig {
        kind,
        rnn_units_1: 16,
        rnn_units_2: 8,
        fc_units_1: 32,
        fc_units_2: 16,
        ..HeadConfig::default()
    };
    let stage = |channels| ConvStage {
        channels,
        kernel: 3,
        downsample: 2,
    };
    let config = serde_json::json!({
        "seed": seed,
        "output_dir": "runs",
        "dataset_model": {
            "manifests": manifests,
            "train_videos": layout.train_videos,
            "test_videos": layout.test_videos,
            "validation_fraction": 0.2,
            "frame_geometry": FrameGeometry { width: spec.frame_size as u32, height: spec.frame_size as u32 },
        },
        "network": {
            "backbone": BackboneConfig { kind: BackboneKind::SmallConv, feature_dim: 16, stages: vec![stage(8), stage(16)] },
            "heads": HeadKind::ALL.into_iter().map(head).collect::<Vec<_>>(),
        },
        "trainer": { "max_epochs": 30, "early_stop_patience": 5 },
    });
    let path = out.join("config.json");
    write(&path, serde_json::to_string_pretty(&config)? + "\n")?;
    println!("fixture: {} videos in {}", layout.manifests.len(), videos.display());
    println!("config: {}", path.display());
    Ok(path)
}
