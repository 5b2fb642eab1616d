//! Binary cross-entropy training with Adam and early stopping on
//! validation loss, plus the per-action orchestration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ActionLabel, Clip, ClipDataset, Split};
use crate::network::{BackboneConfig, Classifier, HeadConfig, Mode, NetworkError, ParamStore, Probs};
use crate::sampler::{epoch_seed, ClipSource, SamplerConfig};
use crate::seed::{derive_seed, rng_from_seed, sha256_hex};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid probability vector {0:?}")]
    InvalidProbabilities(Probs),
    #[error("true class must be 0 or 1, got {0}")]
    InvalidClass(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is unbalanced ({target} target vs {rest} rest clips); run the balance step first")]
    Unbalanced { target: usize, rest: usize },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("moment/parameter mismatch: {0}")]
    Shape(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Set per run by the caller; not part of the serialized config.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            max_epochs: 100,
            early_stop_patience: 20,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be > 0, got {}", self.adam_epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        Ok(())
    }
}

fn check_probs(p: Probs) -> Result<(), TrainError> {
    let valid = p.iter().all(|v| v.is_finite() && *v >= 0.0) && (p[0] + p[1] - 1.0).abs() <= 1e-6;
    if valid {
        Ok(())
    } else {
        Err(TrainError::InvalidProbabilities(p))
    }
}

/// `-ln(clamp(p[true_class]))`.
pub fn bce_loss(p: Probs, true_class: usize) -> Result<f64, TrainError> {
    check_probs(p)?;
    if true_class > 1 {
        return Err(TrainError::InvalidClass(true_class));
    }
    Ok(-p[true_class].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
}

/// Derivative of [`bce_loss`] w.r.t. the probabilities. Zero where the clamp
/// is active.
pub fn bce_grad(p: Probs, true_class: usize) -> Result<Probs, TrainError> {
    check_probs(p)?;
    if true_class > 1 {
        return Err(TrainError::InvalidClass(true_class));
    }
    let q = p[true_class];
    let mut g = [0.0; 2];
    if q > PROB_CLAMP && q < 1.0 - PROB_CLAMP {
        g[true_class] = -1.0 / q;
    }
    Ok(g)
}

/// First and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: ParamStore,
    pub v: ParamStore,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamMoments {
    pub fn new(params: &ParamStore) -> AdamMoments {
        AdamMoments {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    moments: &mut AdamMoments,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let layout = params.layout();
    if grads.layout() != layout || moments.m.layout() != layout || moments.v.layout() != layout {
        return Err(TrainError::Shape("gradients or moments do not match the parameters".into()));
    }
    moments.t += 1;
    let t = moments.t as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let eps = config.adam_epsilon;
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Outcome of recording one validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a monitored loss; an epoch improves only when its
/// loss is strictly below the best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    /// 1-based epoch of `best_loss`; 0 before any observation.
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            StopDecision::Improved
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Accuracy over the training batches of the epoch, under dropout.
    #[serde(skip)]
    pub train_accuracy: f64,
}

/// Everything that evolves during a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub model: Classifier,
    pub moments: AdamMoments,
    pub stopping: EarlyStopping,
    pub best_params: ParamStore,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters restored from the best validation epoch.
    pub model: Classifier,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Labeled clips for one split: `(clip, is_target)`.
pub type LabeledClips<'a> = [(&'a Clip, bool)];

/// Predicted target iff its probability is strictly larger.
pub fn predicts_target(p: Probs) -> bool {
    p[1] > p[0]
}

fn class_of(is_target: bool) -> usize {
    usize::from(is_target)
}

/// Mean loss and accuracy with center sampling and dropout off.
pub fn validation_pass(
    model: &Classifier,
    clips: &LabeledClips<'_>,
    source: &dyn ClipSource,
    sequence_length: usize,
) -> crate::Result<(f64, f64)> {
    let sampler = SamplerConfig::center(sequence_length);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &(clip, is_target) in clips {
        let seq = source.sample(clip, &sampler)?;
        let p = model.forward(&seq, Mode::Inference)?;
        loss += bce_loss(p, class_of(is_target))?;
        correct += usize::from(predicts_target(p) == is_target);
    }
    let n = clips.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Train one classifier on explicit train/validation lists. The balance
/// precondition is checked by [`train_binary`].
pub fn train_on(
    model: Classifier,
    train: &LabeledClips<'_>,
    validation: &LabeledClips<'_>,
    source: &dyn ClipSource,
    sequence_length: usize,
    config: &TrainConfig,
) -> crate::Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrain.into());
    }
    if validation.is_empty() {
        return Err(TrainError::EmptyValidation.into());
    }
    let seed = config.rng_seed;
    let mut state = TrainState {
        epoch: 0,
        moments: AdamMoments::new(model.params()),
        best_params: model.params().clone(),
        model,
        stopping: EarlyStopping::new(config.early_stop_patience),
        history: Vec::new(),
    };
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    while state.epoch < config.max_epochs {
        state.epoch += 1;
        let epoch = state.epoch;
        let mut shuffle_rng = rng_from_seed(derive_seed(seed, &["shuffle", &epoch.to_string()]));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = rng_from_seed(derive_seed(seed, &["dropout", &epoch.to_string()]));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = state.model.params().zeros_like();
            for &i in batch {
                let (clip, is_target) = train[i];
                let sampler = SamplerConfig::random(sequence_length, epoch_seed(seed, &clip.clip_id, epoch));
                let seq = source.sample(clip, &sampler)?;
                let (p, trace) = state.model.forward_traced(&seq, Mode::Train(&mut dropout_rng))?;
                let class = class_of(is_target);
                loss_sum += bce_loss(p, class)?;
                correct += usize::from(predicts_target(p) == is_target);
                let g = state.model.backward(&trace, bce_grad(p, class)?)?;
                grads.add_scaled(&g, 1.0 / batch.len() as f64)?;
            }
            let moments = &mut state.moments;
            state.model.update_params(|params| adam_step(params, &grads, moments, config))?;
        }

        let (val_loss, val_accuracy) = validation_pass(&state.model, validation, source, sequence_length)?;
        state.history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
            train_accuracy: correct as f64 / train.len() as f64,
        });
        match state.stopping.observe(epoch, val_loss) {
            StopDecision::Improved => state.best_params = state.model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let backbone = state.model.backbone().clone();
    let head = state.model.head().clone();
    let model = Classifier::from_parts(backbone, head, state.best_params)?;
    Ok(TrainOutcome {
        model,
        history: state.history,
        best_epoch: state.stopping.best_epoch,
        best_val_loss: state.stopping.best_loss,
        stopped_early,
    })
}

/// Train the one-vs-rest classifier for `dataset.target_action`.
pub fn train_binary(
    dataset: &ClipDataset,
    source: &dyn ClipSource,
    backbone: &BackboneConfig,
    head: &HeadConfig,
    sequence_length: usize,
    config: &TrainConfig,
) -> crate::Result<TrainOutcome> {
    let counts = dataset.counts(Split::Train);
    if counts.target != counts.rest {
        return Err(TrainError::Unbalanced {
            target: counts.target,
            rest: counts.rest,
        }
        .into());
    }
    let train = dataset.clips_in(Split::Train);
    let validation = dataset.clips_in(Split::Validation);
    let model = Classifier::new(backbone.clone(), head.clone(), derive_seed(config.rng_seed, &["model"]))?;
    train_on(model, &train, &validation, source, sequence_length, config)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy).expect("string write");
    }
    out
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILURES_FILE: &str = "failures.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    /// Relative to the summary's directory.
    pub checkpoint_path: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub trained: BTreeMap<ActionLabel, SummaryEntry>,
    pub failures: BTreeMap<ActionLabel, String>,
}

impl TrainSummary {
    pub fn load(dir: &Path) -> Result<TrainSummary, TrainError> {
        let read = |name: &str| -> Result<Option<String>, TrainError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(TrainError::Io { path, source }),
            }
        };
        let parse_err = |name: &str, e: serde_json::Error| TrainError::Io {
            path: dir.join(name),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        };
        let trained = match read(SUMMARY_FILE)? {
            Some(s) => serde_json::from_str(&s).map_err(|e| parse_err(SUMMARY_FILE, e))?,
            None => {
                return Err(TrainError::Io {
                    path: dir.join(SUMMARY_FILE),
                    source: std::io::ErrorKind::NotFound.into(),
                })
            }
        };
        let failures = match read(FAILURES_FILE)? {
            Some(s) => serde_json::from_str(&s).map_err(|e| parse_err(FAILURES_FILE, e))?,
            None => BTreeMap::new(),
        };
        Ok(TrainSummary { trained, failures })
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), TrainError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| TrainError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Save a finished run under `dir/<action>/` and return its summary entry.
pub fn save_outcome(dir: &Path, action: ActionLabel, outcome: &TrainOutcome) -> crate::Result<SummaryEntry> {
    let run_dir = dir.join(action.as_str());
    outcome.model.save(&run_dir)?;
    write_file(&run_dir.join(HISTORY_FILE), history_csv(&outcome.history).as_bytes())?;
    let checkpoint = run_dir.join(crate::network::CHECKPOINT_FILE);
    let bytes = fs::read(&checkpoint).map_err(|source| NetworkError::Io {
        path: checkpoint.clone(),
        source,
    })?;
    Ok(SummaryEntry {
        checkpoint_path: format!("{}/{}", action.as_str(), crate::network::CHECKPOINT_FILE),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        checkpoint_sha256: sha256_hex(&bytes),
    })
}

/// Per-action seed for [`train_all`].
pub fn action_seed(global_seed: u64, action: ActionLabel) -> u64 {
    derive_seed(global_seed, &["action", action.as_str()])
}

/// Run `train_one(action, seed)` for each action, isolating failures, and
/// write `summary.json` (plus `failures.json` when any run failed) to `dir`.
pub fn train_all(
    actions: &[ActionLabel],
    global_seed: u64,
    dir: &Path,
    mut train_one: impl FnMut(ActionLabel, u64) -> crate::Result<TrainOutcome>,
) -> crate::Result<TrainSummary> {
    let mut summary = TrainSummary::default();
    for &action in actions {
        let result = train_one(action, action_seed(global_seed, action)).and_then(|o| save_outcome(dir, action, &o));
        match result {
            Ok(entry) => {
                summary.trained.insert(action, entry);
            }
            Err(e) => {
                summary.failures.insert(action, e.to_string());
            }
        }
    }
    let json = serde_json::to_string_pretty(&summary.trained).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), json.as_bytes())?;
    let failures_path = dir.join(FAILURES_FILE);
    if summary.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|source| TrainError::Io {
                path: failures_path,
                source,
            })?;
        }
    } else {
        let json = serde_json::to_string_pretty(&summary.failures).expect("failures serialize");
        write_file(&failures_path, json.as_bytes())?;
    }
    Ok(summary)
}
