//! Clip-level augmentations and the offline balancing plan.
//!
//! Each transform applies the same resolved parameters to every frame of a
//! clip. Pixels are in `[0, 1]` and every transform keeps them there.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Clip;
use crate::frames::{frame_file_name, write_frame, Frame, FrameError, FrameStore};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid {name} = {value}: {reason}")]
    Parameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("refusing to augment: target class has {target} clips, rest only {rest}")]
    InvertedImbalance { target: usize, rest: usize },
    #[error("no target clips to augment")]
    NoTargets,
    #[error("clip {clip_id}: {source}")]
    Frames {
        clip_id: String,
        #[source]
        source: FrameError,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The five techniques, in the order the balancing plan cycles through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    GammaContrast,
    GaussianBlur,
    Brightness,
    Saturation,
    HorizontalFlip,
}

impl Technique {
    pub const ORDER: [Technique; 5] = [
        Technique::GammaContrast,
        Technique::GaussianBlur,
        Technique::Brightness,
        Technique::Saturation,
        Technique::HorizontalFlip,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub gamma: f64,
    pub blur_sigma: f64,
    /// Magnitude of the brightness shift; the sign is drawn per clip.
    pub brightness_delta: f64,
    pub saturation_factor: f64,
    pub flip_probability: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            gamma: 0.5,
            blur_sigma: 10.0,
            brightness_delta: 0.2,
            saturation_factor: 1.5,
            flip_probability: 0.5,
        }
    }
}

fn param_error(name: &'static str, value: f64, reason: &'static str) -> AugmentError {
    AugmentError::Parameter { name, value, reason }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.gamma > 0.0) {
            return Err(param_error("gamma", self.gamma, "must be > 0"));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(param_error("blur_sigma", self.blur_sigma, "must be > 0"));
        }
        if !(self.brightness_delta.abs() <= 1.0) {
            return Err(param_error("brightness_delta", self.brightness_delta, "must satisfy |delta| <= 1"));
        }
        if !(self.saturation_factor >= 0.0) {
            return Err(param_error("saturation_factor", self.saturation_factor, "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(param_error("flip_probability", self.flip_probability, "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// A technique with every random choice already made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "snake_case")]
pub enum ResolvedTransform {
    GammaContrast { gamma: f64 },
    GaussianBlur { sigma: f64 },
    Brightness { delta: f64 },
    Saturation { factor: f64 },
    HorizontalFlip { flip_applied: bool },
}

impl ResolvedTransform {
    pub fn technique(&self) -> Technique {
        match self {
            ResolvedTransform::GammaContrast { .. } => Technique::GammaContrast,
            ResolvedTransform::GaussianBlur { .. } => Technique::GaussianBlur,
            ResolvedTransform::Brightness { .. } => Technique::Brightness,
            ResolvedTransform::Saturation { .. } => Technique::Saturation,
            ResolvedTransform::HorizontalFlip { .. } => Technique::HorizontalFlip,
        }
    }

    pub fn apply(&self, frames: &[Frame]) -> Result<Vec<Frame>, AugmentError> {
        match *self {
            ResolvedTransform::GammaContrast { gamma } => apply_gamma(frames, gamma),
            ResolvedTransform::GaussianBlur { sigma } => apply_gaussian_blur(frames, sigma),
            ResolvedTransform::Brightness { delta } => apply_brightness(frames, delta),
            ResolvedTransform::Saturation { factor } => apply_saturation(frames, factor),
            ResolvedTransform::HorizontalFlip { flip_applied: true } => Ok(apply_horizontal_flip(frames)),
            ResolvedTransform::HorizontalFlip { flip_applied: false } => Ok(frames.to_vec()),
        }
    }
}

/// Provenance of one augmented clip. The resolved transform alone
/// determines the output pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub clip_id: String,
    pub source_clip_id: String,
    #[serde(flatten)]
    pub transform: ResolvedTransform,
    pub rng_seed: u64,
}

impl AugmentationRecord {
    pub fn technique(&self) -> Technique {
        self.transform.technique()
    }
}

pub fn apply_gamma(frames: &[Frame], gamma: f64) -> Result<Vec<Frame>, AugmentError> {
    if !(gamma > 0.0) {
        return Err(param_error("gamma", gamma, "must be > 0"));
    }
    Ok(frames.iter().map(|f| f.mapv(|v| v.clamp(0.0, 1.0).powf(gamma))).collect())
}

pub fn apply_brightness(frames: &[Frame], delta: f64) -> Result<Vec<Frame>, AugmentError> {
    if !(delta.abs() <= 1.0) {
        return Err(param_error("brightness_delta", delta, "must satisfy |delta| <= 1"));
    }
    Ok(frames.iter().map(|f| f.mapv(|v| (v + delta).clamp(0.0, 1.0))).collect())
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn apply_saturation(frames: &[Frame], factor: f64) -> Result<Vec<Frame>, AugmentError> {
    if !(factor >= 0.0) {
        return Err(param_error("saturation_factor", factor, "must be >= 0"));
    }
    let out = frames
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for mut px in out.lanes_mut(ndarray::Axis(2)) {
                // gray pixels are fixed points; skip them so the luma sum's rounding can't move them
                if px[0] == px[1] && px[1] == px[2] {
                    continue;
                }
                let gray = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
                for v in px.iter_mut() {
                    *v = (gray + factor * (*v - gray)).clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect();
    Ok(out)
}

pub fn apply_horizontal_flip(frames: &[Frame]) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| f.slice(ndarray::s![.., ..;-1, ..]).to_owned())
        .collect()
}

/// Normalized 1-D Gaussian weights over `[-r, r]`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the
/// edge sample (`d c b | a b c d | c b a`), for any offset.
fn reflect(index: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = index.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn blur_axis(frame: &Frame, kernel: &[f64], axis: usize) -> Frame {
    let (h, w, c) = frame.dim();
    let radius = (kernel.len() / 2) as i64;
    let len = if axis == 0 { h } else { w };
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let pos = if axis == 0 { y } else { x } as i64;
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let src = reflect(pos + k as i64 - radius, len);
                    let v = if axis == 0 { frame[[src, x, ch]] } else { frame[[y, src, ch]] };
                    acc += weight * v;
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Separable Gaussian blur, horizontal pass then vertical, reflect padding.
pub fn apply_gaussian_blur(frames: &[Frame], sigma: f64) -> Result<Vec<Frame>, AugmentError> {
    if !(sigma > 0.0) {
        return Err(param_error("blur_sigma", sigma, "must be > 0"));
    }
    let kernel = gaussian_kernel(sigma);
    Ok(frames
        .iter()
        .map(|f| {
            let horizontal = blur_axis(f, &kernel, 1);
            blur_axis(&horizontal, &kernel, 0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub source: Clip,
    pub record: AugmentationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub entries: Vec<PlanEntry>,
    pub target_count: usize,
}

impl BalancePlan {
    /// One augmentation record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), AugmentError> {
        let io = |source| AugmentError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let file = fs::File::create(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        for entry in &self.entries {
            let line = serde_json::to_string(&entry.record).expect("records serialize");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Plan `rest_count - target_clips.len()` augmented clips.
///
/// Entry `k` takes source `k % n` (round-robin). The technique index is
/// `(k % n + k / n) % 5`: within a round the techniques cycle in order, and
/// each source gets a different technique in each of its first five rounds.
/// Brightness sign and flip are drawn from a generator seeded per entry.
pub fn plan_balance(
    target_clips: &[Clip],
    rest_count: usize,
    spec: &AugmentationSpec,
    rng_seed: u64,
) -> Result<BalancePlan, AugmentError> {
    spec.validate()?;
    let n = target_clips.len();
    if n == 0 {
        return Err(AugmentError::NoTargets);
    }
    if rest_count < n {
        return Err(AugmentError::InvertedImbalance { target: n, rest: rest_count });
    }
    let entries = (0..rest_count - n)
        .map(|k| {
            let source = &target_clips[k % n];
            let technique = Technique::ORDER[(k % n + k / n) % Technique::ORDER.len()];
            let entry_seed = derive_seed(rng_seed, &["augment", &k.to_string()]);
            let mut rng = rng_from_seed(entry_seed);
            let transform = match technique {
                Technique::GammaContrast => ResolvedTransform::GammaContrast { gamma: spec.gamma },
                Technique::GaussianBlur => ResolvedTransform::GaussianBlur { sigma: spec.blur_sigma },
                Technique::Brightness => {
                    let magnitude = spec.brightness_delta.abs();
                    let delta = if rng.random_bool(0.5) { magnitude } else { -magnitude };
                    ResolvedTransform::Brightness { delta }
                }
                Technique::Saturation => ResolvedTransform::Saturation { factor: spec.saturation_factor },
                Technique::HorizontalFlip => ResolvedTransform::HorizontalFlip {
                    flip_applied: rng.random_bool(spec.flip_probability),
                },
            };
            let record = AugmentationRecord {
                clip_id: format!("{}__aug{k:05}", source.clip_id),
                source_clip_id: source.clip_id.clone(),
                transform,
                rng_seed: entry_seed,
            };
            PlanEntry {
                source: source.clone(),
                record,
            }
        })
        .collect();
    Ok(BalancePlan {
        entries,
        target_count: rest_count,
    })
}

/// Render every plan entry into the augmented store and return the new
/// clip records. Output paths are distinct per entry and rewriting the same
/// plan produces the same bytes.
pub fn materialize(plan: &BalancePlan, store: &FrameStore) -> Result<Vec<Clip>, AugmentError> {
    plan.entries
        .iter()
        .map(|entry| {
            let frames_err = |clip_id: &str| {
                let clip_id = clip_id.to_string();
                move |source| AugmentError::Frames { clip_id, source }
            };
            let source = &entry.source;
            let frames = store.read_clip(source).map_err(frames_err(&source.clip_id))?;
            let out = entry.record.transform.apply(&frames)?;
            let dir = store
                .augmented_dir(&entry.record.clip_id)
                .map_err(frames_err(&entry.record.clip_id))?;
            for (i, frame) in out.iter().enumerate() {
                write_frame(&dir.join(frame_file_name(i)), frame).map_err(frames_err(&entry.record.clip_id))?;
            }
            let mut clip = source.clone();
            clip.clip_id = entry.record.clip_id.clone();
            clip.augmentation = Some(entry.record.clone());
            Ok(clip)
        })
        .collect()
}
