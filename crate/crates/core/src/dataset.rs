//! Video manifests, clip extraction and one-vs-rest dataset construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentationRecord;
use crate::seed::rng_from_seed;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed manifest {path}: field `{field}`: {message}")]
    Malformed {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("video {video_id}: frame_dir {path} does not exist")]
    MissingFrameDir { video_id: String, path: PathBuf },
    #[error("video {video_id}: fps must be positive, got {fps}")]
    InvalidFps { video_id: String, fps: f64 },
    #[error("video {video_id}: interval #{index} [{start}, {end}) is empty")]
    EmptyInterval {
        video_id: String,
        index: usize,
        start: usize,
        end: usize,
    },
    #[error("video {video_id}: interval #{index} ends at {end} past frame_count {frame_count}")]
    OutOfBounds {
        video_id: String,
        index: usize,
        end: usize,
        frame_count: usize,
    },
    #[error(
        "video {video_id}: intervals {first} and {second} overlap on frames {from}-{to}"
    )]
    Overlap {
        video_id: String,
        first: String,
        second: String,
        from: usize,
        to: usize,
    },
    #[error("video {video_id}: intervals are not sorted by start_frame")]
    Unsorted { video_id: String },
    #[error("clip length {clip_len} outside [{min}, {max}]")]
    ClipLength { clip_len: usize, min: usize, max: usize },
    #[error("target action must not be `other`")]
    OtherAsTarget,
    #[error("train and test video sets share {0:?}")]
    VideoSetsOverlap(Vec<String>),
    #[error("validation_fraction must be in (0, 0.5), got {0}")]
    ValidationFraction(f64),
    #[error("no {class} clips in the training videos for target {target}")]
    EmptyClass { target: ActionLabel, class: &'static str },
    #[error("clip {clip_id} comes from video {video_id}, which is in neither the train nor the test set")]
    UnassignedVideo { clip_id: String, video_id: String },
    #[error("unknown action label `{0}`")]
    UnknownLabel(String),
}

/// The six surgical actions plus the catch-all `other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLabel {
    AbdominalAccess,
    GraspingAnatomy,
    KnotPushing,
    NeedlePulling,
    NeedlePushing,
    Suction,
    Other,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 7] = [
        ActionLabel::AbdominalAccess,
        ActionLabel::GraspingAnatomy,
        ActionLabel::KnotPushing,
        ActionLabel::NeedlePulling,
        ActionLabel::NeedlePushing,
        ActionLabel::Suction,
        ActionLabel::Other,
    ];

    /// The six target actions, in reporting order.
    pub const TARGETS: [ActionLabel; 6] = [
        ActionLabel::AbdominalAccess,
        ActionLabel::GraspingAnatomy,
        ActionLabel::KnotPushing,
        ActionLabel::NeedlePulling,
        ActionLabel::NeedlePushing,
        ActionLabel::Suction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionLabel::AbdominalAccess => "abdominal_access",
            ActionLabel::GraspingAnatomy => "grasping_anatomy",
            ActionLabel::KnotPushing => "knot_pushing",
            ActionLabel::NeedlePulling => "needle_pulling",
            ActionLabel::NeedlePushing => "needle_pushing",
            ActionLabel::Suction => "suction",
            ActionLabel::Other => "other",
        }
    }

    /// Column title used in rendered tables.
    pub fn title(self) -> &'static str {
        match self {
            ActionLabel::AbdominalAccess => "Abdominal Access",
            ActionLabel::GraspingAnatomy => "Grasping Anatomy",
            ActionLabel::KnotPushing => "Knot Pushing",
            ActionLabel::NeedlePulling => "Needle Pulling",
            ActionLabel::NeedlePushing => "Needle Pushing",
            ActionLabel::Suction => "Suction",
            ActionLabel::Other => "Other",
        }
    }

    pub fn is_target(self) -> bool {
        self != ActionLabel::Other
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionLabel::ALL
            .into_iter()
            .find(|label| label.as_str() == s)
            .ok_or_else(|| DatasetError::UnknownLabel(s.to_string()))
    }
}

/// A labeled frame range `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedInterval {
    pub label: ActionLabel,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl AnnotatedInterval {
    pub fn len(&self) -> usize {
        self.end_frame.saturating_sub(self.start_frame)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn describe(&self) -> String {
        format!("({}, {}, {})", self.label, self.start_frame, self.end_frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    pub video_id: String,
    pub fps: f64,
    pub frame_count: usize,
    pub frame_dir: PathBuf,
    pub intervals: Vec<AnnotatedInterval>,
}

impl VideoManifest {
    /// Check the structural invariants: positive fps, in-bounds non-empty
    /// intervals, sorted and pairwise disjoint.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let video_id = &self.video_id;
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(DatasetError::InvalidFps {
                video_id: video_id.clone(),
                fps: self.fps,
            });
        }
        for (index, iv) in self.intervals.iter().enumerate() {
            if iv.end_frame <= iv.start_frame {
                return Err(DatasetError::EmptyInterval {
                    video_id: video_id.clone(),
                    index,
                    start: iv.start_frame,
                    end: iv.end_frame,
                });
            }
            if iv.end_frame > self.frame_count {
                return Err(DatasetError::OutOfBounds {
                    video_id: video_id.clone(),
                    index,
                    end: iv.end_frame,
                    frame_count: self.frame_count,
                });
            }
        }

        let mut sorted = self.intervals.clone();
        sorted.sort_by_key(|iv| (iv.start_frame, iv.end_frame));
        for pair in sorted.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.start_frame < a.end_frame {
                return Err(DatasetError::Overlap {
                    video_id: video_id.clone(),
                    first: a.describe(),
                    second: b.describe(),
                    from: b.start_frame,
                    to: a.end_frame.min(b.end_frame),
                });
            }
        }
        if sorted != self.intervals {
            return Err(DatasetError::Unsorted {
                video_id: video_id.clone(),
            });
        }
        Ok(())
    }
}

fn malformed(path: &Path, field: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

/// Read and validate a JSON manifest. A relative `frame_dir` is resolved
/// against the manifest's own directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<VideoManifest, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let mut manifest: VideoManifest = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let field = err.path().to_string();
        malformed(path, field, err.into_inner().to_string())
    })?;
    if manifest.frame_dir.is_relative() {
        if let Some(parent) = path.parent() {
            manifest.frame_dir = parent.join(&manifest.frame_dir);
        }
    }
    manifest.validate()?;
    if !manifest.frame_dir.is_dir() {
        return Err(DatasetError::MissingFrameDir {
            video_id: manifest.video_id.clone(),
            path: manifest.frame_dir.clone(),
        });
    }
    Ok(manifest)
}

/// Clip length bounds; defaults are 2 s and 3 s at 25 fps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipParams {
    pub clip_len: usize,
    pub min_clip_frames: usize,
    pub max_clip_frames: usize,
}

impl Default for ClipParams {
    fn default() -> Self {
        ClipParams {
            clip_len: 50,
            min_clip_frames: 50,
            max_clip_frames: 75,
        }
    }
}

impl ClipParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.clip_len < self.min_clip_frames
            || self.clip_len > self.max_clip_frames
            || self.clip_len == 0
        {
            return Err(DatasetError::ClipLength {
                clip_len: self.clip_len,
                min: self.min_clip_frames,
                max: self.max_clip_frames,
            });
        }
        Ok(())
    }
}

/// A contiguous single-label window of frames.
///
/// Augmented clips keep the `video_id` and `start_frame` of the clip they
/// were derived from; their pixels live in the augmented frame store under
/// `clip_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: String,
    pub video_id: String,
    pub label: ActionLabel,
    pub start_frame: usize,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationRecord>,
}

impl Clip {
    pub fn original(video_id: &str, label: ActionLabel, start_frame: usize, length: usize) -> Clip {
        Clip {
            clip_id: format!("{video_id}__{label}__{start_frame:06}"),
            video_id: video_id.to_string(),
            label,
            start_frame,
            length,
            augmentation: None,
        }
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.length
    }

    pub fn is_augmented(&self) -> bool {
        self.augmentation.is_some()
    }
}

/// Tile every interval from its start with non-overlapping clips of
/// `clip_len` frames, dropping the remainder.
pub fn extract_clips(manifest: &VideoManifest, params: &ClipParams) -> Result<Vec<Clip>, DatasetError> {
    params.validate()?;
    let clip_len = params.clip_len;
    let clips = manifest
        .intervals
        .iter()
        .flat_map(|iv| {
            (0..iv.len() / clip_len).map(move |k| {
                Clip::original(&manifest.video_id, iv.label, iv.start_frame + k * clip_len, clip_len)
            })
        })
        .collect();
    Ok(clips)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Target-vs-rest clips for one binary model, with a split per clip id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipDataset {
    pub target_action: ActionLabel,
    pub target_clips: Vec<Clip>,
    pub rest_clips: Vec<Clip>,
    pub split: BTreeMap<String, Split>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub target: usize,
    pub rest: usize,
}

impl ClipDataset {
    pub fn split_of(&self, clip: &Clip) -> Option<Split> {
        self.split.get(&clip.clip_id).copied()
    }

    /// Clips of one split paired with their binary label (`true` = target),
    /// target clips first, each class in dataset order.
    pub fn clips_in(&self, split: Split) -> Vec<(&Clip, bool)> {
        let target = self.target_clips.iter().map(|c| (c, true));
        let rest = self.rest_clips.iter().map(|c| (c, false));
        target
            .chain(rest)
            .filter(|(c, _)| self.split_of(c) == Some(split))
            .collect()
    }

    pub fn counts(&self, split: Split) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for (_, is_target) in self.clips_in(split) {
            if is_target {
                counts.target += 1;
            } else {
                counts.rest += 1;
            }
        }
        counts
    }

    /// Add augmented target clips to the training split.
    pub fn add_augmented(&mut self, clips: Vec<Clip>) {
        for clip in clips {
            self.split.insert(clip.clip_id.clone(), Split::Train);
            self.target_clips.push(clip);
        }
    }
}

/// Partition clips into target/rest and train/validation/test.
///
/// Clips from `test_videos` form the test split. Training-video clips are
/// split into train and validation per class, holding out
/// `round(validation_fraction * class_count)` clips of each class after a
/// seeded shuffle.
pub fn build_one_vs_rest(
    clips: &[Clip],
    target: ActionLabel,
    train_videos: &BTreeSet<String>,
    test_videos: &BTreeSet<String>,
    validation_fraction: f64,
    rng_seed: u64,
) -> Result<ClipDataset, DatasetError> {
    if !target.is_target() {
        return Err(DatasetError::OtherAsTarget);
    }
    let shared: Vec<String> = train_videos.intersection(test_videos).cloned().collect();
    if !shared.is_empty() {
        return Err(DatasetError::VideoSetsOverlap(shared));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 0.5) {
        return Err(DatasetError::ValidationFraction(validation_fraction));
    }

    let mut split = BTreeMap::new();
    let mut target_clips = Vec::new();
    let mut rest_clips = Vec::new();
    let mut train_target = Vec::new();
    let mut train_rest = Vec::new();
    for clip in clips {
        let is_target = clip.label == target;
        let in_test = test_videos.contains(&clip.video_id);
        if !in_test && !train_videos.contains(&clip.video_id) {
            return Err(DatasetError::UnassignedVideo {
                clip_id: clip.clip_id.clone(),
                video_id: clip.video_id.clone(),
            });
        }
        if in_test {
            split.insert(clip.clip_id.clone(), Split::Test);
        } else if is_target {
            train_target.push(clip.clip_id.clone());
        } else {
            train_rest.push(clip.clip_id.clone());
        }
        if is_target {
            target_clips.push(clip.clone());
        } else {
            rest_clips.push(clip.clone());
        }
    }
    if train_target.is_empty() {
        return Err(DatasetError::EmptyClass { target, class: "target" });
    }
    if train_rest.is_empty() {
        return Err(DatasetError::EmptyClass { target, class: "rest" });
    }

    let mut rng = rng_from_seed(rng_seed);
    for mut ids in [train_target, train_rest] {
        let n_val = (validation_fraction * ids.len() as f64).round() as usize;
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < n_val { Split::Validation } else { Split::Train };
            split.insert(id, s);
        }
    }

    Ok(ClipDataset {
        target_action: target,
        target_clips,
        rest_clips,
        split,
    })
}
