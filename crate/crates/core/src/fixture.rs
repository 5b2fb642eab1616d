//! Synthetic moving-dot videos with known action intervals.
//!
//! Every frame is a colour-gradient background (red grows left to right,
//! green top to bottom) with a soft-edged dot. Each action has its own dot
//! colour and direction of travel; `other` intervals hold the dot still.
//! The dot restarts every 50 frames so motion is monotonic within a clip.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActionLabel, AnnotatedInterval, Clip, DatasetError, VideoManifest};
use crate::frames::{frame_file_name, write_frame, Frame, FrameError};
use crate::sampler::MemoryClips;
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub train_videos: usize,
    pub test_videos: usize,
    pub frame_size: usize,
    /// Frames per annotated interval.
    pub interval_frames: usize,
    /// Number of `other` intervals per video.
    pub other_intervals: usize,
    /// Pixels per frame.
    pub speed: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            train_videos: 5,
            test_videos: 2,
            frame_size: 32,
            interval_frames: 100,
            other_intervals: 2,
            speed: 0.3,
            fps: 25.0,
            seed: 7,
        }
    }
}

/// Where a generated fixture landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLayout {
    pub manifests: Vec<PathBuf>,
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
}

const BLOCK: usize = 50;
const DOT_RADIUS: f64 = 3.0;

/// Dot colour and unit direction of travel.
fn style(label: ActionLabel) -> ([f64; 3], (f64, f64)) {
    let d = std::f64::consts::FRAC_1_SQRT_2;
    match label {
        ActionLabel::AbdominalAccess => ([1.0, 1.0, 1.0], (1.0, 0.0)),
        ActionLabel::GraspingAnatomy => ([0.0, 0.0, 1.0], (-1.0, 0.0)),
        ActionLabel::KnotPushing => ([1.0, 0.0, 1.0], (0.0, 1.0)),
        ActionLabel::NeedlePulling => ([0.0, 1.0, 1.0], (0.0, -1.0)),
        ActionLabel::NeedlePushing => ([1.0, 1.0, 0.0], (d, d)),
        ActionLabel::Suction => ([0.0, 0.0, 0.0], (-d, -d)),
        ActionLabel::Other => ([0.5, 0.5, 0.5], (0.0, 0.0)),
    }
}

/// One frame with a dot of `color` centred at `(cx, cy)`.
pub fn render_dot(size: usize, cx: f64, cy: f64, color: [f64; 3]) -> Frame {
    let scale = (size.max(2) - 1) as f64;
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let background = match c {
            0 => x as f64 / scale,
            1 => y as f64 / scale,
            _ => 0.2,
        };
        let dist = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let alpha = (DOT_RADIUS + 0.5 - dist).clamp(0.0, 1.0);
        background * (1.0 - alpha) + color[c] * alpha
    })
}

/// A `frames`-long dot trajectory starting at `start` with velocity `v`.
pub fn render_track(size: usize, frames: usize, start: (f64, f64), v: (f64, f64), color: [f64; 3]) -> Vec<Frame> {
    (0..frames)
        .map(|t| render_dot(size, start.0 + v.0 * t as f64, start.1 + v.1 * t as f64, color))
        .collect()
}

/// Start point that keeps a `BLOCK`-frame track centred, with some jitter.
fn block_start(size: usize, v: (f64, f64), rng: &mut impl Rng) -> (f64, f64) {
    let centre = (size as f64 - 1.0) / 2.0;
    let travel = (BLOCK - 1) as f64;
    let jitter = size as f64 / 10.0;
    (
        centre - v.0 * travel / 2.0 + rng.random_range(-jitter..=jitter),
        centre - v.1 * travel / 2.0 + rng.random_range(-jitter..=jitter),
    )
}

fn io_err(path: &Path, source: std::io::Error) -> FrameError {
    FrameError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write one video's frames under `dir/frames` and its manifest to
/// `dir/<video_id>.json`.
fn write_video(spec: &FixtureSpec, video_id: &str, dir: &Path) -> crate::Result<PathBuf> {
    let mut rng = rng_from_seed(derive_seed(spec.seed, &["fixture", video_id]));
    let mut labels: Vec<ActionLabel> = ActionLabel::TARGETS.to_vec();
    labels.extend(std::iter::repeat_n(ActionLabel::Other, spec.other_intervals));
    labels.shuffle(&mut rng);

    let frame_dir = dir.join(video_id);
    let mut intervals = Vec::with_capacity(labels.len());
    let mut index = 0;
    for &label in &labels {
        let (color, dir) = style(label);
        let v = (dir.0 * spec.speed, dir.1 * spec.speed);
        let start_frame = index;
        let mut remaining = spec.interval_frames;
        while remaining > 0 {
            let n = remaining.min(BLOCK);
            let start = block_start(spec.frame_size, v, &mut rng);
            for frame in render_track(spec.frame_size, n, start, v, color) {
                write_frame(&frame_dir.join(frame_file_name(index)), &frame)?;
                index += 1;
            }
            remaining -= n;
        }
        intervals.push(AnnotatedInterval {
            label,
            start_frame,
            end_frame: index,
        });
    }
    let manifest = VideoManifest {
        video_id: video_id.to_string(),
        fps: spec.fps,
        frame_count: index,
        frame_dir: PathBuf::from(video_id),
        intervals,
    };
    manifest.validate()?;
    let path = dir.join(format!("{video_id}.json"));
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Malformed {
        path: path.clone(),
        field: String::new(),
        message: e.to_string(),
    })?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Generate the fixture videos into `dir`.
pub fn generate(spec: &FixtureSpec, dir: &Path) -> crate::Result<FixtureLayout> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut layout = FixtureLayout {
        manifests: Vec::new(),
        train_videos: Vec::new(),
        test_videos: Vec::new(),
    };
    for i in 0..spec.train_videos + spec.test_videos {
        let video_id = format!("fixture_v{i:02}");
        layout.manifests.push(write_video(spec, &video_id, dir)?);
        if i < spec.train_videos {
            layout.train_videos.push(video_id);
        } else {
            layout.test_videos.push(video_id);
        }
    }
    Ok(layout)
}

/// In-memory clips of one dot moving left (rest) or right (target), with
/// jittered start points. Returns `(clip, is_target)` pairs and their frames.
pub fn two_motion_clips(per_class: usize, size: usize, frames: usize, speed: f64, seed: u64) -> (Vec<(Clip, bool)>, MemoryClips) {
    let mut rng = rng_from_seed(derive_seed(seed, &["two_motion"]));
    let mut clips = Vec::new();
    let mut store = MemoryClips::new();
    let centre = (size as f64 - 1.0) / 2.0;
    let travel = (frames - 1) as f64 * speed;
    for i in 0..2 * per_class {
        let rightward = i % 2 == 0;
        let dir = if rightward { 1.0 } else { -1.0 };
        let start = (
            centre - dir * travel / 2.0 + rng.random_range(-1.5..=1.5),
            centre + rng.random_range(-6.0..=6.0),
        );
        let label = if rightward { ActionLabel::AbdominalAccess } else { ActionLabel::Other };
        let mut clip = Clip::original("two_motion", label, i * frames, frames);
        clip.clip_id = format!("two_motion__{i:03}");
        store.insert(clip.clip_id.clone(), render_track(size, frames, start, (dir * speed, 0.0), [1.0, 1.0, 1.0]));
        clips.push((clip, rightward));
    }
    (clips, store)
}
