//! Segment-based frame sampling.
//!
//! A clip of `N` frames is cut into `S` segments `[floor(i*N/S),
//! floor((i+1)*N/S))` and one frame is taken from each: uniformly at random
//! for training, the segment midpoint for inference.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Clip;
use crate::frames::{Frame, FrameError, FrameStore};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("clip of {length} frames is shorter than the sequence length {sequence_length}")]
    ClipTooShort { length: usize, sequence_length: usize },
    #[error("sequence_length must be at least 1")]
    EmptySequence,
    #[error("frame index {index} outside clip {clip_id} of length {length}")]
    IndexOutOfRange {
        clip_id: String,
        index: usize,
        length: usize,
    },
    #[error("clip {0} is not loaded")]
    NotLoaded(String),
    #[error("frame index {index} of clip {clip_id}: {source}")]
    Frame {
        clip_id: String,
        index: usize,
        #[source]
        source: FrameError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Random,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub sequence_length: usize,
    pub mode: SamplingMode,
    /// Only read in random mode.
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn random(sequence_length: usize, rng_seed: u64) -> SamplerConfig {
        SamplerConfig {
            sequence_length,
            mode: SamplingMode::Random,
            rng_seed,
        }
    }

    pub fn center(sequence_length: usize) -> SamplerConfig {
        SamplerConfig {
            sequence_length,
            mode: SamplingMode::Center,
            rng_seed: 0,
        }
    }
}

/// The model input: `sequence_length` frames in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub source_indices: Vec<usize>,
    pub clip_id: String,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `S + 1` boundaries partitioning `[0, n)`.
pub fn segment_bounds(n: usize, segments: usize) -> Vec<usize> {
    (0..=segments).map(|i| i * n / segments).collect()
}

pub fn sample_indices(n: usize, config: &SamplerConfig) -> Result<Vec<usize>, SamplerError> {
    let s = config.sequence_length;
    if s == 0 {
        return Err(SamplerError::EmptySequence);
    }
    if n < s {
        return Err(SamplerError::ClipTooShort {
            length: n,
            sequence_length: s,
        });
    }
    let bounds = segment_bounds(n, s);
    let indices = match config.mode {
        SamplingMode::Center => bounds.windows(2).map(|w| (w[0] + w[1] - 1) / 2).collect(),
        SamplingMode::Random => {
            let mut rng = rng_from_seed(config.rng_seed);
            bounds.windows(2).map(|w| rng.random_range(w[0]..w[1])).collect()
        }
    };
    Ok(indices)
}

/// Per-(clip, epoch) sampling seed, independent of data-loading order.
pub fn epoch_seed(global_seed: u64, clip_id: &str, epoch: usize) -> u64 {
    derive_seed(global_seed, &["sample", clip_id, &epoch.to_string()])
}

/// Load the frames at clip-relative `indices`.
pub fn load_sequence(clip: &Clip, indices: &[usize], store: &FrameStore) -> Result<FrameSequence, SamplerError> {
    let frames = indices
        .iter()
        .map(|&index| {
            if index >= clip.length {
                return Err(SamplerError::IndexOutOfRange {
                    clip_id: clip.clip_id.clone(),
                    index,
                    length: clip.length,
                });
            }
            store.read_clip_frame(clip, index).map_err(|source| SamplerError::Frame {
                clip_id: clip.clip_id.clone(),
                index,
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameSequence {
        frames,
        source_indices: indices.to_vec(),
        clip_id: clip.clip_id.clone(),
    })
}

/// Where sampled frames come from.
pub trait ClipSource {
    /// Frames at clip-relative `indices`.
    fn sequence(&self, clip: &Clip, indices: &[usize]) -> Result<FrameSequence, SamplerError>;

    /// Sample and load in one step.
    fn sample(&self, clip: &Clip, config: &SamplerConfig) -> Result<FrameSequence, SamplerError> {
        let indices = sample_indices(clip.length, config)?;
        self.sequence(clip, &indices)
    }
}

impl ClipSource for FrameStore {
    fn sequence(&self, clip: &Clip, indices: &[usize]) -> Result<FrameSequence, SamplerError> {
        load_sequence(clip, indices, self)
    }
}

/// Decoded clips held in memory, keyed by clip id.
#[derive(Debug, Clone, Default)]
pub struct MemoryClips {
    clips: HashMap<String, Vec<Frame>>,
}

impl MemoryClips {
    pub fn new() -> MemoryClips {
        MemoryClips::default()
    }

    pub fn insert(&mut self, clip_id: impl Into<String>, frames: Vec<Frame>) {
        self.clips.insert(clip_id.into(), frames);
    }

    /// Decode every frame of `clips` from `store`.
    pub fn preload<'a>(store: &FrameStore, clips: impl IntoIterator<Item = &'a Clip>) -> Result<MemoryClips, SamplerError> {
        let mut out = MemoryClips::new();
        for clip in clips {
            if out.clips.contains_key(&clip.clip_id) {
                continue;
            }
            let all: Vec<usize> = (0..clip.length).collect();
            let seq = load_sequence(clip, &all, store)?;
            out.insert(clip.clip_id.clone(), seq.frames);
        }
        Ok(out)
    }
}

impl ClipSource for MemoryClips {
    fn sequence(&self, clip: &Clip, indices: &[usize]) -> Result<FrameSequence, SamplerError> {
        let frames = self.clips.get(&clip.clip_id).ok_or_else(|| SamplerError::NotLoaded(clip.clip_id.clone()))?;
        let picked = indices
            .iter()
            .map(|&index| {
                frames.get(index).cloned().ok_or_else(|| SamplerError::IndexOutOfRange {
                    clip_id: clip.clip_id.clone(),
                    index,
                    length: frames.len(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FrameSequence {
            frames: picked,
            source_indices: indices.to_vec(),
            clip_id: clip.clip_id.clone(),
        })
    }
}
