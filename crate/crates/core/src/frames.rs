//! Frame store layout: one directory of `frame_%06d.png` files per video,
//! plus an optional augmented store holding one directory per derived clip.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Clip, VideoManifest};

/// An RGB frame, `(height, width, 3)`, values in `[0, 1]`.
pub type Frame = Array3<f64>;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("missing frame file {path}")]
    Missing { path: PathBuf },
    #[error("{path}: expected {expected_width}x{expected_height}, found {width}x{height}")]
    Geometry {
        path: PathBuf,
        expected_width: u32,
        expected_height: u32,
        width: u32,
        height: u32,
    },
    #[error("frame is not (h, w, 3): shape {0:?}")]
    Channels(Vec<usize>),
    #[error("no frame directory registered for video {0}")]
    UnknownVideo(String),
    #[error("clip {0} is augmented but no augmented frame store is configured")]
    NoAugmentedStore(String),
}

/// Spatial size every frame in a store must have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameGeometry {
    pub width: u32,
    pub height: u32,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        FrameGeometry { width: 224, height: 224 }
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

pub fn read_frame(path: &Path) -> Result<Frame, FrameError> {
    if !path.is_file() {
        return Err(FrameError::Missing { path: path.to_path_buf() });
    }
    let img = image::open(path)
        .map_err(|source| FrameError::Decode {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(image_to_frame(&img))
}

pub fn image_to_frame(img: &RgbImage) -> Frame {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0
    })
}

/// Quantize to 8 bits, rounding to nearest; values are clamped to `[0, 1]`.
pub fn frame_to_image(frame: &Frame) -> Result<RgbImage, FrameError> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(FrameError::Channels(frame.shape().to_vec()));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (frame[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<(), FrameError> {
    let img = frame_to_image(frame)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| FrameError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| FrameError::Encode {
            path: path.to_path_buf(),
            source,
        })
}

/// Check that a video's frame directory holds `frame_count` readable frames
/// of the expected geometry. Only PNG headers are read.
pub fn validate_layout(manifest: &VideoManifest, geometry: FrameGeometry) -> Result<(), FrameError> {
    for index in 0..manifest.frame_count {
        let path = manifest.frame_dir.join(frame_file_name(index));
        if !path.is_file() {
            return Err(FrameError::Missing { path });
        }
        let (width, height) = image::image_dimensions(&path).map_err(|source| FrameError::Decode {
            path: path.clone(),
            source,
        })?;
        if width != geometry.width || height != geometry.height {
            return Err(FrameError::Geometry {
                path,
                expected_width: geometry.width,
                expected_height: geometry.height,
                width,
                height,
            });
        }
    }
    Ok(())
}

/// Resolves clip frames to files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStore {
    pub videos: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_root: Option<PathBuf>,
}

impl FrameStore {
    pub fn from_manifests<'a>(manifests: impl IntoIterator<Item = &'a VideoManifest>) -> FrameStore {
        FrameStore {
            videos: manifests
                .into_iter()
                .map(|m| (m.video_id.clone(), m.frame_dir.clone()))
                .collect(),
            augmented_root: None,
        }
    }

    pub fn with_augmented_root(mut self, root: impl Into<PathBuf>) -> FrameStore {
        self.augmented_root = Some(root.into());
        self
    }

    pub fn video_dir(&self, video_id: &str) -> Result<&Path, FrameError> {
        self.videos
            .get(video_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| FrameError::UnknownVideo(video_id.to_string()))
    }

    pub fn augmented_dir(&self, clip_id: &str) -> Result<PathBuf, FrameError> {
        self.augmented_root
            .as_ref()
            .map(|root| root.join(clip_id))
            .ok_or_else(|| FrameError::NoAugmentedStore(clip_id.to_string()))
    }

    /// Path of the frame at `offset` within the clip.
    pub fn clip_frame_path(&self, clip: &Clip, offset: usize) -> Result<PathBuf, FrameError> {
        if clip.is_augmented() {
            Ok(self.augmented_dir(&clip.clip_id)?.join(frame_file_name(offset)))
        } else {
            Ok(self
                .video_dir(&clip.video_id)?
                .join(frame_file_name(clip.start_frame + offset)))
        }
    }

    pub fn read_clip_frame(&self, clip: &Clip, offset: usize) -> Result<Frame, FrameError> {
        read_frame(&self.clip_frame_path(clip, offset)?)
    }

    pub fn read_clip(&self, clip: &Clip) -> Result<Vec<Frame>, FrameError> {
        (0..clip.length).map(|i| self.read_clip_frame(clip, i)).collect()
    }

    pub fn read_video_frame(&self, video_id: &str, index: usize) -> Result<Frame, FrameError> {
        read_frame(&self.video_dir(video_id)?.join(frame_file_name(index)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActionLabel, AnnotatedInterval};

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0);
        let path = dir.path().join(frame_file_name(3));
        write_frame(&path, &frame).unwrap();
        assert!(path.ends_with("frame_000003.png"));
        assert_eq!(read_frame(&path).unwrap(), frame);
    }

    #[test]
    fn layout_validator_checks_count_and_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = VideoManifest {
            video_id: "v".into(),
            fps: 25.0,
            frame_count: 3,
            frame_dir: dir.path().to_path_buf(),
            intervals: vec![AnnotatedInterval { label: ActionLabel::Other, start_frame: 0, end_frame: 3 }],
        };
        let geometry = FrameGeometry { width: 6, height: 4 };
        for i in 0..2 {
            write_frame(&dir.path().join(frame_file_name(i)), &Array3::zeros((4, 6, 3))).unwrap();
        }
        assert!(matches!(validate_layout(&manifest, geometry), Err(FrameError::Missing { .. })));
        write_frame(&dir.path().join(frame_file_name(2)), &Array3::zeros((4, 5, 3))).unwrap();
        assert!(matches!(validate_layout(&manifest, geometry), Err(FrameError::Geometry { .. })));
        write_frame(&dir.path().join(frame_file_name(2)), &Array3::zeros((4, 6, 3))).unwrap();
        validate_layout(&manifest, geometry).unwrap();
    }
}
