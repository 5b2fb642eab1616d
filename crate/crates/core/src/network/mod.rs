//! The classifier family: a convolutional backbone applied per frame,
//! global average pooling, and either a static fully connected head or two
//! stacked recurrent layers, ending in a two-way softmax.

pub mod gradcheck;
mod init;
pub mod layers;
mod model;
pub mod params;
pub mod recurrent;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{
    backbone_forward, recurrent_head_forward, static_head_forward, Classifier, DropoutMasks, ForwardTrace, Mode,
    ModelConfig, Probs, CHECKPOINT_FILE, MODEL_CONFIG_FILE,
};
pub use params::ParamStore;
pub use recurrent::CellKind;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("backbone {0} is unavailable: pretrained weights are not bundled with this build")]
    UnavailableBackbone(BackboneKind),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("parameter {name}: expected {expected}, found shape {found:?}")]
    ParameterShape {
        name: String,
        expected: String,
        found: Vec<usize>,
    },
    #[error("checkpoint does not match the model configuration: {0}")]
    Incompatible(String),
    #[error("stale activations: trace recorded at parameter generation {recorded}, model is at {current}")]
    StaleActivation { recorded: u64, current: u64 },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid model config json at {path}: {source}")]
    ConfigJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallConv,
    Vgg16,
    Resnet50,
    #[serde(rename = "efficientnet_b2")]
    EfficientNetB2,
    Densenet121,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::SmallConv => "small_conv",
            BackboneKind::Vgg16 => "vgg16",
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::EfficientNetB2 => "efficientnet_b2",
            BackboneKind::Densenet121 => "densenet121",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            BackboneKind::SmallConv => "SmallConv",
            BackboneKind::Vgg16 => "VGG16",
            BackboneKind::Resnet50 => "ResNet50",
            BackboneKind::EfficientNetB2 => "EfficientNetB2",
            BackboneKind::Densenet121 => "DenseNet121",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stride-`downsample` convolution with `kernel x kernel` taps, "same"
/// padding and ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub feature_dim: usize,
    pub stages: Vec<ConvStage>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |channels| ConvStage {
            channels,
            kernel: 3,
            downsample: 2,
        };
        BackboneConfig {
            kind: BackboneKind::SmallConv,
            feature_dim: 128,
            stages: vec![stage(16), stage(32), stage(64), stage(128)],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.kind != BackboneKind::SmallConv {
            return Err(NetworkError::UnavailableBackbone(self.kind));
        }
        if self.feature_dim == 0 {
            return Err(NetworkError::Config("feature_dim must be > 0".into()));
        }
        let Some(last) = self.stages.last() else {
            return Err(NetworkError::Config("small_conv needs at least one stage".into()));
        };
        if last.channels != self.feature_dim {
            return Err(NetworkError::Config(format!(
                "feature_dim {} must equal the last stage's channels {}",
                self.feature_dim, last.channels
            )));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels == 0 || st.kernel == 0 || st.downsample == 0 || st.kernel % 2 == 0 {
                return Err(NetworkError::Config(format!(
                    "stage {i}: channels and downsample must be > 0 and kernel odd, got {st:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    FullyConnected,
    Lstm,
    Gru,
    Bilstm,
    Bigru,
}

impl HeadKind {
    /// Reporting order.
    pub const ALL: [HeadKind; 5] = [
        HeadKind::FullyConnected,
        HeadKind::Lstm,
        HeadKind::Gru,
        HeadKind::Bilstm,
        HeadKind::Bigru,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::FullyConnected => "fully_connected",
            HeadKind::Lstm => "lstm",
            HeadKind::Gru => "gru",
            HeadKind::Bilstm => "bilstm",
            HeadKind::Bigru => "bigru",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            HeadKind::FullyConnected => "Fully Connected",
            HeadKind::Lstm => "LSTM",
            HeadKind::Gru => "GRU",
            HeadKind::Bilstm => "BiLSTM",
            HeadKind::Bigru => "BiGRU",
        }
    }

    pub fn cell(self) -> Option<CellKind> {
        match self {
            HeadKind::FullyConnected => None,
            HeadKind::Lstm | HeadKind::Bilstm => Some(CellKind::Lstm),
            HeadKind::Gru | HeadKind::Bigru => Some(CellKind::Gru),
        }
    }

    pub fn bidirectional(self) -> bool {
        matches!(self, HeadKind::Bilstm | HeadKind::Bigru)
    }

    pub fn directions(self) -> usize {
        if self.bidirectional() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| NetworkError::Config(format!("unknown head kind `{s}`")))
    }
}

/// How the second recurrent layer's outputs become one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Last forward state, concatenated with the backward direction's last
    /// state for bidirectional heads.
    #[default]
    Last,
    /// Mean of the per-step outputs.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Units per direction.
    pub rnn_units_1: usize,
    pub rnn_units_2: usize,
    pub inter_layer_dropout: f64,
    pub fc_units_1: usize,
    pub fc_dropout: f64,
    pub fc_units_2: usize,
    pub num_classes: usize,
    pub readout: Readout,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Bilstm,
            rnn_units_1: 128,
            rnn_units_2: 64,
            inter_layer_dropout: 0.5,
            fc_units_1: 256,
            fc_dropout: 0.5,
            fc_units_2: 64,
            num_classes: 2,
            readout: Readout::Last,
        }
    }
}

impl HeadConfig {
    pub fn with_kind(kind: HeadKind) -> HeadConfig {
        HeadConfig {
            kind,
            ..HeadConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let units = [self.rnn_units_1, self.rnn_units_2, self.fc_units_1, self.fc_units_2];
        if units.contains(&0) {
            return Err(NetworkError::Config("all unit counts must be > 0".into()));
        }
        for (name, rate) in [("inter_layer_dropout", self.inter_layer_dropout), ("fc_dropout", self.fc_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(NetworkError::Config(format!("{name} must be in [0, 1), got {rate}")));
            }
        }
        if self.num_classes != 2 {
            return Err(NetworkError::Config(format!(
                "one-vs-rest heads have 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}
