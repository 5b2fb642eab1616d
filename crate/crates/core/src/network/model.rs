use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis, Dimension};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::init::{direction_prefix, initialize, param_specs};
use super::layers::{
    affine, affine_backward, col2im, conv_output_size, im2col, relu_backward_in_place, relu_in_place, softmax,
    softmax_backward,
};
use super::params::ParamStore;
use super::recurrent::{backprop_layer, run_layer, DirectionGrads, DirectionParams, LayerCache};
use super::{BackboneConfig, CellKind, HeadConfig, HeadKind, NetworkError, Readout};
use crate::frames::Frame;
use crate::sampler::FrameSequence;

/// Class probabilities `[rest, target]`.
pub type Probs = [f64; 2];

/// Dropout behaviour for one forward pass.
pub enum Mode<'a> {
    /// Dropout disabled.
    Inference,
    /// Draw fresh masks.
    Train(&'a mut dyn RngCore),
    /// Reuse masks recorded by an earlier training pass.
    Replay(&'a DropoutMasks),
}

/// Inverted-dropout multipliers (`0` or `1 / (1 - rate)`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropoutMasks {
    /// Between the recurrent layers, `(T, layer-1 width)`.
    pub inter_layer: Option<Array2<f64>>,
    /// After the first dense layer of the static head, `(T, fc_units_1)`.
    pub fc: Option<Array2<f64>>,
}

fn resolve_mask(
    mode: &mut Mode<'_>,
    replayed: impl Fn(&DropoutMasks) -> Option<&Array2<f64>>,
    shape: (usize, usize),
    rate: f64,
) -> Result<Option<Array2<f64>>, NetworkError> {
    match mode {
        Mode::Inference => Ok(None),
        Mode::Train(rng) => {
            if rate == 0.0 {
                return Ok(None);
            }
            let keep = 1.0 / (1.0 - rate);
            Ok(Some(Array2::from_shape_fn(shape, |_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })))
        }
        Mode::Replay(masks) => match replayed(masks) {
            Some(m) if m.dim() != shape => Err(NetworkError::Geometry(format!(
                "replayed dropout mask {:?} does not match activations {:?}",
                m.dim(),
                shape
            ))),
            other => Ok(other.cloned()),
        },
    }
}

fn add_grad<D: Dimension>(grads: &mut ParamStore, name: &str, g: &ndarray::Array<f64, D>) -> Result<(), NetworkError> {
    let slot = grads.get_mut(name)?;
    if slot.len() != g.len() {
        return Err(NetworkError::ParameterShape {
            name: name.to_string(),
            expected: format!("{} elements", slot.len()),
            found: g.shape().to_vec(),
        });
    }
    for (s, v) in slot.iter_mut().zip(g.iter()) {
        *s += v;
    }
    Ok(())
}

fn stack_frames(frames: &[Frame]) -> Result<Array4<f64>, NetworkError> {
    let first = frames
        .first()
        .ok_or_else(|| NetworkError::Geometry("empty frame sequence".into()))?;
    let (h, w, c) = first.dim();
    if c != 3 {
        return Err(NetworkError::Geometry(format!("frames must have 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(NetworkError::Geometry("frames must be non-empty".into()));
    }
    let mut out = Array4::zeros((frames.len(), h, w, c));
    for (t, f) in frames.iter().enumerate() {
        if f.dim() != (h, w, c) {
            return Err(NetworkError::Geometry(format!(
                "frame {t} has shape {:?}, frame 0 has {:?}",
                f.dim(),
                (h, w, c)
            )));
        }
        out.slice_mut(s![t, .., .., ..]).assign(f);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct ConvCache {
    input_shape: (usize, usize, usize, usize),
    cols: Array2<f64>,
    pre: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BackboneTrace {
    convs: Vec<ConvCache>,
    /// `(T, h, w, c)` of the last feature map.
    pooled_shape: (usize, usize, usize, usize),
}

fn backbone_run(
    config: &BackboneConfig,
    params: &ParamStore,
    input: Array4<f64>,
) -> Result<(Array2<f64>, BackboneTrace), NetworkError> {
    config.validate()?;
    let mut x = input;
    let mut convs = Vec::with_capacity(config.stages.len());
    for (i, st) in config.stages.iter().enumerate() {
        let (n, h, w, c) = x.dim();
        let weight = params.get(&format!("backbone.conv{i}.weight"))?;
        let expected = [st.channels, st.kernel, st.kernel, c];
        if weight.shape() != expected {
            return Err(NetworkError::ParameterShape {
                name: format!("backbone.conv{i}.weight"),
                expected: format!("{expected:?}"),
                found: weight.shape().to_vec(),
            });
        }
        let w2 = weight
            .view()
            .into_shape_with_order((st.channels, st.kernel * st.kernel * c))
            .map_err(|e| NetworkError::Geometry(e.to_string()))?;
        let bias = params.vector(&format!("backbone.conv{i}.bias"))?;
        let cols = im2col(&x, st.kernel, st.downsample);
        let pre = affine(cols.view(), w2, bias);
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let (ho, wo) = (conv_output_size(h, st.kernel, st.downsample), conv_output_size(w, st.kernel, st.downsample));
        convs.push(ConvCache {
            input_shape: (n, h, w, c),
            cols,
            pre,
        });
        x = act
            .into_shape_with_order((n, ho, wo, st.channels))
            .map_err(|e| NetworkError::Geometry(e.to_string()))?;
    }
    let pooled_shape = x.dim();
    let features = x.mean_axis(Axis(1)).and_then(|m| m.mean_axis(Axis(1))).expect("non-empty map");
    Ok((features, BackboneTrace { convs, pooled_shape }))
}

fn backbone_backprop(
    config: &BackboneConfig,
    params: &ParamStore,
    trace: &BackboneTrace,
    d_features: Array2<f64>,
    grads: &mut ParamStore,
) -> Result<(), NetworkError> {
    let (n, h, w, c) = trace.pooled_shape;
    let scale = 1.0 / (h * w) as f64;
    // global average pool: spread evenly over the spatial positions
    let mut d_act = Array2::zeros((n * h * w, c));
    for t in 0..n {
        let g = d_features.row(t).mapv(|v| v * scale);
        d_act.slice_mut(s![t * h * w..(t + 1) * h * w, ..]).assign(&g.broadcast((h * w, c)).expect("row broadcast"));
    }
    for (i, (st, cache)) in config.stages.iter().zip(&trace.convs).enumerate().rev() {
        relu_backward_in_place(&mut d_act, &cache.pre);
        let (_, _, _, c_in) = cache.input_shape;
        let weight = params.get(&format!("backbone.conv{i}.weight"))?;
        let w2 = weight
            .view()
            .into_shape_with_order((st.channels, st.kernel * st.kernel * c_in))
            .map_err(|e| NetworkError::Geometry(e.to_string()))?;
        let (d_cols, dw, db) = affine_backward(d_act.view(), cache.cols.view(), w2);
        add_grad(grads, &format!("backbone.conv{i}.weight"), &dw)?;
        add_grad(grads, &format!("backbone.conv{i}.bias"), &db)?;
        if i > 0 {
            let d_in = col2im(&d_cols, cache.input_shape, st.kernel, st.downsample);
            let (n, h, w, c) = cache.input_shape;
            d_act = d_in
                .into_shape_with_order((n * h * w, c))
                .map_err(|e| NetworkError::Geometry(e.to_string()))?;
        }
    }
    Ok(())
}

/// Per-frame backbone features, `(T, feature_dim)`.
pub fn backbone_forward(frames: &[Frame], config: &BackboneConfig, params: &ParamStore) -> Result<Array2<f64>, NetworkError> {
    backbone_run(config, params, stack_frames(frames)?).map(|(f, _)| f)
}

#[derive(Debug, Clone)]
struct StaticTrace {
    features: Array2<f64>,
    pre1: Array2<f64>,
    mask: Option<Array2<f64>>,
    /// Input of the second dense layer (after ReLU and dropout).
    hidden1: Array2<f64>,
    pre2: Array2<f64>,
    hidden2: Array2<f64>,
    frame_probs: Array2<f64>,
    mean: Array1<f64>,
}

fn static_run(
    head: &HeadConfig,
    params: &ParamStore,
    features: Array2<f64>,
    mode: &mut Mode<'_>,
) -> Result<(Probs, StaticTrace), NetworkError> {
    let t = features.nrows();
    let pre1 = affine(features.view(), params.matrix("head.fc1.weight")?, params.vector("head.fc1.bias")?);
    let mut hidden1 = pre1.clone();
    relu_in_place(&mut hidden1);
    let mask = resolve_mask(mode, |m| m.fc.as_ref(), hidden1.dim(), head.fc_dropout)?;
    if let Some(m) = &mask {
        hidden1 *= m;
    }
    let pre2 = affine(hidden1.view(), params.matrix("head.fc2.weight")?, params.vector("head.fc2.bias")?);
    let mut hidden2 = pre2.clone();
    relu_in_place(&mut hidden2);
    let logits = affine(hidden2.view(), params.matrix("head.out.weight")?, params.vector("head.out.bias")?);
    let mut frame_probs = Array2::zeros((t, 2));
    for (i, row) in logits.rows().into_iter().enumerate() {
        frame_probs.row_mut(i).assign(&softmax(row));
    }
    let mean = frame_probs.mean_axis(Axis(0)).expect("T >= 1");
    let total = mean.sum();
    let probs = [mean[0] / total, mean[1] / total];
    Ok((
        probs,
        StaticTrace {
            features,
            pre1,
            mask,
            hidden1,
            pre2,
            hidden2,
            frame_probs,
            mean,
        },
    ))
}

fn static_backprop(
    params: &ParamStore,
    trace: &StaticTrace,
    d_probs: Probs,
    grads: &mut ParamStore,
) -> Result<Array2<f64>, NetworkError> {
    let t = trace.features.nrows();
    // renormalization q = m / sum(m)
    let total = trace.mean.sum();
    let q = &trace.mean / total;
    let dq = Array1::from(d_probs.to_vec());
    let dot = dq.dot(&q);
    let d_mean = dq.mapv(|v| (v - dot) / total);
    let mut d_logits = Array2::zeros((t, 2));
    for i in 0..t {
        let d_p = d_mean.mapv(|v| v / t as f64);
        d_logits.row_mut(i).assign(&softmax_backward(trace.frame_probs.row(i), d_p.view()));
    }
    let (mut d_h2, dw, db) = affine_backward(d_logits.view(), trace.hidden2.view(), params.matrix("head.out.weight")?);
    add_grad(grads, "head.out.weight", &dw)?;
    add_grad(grads, "head.out.bias", &db)?;
    relu_backward_in_place(&mut d_h2, &trace.pre2);
    let (mut d_h1, dw, db) = affine_backward(d_h2.view(), trace.hidden1.view(), params.matrix("head.fc2.weight")?);
    add_grad(grads, "head.fc2.weight", &dw)?;
    add_grad(grads, "head.fc2.bias", &db)?;
    if let Some(m) = &trace.mask {
        d_h1 *= m;
    }
    relu_backward_in_place(&mut d_h1, &trace.pre1);
    let (d_features, dw, db) = affine_backward(d_h1.view(), trace.features.view(), params.matrix("head.fc1.weight")?);
    add_grad(grads, "head.fc1.weight", &dw)?;
    add_grad(grads, "head.fc1.bias", &db)?;
    Ok(d_features)
}

#[derive(Debug, Clone)]
struct RecurrentTrace {
    layer1: LayerCache,
    mask: Option<Array2<f64>>,
    layer2: LayerCache,
    steps: usize,
    readout: Array1<f64>,
    probs: Array1<f64>,
}

fn direction_params<'a>(
    params: &'a ParamStore,
    cell: CellKind,
    layer: usize,
    backward: bool,
) -> Result<DirectionParams<'a>, NetworkError> {
    let p = direction_prefix(layer, backward);
    Ok(DirectionParams {
        kernel: params.matrix(&format!("{p}.kernel"))?,
        recurrent_kernel: params.matrix(&format!("{p}.recurrent_kernel"))?,
        bias: params.vector(&format!("{p}.bias"))?,
        recurrent_bias: match cell {
            CellKind::Gru => Some(params.vector(&format!("{p}.recurrent_bias"))?),
            CellKind::Lstm => None,
        },
    })
}

fn layer_params<'a>(
    params: &'a ParamStore,
    head: &HeadConfig,
    cell: CellKind,
    layer: usize,
) -> Result<(DirectionParams<'a>, Option<DirectionParams<'a>>), NetworkError> {
    let fwd = direction_params(params, cell, layer, false)?;
    let bwd = if head.kind.bidirectional() {
        Some(direction_params(params, cell, layer, true)?)
    } else {
        None
    };
    Ok((fwd, bwd))
}

fn readout_vector(y: ArrayView2<'_, f64>, readout: Readout, units: usize, bidirectional: bool) -> Array1<f64> {
    let last = y.nrows() - 1;
    match readout {
        Readout::Mean => y.mean_axis(Axis(0)).expect("T >= 1"),
        Readout::Last if bidirectional => {
            ndarray::concatenate(Axis(0), &[y.slice(s![last, ..units]), y.slice(s![0, units..])]).expect("1-d")
        }
        Readout::Last => y.row(last).to_owned(),
    }
}

fn recurrent_run(
    head: &HeadConfig,
    params: &ParamStore,
    features: ArrayView2<'_, f64>,
    mode: &mut Mode<'_>,
) -> Result<(Probs, RecurrentTrace), NetworkError> {
    let cell = head
        .kind
        .cell()
        .ok_or_else(|| NetworkError::Config(format!("{} is not a recurrent head", head.kind)))?;
    let steps = features.nrows();
    if steps == 0 {
        return Err(NetworkError::Geometry("recurrent head needs at least one step".into()));
    }
    let (f1, b1) = layer_params(params, head, cell, 1)?;
    if f1.kernel.ncols() != features.ncols() {
        return Err(NetworkError::Geometry(format!(
            "features have width {}, layer 1 expects {}",
            features.ncols(),
            f1.kernel.ncols()
        )));
    }
    let (mut y1, layer1) = run_layer(cell, &f1, b1.as_ref(), features);
    let mask = resolve_mask(mode, |m| m.inter_layer.as_ref(), y1.dim(), head.inter_layer_dropout)?;
    if let Some(m) = &mask {
        y1 *= m;
    }
    let (f2, b2) = layer_params(params, head, cell, 2)?;
    let (y2, layer2) = run_layer(cell, &f2, b2.as_ref(), y1.view());
    let readout = readout_vector(y2.view(), head.readout, f2.units(), head.kind.bidirectional());
    let logits = params.matrix("head.out.weight")?.dot(&readout) + params.vector("head.out.bias")?;
    let probs = softmax(logits.view());
    Ok((
        [probs[0], probs[1]],
        RecurrentTrace {
            layer1,
            mask,
            layer2,
            steps,
            readout,
            probs,
        },
    ))
}

fn add_direction_grads(grads: &mut ParamStore, layer: usize, backward: bool, g: &DirectionGrads) -> Result<(), NetworkError> {
    let p = direction_prefix(layer, backward);
    add_grad(grads, &format!("{p}.kernel"), &g.kernel)?;
    add_grad(grads, &format!("{p}.recurrent_kernel"), &g.recurrent_kernel)?;
    add_grad(grads, &format!("{p}.bias"), &g.bias)?;
    if let Some(rb) = &g.recurrent_bias {
        add_grad(grads, &format!("{p}.recurrent_bias"), rb)?;
    }
    Ok(())
}

fn recurrent_backprop(
    head: &HeadConfig,
    params: &ParamStore,
    trace: &RecurrentTrace,
    d_probs: Probs,
    grads: &mut ParamStore,
) -> Result<Array2<f64>, NetworkError> {
    let cell = head.kind.cell().expect("recurrent trace");
    let dp = Array1::from(d_probs.to_vec());
    let d_logits = softmax_backward(trace.probs.view(), dp.view());
    let w_out = params.matrix("head.out.weight")?;
    let dw = d_logits
        .view()
        .insert_axis(Axis(1))
        .dot(&trace.readout.view().insert_axis(Axis(0)));
    add_grad(grads, "head.out.weight", &dw)?;
    add_grad(grads, "head.out.bias", &d_logits)?;
    let d_readout = w_out.t().dot(&d_logits);

    let (f2, b2) = layer_params(params, head, cell, 2)?;
    let units = f2.units();
    let width = units * head.kind.directions();
    let last = trace.steps - 1;
    let mut d_y2 = Array2::zeros((trace.steps, width));
    match head.readout {
        Readout::Mean => {
            let g = d_readout.mapv(|v| v / trace.steps as f64);
            for mut row in d_y2.rows_mut() {
                row.assign(&g);
            }
        }
        Readout::Last if head.kind.bidirectional() => {
            d_y2.slice_mut(s![last, ..units]).assign(&d_readout.slice(s![..units]));
            d_y2.slice_mut(s![0, units..]).assign(&d_readout.slice(s![units..]));
        }
        Readout::Last => d_y2.row_mut(last).assign(&d_readout),
    }
    let (mut d_y1, g2f, g2b) = backprop_layer(&f2, b2.as_ref(), &trace.layer2, d_y2.view());
    add_direction_grads(grads, 2, false, &g2f)?;
    if let Some(g) = &g2b {
        add_direction_grads(grads, 2, true, g)?;
    }
    if let Some(m) = &trace.mask {
        d_y1 *= m;
    }
    let (f1, b1) = layer_params(params, head, cell, 1)?;
    let (d_features, g1f, g1b) = backprop_layer(&f1, b1.as_ref(), &trace.layer1, d_y1.view());
    add_direction_grads(grads, 1, false, &g1f)?;
    if let Some(g) = &g1b {
        add_direction_grads(grads, 1, true, g)?;
    }
    Ok(d_features)
}

/// Two stacked recurrent layers over `(T, D)` features, then dense + softmax.
pub fn recurrent_head_forward(
    features: ArrayView2<'_, f64>,
    config: &HeadConfig,
    params: &ParamStore,
    mut mode: Mode<'_>,
) -> Result<Probs, NetworkError> {
    recurrent_run(config, params, features, &mut mode).map(|(p, _)| p)
}

/// The static head on a single pooled feature vector.
pub fn static_head_forward(
    feature: ArrayView1<'_, f64>,
    config: &HeadConfig,
    params: &ParamStore,
    mut mode: Mode<'_>,
) -> Result<Probs, NetworkError> {
    if config.kind != HeadKind::FullyConnected {
        return Err(NetworkError::Config(format!("{} is not the static head", config.kind)));
    }
    let features = feature.insert_axis(Axis(0)).to_owned();
    static_run(config, params, features, &mut mode).map(|(p, _)| p)
}

#[derive(Debug, Clone)]
enum HeadTrace {
    Static(StaticTrace),
    Recurrent(RecurrentTrace),
}

/// Activations of one forward pass, consumed by [`Classifier::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    generation: u64,
    probs: Probs,
    backbone: BackboneTrace,
    head: HeadTrace,
}

impl ForwardTrace {
    pub fn probs(&self) -> Probs {
        self.probs
    }

    /// The dropout masks drawn in this pass, for replaying it.
    pub fn masks(&self) -> DropoutMasks {
        match &self.head {
            HeadTrace::Static(t) => DropoutMasks {
                inter_layer: None,
                fc: t.mask.clone(),
            },
            HeadTrace::Recurrent(t) => DropoutMasks {
                inter_layer: t.mask.clone(),
                fc: None,
            },
        }
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

/// A backbone + head pair with its parameters.
#[derive(Debug, Clone)]
pub struct Classifier {
    backbone: BackboneConfig,
    head: HeadConfig,
    params: ParamStore,
    generation: u64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_CONFIG_FILE: &str = "model.json";

impl Classifier {
    /// Seeded initialization.
    pub fn new(backbone: BackboneConfig, head: HeadConfig, seed: u64) -> Result<Classifier, NetworkError> {
        backbone.validate()?;
        head.validate()?;
        let params = initialize(&param_specs(&backbone, &head), seed);
        Ok(Classifier {
            backbone,
            head,
            params,
            generation: next_generation(),
        })
    }

    /// All parameters zero.
    pub fn zeroed(backbone: BackboneConfig, head: HeadConfig) -> Result<Classifier, NetworkError> {
        let layout = Classifier::layout(&backbone, &head)?;
        let params = ParamStore::zeros(&layout);
        Classifier::from_parts(backbone, head, params)
    }

    /// Expected `(name, shape)` pairs, sorted by name.
    pub fn layout(backbone: &BackboneConfig, head: &HeadConfig) -> Result<Vec<(String, Vec<usize>)>, NetworkError> {
        backbone.validate()?;
        head.validate()?;
        let mut layout: Vec<_> = param_specs(backbone, head)
            .into_iter()
            .map(|s| (s.name, s.shape))
            .collect();
        layout.sort();
        Ok(layout)
    }

    /// Wrap existing parameters, checking them against the configured layout.
    pub fn from_parts(backbone: BackboneConfig, head: HeadConfig, params: ParamStore) -> Result<Classifier, NetworkError> {
        let expected = Classifier::layout(&backbone, &head)?;
        let found = params.layout();
        if expected != found {
            let missing: Vec<_> = expected.iter().filter(|e| !found.contains(e)).map(|(n, s)| format!("{n}{s:?}")).collect();
            let extra: Vec<_> = found.iter().filter(|f| !expected.contains(f)).map(|(n, s)| format!("{n}{s:?}")).collect();
            return Err(NetworkError::Incompatible(format!(
                "expected but absent: [{}]; present but unexpected: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        Ok(Classifier {
            backbone,
            head,
            params,
            generation: next_generation(),
        })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn head(&self) -> &HeadConfig {
        &self.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Mutate the parameters. Traces recorded before the update become stale.
    pub fn update_params<T>(&mut self, f: impl FnOnce(&mut ParamStore) -> T) -> T {
        let out = f(&mut self.params);
        self.generation = next_generation();
        out
    }

    pub fn forward(&self, sequence: &FrameSequence, mode: Mode<'_>) -> Result<Probs, NetworkError> {
        self.forward_frames(&sequence.frames, mode).map(|(p, _)| p)
    }

    pub fn forward_traced(&self, sequence: &FrameSequence, mode: Mode<'_>) -> Result<(Probs, ForwardTrace), NetworkError> {
        self.forward_frames(&sequence.frames, mode)
    }

    pub fn forward_frames(&self, frames: &[Frame], mut mode: Mode<'_>) -> Result<(Probs, ForwardTrace), NetworkError> {
        let (features, backbone) = backbone_run(&self.backbone, &self.params, stack_frames(frames)?)?;
        if features.ncols() != self.backbone.feature_dim {
            return Err(NetworkError::Geometry(format!(
                "backbone produced {} features, feature_dim is {}",
                features.ncols(),
                self.backbone.feature_dim
            )));
        }
        let (probs, head) = match self.head.kind {
            HeadKind::FullyConnected => {
                let (p, t) = static_run(&self.head, &self.params, features, &mut mode)?;
                (p, HeadTrace::Static(t))
            }
            _ => {
                let (p, t) = recurrent_run(&self.head, &self.params, features.view(), &mut mode)?;
                (p, HeadTrace::Recurrent(t))
            }
        };
        Ok((
            probs,
            ForwardTrace {
                generation: self.generation,
                probs,
                backbone,
                head,
            },
        ))
    }

    /// Gradients of a loss w.r.t. every parameter, given the loss gradient
    /// w.r.t. the output probabilities.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: Probs) -> Result<ParamStore, NetworkError> {
        if trace.generation != self.generation {
            return Err(NetworkError::StaleActivation {
                recorded: trace.generation,
                current: self.generation,
            });
        }
        let mut grads = self.params.zeros_like();
        let d_features = match &trace.head {
            HeadTrace::Static(t) => static_backprop(&self.params, t, loss_grad, &mut grads)?,
            HeadTrace::Recurrent(t) => recurrent_backprop(&self.head, &self.params, t, loss_grad, &mut grads)?,
        };
        backbone_backprop(&self.backbone, &self.params, &trace.backbone, d_features, &mut grads)?;
        Ok(grads)
    }

    /// Write `checkpoint.bin` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NetworkError> {
        fs::create_dir_all(dir).map_err(|source| NetworkError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        self.params.save(&dir.join(CHECKPOINT_FILE))?;
        let config = ModelConfig {
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        };
        let path = dir.join(MODEL_CONFIG_FILE);
        let json = serde_json::to_string_pretty(&config).expect("config serializes");
        fs::write(&path, json).map_err(|source| NetworkError::Io { path, source })
    }

    pub fn load(dir: &Path) -> Result<Classifier, NetworkError> {
        let path = dir.join(MODEL_CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|source| NetworkError::Io {
            path: path.clone(),
            source,
        })?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|source| NetworkError::ConfigJson { path, source })?;
        let params = ParamStore::load(&dir.join(CHECKPOINT_FILE))?;
        Classifier::from_parts(config.backbone, config.head, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ConvStage;
    use crate::seed::rng_from_seed;
    use ndarray::Array3;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            kind: super::super::BackboneKind::SmallConv,
            feature_dim: 8,
            stages: vec![
                ConvStage { channels: 4, kernel: 3, downsample: 2 },
                ConvStage { channels: 8, kernel: 3, downsample: 2 },
            ],
        }
    }

    fn tiny_head(kind: HeadKind) -> HeadConfig {
        HeadConfig {
            kind,
            rnn_units_1: 8,
            rnn_units_2: 4,
            fc_units_1: 8,
            fc_units_2: 4,
            ..HeadConfig::default()
        }
    }

    fn frames(t: usize, salt: f64) -> Vec<Frame> {
        (0..t)
            .map(|i| Array3::from_shape_fn((8, 8, 3), |(y, x, c)| (((y * 8 + x) as f64 * 0.7 + c as f64 + i as f64 * 1.3 + salt).sin() + 1.0) / 2.0))
            .collect()
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        for kind in HeadKind::ALL {
            let model = Classifier::zeroed(tiny_backbone(), tiny_head(kind)).unwrap();
            let (p, _) = model.forward_frames(&frames(4, 0.0), Mode::Inference).unwrap();
            assert_eq!(p, [0.5, 0.5], "{kind}");
        }
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::Lstm), 1).unwrap();
        let mut f = frames(3, 0.0);
        f[2] = f[0].clone();
        let feats = backbone_forward(&f, model.backbone(), model.params()).unwrap();
        assert_eq!(feats.row(0), feats.row(2));
        assert_eq!(feats.dim(), (3, 8));
    }

    #[test]
    fn full_size_frames_pool_to_feature_dim() {
        let backbone = BackboneConfig::default();
        let model = Classifier::new(backbone, HeadConfig::with_kind(HeadKind::Lstm), 0).unwrap();
        let f: Vec<Frame> = (0..2).map(|_| Array3::from_elem((224, 224, 3), 0.5)).collect();
        let feats = backbone_forward(&f, model.backbone(), model.params()).unwrap();
        assert_eq!(feats.dim(), (2, 128));
    }

    #[test]
    fn named_backbones_are_unavailable() {
        let cfg = BackboneConfig {
            kind: super::super::BackboneKind::Resnet50,
            ..BackboneConfig::default()
        };
        assert!(matches!(
            Classifier::new(cfg, HeadConfig::default(), 0),
            Err(NetworkError::UnavailableBackbone(_))
        ));
    }

    #[test]
    fn mismatched_frames_are_geometry_errors() {
        let model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::Gru), 0).unwrap();
        let mut f = frames(3, 0.0);
        f[1] = Array3::zeros((8, 9, 3));
        assert!(matches!(model.forward_frames(&f, Mode::Inference), Err(NetworkError::Geometry(_))));
        assert!(matches!(model.forward_frames(&[], Mode::Inference), Err(NetworkError::Geometry(_))));
    }

    #[test]
    fn head_kind_mismatch_is_config_error() {
        let model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::FullyConnected), 0).unwrap();
        let feats = Array2::zeros((4, 8));
        assert!(matches!(
            recurrent_head_forward(feats.view(), model.head(), model.params(), Mode::Inference),
            Err(NetworkError::Config(_))
        ));
        let model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::Lstm), 0).unwrap();
        assert!(matches!(
            static_head_forward(feats.row(0), model.head(), model.params(), Mode::Inference),
            Err(NetworkError::Config(_))
        ));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::Lstm), 0).unwrap();
        let (_, trace) = model.forward_frames(&frames(4, 0.0), Mode::Inference).unwrap();
        model.update_params(|p| p.get_mut("head.out.bias").unwrap()[[0]] += 1.0);
        assert!(matches!(model.backward(&trace, [1.0, 0.0]), Err(NetworkError::StaleActivation { .. })));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients_with_matching_shapes() {
        for kind in HeadKind::ALL {
            let model = Classifier::new(tiny_backbone(), tiny_head(kind), 5).unwrap();
            let mut rng = rng_from_seed(1);
            let (_, trace) = model.forward_frames(&frames(4, 0.2), Mode::Train(&mut rng)).unwrap();
            let grads = model.backward(&trace, [0.0, 0.0]).unwrap();
            assert_eq!(grads.layout(), model.params().layout());
            assert!(grads.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn inference_is_deterministic_and_training_varies() {
        let model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::FullyConnected), 2).unwrap();
        let f = frames(4, 0.4);
        let a = model.forward_frames(&f, Mode::Inference).unwrap().0;
        let b = model.forward_frames(&f, Mode::Inference).unwrap().0;
        assert_eq!(a, b);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn save_and_load_reproduce_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::Bigru), 9).unwrap();
        model.save(dir.path()).unwrap();
        let loaded = Classifier::load(dir.path()).unwrap();
        let f = frames(4, 0.1);
        let a = model.forward_frames(&f, Mode::Inference).unwrap().0;
        let b = loaded.forward_frames(&f, Mode::Inference).unwrap().0;
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }

    #[test]
    fn layout_mismatch_is_incompatible() {
        let model = Classifier::new(tiny_backbone(), tiny_head(HeadKind::Lstm), 0).unwrap();
        let err = Classifier::from_parts(tiny_backbone(), tiny_head(HeadKind::Gru), model.params().clone());
        assert!(matches!(err, Err(NetworkError::Incompatible(_))));
    }
}
