//! Parameter layout and seeded initialization.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::ParamStore;
use super::{BackboneConfig, CellKind, HeadConfig};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`, for ReLU layers.
    HeUniform { fan_in: usize },
    /// `U(-sqrt(3 / fan_in), +sqrt(3 / fan_in))`.
    LecunUniform { fan_in: usize },
    /// One orthogonal `units x units` block per gate.
    Orthogonal { units: usize },
    Zeros,
    /// LSTM bias: zeros with the forget-gate block set to one.
    ForgetBias { units: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

pub(crate) fn direction_prefix(layer: usize, backward: bool) -> String {
    format!("head.rnn{layer}.{}", if backward { "bwd" } else { "fwd" })
}

pub(crate) fn param_specs(backbone: &BackboneConfig, head: &HeadConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut c_in = 3;
    for (i, st) in backbone.stages.iter().enumerate() {
        let fan_in = st.kernel * st.kernel * c_in;
        specs.push(spec(
            format!("backbone.conv{i}.weight"),
            vec![st.channels, st.kernel, st.kernel, c_in],
            Init::HeUniform { fan_in },
        ));
        specs.push(spec(format!("backbone.conv{i}.bias"), vec![st.channels], Init::Zeros));
        c_in = st.channels;
    }
    let d = backbone.feature_dim;
    let classes = head.num_classes;

    match head.kind.cell() {
        None => {
            let (f1, f2) = (head.fc_units_1, head.fc_units_2);
            specs.push(spec("head.fc1.weight".into(), vec![f1, d], Init::HeUniform { fan_in: d }));
            specs.push(spec("head.fc1.bias".into(), vec![f1], Init::Zeros));
            specs.push(spec("head.fc2.weight".into(), vec![f2, f1], Init::HeUniform { fan_in: f1 }));
            specs.push(spec("head.fc2.bias".into(), vec![f2], Init::Zeros));
            specs.push(spec("head.out.weight".into(), vec![classes, f2], Init::LecunUniform { fan_in: f2 }));
            specs.push(spec("head.out.bias".into(), vec![classes], Init::Zeros));
        }
        Some(cell) => {
            let dirs = head.kind.directions();
            let layers = [(1, d, head.rnn_units_1), (2, head.rnn_units_1 * dirs, head.rnn_units_2)];
            for (layer, input, units) in layers {
                for backward in [false, true].into_iter().take(dirs) {
                    let p = direction_prefix(layer, backward);
                    let gh = cell.gates() * units;
                    specs.push(spec(format!("{p}.kernel"), vec![gh, input], Init::LecunUniform { fan_in: input }));
                    specs.push(spec(format!("{p}.recurrent_kernel"), vec![gh, units], Init::Orthogonal { units }));
                    let bias_init = match cell {
                        CellKind::Lstm => Init::ForgetBias { units },
                        CellKind::Gru => Init::Zeros,
                    };
                    specs.push(spec(format!("{p}.bias"), vec![gh], bias_init));
                    if cell == CellKind::Gru {
                        specs.push(spec(format!("{p}.recurrent_bias"), vec![gh], Init::Zeros));
                    }
                }
            }
            let width = head.rnn_units_2 * dirs;
            specs.push(spec("head.out.weight".into(), vec![classes, width], Init::LecunUniform { fan_in: width }));
            specs.push(spec("head.out.bias".into(), vec![classes], Init::Zeros));
        }
    }
    specs
}

/// Orthonormal square matrix from modified Gram-Schmidt on a Gaussian draw.
fn orthogonal(units: usize, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let mut m = Array2::from_shape_fn((units, units), |_| rng.sample::<f64, _>(StandardNormal));
        let mut ok = true;
        for i in 0..units {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

pub(crate) fn initialize(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    for s in specs {
        let mut rng = rng_from_seed(derive_seed(seed, &["init", &s.name]));
        let shape = IxDyn(&s.shape);
        let tensor = match s.init {
            Init::Zeros => ArrayD::zeros(shape),
            Init::HeUniform { fan_in } | Init::LecunUniform { fan_in } => {
                let scale = if matches!(s.init, Init::HeUniform { .. }) { 6.0 } else { 3.0 };
                let limit = (scale / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(shape, |_| rng.random_range(-limit..limit))
            }
            Init::Orthogonal { units } => {
                let gates = s.shape[0] / units;
                let blocks: Vec<Array2<f64>> = (0..gates).map(|_| orthogonal(units, &mut rng)).collect();
                let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
                ndarray::concatenate(ndarray::Axis(0), &views)
                    .expect("square blocks")
                    .into_dyn()
            }
            Init::ForgetBias { units } => {
                let mut b = ArrayD::zeros(shape);
                for j in units..2 * units {
                    b[[j]] = 1.0;
                }
                b
            }
        };
        store.insert(s.name.clone(), tensor);
    }
    store
}
