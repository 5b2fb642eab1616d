//! Central-difference check of [`Classifier::backward`].

use super::{Classifier, DropoutMasks, Mode, NetworkError};
use crate::sampler::FrameSequence;
use crate::seed::rng_from_seed;
use crate::trainer::{bce_grad, bce_loss};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    /// Parameter name and flat index where it occurred.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn loss(model: &Classifier, seq: &FrameSequence, masks: &DropoutMasks, class: usize) -> crate::Result<f64> {
    let p = model.forward(seq, Mode::Replay(masks))?;
    Ok(bce_loss(p, class)?)
}

/// Compare backprop gradients of the BCE loss against central differences for
/// every scalar parameter. Dropout masks are drawn once from `dropout_seed`
/// and replayed for every perturbed pass.
pub fn check_gradients(
    model: &Classifier,
    seq: &FrameSequence,
    class: usize,
    eps: f64,
    floor: f64,
    dropout_seed: u64,
) -> crate::Result<GradCheckReport> {
    let mut rng = rng_from_seed(dropout_seed);
    let (p, trace) = model.forward_traced(seq, Mode::Train(&mut rng))?;
    let masks = trace.masks();
    let grads = model.backward(&trace, bce_grad(p, class)?)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = model.clone();
    for (name, g) in grads.iter() {
        for (i, &analytic) in g.iter().enumerate() {
            let original = model.params().get(name)?.as_slice_memory_order().expect("contiguous")[i];
            let set = |m: &mut Classifier, v: f64| -> Result<(), NetworkError> {
                m.update_params(|p| {
                    p.get_mut(name)
                        .map(|t| t.as_slice_memory_order_mut().expect("contiguous")[i] = v)
                })
            };
            set(&mut probe, original + eps)?;
            let up = loss(&probe, seq, &masks, class)?;
            set(&mut probe, original - eps)?;
            let down = loss(&probe, seq, &masks, class)?;
            set(&mut probe, original)?;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (name.to_string(), i);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
