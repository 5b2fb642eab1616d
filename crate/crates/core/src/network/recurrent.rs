//! LSTM and GRU layers over a whole sequence, unidirectional or
//! bidirectional, with backpropagation through time.
//!
//! Gate blocks are stacked row-wise in the kernels: LSTM `[i | f | g | o]`,
//! GRU `[z | r | n]`. The GRU applies the reset gate after the recurrent
//! matmul:
//!
//! ```text
//! z = σ(Wz x + bz + Uz h + cz)
//! r = σ(Wr x + br + Ur h + cr)
//! n = tanh(Wn x + bn + r ⊙ (Un h + cn))
//! h' = z ⊙ h + (1 - z) ⊙ n
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::layers::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

/// Weights of one direction of one layer.
#[derive(Debug, Clone, Copy)]
pub struct DirectionParams<'a> {
    /// `(gates * units, input_dim)`
    pub kernel: ArrayView2<'a, f64>,
    /// `(gates * units, units)`
    pub recurrent_kernel: ArrayView2<'a, f64>,
    pub bias: ArrayView1<'a, f64>,
    /// GRU only.
    pub recurrent_bias: Option<ArrayView1<'a, f64>>,
}

impl DirectionParams<'_> {
    pub fn units(&self) -> usize {
        self.recurrent_kernel.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrads {
    pub kernel: Array2<f64>,
    pub recurrent_kernel: Array2<f64>,
    pub bias: Array1<f64>,
    pub recurrent_bias: Option<Array1<f64>>,
}

/// Activations recorded by [`run_direction`].
#[derive(Debug, Clone)]
pub struct DirectionCache {
    cell: CellKind,
    input: Array2<f64>,
    /// Post-activation gate values per step, `(T, gates * units)`.
    gates: Array2<f64>,
    /// Hidden states `h_{-1} .. h_{T-1}`, `(T + 1, units)`; row 0 is zero.
    hidden: Array2<f64>,
    /// LSTM cell states, same layout as `hidden`.
    cells: Array2<f64>,
    /// GRU `Un h + cn` per step, `(T, units)`.
    recurrent_candidate: Array2<f64>,
}

/// Run one direction over `input` (`(T, input_dim)`), returning all hidden
/// states `(T, units)`.
pub fn run_direction(cell: CellKind, p: &DirectionParams<'_>, input: ArrayView2<'_, f64>) -> (Array2<f64>, DirectionCache) {
    let steps = input.nrows();
    let h = p.units();
    let mut projected = input.dot(&p.kernel.t());
    projected += &p.bias;

    let mut gates = Array2::zeros((steps, cell.gates() * h));
    let mut hidden = Array2::zeros((steps + 1, h));
    let mut cells = Array2::zeros(match cell {
        CellKind::Lstm => (steps + 1, h),
        CellKind::Gru => (0, h),
    });
    let mut recurrent_candidate = Array2::zeros(match cell {
        CellKind::Lstm => (0, h),
        CellKind::Gru => (steps, h),
    });

    for t in 0..steps {
        let h_prev = hidden.row(t).to_owned();
        let mut rec = p.recurrent_kernel.dot(&h_prev);
        if let Some(rb) = p.recurrent_bias {
            rec += &rb;
        }
        let x = projected.row(t);
        match cell {
            CellKind::Lstm => {
                let c_prev = cells.row(t).to_owned();
                let mut g = gates.row_mut(t);
                for j in 0..h {
                    let i_g = sigmoid(x[j] + rec[j]);
                    let f_g = sigmoid(x[h + j] + rec[h + j]);
                    let c_g = (x[2 * h + j] + rec[2 * h + j]).tanh();
                    let o_g = sigmoid(x[3 * h + j] + rec[3 * h + j]);
                    g[j] = i_g;
                    g[h + j] = f_g;
                    g[2 * h + j] = c_g;
                    g[3 * h + j] = o_g;
                    let c: f64 = f_g * c_prev[j] + i_g * c_g;
                    cells[[t + 1, j]] = c;
                    hidden[[t + 1, j]] = o_g * c.tanh();
                }
            }
            CellKind::Gru => {
                let mut g = gates.row_mut(t);
                for j in 0..h {
                    let z = sigmoid(x[j] + rec[j]);
                    let r = sigmoid(x[h + j] + rec[h + j]);
                    let rn = rec[2 * h + j];
                    let n = (x[2 * h + j] + r * rn).tanh();
                    g[j] = z;
                    g[h + j] = r;
                    g[2 * h + j] = n;
                    recurrent_candidate[[t, j]] = rn;
                    hidden[[t + 1, j]] = z * h_prev[j] + (1.0 - z) * n;
                }
            }
        }
    }

    let outputs = hidden.slice(s![1.., ..]).to_owned();
    let cache = DirectionCache {
        cell,
        input: input.to_owned(),
        gates,
        hidden,
        cells,
        recurrent_candidate,
    };
    (outputs, cache)
}

/// Backpropagate `d_outputs` (gradient w.r.t. every hidden state output,
/// `(T, units)`) through one direction. Returns the input gradient.
pub fn backprop_direction(
    p: &DirectionParams<'_>,
    cache: &DirectionCache,
    d_outputs: ArrayView2<'_, f64>,
) -> (Array2<f64>, DirectionGrads) {
    let steps = cache.input.nrows();
    let h = p.units();
    let gh = cache.cell.gates() * h;
    // gradient w.r.t. the input projection and the recurrent projection
    let mut d_proj = Array2::zeros((steps, gh));
    let mut d_rec = Array2::zeros((steps, gh));
    let mut dh_next = Array1::<f64>::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);

    for t in (0..steps).rev() {
        let dh = &d_outputs.row(t) + &dh_next;
        let g = cache.gates.row(t);
        let mut dp = d_proj.row_mut(t);
        let mut dr = d_rec.row_mut(t);
        let mut dh_prev_direct = Array1::zeros(h);
        match cache.cell {
            CellKind::Lstm => {
                for j in 0..h {
                    let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let c = cache.cells[[t + 1, j]];
                    let c_prev = cache.cells[[t, j]];
                    let tc = c.tanh();
                    let dc = dc_next[j] + dh[j] * o_g * (1.0 - tc * tc);
                    let da_i = dc * c_g * i_g * (1.0 - i_g);
                    let da_f = dc * c_prev * f_g * (1.0 - f_g);
                    let da_g = dc * i_g * (1.0 - c_g * c_g);
                    let da_o = dh[j] * tc * o_g * (1.0 - o_g);
                    for (k, v) in [da_i, da_f, da_g, da_o].into_iter().enumerate() {
                        dp[k * h + j] = v;
                        dr[k * h + j] = v;
                    }
                    dc_next[j] = dc * f_g;
                }
            }
            CellKind::Gru => {
                for j in 0..h {
                    let (z, r, n) = (g[j], g[h + j], g[2 * h + j]);
                    let h_prev = cache.hidden[[t, j]];
                    let rn = cache.recurrent_candidate[[t, j]];
                    let dz = dh[j] * (h_prev - n);
                    let dn = dh[j] * (1.0 - z);
                    dh_prev_direct[j] = dh[j] * z;
                    let da_n = dn * (1.0 - n * n);
                    let da_r = da_n * rn * r * (1.0 - r);
                    let da_z = dz * z * (1.0 - z);
                    dp[j] = da_z;
                    dp[h + j] = da_r;
                    dp[2 * h + j] = da_n;
                    dr[j] = da_z;
                    dr[h + j] = da_r;
                    dr[2 * h + j] = da_n * r;
                }
            }
        }
        dh_next = p.recurrent_kernel.t().dot(&dr) + dh_prev_direct;
    }

    let h_prev = cache.hidden.slice(s![..steps, ..]);
    let grads = DirectionGrads {
        kernel: d_proj.t().dot(&cache.input),
        recurrent_kernel: d_rec.t().dot(&h_prev),
        bias: d_proj.sum_axis(Axis(0)),
        recurrent_bias: p.recurrent_bias.map(|_| d_rec.sum_axis(Axis(0))),
    };
    (d_proj.dot(&p.kernel), grads)
}

fn reversed(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    forward: DirectionCache,
    backward: Option<DirectionCache>,
}

/// One recurrent layer. With a backward direction the output at step `t` is
/// `[forward(x)_t, reverse(backward(reverse(x)))_t]`.
pub fn run_layer(
    cell: CellKind,
    forward: &DirectionParams<'_>,
    backward: Option<&DirectionParams<'_>>,
    input: ArrayView2<'_, f64>,
) -> (Array2<f64>, LayerCache) {
    let (fwd_out, fwd_cache) = run_direction(cell, forward, input);
    match backward {
        None => (
            fwd_out,
            LayerCache {
                forward: fwd_cache,
                backward: None,
            },
        ),
        Some(bp) => {
            let (bwd_out, bwd_cache) = run_direction(cell, bp, reversed(input).view());
            let out = ndarray::concatenate(Axis(1), &[fwd_out.view(), bwd_out.slice(s![..;-1, ..])])
                .expect("equal step counts");
            (
                out,
                LayerCache {
                    forward: fwd_cache,
                    backward: Some(bwd_cache),
                },
            )
        }
    }
}

pub fn backprop_layer(
    forward: &DirectionParams<'_>,
    backward: Option<&DirectionParams<'_>>,
    cache: &LayerCache,
    d_output: ArrayView2<'_, f64>,
) -> (Array2<f64>, DirectionGrads, Option<DirectionGrads>) {
    let h = forward.units();
    let (mut dx, fwd_grads) = backprop_direction(forward, &cache.forward, d_output.slice(s![.., ..h]));
    let bwd_grads = match (backward, &cache.backward) {
        (Some(bp), Some(bc)) => {
            let d_rev = reversed(d_output.slice(s![.., h..]));
            let (dx_rev, grads) = backprop_direction(bp, bc, d_rev.view());
            dx += &dx_rev.slice(s![..;-1, ..]);
            Some(grads)
        }
        _ => None,
    };
    (dx, fwd_grads, bwd_grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(cell: CellKind, input: usize, units: usize, salt: f64) -> (Array2<f64>, Array2<f64>, Array1<f64>, Option<Array1<f64>>) {
        let gh = cell.gates() * units;
        let f = |i: usize, j: usize, k: f64| ((i as f64 * 0.37 + j as f64 * 0.91 + k + salt).sin()) * 0.5;
        (
            Array2::from_shape_fn((gh, input), |(i, j)| f(i, j, 0.1)),
            Array2::from_shape_fn((gh, units), |(i, j)| f(i, j, 1.7)),
            Array1::from_shape_fn(gh, |i| f(i, 0, 2.3)),
            (cell == CellKind::Gru).then(|| Array1::from_shape_fn(gh, |i| f(i, 3, 0.5))),
        )
    }

    #[test]
    fn bidirectional_output_is_concatenation_of_directions() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let x = Array2::from_shape_fn((6, 5), |(t, d)| ((t * 5 + d) as f64 * 0.3).cos());
            let (fk, fr, fb, frb) = params(cell, 5, 4, 0.0);
            let (bk, br, bb, brb) = params(cell, 5, 4, 1.0);
            let fp = DirectionParams { kernel: fk.view(), recurrent_kernel: fr.view(), bias: fb.view(), recurrent_bias: frb.as_ref().map(|b| b.view()) };
            let bp = DirectionParams { kernel: bk.view(), recurrent_kernel: br.view(), bias: bb.view(), recurrent_bias: brb.as_ref().map(|b| b.view()) };
            let (y, _) = run_layer(cell, &fp, Some(&bp), x.view());
            let (yf, _) = run_direction(cell, &fp, x.view());
            let x_rev = x.slice(s![..;-1, ..]).to_owned();
            let (yb_rev, _) = run_direction(cell, &bp, x_rev.view());
            for t in 0..6 {
                for j in 0..4 {
                    assert_eq!(y[[t, j]], yf[[t, j]]);
                    assert_eq!(y[[t, 4 + j]], yb_rev[[5 - t, j]]);
                }
            }
        }
    }
}
