//! GRU and LSTM cells with reverse-mode gradients over a whole sequence.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

/// Weights of one recurrent direction. Gate blocks are stacked row-wise:
/// GRU `[reset, update, candidate]`, LSTM `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub b_in: Array1<f64>,
    pub b_rec: Array1<f64>,
}

impl CellParams {
    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        let g = kind.gates() * hidden;
        Self {
            w_in: Array2::zeros((g, input)),
            w_rec: Array2::zeros((g, hidden)),
            b_in: Array1::zeros(g),
            b_rec: Array1::zeros(g),
        }
    }

    /// Uniform in `[-1/sqrt(hidden), 1/sqrt(hidden)]`.
    pub fn random(kind: CellKind, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(kind, input, hidden);
        for v in p
            .w_in
            .iter_mut()
            .chain(p.w_rec.iter_mut())
            .chain(p.b_in.iter_mut())
            .chain(p.b_rec.iter_mut())
        {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn input(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_rec.ncols()
    }
}

/// Everything the backward pass needs from one direction's forward pass,
/// stored in processing order.
#[derive(Debug, Clone)]
pub(crate) struct DirectionCache {
    reverse: bool,
    input: Array2<f64>,
    gates: Array2<f64>,
    h_prev: Array2<f64>,
    /// GRU: recurrent candidate pre-activation `W_hn h + b_hn`. LSTM: previous cell state.
    aux: Array2<f64>,
    /// LSTM only: cell state after each step.
    cell: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ordered(x: ArrayView2<f64>, reverse: bool) -> Array2<f64> {
    if reverse {
        x.slice(s![..;-1, ..]).as_standard_layout().into_owned()
    } else {
        x.to_owned()
    }
}

/// Runs one direction over `x` (`T x input`), returning hidden states in time order.
pub(crate) fn run_direction(
    kind: CellKind,
    p: &CellParams,
    x: ArrayView2<f64>,
    reverse: bool,
) -> (Array2<f64>, DirectionCache) {
    let steps = x.nrows();
    let h_dim = p.hidden();
    let input = ordered(x, reverse);
    let gi = input.dot(&p.w_in.t()) + &p.b_in;
    let mut gates = Array2::zeros((steps, kind.gates() * h_dim));
    let mut h_prev = Array2::zeros((steps, h_dim));
    let mut aux = Array2::zeros((steps, h_dim));
    let mut cell = Array2::zeros((if kind == CellKind::Lstm { steps } else { 0 }, h_dim));
    let mut out = Array2::zeros((steps, h_dim));
    let mut h = Array1::<f64>::zeros(h_dim);
    let mut c = Array1::<f64>::zeros(h_dim);
    for step in 0..steps {
        let gh = p.w_rec.dot(&h) + &p.b_rec;
        let gi_s = gi.row(step);
        h_prev.row_mut(step).assign(&h);
        match kind {
            CellKind::Gru => {
                for j in 0..h_dim {
                    let r = sigmoid(gi_s[j] + gh[j]);
                    let z = sigmoid(gi_s[h_dim + j] + gh[h_dim + j]);
                    let ghn = gh[2 * h_dim + j];
                    let n = (gi_s[2 * h_dim + j] + r * ghn).tanh();
                    gates[[step, j]] = r;
                    gates[[step, h_dim + j]] = z;
                    gates[[step, 2 * h_dim + j]] = n;
                    aux[[step, j]] = ghn;
                    h[j] = (1.0 - z) * n + z * h[j];
                }
            }
            CellKind::Lstm => {
                aux.row_mut(step).assign(&c);
                for j in 0..h_dim {
                    let i = sigmoid(gi_s[j] + gh[j]);
                    let f = sigmoid(gi_s[h_dim + j] + gh[h_dim + j]);
                    let g = (gi_s[2 * h_dim + j] + gh[2 * h_dim + j]).tanh();
                    let o = sigmoid(gi_s[3 * h_dim + j] + gh[3 * h_dim + j]);
                    gates[[step, j]] = i;
                    gates[[step, h_dim + j]] = f;
                    gates[[step, 2 * h_dim + j]] = g;
                    gates[[step, 3 * h_dim + j]] = o;
                    c[j] = f * c[j] + i * g;
                    h[j] = o * c[j].tanh();
                }
                cell.row_mut(step).assign(&c);
            }
        }
        let t = if reverse { steps - 1 - step } else { step };
        out.row_mut(t).assign(&h);
    }
    (
        out,
        DirectionCache {
            reverse,
            input,
            gates,
            h_prev,
            aux,
            cell,
        },
    )
}

/// Accumulates parameter gradients into `grads` and returns the gradient w.r.t. the input.
/// `d_out` is the loss gradient w.r.t. this direction's outputs, in time order.
pub(crate) fn backprop_direction(
    kind: CellKind,
    p: &CellParams,
    cache: &DirectionCache,
    d_out: ArrayView2<f64>,
    grads: &mut CellParams,
) -> Array2<f64> {
    let steps = cache.input.nrows();
    let h_dim = p.hidden();
    let width = kind.gates() * h_dim;
    let d_out = ordered(d_out, cache.reverse);
    let mut d_gi = Array2::<f64>::zeros((steps, width));
    let mut d_gh = Array2::<f64>::zeros((steps, width));
    let mut dh_next = Array1::<f64>::zeros(h_dim);
    let mut dc_next = Array1::<f64>::zeros(h_dim);
    for step in (0..steps).rev() {
        let g = cache.gates.row(step);
        let hp = cache.h_prev.row(step);
        let mut dh_prev = Array1::<f64>::zeros(h_dim);
        match kind {
            CellKind::Gru => {
                for j in 0..h_dim {
                    let (r, z, n) = (g[j], g[h_dim + j], g[2 * h_dim + j]);
                    let dh = d_out[[step, j]] + dh_next[j];
                    let dn = dh * (1.0 - z);
                    let dz = dh * (hp[j] - n);
                    dh_prev[j] = dh * z;
                    let dan = dn * (1.0 - n * n);
                    let dar = dan * cache.aux[[step, j]] * r * (1.0 - r);
                    let daz = dz * z * (1.0 - z);
                    d_gi[[step, j]] = dar;
                    d_gi[[step, h_dim + j]] = daz;
                    d_gi[[step, 2 * h_dim + j]] = dan;
                    d_gh[[step, j]] = dar;
                    d_gh[[step, h_dim + j]] = daz;
                    d_gh[[step, 2 * h_dim + j]] = dan * r;
                }
            }
            CellKind::Lstm => {
                for j in 0..h_dim {
                    let (i, f, gg, o) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
                    let c = cache.cell[[step, j]];
                    let c_prev = cache.aux[[step, j]];
                    let tc = c.tanh();
                    let dh = d_out[[step, j]] + dh_next[j];
                    let d_o = dh * tc;
                    let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                    let di = dc * gg;
                    let dg = dc * i;
                    let df = dc * c_prev;
                    dc_next[j] = dc * f;
                    let da = [
                        di * i * (1.0 - i),
                        df * f * (1.0 - f),
                        dg * (1.0 - gg * gg),
                        d_o * o * (1.0 - o),
                    ];
                    for (k, v) in da.into_iter().enumerate() {
                        d_gi[[step, k * h_dim + j]] = v;
                        d_gh[[step, k * h_dim + j]] = v;
                    }
                }
            }
        }
        dh_prev += &p.w_rec.t().dot(&d_gh.row(step));
        dh_next = dh_prev;
    }
    grads.w_in += &d_gi.t().dot(&cache.input);
    grads.b_in += &d_gi.sum_axis(Axis(0));
    grads.w_rec += &d_gh.t().dot(&cache.h_prev);
    grads.b_rec += &d_gh.sum_axis(Axis(0));
    let dx = d_gi.dot(&p.w_in);
    ordered(dx.view(), cache.reverse)
}
