//! Forward pass and backpropagation through time for the stacked BiLSTM.
//!
//! Cell: `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h = o⊙tanh(c')`.
//! Each layer emits `[h_fwd ‖ h_bwd]` per timestep; inverted dropout is
//! applied to every layer output in training mode. The head reads the last
//! forward state and the first backward state of the top layer, plus the geo
//! vector when fused at the head.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{CellLayout, LstmGeoModel};
use super::vocab::{geo_prefix_tokens, TokenSequence};
use super::{GeoMode, GeoVector};
use crate::error::{Error, Result};
use crate::race::{RaceClass, RaceDistribution, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks drawn from a generator seeded with `dropout_seed`.
    Train { dropout_seed: u64 },
    Infer,
}

/// Flat gradient vector aligned with [`LstmGeoModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients(vec![0.0; len])
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4 * 4;
    for (ca, cb) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Per-direction activations, each `T × H` (gates `T × 4H`), in time order.
#[derive(Debug, Clone)]
struct DirCache {
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    dirs: [DirCache; 2],
    /// Dropout multipliers, `T × 2H`; empty when no dropout was applied.
    mask: Vec<f64>,
    /// Layer output after dropout, `T × 2H`.
    output: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<u32>,
    /// Layer-0 input, `T × E`.
    embedded: Vec<f64>,
    layers: Vec<LayerCache>,
    features: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
    pub probs: RaceDistribution,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn cell_forward(params: &[f64], cell: &CellLayout, inputs: &[f64], steps: usize, reverse: bool) -> DirCache {
    let (n_in, h) = (cell.input, cell.hidden);
    let g4 = 4 * h;
    let w_ih = &params[cell.w_ih..cell.w_ih + n_in * g4];
    let w_hh = &params[cell.w_hh..cell.w_hh + h * g4];
    let bias = &params[cell.bias..cell.bias + g4];

    let mut cache = DirCache {
        gates: vec![0.0; steps * g4],
        cell: vec![0.0; steps * h],
        tanh_cell: vec![0.0; steps * h],
        hidden: vec![0.0; steps * h],
    };
    let mut z = vec![0.0; g4];
    for step in 0..steps {
        let t = if reverse { steps - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };

        z.copy_from_slice(bias);
        let x = &inputs[t * n_in..(t + 1) * n_in];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(&mut z, xj, &w_ih[j * g4..(j + 1) * g4]);
            }
        }
        if let Some(p) = prev {
            let h_prev = &cache.hidden[p * h..(p + 1) * h];
            for (j, &hj) in h_prev.iter().enumerate() {
                axpy(&mut z, hj, &w_hh[j * g4..(j + 1) * g4]);
            }
        }

        let gates = &mut cache.gates[t * g4..(t + 1) * g4];
        for u in 0..h {
            gates[u] = sigmoid(z[u]);
            gates[h + u] = sigmoid(z[h + u]);
            gates[2 * h + u] = libm::tanh(z[2 * h + u]);
            gates[3 * h + u] = sigmoid(z[3 * h + u]);
        }
        for u in 0..h {
            let c_prev = prev.map_or(0.0, |p| cache.cell[p * h + u]);
            let (i, f, g, o) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
            let c = f * c_prev + i * g;
            let tc = libm::tanh(c);
            cache.cell[t * h + u] = c;
            cache.tanh_cell[t * h + u] = tc;
            cache.hidden[t * h + u] = o * tc;
        }
    }
    cache
}

/// Backpropagates one direction. `d_hidden` is `T × H` (gradient w.r.t.
/// this direction's emitted states); accumulates into `grads` and `d_inputs`.
#[allow(clippy::too_many_arguments)]
fn cell_backward(
    params: &[f64],
    cell: &CellLayout,
    inputs: &[f64],
    cache: &DirCache,
    d_hidden: &[f64],
    steps: usize,
    reverse: bool,
    grads: &mut [f64],
    d_inputs: &mut [f64],
) {
    let (n_in, h) = (cell.input, cell.hidden);
    let g4 = 4 * h;
    let w_ih = &params[cell.w_ih..cell.w_ih + n_in * g4];
    let w_hh = &params[cell.w_hh..cell.w_hh + h * g4];

    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; g4];
    // Processing order is the reverse of the forward sweep.
    for step in 0..steps {
        let t = if reverse { step } else { steps - 1 - step };
        let prev = if reverse {
            (t + 1 < steps).then_some(t + 1)
        } else {
            t.checked_sub(1)
        };
        let gates = &cache.gates[t * g4..(t + 1) * g4];
        for u in 0..h {
            let dh = d_hidden[t * h + u] + dh_next[u];
            let (i, f, g, o) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
            let tc = cache.tanh_cell[t * h + u];
            let c_prev = prev.map_or(0.0, |p| cache.cell[p * h + u]);
            let d_o = dh * tc;
            let dc = dc_next[u] + dh * o * (1.0 - tc * tc);
            dc_next[u] = dc * f;
            dz[u] = dc * g * i * (1.0 - i);
            dz[h + u] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + u] = dc * i * (1.0 - g * g);
            dz[3 * h + u] = d_o * o * (1.0 - o);
        }

        let gw_ih = &mut grads[cell.w_ih..cell.w_ih + n_in * g4];
        let x = &inputs[t * n_in..(t + 1) * n_in];
        let dx = &mut d_inputs[t * n_in..(t + 1) * n_in];
        for j in 0..n_in {
            let row = j * g4..(j + 1) * g4;
            if x[j] != 0.0 {
                axpy(&mut gw_ih[row.clone()], x[j], &dz);
            }
            dx[j] += dot(&w_ih[row], &dz);
        }

        let gw_hh = &mut grads[cell.w_hh..cell.w_hh + h * g4];
        match prev {
            Some(p) => {
                let h_prev = &cache.hidden[p * h..(p + 1) * h];
                for j in 0..h {
                    let row = j * g4..(j + 1) * g4;
                    axpy(&mut gw_hh[row.clone()], h_prev[j], &dz);
                    dh_next[j] = dot(&w_hh[row], &dz);
                }
            }
            None => dh_next.iter_mut().for_each(|v| *v = 0.0),
        }

        let gb = &mut grads[cell.bias..cell.bias + g4];
        for (b, d) in gb.iter_mut().zip(&dz) {
            *b += d;
        }
    }
}

impl LstmGeoModel {
    fn full_sequence(&self, seq: &TokenSequence, geo: Option<&GeoVector>) -> Result<Vec<u32>> {
        let content = seq.content();
        if content.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: 1,
                found: 0,
                what: "token sequence length",
            });
        }
        let mut tokens = Vec::with_capacity(content.len() + 6);
        match self.config.geo_mode {
            GeoMode::PrefixTokens => {
                let geo = geo.ok_or(Error::ShapeMismatch {
                    expected: 6,
                    found: 0,
                    what: "geo vector",
                })?;
                tokens.extend_from_slice(&geo_prefix_tokens(geo));
            }
            GeoMode::Head if geo.is_none() => {
                return Err(Error::ShapeMismatch {
                    expected: 6,
                    found: 0,
                    what: "geo vector",
                })
            }
            _ => {}
        }
        tokens.extend_from_slice(content);
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.layout.vocab) {
            return Err(Error::ShapeMismatch {
                expected: self.layout.vocab,
                found: bad as usize + 1,
                what: "token id range",
            });
        }
        Ok(tokens)
    }

    /// Runs the network on one sequence. In [`Mode::Infer`] the result is a
    /// pure function of the inputs.
    pub fn forward(&self, seq: &TokenSequence, geo: Option<&GeoVector>, mode: Mode) -> Result<ForwardCache> {
        let tokens = self.full_sequence(seq, geo)?;
        let layout = &self.layout;
        let params = &self.params;
        let steps = tokens.len();
        let (e, h) = (layout.embed, layout.hidden);

        let mut embedded = vec![0.0; steps * e];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = layout.embedding + tok as usize * e;
            embedded[t * e..(t + 1) * e].copy_from_slice(&params[row..row + e]);
        }

        let dropout = match mode {
            Mode::Train { dropout_seed } if self.config.dropout_rate > 0.0 => {
                Some((ChaCha8Rng::seed_from_u64(dropout_seed), self.config.dropout_rate))
            }
            _ => None,
        };
        let mut dropout = dropout;

        let mut layers: Vec<LayerCache> = Vec::with_capacity(layout.cells.len());
        for cells in &layout.cells {
            let input: &[f64] = match layers.last() {
                None => &embedded,
                Some(prev) => &prev.output,
            };
            let fwd = cell_forward(params, &cells[0], input, steps, false);
            let bwd = cell_forward(params, &cells[1], input, steps, true);
            let mut output = vec![0.0; steps * 2 * h];
            for t in 0..steps {
                output[t * 2 * h..t * 2 * h + h].copy_from_slice(&fwd.hidden[t * h..(t + 1) * h]);
                output[t * 2 * h + h..(t + 1) * 2 * h].copy_from_slice(&bwd.hidden[t * h..(t + 1) * h]);
            }
            let mut mask = Vec::new();
            if let Some((rng, rate)) = dropout.as_mut() {
                let keep = 1.0 / (1.0 - *rate);
                mask = (0..output.len())
                    .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
                    .collect();
                for (o, m) in output.iter_mut().zip(&mask) {
                    *o *= m;
                }
            }
            layers.push(LayerCache {
                dirs: [fwd, bwd],
                mask,
                output,
            });
        }

        let top = &layers.last().expect("at least one layer").output;
        let mut features = Vec::with_capacity(layout.head_features());
        features.extend_from_slice(&top[(steps - 1) * 2 * h..(steps - 1) * 2 * h + h]);
        features.extend_from_slice(&top[h..2 * h]);
        if layout.head_geo > 0 {
            features.extend_from_slice(&geo.expect("checked above").0);
        }

        let mut logits = [0.0; NUM_CLASSES];
        logits.copy_from_slice(&params[layout.head_b..layout.head_b + NUM_CLASSES]);
        for (j, &fj) in features.iter().enumerate() {
            let row = layout.head_w + j * NUM_CLASSES;
            axpy(&mut logits, fj, &params[row..row + NUM_CLASSES]);
        }
        let probs = RaceDistribution::softmax(&logits);

        Ok(ForwardCache {
            tokens,
            embedded,
            layers,
            features,
            logits,
            probs,
        })
    }

    /// Accumulates `d loss / d params` into `grads` given the gradient of
    /// the loss with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[f64; NUM_CLASSES], grads: &mut Gradients) {
        let layout = &self.layout;
        let params = &self.params;
        let grads = &mut grads.0;
        let steps = cache.tokens.len();
        let (e, h) = (layout.embed, layout.hidden);

        let mut d_features = vec![0.0; cache.features.len()];
        for (j, &fj) in cache.features.iter().enumerate() {
            let row = layout.head_w + j * NUM_CLASSES;
            axpy(&mut grads[row..row + NUM_CLASSES], fj, d_logits);
            d_features[j] = dot(&params[row..row + NUM_CLASSES], d_logits);
        }
        for (g, d) in grads[layout.head_b..layout.head_b + NUM_CLASSES].iter_mut().zip(d_logits) {
            *g += d;
        }

        // Gradient w.r.t. the top layer's (post-dropout) output.
        let mut d_out = vec![0.0; steps * 2 * h];
        for u in 0..h {
            d_out[(steps - 1) * 2 * h + u] += d_features[u];
            d_out[h + u] += d_features[h + u];
        }

        for (l, cells) in layout.cells.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            if !lc.mask.is_empty() {
                for (d, m) in d_out.iter_mut().zip(&lc.mask) {
                    *d *= m;
                }
            }
            let mut dh = [vec![0.0; steps * h], vec![0.0; steps * h]];
            for t in 0..steps {
                dh[0][t * h..(t + 1) * h].copy_from_slice(&d_out[t * 2 * h..t * 2 * h + h]);
                dh[1][t * h..(t + 1) * h].copy_from_slice(&d_out[t * 2 * h + h..(t + 1) * 2 * h]);
            }
            let input: &[f64] = if l == 0 { &cache.embedded } else { &cache.layers[l - 1].output };
            let mut d_input = vec![0.0; steps * cells[0].input];
            for dir in 0..2 {
                cell_backward(
                    params,
                    &cells[dir],
                    input,
                    &lc.dirs[dir],
                    &dh[dir],
                    steps,
                    dir == 1,
                    grads,
                    &mut d_input,
                );
            }
            d_out = d_input;
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let row = layout.embedding + tok as usize * e;
            for (g, d) in grads[row..row + e].iter_mut().zip(&d_out[t * e..(t + 1) * e]) {
                *g += d;
            }
        }
    }
}

/// Cross-entropy of `label` under the cached logits, via log-sum-exp.
pub(crate) fn cross_entropy(logits: &[f64; NUM_CLASSES], label: RaceClass) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|z| libm::exp(z - max)).sum::<f64>());
    lse - logits[label.code()]
}
