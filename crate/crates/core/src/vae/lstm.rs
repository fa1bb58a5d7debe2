//! Single LSTM cell step and its backward pass over a flat parameter slice.
//!
//! Gate rows are packed `[input, forget, candidate, output]`, each `hidden`
//! rows tall, matching the usual `W_ih: 4H×F`, `W_hh: 4H×H`, `b: 4H` layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LstmOffsets {
    pub input: usize,
    pub w_ih: usize,
    pub w_hh: usize,
    pub b: usize,
}

/// Activations of one cell step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tc: Vec<f64>,
    pub h: Vec<f64>,
}

impl StepCache {
    pub fn new(input: usize, hidden: usize) -> Self {
        let z = || vec![0.0; hidden];
        Self {
            x: vec![0.0; input],
            h_prev: z(),
            c_prev: z(),
            i: z(),
            f: z(),
            g: z(),
            o: z(),
            c: z(),
            tc: z(),
            h: z(),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One step. `cache.x`, `cache.h_prev` and `cache.c_prev` must be filled first.
pub(crate) fn cell_forward(p: &[f64], off: &LstmOffsets, hidden: usize, cache: &mut StepCache) {
    let n_in = off.input;
    for k in 0..4 * hidden {
        let wi = &p[off.w_ih + k * n_in..off.w_ih + (k + 1) * n_in];
        let wh = &p[off.w_hh + k * hidden..off.w_hh + (k + 1) * hidden];
        let mut a = p[off.b + k];
        for (w, x) in wi.iter().zip(&cache.x) {
            a += w * x;
        }
        for (w, h) in wh.iter().zip(&cache.h_prev) {
            a += w * h;
        }
        let j = k % hidden;
        match k / hidden {
            0 => cache.i[j] = sigmoid(a),
            1 => cache.f[j] = sigmoid(a),
            2 => cache.g[j] = a.tanh(),
            _ => cache.o[j] = sigmoid(a),
        }
    }
    for j in 0..hidden {
        let c = cache.f[j] * cache.c_prev[j] + cache.i[j] * cache.g[j];
        let tc = c.tanh();
        cache.c[j] = c;
        cache.tc[j] = tc;
        cache.h[j] = cache.o[j] * tc;
    }
}

/// Scratch buffer for gate pre-activation gradients.
#[derive(Debug, Clone)]
pub(crate) struct CellGrad {
    pub da: Vec<f64>,
}

impl CellGrad {
    pub fn new(hidden: usize) -> Self {
        Self {
            da: vec![0.0; 4 * hidden],
        }
    }
}

/// Backward through one step. `dh` is the total gradient on this step's
/// hidden output, `dc` the gradient arriving on its cell state from the next
/// step. Writes `dx`, `dh_prev`, `dc_prev` and accumulates into `grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cell_backward(
    p: &[f64],
    off: &LstmOffsets,
    hidden: usize,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
    grad: &mut [f64],
    scratch: &mut CellGrad,
    dx: &mut [f64],
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) {
    let n_in = off.input;
    let da = &mut scratch.da;
    for j in 0..hidden {
        let (i, f, g, o, tc) = (cache.i[j], cache.f[j], cache.g[j], cache.o[j], cache.tc[j]);
        let d_o = dh[j] * tc;
        let d_c = dc[j] + dh[j] * o * (1.0 - tc * tc);
        let d_i = d_c * g;
        let d_g = d_c * i;
        let d_f = d_c * cache.c_prev[j];
        dc_prev[j] = d_c * f;
        da[j] = d_i * i * (1.0 - i);
        da[hidden + j] = d_f * f * (1.0 - f);
        da[2 * hidden + j] = d_g * (1.0 - g * g);
        da[3 * hidden + j] = d_o * o * (1.0 - o);
    }
    dx.iter_mut().for_each(|v| *v = 0.0);
    dh_prev.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..4 * hidden {
        let a = da[k];
        grad[off.b + k] += a;
        let wi = off.w_ih + k * n_in;
        for j in 0..n_in {
            grad[wi + j] += a * cache.x[j];
            dx[j] += p[wi + j] * a;
        }
        let wh = off.w_hh + k * hidden;
        for j in 0..hidden {
            grad[wh + j] += a * cache.h_prev[j];
            dh_prev[j] += p[wh + j] * a;
        }
    }
}

/// Public, owned weights of one LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerWeights {
    pub input_size: usize,
    pub hidden_size: usize,
    /// `4H × input_size`, gate order input, forget, candidate, output.
    pub w_ih: Vec<f64>,
    /// `4H × H`.
    pub w_hh: Vec<f64>,
    /// `4H`.
    pub bias: Vec<f64>,
}

impl LstmLayerWeights {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            w_ih: vec![0.0; 4 * hidden_size * input_size],
            w_hh: vec![0.0; 4 * hidden_size * hidden_size],
            bias: vec![0.0; 4 * hidden_size],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmOutput {
    /// Top-layer hidden state after every step.
    pub hidden_per_step: Vec<Vec<f64>>,
    /// Final state of every layer.
    pub final_states: Vec<LstmState>,
}

/// Runs a stacked LSTM over `sequence` (time-major, `input_size` values per
/// step) from the given initial per-layer states.
pub fn lstm_forward(
    layers: &[LstmLayerWeights],
    sequence: &[f64],
    initial: &[LstmState],
) -> Result<LstmOutput> {
    let first = layers
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no LSTM layers".into()))?;
    let n_in = first.input_size;
    let hidden = first.hidden_size;
    if initial.len() != layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} initial states for {} layers",
            initial.len(),
            layers.len()
        )));
    }
    if n_in == 0 || sequence.is_empty() || !sequence.len().is_multiple_of(n_in) {
        return Err(Error::ShapeMismatch(format!(
            "sequence of {} values is not a whole number of {}-wide steps",
            sequence.len(),
            n_in
        )));
    }
    let mut flat = Vec::new();
    let mut offsets = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let expect_in = if l == 0 { n_in } else { hidden };
        if layer.hidden_size != hidden
            || layer.input_size != expect_in
            || layer.w_ih.len() != 4 * hidden * expect_in
            || layer.w_hh.len() != 4 * hidden * hidden
            || layer.bias.len() != 4 * hidden
        {
            return Err(Error::ShapeMismatch(format!(
                "layer {l} weights have inconsistent shapes"
            )));
        }
        let w_ih = flat.len();
        flat.extend_from_slice(&layer.w_ih);
        let w_hh = flat.len();
        flat.extend_from_slice(&layer.w_hh);
        let b = flat.len();
        flat.extend_from_slice(&layer.bias);
        offsets.push(LstmOffsets {
            input: expect_in,
            w_ih,
            w_hh,
            b,
        });
    }
    for s in initial {
        if s.h.len() != hidden || s.c.len() != hidden {
            return Err(Error::ShapeMismatch("initial state width".into()));
        }
    }
    let mut states: Vec<LstmState> = initial.to_vec();
    let mut caches: Vec<StepCache> = offsets
        .iter()
        .map(|o| StepCache::new(o.input, hidden))
        .collect();
    let mut hidden_per_step = Vec::with_capacity(sequence.len() / n_in);
    for step in sequence.chunks(n_in) {
        for l in 0..layers.len() {
            let (below, rest) = caches.split_at_mut(l);
            let cache = &mut rest[0];
            if l == 0 {
                cache.x.copy_from_slice(step);
            } else {
                cache.x.copy_from_slice(&below[l - 1].h);
            }
            cache.h_prev.copy_from_slice(&states[l].h);
            cache.c_prev.copy_from_slice(&states[l].c);
            cell_forward(&flat, &offsets[l], hidden, cache);
            states[l].h.copy_from_slice(&cache.h);
            states[l].c.copy_from_slice(&cache.c);
        }
        hidden_per_step.push(caches[layers.len() - 1].h.clone());
    }
    Ok(LstmOutput {
        hidden_per_step,
        final_states: states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_hidden_state() {
        let layer = LstmLayerWeights::zeros(1, 3);
        let out = lstm_forward(&[layer], &[0.3, -2.0, 5.0, 1.0], &[LstmState::zeros(3)]).unwrap();
        for h in &out.hidden_per_step {
            assert!(h.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // One hidden unit, scalar input 0.5, h0 = 0.2, c0 = -0.1.
        let layer = LstmLayerWeights {
            input_size: 1,
            hidden_size: 1,
            w_ih: vec![0.4, -0.3, 0.9, 0.1],
            w_hh: vec![0.2, 0.5, -0.6, 0.3],
            bias: vec![0.1, 0.2, -0.1, 0.05],
        };
        let init = LstmState {
            h: vec![0.2],
            c: vec![-0.1],
        };
        let out = lstm_forward(&[layer], &[0.5], &[init]).unwrap();
        // Pre-activations: a = w_ih*x + w_hh*h + b
        //   i: 0.2+0.04+0.1 = 0.34   -> sigmoid = 0.584190
        //   f: -0.15+0.1+0.2 = 0.15  -> sigmoid = 0.537430
        //   g: 0.45-0.12-0.1 = 0.23  -> tanh    = 0.226028
        //   o: 0.05+0.06+0.05 = 0.16 -> sigmoid = 0.539915
        // c' = 0.537430*(-0.1) + 0.584190*0.226028 = 0.078301
        // h' = 0.539915 * tanh(0.078301) = 0.042189
        let h = out.hidden_per_step[0][0];
        let c = out.final_states[0].c[0];
        assert!((c - 0.078301).abs() < 5e-6, "c = {c}");
        assert!((h - 0.042189).abs() < 5e-6, "h = {h}");
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Straight-line reference: every gate written out with explicit index
    /// arithmetic, no shared helpers with the implementation.
    fn unrolled(layer: &LstmLayerWeights, seq: &[f64]) -> Vec<Vec<f64>> {
        let (n_in, hd) = (layer.input_size, layer.hidden_size);
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut out = Vec::new();
        for x in seq.chunks(n_in) {
            let pre = |gate: usize, j: usize, h: &[f64]| {
                let row = gate * hd + j;
                let mut a = layer.bias[row];
                for q in 0..n_in {
                    a += layer.w_ih[row * n_in + q] * x[q];
                }
                for q in 0..hd {
                    a += layer.w_hh[row * hd + q] * h[q];
                }
                a
            };
            let mut nh = vec![0.0; hd];
            let mut nc = vec![0.0; hd];
            for j in 0..hd {
                let ig = sig(pre(0, j, &h));
                let fg = sig(pre(1, j, &h));
                let gg = pre(2, j, &h).tanh();
                let og = sig(pre(3, j, &h));
                nc[j] = fg * c[j] + ig * gg;
                nh[j] = og * nc[j].tanh();
            }
            h = nh;
            c = nc;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn random_weights_match_unrolled_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n_in = rng.gen_range(1..4);
            let hd = rng.gen_range(1..6);
            let mut layer = LstmLayerWeights::zeros(n_in, hd);
            for v in layer
                .w_ih
                .iter_mut()
                .chain(&mut layer.w_hh)
                .chain(&mut layer.bias)
            {
                *v = rng.gen_range(-1.5..1.5);
            }
            let steps = rng.gen_range(1..10);
            let seq: Vec<f64> = (0..steps * n_in)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let got = lstm_forward(&[layer.clone()], &seq, &[LstmState::zeros(hd)]).unwrap();
            let want = unrolled(&layer, &seq);
            for (a, b) in got.hidden_per_step.iter().zip(&want) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let layer = LstmLayerWeights::zeros(2, 2);
        assert!(lstm_forward(
            std::slice::from_ref(&layer),
            &[1.0, 2.0, 3.0],
            &[LstmState::zeros(2)]
        )
        .is_err());
        assert!(lstm_forward(&[layer], &[1.0, 2.0], &[]).is_err());
        assert!(lstm_forward(&[], &[1.0], &[]).is_err());
    }
}
