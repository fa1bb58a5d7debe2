//! Forward pass, loss and hand-written backpropagation through time.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::lstm::{cell_backward, cell_forward, CellGrad, StepCache};
use super::{AffineOffsets, Layout, LstmOffsets, VaeModel};

/// How the latent code is obtained from (mu, logvar).
pub enum Sampling<'a> {
    /// `z = mu`.
    Inference,
    /// `z = mu + exp(logvar / 2) · eps`, `eps ~ N(0, I)`.
    Random(&'a mut dyn RngCore),
}

/// Draws a latent code. Returns the code and the noise used.
pub fn reparameterize(mu: &[f64], logvar: &[f64], sampling: Sampling<'_>) -> (Vec<f64>, Vec<f64>) {
    match sampling {
        Sampling::Inference => (mu.to_vec(), vec![0.0; mu.len()]),
        Sampling::Random(rng) => {
            let eps: Vec<f64> = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
            let z = mu
                .iter()
                .zip(logvar)
                .zip(&eps)
                .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                .collect();
            (z, eps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub kl: f64,
    pub total: f64,
}

/// `mse + kl_weight · kl`, with `kl = −½ Σ (1 + lv − mu² − e^lv) / latent`.
pub fn vae_loss(x: &[f64], y: &[f64], mu: &[f64], logvar: &[f64], kl_weight: f64) -> LossParts {
    let mse = mse(x, y);
    let kl = kl(mu, logvar);
    LossParts {
        mse,
        kl,
        total: mse + kl_weight * kl,
    }
}

pub(crate) fn mse(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

fn kl(mu: &[f64], logvar: &[f64]) -> f64 {
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum();
    -0.5 * s / mu.len() as f64
}

/// Reusable activation caches and gradient scratch for one model shape.
#[derive(Debug, Clone)]
pub struct Workspace {
    w: usize,
    enc: Vec<Vec<StepCache>>,
    dec: Vec<Vec<StepCache>>,
    pub(crate) mu: Vec<f64>,
    pub(crate) logvar: Vec<f64>,
    pub(crate) z: Vec<f64>,
    init: Vec<f64>,
    pub(crate) y: Vec<f64>,
    dy: Vec<f64>,
    dh: Vec<Vec<f64>>,
    dc: Vec<Vec<f64>>,
    dh_prev: Vec<f64>,
    dc_prev: Vec<f64>,
    dx_in: Vec<f64>,
    dx_hidden: Vec<f64>,
    dtop: Vec<f64>,
    dinit: Vec<f64>,
    dz: Vec<f64>,
    scratch: CellGrad,
}

impl Workspace {
    pub(crate) fn new(layout: &Layout, w: usize) -> Self {
        let caches = |offs: &[LstmOffsets]| -> Vec<Vec<StepCache>> {
            (0..w)
                .map(|_| {
                    offs.iter()
                        .map(|o| StepCache::new(o.input, layout.hidden))
                        .collect()
                })
                .collect()
        };
        let h = layout.hidden;
        Self {
            w,
            enc: caches(&layout.enc),
            dec: caches(&layout.dec),
            mu: vec![0.0; layout.latent],
            logvar: vec![0.0; layout.latent],
            z: vec![0.0; layout.latent],
            init: vec![0.0; 2 * h * layout.layers],
            y: vec![0.0; w * layout.width],
            dy: vec![0.0; w * layout.width],
            dh: vec![vec![0.0; h]; layout.layers],
            dc: vec![vec![0.0; h]; layout.layers],
            dh_prev: vec![0.0; h],
            dc_prev: vec![0.0; h],
            dx_in: vec![0.0; layout.width],
            dx_hidden: vec![0.0; h],
            dtop: vec![0.0; h],
            dinit: vec![0.0; 2 * h * layout.layers],
            dz: vec![0.0; layout.latent],
            scratch: CellGrad::new(h),
        }
    }

    pub fn reconstruction(&self) -> &[f64] {
        &self.y
    }
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }
    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }
}

fn affine(p: &[f64], a: &AffineOffsets, input: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &p[a.w + r * a.input..a.w + (r + 1) * a.input];
        *o = p[a.b + r] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Accumulates the affine parameter gradient and adds `Wᵀ·dout` into `din`.
fn affine_backward(
    p: &[f64],
    a: &AffineOffsets,
    input: &[f64],
    dout: &[f64],
    grad: &mut [f64],
    din: &mut [f64],
) {
    for (r, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad[a.b + r] += d;
        let base = a.w + r * a.input;
        for j in 0..a.input {
            grad[base + j] += d * input[j];
            din[j] += p[base + j] * d;
        }
    }
}

pub(crate) fn encode_into(model: &VaeModel, x: &[f64], ws: &mut Workspace) {
    let lay = model.layout();
    let p = model.params();
    let (hd, width) = (lay.hidden, lay.width);
    for t in 0..ws.w {
        let (done, rest) = ws.enc.split_at_mut(t);
        let step = &mut rest[0];
        for l in 0..lay.layers {
            let (below, cur) = step.split_at_mut(l);
            let c = &mut cur[0];
            if l == 0 {
                c.x.copy_from_slice(&x[t * width..(t + 1) * width]);
            } else {
                c.x.copy_from_slice(&below[l - 1].h);
            }
            match done.last() {
                Some(prev) => {
                    c.h_prev.copy_from_slice(&prev[l].h);
                    c.c_prev.copy_from_slice(&prev[l].c);
                }
                None => {
                    c.h_prev.iter_mut().for_each(|v| *v = 0.0);
                    c.c_prev.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            cell_forward(p, &lay.enc[l], hd, c);
        }
    }
    let top = &ws.enc[ws.w - 1][lay.layers - 1].h;
    affine(p, &lay.mu, top, &mut ws.mu);
    affine(p, &lay.logvar, top, &mut ws.logvar);
}

pub(crate) fn decode_into(model: &VaeModel, ws: &mut Workspace) {
    let lay = model.layout();
    let p = model.params();
    let (hd, width) = (lay.hidden, lay.width);
    affine(p, &lay.init, &ws.z, &mut ws.init);
    for t in 0..ws.w {
        let (done, rest) = ws.dec.split_at_mut(t);
        let step = &mut rest[0];
        for l in 0..lay.layers {
            let (below, cur) = step.split_at_mut(l);
            let c = &mut cur[0];
            if l == 0 {
                if t == 0 {
                    c.x.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    c.x.copy_from_slice(&ws.y[(t - 1) * width..t * width]);
                }
            } else {
                c.x.copy_from_slice(&below[l - 1].h);
            }
            match done.last() {
                Some(prev) => {
                    c.h_prev.copy_from_slice(&prev[l].h);
                    c.c_prev.copy_from_slice(&prev[l].c);
                }
                None => {
                    c.h_prev
                        .copy_from_slice(&ws.init[2 * l * hd..(2 * l + 1) * hd]);
                    c.c_prev
                        .copy_from_slice(&ws.init[(2 * l + 1) * hd..(2 * l + 2) * hd]);
                }
            }
            cell_forward(p, &lay.dec[l], hd, c);
        }
        let top = &step[lay.layers - 1].h;
        affine(p, &lay.out, top, &mut ws.y[t * width..(t + 1) * width]);
    }
}

/// Full forward pass. `eps = None` decodes from the mean.
pub(crate) fn forward(model: &VaeModel, x: &[f64], eps: Option<&[f64]>, ws: &mut Workspace) {
    encode_into(model, x, ws);
    match eps {
        None => ws.z.copy_from_slice(&ws.mu),
        Some(e) => {
            for k in 0..ws.z.len() {
                ws.z[k] = ws.mu[k] + (0.5 * ws.logvar[k]).exp() * e[k];
            }
        }
    }
    decode_into(model, ws);
}

pub(crate) fn loss_parts(x: &[f64], ws: &Workspace, kl_weight: f64) -> LossParts {
    vae_loss(x, &ws.y, &ws.mu, &ws.logvar, kl_weight)
}

fn zero(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = 0.0);
}

/// Backward pass for the activations left in `ws` by [`forward`].
pub(crate) fn backward(
    model: &VaeModel,
    x: &[f64],
    eps: &[f64],
    ws: &mut Workspace,
    grad: &mut [f64],
) {
    let lay = model.layout();
    let p = model.params();
    let (hd, width, nl) = (lay.hidden, lay.width, lay.layers);
    let n = x.len() as f64;
    let beta = model.hyperparams().kl_weight;
    let zl = lay.latent as f64;

    for (d, (y, xv)) in ws.dy.iter_mut().zip(ws.y.iter().zip(x)) {
        *d = 2.0 * (y - xv) / n;
    }
    ws.dh.iter_mut().for_each(|v| zero(v));
    ws.dc.iter_mut().for_each(|v| zero(v));

    for t in (0..ws.w).rev() {
        let top_in = &ws.dec[t][nl - 1].h;
        zero(&mut ws.dtop);
        affine_backward(
            p,
            &lay.out,
            top_in,
            &ws.dy[t * width..(t + 1) * width],
            grad,
            &mut ws.dtop,
        );
        for l in (0..nl).rev() {
            if l == nl - 1 {
                for j in 0..hd {
                    ws.dh[l][j] += ws.dtop[j];
                }
            } else {
                for j in 0..hd {
                    ws.dh[l][j] += ws.dx_hidden[j];
                }
            }
            let cache = &ws.dec[t][l];
            let dx: &mut [f64] = if l == 0 {
                &mut ws.dx_in
            } else {
                &mut ws.dx_hidden
            };
            cell_backward(
                p,
                &lay.dec[l],
                hd,
                cache,
                &ws.dh[l],
                &ws.dc[l],
                grad,
                &mut ws.scratch,
                dx,
                &mut ws.dh_prev,
                &mut ws.dc_prev,
            );
            ws.dh[l].copy_from_slice(&ws.dh_prev);
            ws.dc[l].copy_from_slice(&ws.dc_prev);
        }
        if t > 0 {
            for j in 0..width {
                ws.dy[(t - 1) * width + j] += ws.dx_in[j];
            }
        }
    }

    for l in 0..nl {
        ws.dinit[2 * l * hd..(2 * l + 1) * hd].copy_from_slice(&ws.dh[l]);
        ws.dinit[(2 * l + 1) * hd..(2 * l + 2) * hd].copy_from_slice(&ws.dc[l]);
    }
    zero(&mut ws.dz);
    affine_backward(p, &lay.init, &ws.z, &ws.dinit, grad, &mut ws.dz);

    // dz feeds mu directly and logvar through the noise scale; KL adds its own terms.
    let mut dmu = vec![0.0; lay.latent];
    let mut dlv = vec![0.0; lay.latent];
    for k in 0..lay.latent {
        let s = (0.5 * ws.logvar[k]).exp();
        dmu[k] = ws.dz[k] + beta * ws.mu[k] / zl;
        dlv[k] = ws.dz[k] * eps[k] * 0.5 * s - beta * 0.5 * (1.0 - ws.logvar[k].exp()) / zl;
    }
    let top = ws.enc[ws.w - 1][nl - 1].h.clone();
    zero(&mut ws.dtop);
    affine_backward(p, &lay.mu, &top, &dmu, grad, &mut ws.dtop);
    affine_backward(p, &lay.logvar, &top, &dlv, grad, &mut ws.dtop);

    ws.dh.iter_mut().for_each(|v| zero(v));
    ws.dc.iter_mut().for_each(|v| zero(v));
    ws.dh[nl - 1].copy_from_slice(&ws.dtop);
    for t in (0..ws.w).rev() {
        for l in (0..nl).rev() {
            if l < nl - 1 {
                for j in 0..hd {
                    ws.dh[l][j] += ws.dx_hidden[j];
                }
            }
            let cache = &ws.enc[t][l];
            let dx: &mut [f64] = if l == 0 {
                &mut ws.dx_in
            } else {
                &mut ws.dx_hidden
            };
            cell_backward(
                p,
                &lay.enc[l],
                hd,
                cache,
                &ws.dh[l],
                &ws.dc[l],
                grad,
                &mut ws.scratch,
                dx,
                &mut ws.dh_prev,
                &mut ws.dc_prev,
            );
            ws.dh[l].copy_from_slice(&ws.dh_prev);
            ws.dc[l].copy_from_slice(&ws.dc_prev);
        }
    }
}
