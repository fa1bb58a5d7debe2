//! Mini-batch Adam training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelScope, VaeHyperparams, VaeModel};
use crate::error::{Error, Result};
use crate::tensor::Window;

/// Flattened time-major training inputs of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    sample_len: usize,
    data: Vec<f64>,
}

impl TrainingSet {
    pub fn new(sample_len: usize) -> Self {
        Self {
            sample_len,
            data: Vec::new(),
        }
    }

    pub fn from_windows<'a>(
        w: usize,
        windows: impl IntoIterator<Item = Window<'a>>,
    ) -> Result<Self> {
        let mut set = Self::new(w);
        for win in windows {
            set.push(win.data)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.sample_len {
            return Err(Error::ShapeMismatch(format!(
                "training sample of {} values, expected {}",
                sample.len(),
                self.sample_len
            )));
        }
        self.data.extend_from_slice(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.sample_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_len(&self) -> usize {
        self.sample_len
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.sample_len..(i + 1) * self.sample_len]
    }

    /// Keeps at most `max` samples chosen uniformly without replacement.
    pub fn thin(&mut self, max: usize, seed: u64) {
        let n = self.len();
        if n <= max {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, n, max).into_vec();
        keep.sort_unstable();
        let mut data = Vec::with_capacity(max * self.sample_len);
        for i in keep {
            data.extend_from_slice(self.get(i));
        }
        self.data = data;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Epoch whose end-of-epoch weights were kept.
    pub best_epoch: usize,
    pub best_loss: f64,
    pub samples: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

const CLIP_NORM: f64 = 5.0;

/// Trains a fresh model and returns the weights of the epoch with the lowest
/// mean loss.
pub fn train_model(
    scope: ModelScope,
    hyperparams: VaeHyperparams,
    set: &TrainingSet,
) -> Result<(VaeModel, TrainingSummary)> {
    let model = VaeModel::initialized(scope, hyperparams)?;
    train_from(model, set)
}

/// Continues training from existing weights.
pub fn train_from(mut model: VaeModel, set: &TrainingSet) -> Result<(VaeModel, TrainingSummary)> {
    let hp = model.hyperparams().clone();
    if set.is_empty() {
        return Err(Error::NoTrainingData);
    }
    if set.sample_len() != hp.w * model.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "training samples hold {} values, model expects {}",
            set.sample_len(),
            hp.w * model.input_width()
        )));
    }
    let n = set.len();
    let np = model.param_count();
    let latent = hp.latent_size;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5eed_7a11);
    let mut adam = Adam::new(np, hp.learning_rate);
    let mut ws = model.workspace();
    let mut grad = vec![0.0; np];
    let mut eps = vec![0.0; latent];
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, 0usize, model.params().to_vec());
    let mut epoch_losses = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                let parts = model.loss_and_grad(set.get(i), &eps, &mut grad, &mut ws)?;
                total += parts.total;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut norm = 0.0;
            for g in grad.iter_mut() {
                *g *= scale;
                norm += *g * *g;
            }
            let norm = norm.sqrt();
            if norm > CLIP_NORM {
                let s = CLIP_NORM / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(model.params_mut(), &grad);
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        epoch_losses.push(mean);
        if mean < best.0 {
            best = (mean, epoch, model.params().to_vec());
        }
    }
    let (best_loss, best_epoch, params) = best;
    if hp.epochs > 0 {
        model.params_mut().copy_from_slice(&params);
    }
    Ok((
        model,
        TrainingSummary {
            epoch_losses,
            best_epoch,
            best_loss,
            samples: n,
        },
    ))
}
