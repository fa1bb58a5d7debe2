//! LSTM variational autoencoder used to denoise metric windows.
//!
//! The encoder LSTM reads a window step by step; affine heads map its final
//! hidden state to the latent mean and log-variance. The decoder LSTM starts
//! from a state computed from the latent code and feeds each step's output
//! back as the next step's input, with a zero input on the first step.
//!
//! All parameters live in one flat `Vec<f64>` whose layout (names, shapes
//! and offsets) is fixed by the architecture. Gradients share that layout,
//! which keeps the optimizer and the finite-difference checks trivial.

mod io;
mod lstm;
mod net;
mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricKind;
use crate::tensor::Window;

pub use io::{read_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use lstm::{lstm_forward, LstmLayerWeights, LstmOutput, LstmState};
pub use net::{reparameterize, vae_loss, LossParts, Sampling, Workspace};
pub use train::{train_from, train_model, TrainingSet, TrainingSummary};

pub(crate) use lstm::LstmOffsets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeHyperparams {
    pub w: usize,
    pub hidden_size: usize,
    pub latent_size: usize,
    pub lstm_layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kl_weight: f64,
    /// Initial value of the log-variance head bias.
    pub logvar_bias_init: f64,
    pub seed: u64,
}

impl Default for VaeHyperparams {
    fn default() -> Self {
        Self {
            w: 8,
            hidden_size: 4,
            latent_size: 8,
            lstm_layers: 1,
            learning_rate: 5e-3,
            epochs: 100,
            batch_size: 64,
            kl_weight: 1e-5,
            logvar_bias_init: -6.0,
            seed: 0,
        }
    }
}

impl VaeHyperparams {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.w,
            self.hidden_size,
            self.latent_size,
            self.lstm_layers,
            self.batch_size,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidParameter("VAE sizes must all be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidParameter("kl weight must be >= 0".into()));
        }
        if !self.logvar_bias_init.is_finite() {
            return Err(Error::InvalidParameter(
                "logvar bias init must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// What a model was trained on: one metric, or every metric at once (one
/// input channel per metric).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScope {
    Single(MetricKind),
    Integrated(Vec<MetricKind>),
}

impl ModelScope {
    pub fn input_width(&self) -> usize {
        match self {
            ModelScope::Single(_) => 1,
            ModelScope::Integrated(m) => m.len(),
        }
    }

    /// Input channels in order.
    pub fn metrics(&self) -> &[MetricKind] {
        match self {
            ModelScope::Single(m) => std::slice::from_ref(m),
            ModelScope::Integrated(m) => m,
        }
    }
}

impl fmt::Display for ModelScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelScope::Single(m) => write!(f, "{m}"),
            ModelScope::Integrated(ms) => write!(f, "integrated({} metrics)", ms.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AffineOffsets {
    pub out: usize,
    pub input: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter layout derived from (input width, hidden, latent, layers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub width: usize,
    pub hidden: usize,
    pub latent: usize,
    pub layers: usize,
    pub enc: Vec<LstmOffsets>,
    pub dec: Vec<LstmOffsets>,
    pub mu: AffineOffsets,
    pub logvar: AffineOffsets,
    pub init: AffineOffsets,
    pub out: AffineOffsets,
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(width: usize, hidden: usize, latent: usize, layers: usize) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut alloc = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset
        };
        let lstm = |prefix: &str, alloc: &mut dyn FnMut(String, Vec<usize>) -> usize| {
            (0..layers)
                .map(|l| {
                    let input = if l == 0 { width } else { hidden };
                    LstmOffsets {
                        input,
                        w_ih: alloc(format!("{prefix}.l{l}.w_ih"), vec![4 * hidden, input]),
                        w_hh: alloc(format!("{prefix}.l{l}.w_hh"), vec![4 * hidden, hidden]),
                        b: alloc(format!("{prefix}.l{l}.bias"), vec![4 * hidden]),
                    }
                })
                .collect::<Vec<_>>()
        };
        let enc = lstm("encoder", &mut alloc);
        let affine = |name: &str,
                      out: usize,
                      input: usize,
                      alloc: &mut dyn FnMut(String, Vec<usize>) -> usize| {
            AffineOffsets {
                out,
                input,
                w: alloc(format!("{name}.weight"), vec![out, input]),
                b: alloc(format!("{name}.bias"), vec![out]),
            }
        };
        let mu = affine("mu_head", latent, hidden, &mut alloc);
        let logvar = affine("logvar_head", latent, hidden, &mut alloc);
        let init = affine("decoder_init", 2 * hidden * layers, latent, &mut alloc);
        let dec = lstm("decoder", &mut alloc);
        let out = affine("output_head", width, hidden, &mut alloc);
        Layout {
            width,
            hidden,
            latent,
            layers,
            enc,
            dec,
            mu,
            logvar,
            init,
            out,
            tensors,
            total,
        }
    }
}

/// Weights and hyperparameters of one LSTM-VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    scope: ModelScope,
    hyperparams: VaeHyperparams,
    params: Vec<f64>,
    layout: Layout,
    version: u32,
}

/// Output of [`VaeModel::denoise`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `w × width`, time-major.
    pub denoised: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub mse: f64,
}

impl VaeModel {
    /// A model with every parameter zero.
    pub fn zeros(scope: ModelScope, hyperparams: VaeHyperparams) -> Result<Self> {
        hyperparams.validate()?;
        let layout = Layout::new(
            scope.input_width(),
            hyperparams.hidden_size,
            hyperparams.latent_size,
            hyperparams.lstm_layers,
        );
        if scope.input_width() == 0 {
            return Err(Error::InvalidParameter(
                "integrated model needs at least one metric".into(),
            ));
        }
        Ok(Self {
            scope,
            hyperparams,
            params: vec![0.0; layout.total],
            layout,
            version: MODEL_FORMAT_VERSION,
        })
    }

    /// Uniform(−k, k) initialization with k = 1/√hidden, seeded from the
    /// hyperparameters, except the log-variance bias which starts at
    /// `logvar_bias_init`.
    pub fn initialized(scope: ModelScope, hyperparams: VaeHyperparams) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut model = Self::zeros(scope, hyperparams)?;
        let k = 1.0 / (model.hyperparams.hidden_size as f64).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(model.hyperparams.seed);
        for p in &mut model.params {
            *p = rng.gen_range(-k..k);
        }
        let b = model.hyperparams.logvar_bias_init;
        model
            .tensor_mut("logvar_head.bias")
            .expect("layout has a logvar head")
            .iter_mut()
            .for_each(|v| *v = b);
        Ok(model)
    }

    pub fn scope(&self) -> &ModelScope {
        &self.scope
    }
    pub fn metric(&self) -> Option<MetricKind> {
        match self.scope {
            ModelScope::Single(m) => Some(m),
            ModelScope::Integrated(_) => None,
        }
    }
    pub fn hyperparams(&self) -> &VaeHyperparams {
        &self.hyperparams
    }
    pub fn version(&self) -> u32 {
        self.version
    }
    pub fn input_width(&self) -> usize {
        self.layout.width
    }
    pub fn window_len(&self) -> usize {
        self.hyperparams.w
    }
    pub fn param_count(&self) -> usize {
        self.params.len()
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mutable view of one named tensor, e.g. `"mu_head.bias"`.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.tensors.iter().find(|t| t.name == name)?.clone();
        Some(&mut self.params[spec.offset..spec.offset + spec.len()])
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let spec = self.layout.tensors.iter().find(|t| t.name == name)?;
        Some(&self.params[spec.offset..spec.offset + spec.len()])
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.layout.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.layout, self.hyperparams.w)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let expect = self.hyperparams.w * self.layout.width;
        if x.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "input of {} values, model expects {} (w={} × width={})",
                x.len(),
                expect,
                self.hyperparams.w,
                self.layout.width
            )));
        }
        Ok(())
    }

    /// Latent mean and log-variance for a time-major input.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let mut ws = self.workspace();
        net::encode_into(self, x, &mut ws);
        Ok((ws.mu.clone(), ws.logvar.clone()))
    }

    pub fn encode_window(&self, window: &Window<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_window(window)?;
        self.encode(window.data)
    }

    /// Decodes a latent code into a `w × width` time-major reconstruction.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.layout.latent {
            return Err(Error::ShapeMismatch(format!(
                "latent code of {} values, model expects {}",
                z.len(),
                self.layout.latent
            )));
        }
        let mut ws = self.workspace();
        ws.z.copy_from_slice(z);
        net::decode_into(self, &mut ws);
        Ok(ws.y.clone())
    }

    fn check_window(&self, window: &Window<'_>) -> Result<()> {
        match self.scope {
            ModelScope::Single(m) if m == window.metric => {}
            _ => {
                return Err(Error::MetricMismatch {
                    model: self.scope.to_string(),
                    window: window.metric,
                })
            }
        }
        self.check_input(window.data)
    }

    /// Inference-mode reconstruction (z = mu) of a raw time-major input.
    pub fn reconstruct(&self, x: &[f64], ws: &mut Workspace) -> Result<Reconstruction> {
        self.check_input(x)?;
        net::forward(self, x, None, ws);
        Ok(Reconstruction {
            denoised: ws.y.clone(),
            mu: ws.mu.clone(),
            logvar: ws.logvar.clone(),
            mse: net::mse(x, &ws.y),
        })
    }

    /// Denoises one metric window.
    pub fn denoise(&self, window: &Window<'_>) -> Result<Reconstruction> {
        self.check_window(window)?;
        let mut ws = self.workspace();
        self.reconstruct(window.data, &mut ws)
    }

    /// Loss of one input with an explicit noise draw `eps` (length latent),
    /// accumulating the parameter gradient into `grad`.
    pub fn loss_and_grad(
        &self,
        x: &[f64],
        eps: &[f64],
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> Result<LossParts> {
        self.check_input(x)?;
        if eps.len() != self.layout.latent || grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch(
                "eps or gradient buffer has the wrong length".into(),
            ));
        }
        net::forward(self, x, Some(eps), ws);
        let parts = net::loss_parts(x, ws, self.hyperparams.kl_weight);
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        net::backward(self, x, eps, ws, grad);
        Ok(parts)
    }

    /// Loss only, same conventions as [`VaeModel::loss_and_grad`].
    pub fn loss(&self, x: &[f64], eps: &[f64], ws: &mut Workspace) -> Result<LossParts> {
        self.check_input(x)?;
        if eps.len() != self.layout.latent {
            return Err(Error::ShapeMismatch("eps has the wrong length".into()));
        }
        net::forward(self, x, Some(eps), ws);
        Ok(net::loss_parts(x, ws, self.hyperparams.kl_weight))
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn from_parts(
        scope: ModelScope,
        hyperparams: VaeHyperparams,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut m = Self::zeros(scope, hyperparams)?;
        if params.len() != m.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters supplied, layout needs {}",
                params.len(),
                m.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter(
                "model weights must be finite".into(),
            ));
        }
        m.params = params;
        Ok(m)
    }
}

#[cfg(test)]
mod tests;
