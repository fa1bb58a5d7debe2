#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use trainwatch_core::vae::{
    read_model, vae_loss, write_model, ModelScope, VaeHyperparams, VaeModel,
};
use trainwatch_core::MetricKind;

fn arch() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (
        2usize..9,
        1usize..5,
        1usize..5,
        1usize..3,
        1usize..4,
        any::<u64>(),
    )
}

fn build(
    w: usize,
    hidden: usize,
    latent: usize,
    layers: usize,
    width: usize,
    seed: u64,
) -> VaeModel {
    let scope = if width == 1 {
        ModelScope::Single(MetricKind::GpuPowerDraw)
    } else {
        ModelScope::Integrated(MetricKind::ALL[..width].to_vec())
    };
    let hp = VaeHyperparams {
        w,
        hidden_size: hidden,
        latent_size: latent,
        lstm_layers: layers,
        kl_weight: 0.2,
        seed,
        ..VaeHyperparams::default()
    };
    VaeModel::initialized(scope, hp).unwrap()
}

fn input(len: usize, seed: u64) -> Vec<f64> {
    (0..len)
        .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0)
        .collect()
}

/// KL(N(mu, e^lv) || N(0, 1)) by midpoint quadrature.
fn kl_quadrature(mu: f64, lv: f64) -> f64 {
    let sd = (0.5 * lv).exp();
    let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let ln_q =
        |x: f64| -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let ln_p = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..n)
        .map(|k| {
            let x = lo + (k as f64 + 0.5) * h;
            ln_q(x).exp() * (ln_q(x) - ln_p(x)) * h
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn model_files_round_trip((w, hidden, latent, layers, width, seed) in arch()) {
        let m = build(w, hidden, latent, layers, width, seed);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &m);
        let x = input(w * width, seed);
        let (a, b) = (m.reconstruct(&x, &mut m.workspace()).unwrap(), back.reconstruct(&x, &mut back.workspace()).unwrap());
        prop_assert_eq!(a.denoised, b.denoised);
    }

    #[test]
    fn reconstruction_shape_and_error((w, hidden, latent, layers, width, seed) in arch()) {
        let m = build(w, hidden, latent, layers, width, seed);
        let x = input(w * width, seed ^ 5);
        let r = m.reconstruct(&x, &mut m.workspace()).unwrap();
        prop_assert_eq!(r.denoised.len(), w * width);
        prop_assert_eq!(r.mu.len(), latent);
        prop_assert_eq!(r.logvar.len(), latent);
        let mse = x.iter().zip(&r.denoised).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
        prop_assert!((r.mse - mse).abs() < 1e-14);
        let again = m.reconstruct(&x, &mut m.workspace()).unwrap();
        prop_assert_eq!(r, again);
    }

    #[test]
    fn inference_decodes_the_latent_mean((w, hidden, latent, layers, width, seed) in arch()) {
        let m = build(w, hidden, latent, layers, width, seed);
        let x = input(w * width, seed ^ 9);
        let r = m.reconstruct(&x, &mut m.workspace()).unwrap();
        let (mu, logvar) = m.encode(&x).unwrap();
        prop_assert_eq!(&r.mu, &mu);
        prop_assert_eq!(&r.logvar, &logvar);
        prop_assert_eq!(m.decode(&mu).unwrap(), r.denoised);
    }

    #[test]
    fn kl_term_matches_quadrature(mu in prop::collection::vec(-2.0f64..2.0, 1..4), lv in prop::collection::vec(-3.0f64..2.0, 4)) {
        let lv = &lv[..mu.len()];
        let parts = vae_loss(&[0.0], &[0.0], &mu, lv, 1.0);
        let want = mu.iter().zip(lv).map(|(m, l)| kl_quadrature(*m, *l)).sum::<f64>() / mu.len() as f64;
        prop_assert!((parts.kl - want).abs() < 1e-6, "{} vs {}", parts.kl, want);
        prop_assert!(parts.kl >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_matches_central_differences((w, hidden, latent, layers, width, seed) in arch(), noise in prop::collection::vec(-1.0f64..1.0, 4)) {
        let mut m = build(w, hidden, latent, layers, width, seed);
        let x = input(w * width, seed ^ 3);
        let eps = &noise[..latent];
        let mut ws = m.workspace();
        let mut grad = vec![0.0; m.param_count()];
        m.loss_and_grad(&x, eps, &mut grad, &mut ws).unwrap();
        let h = 1e-6;
        for k in 0..m.param_count() {
            let orig = m.params()[k];
            m.params_mut()[k] = orig + h;
            let up = m.loss(&x, eps, &mut ws).unwrap().total;
            m.params_mut()[k] = orig - h;
            let down = m.loss(&x, eps, &mut ws).unwrap().total;
            m.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-4);
            prop_assert!(rel < 1e-4, "param {} fd {} analytic {}", k, fd, grad[k]);
        }
    }
}
