use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hp(w: usize, hidden: usize, latent: usize, layers: usize) -> VaeHyperparams {
    VaeHyperparams {
        w,
        hidden_size: hidden,
        latent_size: latent,
        lstm_layers: layers,
        kl_weight: 0.3,
        seed: 3,
        ..VaeHyperparams::default()
    }
}

fn random_model(scope: ModelScope, h: VaeHyperparams, rng: &mut ChaCha8Rng) -> VaeModel {
    let mut m = VaeModel::zeros(scope, h).unwrap();
    for p in m.params_mut() {
        *p = rng.gen_range(-0.8..0.8);
    }
    m
}

/// Central differences on every parameter against the analytic gradient.
fn check_gradient(model: &mut VaeModel, x: &[f64], eps: &[f64]) {
    let mut ws = model.workspace();
    let mut grad = vec![0.0; model.param_count()];
    model.loss_and_grad(x, eps, &mut grad, &mut ws).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..model.param_count() {
        let orig = model.params()[k];
        model.params_mut()[k] = orig + h;
        let up = model.loss(x, eps, &mut ws).unwrap().total;
        model.params_mut()[k] = orig - h;
        let down = model.loss(x, eps, &mut ws).unwrap().total;
        model.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-5, "worst relative gradient error {worst}");
}

#[test]
fn gradient_matches_finite_differences_single_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = random_model(
        ModelScope::Single(MetricKind::CpuUsage),
        hp(6, 3, 2, 1),
        &mut rng,
    );
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let eps: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_gradient(&mut m, &x, &eps);
}

#[test]
fn gradient_matches_finite_differences_stacked_multichannel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scope = ModelScope::Integrated(vec![
        MetricKind::CpuUsage,
        MetricKind::GpuDutyCycle,
        MetricKind::DiskUsage,
    ]);
    let mut m = random_model(scope, hp(5, 4, 3, 2), &mut rng);
    let x: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..1.0)).collect();
    let eps: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_gradient(&mut m, &x, &eps);
}

#[test]
fn gradient_of_inference_path_with_zero_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = random_model(
        ModelScope::Single(MetricKind::PcieUsage),
        hp(8, 4, 8, 1),
        &mut rng,
    );
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
    check_gradient(&mut m, &x, &[0.0; 8]);
}

#[test]
fn kl_is_zero_at_standard_normal_and_positive_elsewhere() {
    let parts = vae_loss(&[0.5], &[0.5], &[0.0; 4], &[0.0; 4], 1.0);
    assert_eq!(parts.kl, 0.0);
    assert_eq!(parts.mse, 0.0);
    let parts = vae_loss(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0], &[0.0, 0.5], 0.5);
    assert!((parts.mse - 0.5).abs() < 1e-15);
    // -0.5 * ((1+0-1-1) + (1+0.5-0-e^0.5)) / 2
    let want_kl = -0.5 * ((-1.0) + (1.5 - 0.5f64.exp())) / 2.0;
    assert!((parts.kl - want_kl).abs() < 1e-15);
    assert!((parts.total - (0.5 + 0.5 * want_kl)).abs() < 1e-15);
}

#[test]
fn layout_sizes_match_architecture() {
    let m = VaeModel::zeros(ModelScope::Single(MetricKind::CpuUsage), hp(8, 4, 8, 1)).unwrap();
    let (h, z, f) = (4, 8, 1);
    let lstm = |inp: usize| 4 * h * inp + 4 * h * h + 4 * h;
    let want = lstm(f) + (z * h + z) * 2 + (2 * h * z + 2 * h) + lstm(f) + (f * h + f);
    assert_eq!(m.param_count(), want);
    assert_eq!(m.tensor("mu_head.bias").unwrap().len(), z);
}

#[test]
fn zero_model_reconstructs_zeros() {
    let m = VaeModel::zeros(ModelScope::Single(MetricKind::CpuUsage), hp(4, 2, 2, 1)).unwrap();
    let (mu, lv) = m.encode(&[0.3, 0.6, 0.1, 0.9]).unwrap();
    assert!(mu.iter().chain(&lv).all(|&v| v == 0.0));
    assert_eq!(m.decode(&[1.0, -1.0]).unwrap(), vec![0.0; 4]);
}

#[test]
fn inference_denoising_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = random_model(
        ModelScope::Single(MetricKind::CpuUsage),
        hp(4, 3, 2, 1),
        &mut rng,
    );
    let data = [0.1, 0.2, 0.3, 0.4];
    let win = Window {
        machine_index: 0,
        metric: MetricKind::CpuUsage,
        start_index: 0,
        data: &data,
    };
    let a = m.denoise(&win).unwrap();
    let b = m.denoise(&win).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.denoised.len(), 4);
    let (z, _) = reparameterize(&a.mu, &a.logvar, Sampling::Inference);
    assert_eq!(m.decode(&z).unwrap(), a.denoised);
}

#[test]
fn random_sampling_uses_logvar_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (z, eps) = reparameterize(
        &[1.0, -2.0],
        &[0.0, 2.0f64.ln() * 2.0],
        Sampling::Random(&mut rng),
    );
    assert!((z[0] - (1.0 + eps[0])).abs() < 1e-12);
    assert!((z[1] - (-2.0 + 2.0 * eps[1])).abs() < 1e-12);
}

#[test]
fn wrong_metric_and_shape_are_rejected() {
    let m = VaeModel::zeros(ModelScope::Single(MetricKind::CpuUsage), hp(4, 2, 2, 1)).unwrap();
    let data = [0.0; 4];
    let win = Window {
        machine_index: 0,
        metric: MetricKind::DiskUsage,
        start_index: 0,
        data: &data,
    };
    assert!(matches!(m.denoise(&win), Err(Error::MetricMismatch { .. })));
    assert!(matches!(m.encode(&[0.0; 3]), Err(Error::ShapeMismatch(_))));
    assert!(matches!(m.decode(&[0.0; 3]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn model_file_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scope = ModelScope::Integrated(vec![MetricKind::CpuUsage, MetricKind::MemoryUsage]);
    let m = random_model(scope, hp(5, 3, 2, 2), &mut rng);
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    let back = read_model(buf.as_slice()).unwrap();
    assert_eq!(back, m);

    let mut bad = buf.clone();
    bad[0] ^= 1;
    assert!(matches!(
        read_model(bad.as_slice()),
        Err(Error::ModelFormat(_))
    ));
    let truncated = &buf[..buf.len() - 3];
    assert!(matches!(read_model(truncated), Err(Error::ModelFormat(_))));
    let mut longer = buf.clone();
    longer.push(0);
    assert!(matches!(
        read_model(longer.as_slice()),
        Err(Error::ModelFormat(_))
    ));
    let mut wrong_version = buf;
    wrong_version[8] = 99;
    assert!(matches!(
        read_model(wrong_version.as_slice()),
        Err(Error::ModelFormat(_))
    ));
}

fn sine_set(w: usize, n: usize) -> TrainingSet {
    let mut set = TrainingSet::new(w);
    for i in 0..n {
        let s: Vec<f64> = (0..w)
            .map(|t| 0.5 + 0.3 * (((i + t) as f64) * 0.4).sin())
            .collect();
        set.push(&s).unwrap();
    }
    set
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let h = VaeHyperparams {
        epochs: 15,
        batch_size: 16,
        learning_rate: 5e-3,
        kl_weight: 1e-3,
        seed: 21,
        ..VaeHyperparams::default()
    };
    let set = sine_set(8, 256);
    let scope = ModelScope::Single(MetricKind::CpuUsage);
    let (a, sa) = train_model(scope.clone(), h.clone(), &set).unwrap();
    let (b, sb) = train_model(scope, h, &set).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(sa.epoch_losses.len(), 15);
    assert!(
        sa.best_loss < sa.epoch_losses[0] * 0.5,
        "{:?}",
        sa.epoch_losses
    );
    let min = sa
        .epoch_losses
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert_eq!(sa.best_loss, min);
    assert_eq!(sa.epoch_losses[sa.best_epoch], min);
}

#[test]
fn training_rejects_empty_and_mis_shaped_sets() {
    let scope = ModelScope::Single(MetricKind::CpuUsage);
    assert!(matches!(
        train_model(
            scope.clone(),
            VaeHyperparams::default(),
            &TrainingSet::new(8)
        ),
        Err(Error::NoTrainingData)
    ));
    assert!(matches!(
        train_model(scope, VaeHyperparams::default(), &sine_set(5, 4)),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn thinning_keeps_requested_count_deterministically() {
    let mut a = sine_set(4, 100);
    let mut b = a.clone();
    a.thin(10, 7);
    b.thin(10, 7);
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
}

#[test]
fn hyperparams_validation() {
    assert!(VaeHyperparams::default().validate().is_ok());
    let bad = VaeHyperparams {
        hidden_size: 0,
        ..VaeHyperparams::default()
    };
    assert!(bad.validate().is_err());
    let bad = VaeHyperparams {
        learning_rate: -1.0,
        ..VaeHyperparams::default()
    };
    assert!(bad.validate().is_err());
}
