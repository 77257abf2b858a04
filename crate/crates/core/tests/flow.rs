use bimal_core::flow::{squeeze_tensor, unsqueeze_tensor, FlowConfig, FlowModel, Latent};
use bimal_core::numerics::{finite_diff_check, finite_diff_check_module, Graph, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_config() -> FlowConfig {
    FlowConfig {
        height: 4,
        width: 4,
        channels: 2,
        num_scales: 2,
        steps_per_scale: 2,
        hidden: 4,
        scale_cap: 2.0,
    }
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random non-trivial model: data-initialized ActNorms, jittered everything.
fn random_model(cfg: FlowConfig, seed: u64) -> FlowModel {
    random_model_with(cfg, seed, 0.1)
}

fn random_model_with(cfg: FlowConfig, seed: u64, jitter: f64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = FlowModel::new(cfg.clone(), seed).unwrap();
    let batch = gaussian(&[8, cfg.height, cfg.width, cfg.channels], &mut rng, 1.0);
    m.initialize(&batch).unwrap();
    m.jitter(seed + 1, jitter);
    m
}

fn flatten(z: &Latent) -> Vec<f64> {
    z.parts.iter().flat_map(|p| p.data().to_vec()).collect()
}

/// Gaussian elimination with partial pivoting; independent of the crate's
/// own linear algebra.
fn log_abs_det_oracle(mut a: Vec<f64>, n: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..n {
        let mut p = k;
        for i in k + 1..n {
            if a[i * n + k].abs() > a[p * n + k].abs() {
                p = i;
            }
        }
        for j in 0..n {
            a.swap(k * n + j, p * n + j);
        }
        let piv = a[k * n + k];
        total += piv.abs().ln();
        for i in k + 1..n {
            let f = a[i * n + k] / piv;
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    total
}

fn numerical_jacobian_logdet(m: &FlowModel, y: &Tensor, eps: f64) -> f64 {
    let d = y.len();
    let mut jac = vec![0.0; d * d];
    let mut work = y.clone();
    for j in 0..d {
        let orig = y.data()[j];
        work.data_mut()[j] = orig + eps;
        let up = flatten(&m.forward(&work).unwrap().0);
        work.data_mut()[j] = orig - eps;
        let down = flatten(&m.forward(&work).unwrap().0);
        work.data_mut()[j] = orig;
        for i in 0..d {
            jac[i * d + j] = (up[i] - down[i]) / (2.0 * eps);
        }
    }
    log_abs_det_oracle(jac, d)
}

#[test]
fn logdet_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let m = random_model(small_config(), 100 + seed);
        let y = gaussian(&[4, 4, 2], &mut rng, 1.0);
        let (_, analytic) = m.forward(&y).unwrap();
        let numeric = numerical_jacobian_logdet(&m, &y, 1e-5);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-12);
        assert!(rel < 1e-4, "seed {seed}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn identity_model_forward_is_reshaped_copy() {
    let m = FlowModel::identity(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = gaussian(&[4, 4, 2], &mut rng, 1.0);
    let (z, logdet) = m.forward(&y).unwrap();
    assert_eq!(logdet, 0.0);
    let mut a = flatten(&z);
    let mut b = y.data().to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
    assert_eq!(m.inverse_single(&z).unwrap(), y);
}

#[test]
fn default_flow_round_trip() {
    let cfg = FlowConfig::default();
    // Jitter of every triangular entry is kept small: large random
    // triangular factors at 48 channels are badly conditioned.
    let m = random_model_with(cfg.clone(), 7, 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let y = gaussian(&[cfg.height, cfg.width, cfg.channels], &mut rng, 0.5);
        let (z, _) = m.forward(&y).unwrap();
        assert_eq!(z.numel(), y.len());
        worst = worst.max(m.inverse_single(&z).unwrap().max_abs_diff(&y));
    }
    assert!(worst < 1e-8, "round-trip error {worst}");
}

#[test]
fn logdet_is_sum_of_layer_logdets() {
    let m = random_model(small_config(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = gaussian(&[4, 4, 2], &mut rng, 1.0);
    let (_, total) = m.forward(&y).unwrap();
    let layers = m.layer_logdets(&y).unwrap();
    assert_eq!(layers.len(), 3 * 2 * 2);
    let sum = layers.iter().fold(0.0, |s, (_, v)| s + v);
    assert_eq!(sum, total);
}

#[test]
fn squeeze_contributes_no_volume_change() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian(&[1, 4, 4, 2], &mut rng, 1.0);
    let s = squeeze_tensor(&x).unwrap();
    assert_eq!(unsqueeze_tensor(&s).unwrap(), x);
    // A permutation of coordinates: the multiset of values is unchanged.
    let mut a = s.data().to_vec();
    let mut b = x.data().to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn nll_gradient_wrt_input_and_params() {
    let mut m = random_model(small_config(), 31);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y = gaussian(&[1, 4, 4, 2], &mut rng, 1.0);
    let err = finite_diff_check(|g, v| m.nll_graph(g, v[0], false), std::slice::from_ref(&y), 1e-5).unwrap();
    assert!(err < 1e-4, "input gradient error {err}");

    let err = finite_diff_check_module(
        &mut m,
        |g: &mut Graph, model: &FlowModel| {
            let v = g.constant(y.clone());
            model.nll_graph(g, v, true)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "parameter gradient error {err}");
}

#[test]
fn actnorm_init_standardizes_first_layer() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut batch = gaussian(&[16, 4, 4, 2], &mut rng, 2.0);
    for v in batch.data_mut() {
        *v += 3.0;
    }
    let mut m = FlowModel::new(cfg, 1).unwrap();
    m.initialize(&batch).unwrap();
    // Recompute first-ActNorm output statistics from scratch.
    let sq = squeeze_tensor(&batch).unwrap();
    let first = &m.scales[0].steps[0].actnorm;
    let c = sq.last_dim();
    let rows = (sq.len() / c) as f64;
    for k in 0..c {
        let vals: Vec<f64> = sq
            .data()
            .chunks(c)
            .map(|r| r[k] * first.log_scale.value.data()[k].exp() + first.bias.value.data()[k])
            .collect();
        let mean = vals.iter().sum::<f64>() / rows;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows).sqrt();
        assert!(mean.abs() < 1e-6, "channel {k} mean {mean}");
        assert!((std - 1.0).abs() < 1e-4, "channel {k} std {std}");
    }
}

#[test]
fn sampling_is_deterministic_and_temperature_zero_is_mode() {
    let m = random_model(small_config(), 41);
    assert_eq!(m.sample(3, 0.7).unwrap(), m.sample(3, 0.7).unwrap());
    assert_ne!(m.sample(3, 0.7).unwrap(), m.sample(4, 0.7).unwrap());
    let mode = m.inverse_single(&m.zero_latent()).unwrap();
    assert_eq!(m.sample(1, 0.0).unwrap(), mode);
    assert_eq!(m.sample(2, 0.0).unwrap(), mode);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let m = random_model(small_config(), 51);
    let dir = tempfile::tempdir().unwrap();
    let manifest = m.save(dir.path(), "abc").unwrap();
    assert!(manifest.tensors.iter().any(|t| t.file == "0.1.coupling.w2.ten"));
    let (back, man) = FlowModel::load(dir.path()).unwrap();
    assert_eq!(man.config_hash, "abc");
    for (a, b) in m.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let y = Tensor::full(&[4, 4, 2], 0.3);
    assert_eq!(m.nll(&y).unwrap(), back.nll(&y).unwrap());

    let path = dir.path().join("0.0.actnorm.bias.ten");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        FlowModel::load(dir.path()),
        Err(bimal_core::Error::Corrupt { .. })
    ));
}
