use hdrcm_core::image::sample_normal;
use hdrcm_core::{ImageF, SeededRng};
use hdrcm_nn::{Checkpoint, ConsistencyNet, EmaState, NetConfig};
use proptest::prelude::*;

/// Frozen from tests/oracles/param_count.py.
const DEFAULT_PARAMS: usize = 1_240_067;
const TINY_PARAMS: usize = 13_435;

fn perturbed(cfg: &NetConfig, seed: u64, scale: f64) -> ConsistencyNet<f64> {
    let net = ConsistencyNet::<f64>::init(cfg, &mut SeededRng::new(seed)).unwrap();
    let mut p = net.params().clone();
    let mut rng = SeededRng::new(seed ^ 0xabc);
    p.params
        .iter_mut()
        .for_each(|t| t.data.iter_mut().for_each(|v| *v += scale * rng.normal()));
    ConsistencyNet::with_params(cfg, p).unwrap()
}

#[test]
fn parameter_counts_match_closed_form() {
    let net = ConsistencyNet::<f32>::init(&NetConfig::default(), &mut SeededRng::new(0)).unwrap();
    assert_eq!(net.num_params(), DEFAULT_PARAMS);
    let tiny = ConsistencyNet::<f32>::init(&NetConfig::tiny(), &mut SeededRng::new(0)).unwrap();
    assert_eq!(tiny.num_params(), TINY_PARAMS);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = SeededRng::new(0);
    for cfg in [
        NetConfig { base_channels: 0, ..NetConfig::tiny() },
        NetConfig { time_embed_dim: 7, ..NetConfig::tiny() },
        NetConfig { in_channels: 3, ..NetConfig::tiny() },
    ] {
        assert!(ConsistencyNet::<f32>::init(&cfg, &mut rng).is_err());
    }
}

#[test]
fn output_shapes_for_dyadic_sizes() {
    let cfg = NetConfig {
        base_channels: 8,
        blocks_per_stage: 1,
        time_embed_dim: 16,
        ..NetConfig::default()
    };
    let net = ConsistencyNet::<f32>::init(&cfg, &mut SeededRng::new(1)).unwrap();
    for size in [64, 96] {
        let x = ImageF::filled(size, size, 3, 0.3);
        let out = net.raw_forward(&x, 0.5, &x).unwrap();
        assert_eq!(out.shape(), (size, size, 3));
    }
}

#[test]
fn any_base_width_builds() {
    for base in [3, 5, 12, 20] {
        let cfg = NetConfig { base_channels: base, ..NetConfig::tiny() };
        let net = ConsistencyNet::<f32>::init(&cfg, &mut SeededRng::new(4)).unwrap();
        let x = ImageF::filled(8, 8, 3, 0.3);
        assert_eq!(net.raw_forward(&x, 0.5, &x).unwrap().shape(), (8, 8, 3));
    }
}

#[test]
fn forward_is_deterministic_and_time_sensitive() {
    let net = perturbed(&NetConfig::tiny(), 2, 0.1);
    let mut rng = SeededRng::new(3);
    let x = sample_normal(&mut rng, 8, 8, 3);
    let y = ImageF::from_fn(8, 8, 3, |_, _, _| rng.uniform());
    let a = net.raw_forward(&x, 0.4, &y).unwrap();
    let b = net.raw_forward(&x, 0.4, &y).unwrap();
    assert_eq!(a, b);
    let c = net.raw_forward(&x, 0.41, &y).unwrap();
    let diff = a.zip_map(&c, |p, q| (p - q).abs()).unwrap().max();
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn forward_calls_are_counted() {
    let net = ConsistencyNet::<f32>::init(&NetConfig::tiny(), &mut SeededRng::new(0)).unwrap();
    let x = ImageF::filled(12, 12, 3, 0.5);
    net.consistency_out(&x, 1.0, &x, 0.002).unwrap();
    assert_eq!(net.forward_calls(), 1);
    net.raw_forward(&x, 0.5, &x).unwrap();
    assert_eq!(net.forward_calls(), 2);
    net.reset_forward_calls();
    assert_eq!(net.forward_calls(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// f(x, eps_t, y) = x for any parameters: c_skip(eps_t) = 1 and
    /// c_out(eps_t) = 0 exactly.
    #[test]
    fn boundary_identity_for_random_parameters(seed in 0u64..1000, scale in 0.01f64..2.0, h in 1usize..20, w in 1usize..20) {
        let net = perturbed(&NetConfig::tiny(), seed, scale);
        let mut rng = SeededRng::new(seed + 7);
        let x = sample_normal(&mut rng, h, w, 3);
        let y = ImageF::from_fn(h, w, 3, |_, _, _| rng.uniform());
        let out = net.consistency_out(&x, 0.002, &y, 0.002).unwrap();
        prop_assert_eq!(out, x);
    }
}

#[test]
fn checkpoint_round_trip_restores_network() {
    let cfg = NetConfig::tiny();
    let net = perturbed(&cfg, 5, 0.3);
    let ema = EmaState::new(net.params(), 0.999).unwrap();
    let mut ck = Checkpoint::default();
    ck.meta.push_str(&cfg.to_kv());
    ck.push_params("theta", net.params());
    ck.push_params("ema", &ema.shadow);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(back.meta_get("base_channels"), Some("4"));
    let restored = back.params("theta", net.params()).unwrap();
    for (a, b) in restored.params.iter().zip(&net.params().params) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x, f64::from(*y as f32));
        }
    }
}
