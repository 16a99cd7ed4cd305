use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::gradcheck::{check_params, Tolerance, DEFAULT_STEP};

fn small_spec() -> ConvSpec {
    ConvSpec {
        input: [3, 16, 16],
        depth: 2,
        channels: 4,
        latent_dim: 6,
    }
}

fn random_obs(n: usize, spec: &ConvSpec, rng: &mut impl Rng) -> Tensor {
    let shape = [n, spec.input[0], spec.input[1], spec.input[2]];
    Tensor::from_fn(&shape, |_| rng.random::<f64>())
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

#[test]
fn fc_weights_orthogonal_and_biases_zero() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = Mlp::new(&mut store, "m", 7, 12, 3, &mut rng);
    for layer in &mlp.layers {
        let w = store.value(layer.weight).data();
        let (r, c) = (layer.in_dim, layer.out_dim);
        let k = r.min(c);
        for p in 0..k {
            for q in 0..k {
                let dot: f64 = if r <= c {
                    (0..c).map(|j| w[p * c + j] * w[q * c + j]).sum()
                } else {
                    (0..r).map(|i| w[i * c + p] * w[i * c + q]).sum()
                };
                assert!((dot - f64::from(u8::from(p == q))).abs() < 1e-8);
            }
        }
        assert!(store.value(layer.bias).data().iter().all(|&b| b == 0.0));
    }
}

#[test]
fn conv_kernels_are_delta_initialised() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trunk = ConvTrunk::new(&mut store, "t", small_spec(), &mut rng).unwrap();
    let dec = Decoder::new(&mut store, "d", small_spec(), &mut rng).unwrap();
    let kernels = trunk
        .layers
        .iter()
        .map(|l| l.kernels)
        .chain(dec.layers.iter().map(|l| l.kernels));
    for id in kernels {
        for (i, &v) in store.value(id).data().iter().enumerate() {
            if i % 9 != 4 {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn same_seed_bit_identical_parameters() {
    let build = || {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trunk = ConvTrunk::new(&mut store, "t", small_spec(), &mut rng).unwrap();
        Encoder::new(&mut store, "e", trunk, true, &mut rng).unwrap();
        CriticHead::new(&mut store, "c", 6, 2, 8, &mut rng);
        store
    };
    let (a, b) = (build(), build());
    for id in a.ids() {
        let x: Vec<u64> = a.value(id).data().iter().map(|v| v.to_bits()).collect();
        let y: Vec<u64> = b.value(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(x, y, "{}", a.name(id));
    }
}

#[test]
fn latents_lie_in_open_unit_interval() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = small_spec();
    let trunk = ConvTrunk::new(&mut store, "t", spec, &mut rng).unwrap();
    let enc = Encoder::new(&mut store, "e", trunk, false, &mut rng).unwrap();
    let mut g = Graph::new();
    let obs = g.constant(random_obs(4, &spec, &mut rng));
    let lat = enc.encode(&mut g, &store, obs, true, true, None).unwrap();
    assert_eq!(g.shape(lat.z), &[4, 6]);
    assert!(g.value(lat.z).data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn wrong_observation_shape_is_dimension_error() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trunk = ConvTrunk::new(&mut store, "t", small_spec(), &mut rng).unwrap();
    let enc = Encoder::new(&mut store, "e", trunk, false, &mut rng).unwrap();
    let mut g = Graph::new();
    let obs = g.constant(Tensor::zeros(&[1, 3, 17, 16]));
    let err = enc.encode(&mut g, &store, obs, true, true, None).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn detached_trunk_receives_no_gradient() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = small_spec();
    let trunk = ConvTrunk::new(&mut store, "t", spec, &mut rng).unwrap();
    let enc = Encoder::new(&mut store, "e", trunk, false, &mut rng).unwrap();
    let mut g = Graph::new();
    let obs = g.constant(random_obs(2, &spec, &mut rng));
    let lat = enc.encode(&mut g, &store, obs, false, true, None).unwrap();
    let sq = g.square(lat.z);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    store.accumulate_grads(&g);
    assert_eq!(store.grad_norm(&enc.trunk.params()), 0.0);
    assert!(store.grad_norm(&enc.head_params()) > 0.0);
}

#[test]
fn encoders_sharing_a_trunk_see_the_same_conv_activations() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = small_spec();
    let trunk = ConvTrunk::new(&mut store, "t", spec, &mut rng).unwrap();
    let critic = Encoder::new(&mut store, "ce", trunk.clone(), false, &mut rng).unwrap();
    let actor = Encoder::new(&mut store, "ae", trunk, false, &mut rng).unwrap();
    let x = random_obs(2, &spec, &mut rng);
    let mut g = Graph::new();
    let obs = g.constant(x);
    let a = critic.trunk.forward(&mut g, &store, obs, true).unwrap();
    let b = actor.trunk.forward(&mut g, &store, obs, true).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());

    // Updating the shared kernels is visible through both.
    let k = critic.trunk.layers[0].kernels;
    store.value_mut(k).data_mut()[4] += 1.0;
    assert_eq!(actor.trunk.layers[0].kernels, k);
}

#[test]
fn decoder_reproduces_observation_shape_for_capacity_grid() {
    for input in [[3, 16, 16], [9, 32, 32], [3, 33, 33]] {
        for depth in [2, 4, 6] {
            for channels in [16, 32] {
                let spec = ConvSpec {
                    input,
                    depth,
                    channels,
                    latent_dim: 50,
                };
                if spec.spatial_sizes().is_err() {
                    assert!(input[1] == 16 && depth == 6);
                    continue;
                }
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let trunk = ConvTrunk::new(&mut store, "t", spec, &mut rng).unwrap();
                let enc = Encoder::new(&mut store, "e", trunk, false, &mut rng).unwrap();
                let dec = Decoder::new(&mut store, "d", spec, &mut rng).unwrap();
                let mut g = Graph::new();
                let obs = g.constant(Tensor::full(&[1, input[0], input[1], input[2]], 0.3));
                let lat = enc.encode(&mut g, &store, obs, true, true, None).unwrap();
                assert_eq!(g.shape(lat.z), &[1, 50]);
                let rec = dec.forward(&mut g, &store, lat.z, true).unwrap();
                assert_eq!(g.shape(rec), &[1, input[0], input[1], input[2]]);
            }
        }
    }
}

#[test]
fn zero_noise_action_is_mean_action() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let actor = ActorHead::new(&mut store, "pi", 5, 16, 3, &mut rng);
    let mut g = Graph::new();
    let z = g.constant(normal(&[4, 5], &mut rng));
    let out = actor.forward(&mut g, &store, z, &Tensor::zeros(&[4, 3]), true).unwrap();
    assert_eq!(g.value(out.action).data(), g.value(out.mean_action).data());
    let noisy = actor.forward(&mut g, &store, z, &normal(&[4, 3], &mut rng), true).unwrap();
    assert!(g.value(noisy.action).data().iter().all(|a| a.abs() < 1.0));
    assert_eq!(g.shape(noisy.log_prob), &[4]);
}

#[test]
fn log_prob_matches_monte_carlo_density() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let actor = ActorHead::new(&mut store, "pi", 2, 8, 1, &mut rng);
    let zval = Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap();
    let probes = [-0.3, 0.0, 0.4];

    let mut g = Graph::new();
    let z = g.constant(zval);
    let mut expected = Vec::new();
    let (mut mu, mut std) = (0.0, 0.0);
    for eps in probes {
        let out = actor
            .forward(&mut g, &store, z, &Tensor::new(&[1, 1], vec![eps]).unwrap(), false)
            .unwrap();
        mu = g.value(out.mu).item();
        std = g.value(out.log_std).item().exp();
        expected.push((g.value(out.action).item(), g.value(out.log_prob).item().exp()));
    }

    let n = 1_000_000;
    let width = 0.04;
    let mut counts = vec![0usize; probes.len()];
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let a = (mu + std * e).tanh();
        for (c, &(centre, _)) in counts.iter_mut().zip(&expected) {
            if (a - centre).abs() < width / 2.0 {
                *c += 1;
            }
        }
    }
    for (c, &(centre, density)) in counts.iter().zip(&expected) {
        let estimate = *c as f64 / (n as f64 * width);
        let rel = (estimate - density).abs() / density;
        assert!(rel < 0.02, "a={centre}: histogram {estimate}, analytic {density}");
    }
}

#[test]
fn log_prob_is_finite_at_saturation() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let actor = ActorHead::new(&mut store, "pi", 2, 8, 2, &mut rng);
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(&[1, 2], vec![50.0, -50.0]).unwrap());
    let noise = Tensor::new(&[1, 2], vec![40.0, -40.0]).unwrap();
    let out = actor.forward(&mut g, &store, z, &noise, true).unwrap();
    assert!(g.value(out.log_prob).all_finite());
    assert!(g.value(out.log_std).data().iter().all(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v)));
}

#[test]
fn polyak_examples() {
    let mut store = ParamStore::new();
    let online = store.add("o", Tensor::full(&[3], 2.0));
    let target = store.add("t", Tensor::zeros(&[3]));
    let pairs = param_pairs(&[online], &[target]);
    store.polyak(&pairs, 0.0).unwrap();
    assert_eq!(store.value(target).data(), &[0.0; 3]);
    store.polyak(&pairs, 0.5).unwrap();
    assert_eq!(store.value(target).data(), &[1.0; 3]);
    store.polyak(&pairs, 1.0).unwrap();
    assert_eq!(store.value(target).data(), &[2.0; 3]);
}

#[test]
fn encoder_critic_composite_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spec = small_spec();
    let trunk = ConvTrunk::new(&mut store, "t", spec, &mut rng).unwrap();
    let enc = Encoder::new(&mut store, "e", trunk, false, &mut rng).unwrap();
    let critic = CriticHead::new(&mut store, "c", spec.latent_dim, 2, 8, &mut rng);
    // Random biases so no ReLU sits exactly on its kink.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("bias") {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let obs = random_obs(2, &spec, &mut rng);
    let act = Tensor::new(&[2, 2], vec![0.3, -0.7, 0.9, 0.1]).unwrap();

    let loss = |s: &ParamStore, g: &mut Graph| {
        let o = g.constant(obs.clone());
        let a = g.constant(act.clone());
        let lat = enc.encode(g, s, o, true, true, None).unwrap();
        let (q1, q2) = critic.forward(g, s, lat.z, a, true).unwrap();
        let d = g.sub(q1, q2).unwrap();
        let sq = g.square(d);
        let s1 = g.sum(sq);
        let s2 = g.sum(q1);
        g.add(s1, s2).unwrap()
    };
    let mut g = Graph::new();
    let l = loss(&store, &mut g);
    g.backward(l).unwrap();
    store.accumulate_grads(&g);

    let ids: Vec<ParamId> = enc.params().into_iter().chain(critic.params()).collect();
    let report = check_params(&store, &ids, 6, DEFAULT_STEP, Tolerance::new(1e-4, 1e-7), |s| {
        let mut g = Graph::new();
        let l = loss(s, &mut g);
        g.value(l).item()
    });
    assert!(report.passed(), "{:?}", report.failures);
    assert!(report.checked > 50);
}
