use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::environment::{ScenarioConfig, StakeholderWeights, N_CONTEXT_FEATURES};
use crate::numerics::{grad_check, OptimizerKind};
use crate::test_support::uniform_chi_square_p;
use crate::training::{ChargingEnv, Environment, Transition};

/// Observations from a short random rollout on the desk scenario.
fn observations(seed: u64, n: usize) -> Vec<Observation> {
    let mut env = ChargingEnv::new(&ScenarioConfig::desk(), true, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(seed as usize).unwrap();
    let mut out = vec![obs.clone()];
    while out.len() < n {
        let step = env.step(rng.random_range(0..env.n_templates()), 0.5).unwrap();
        obs = if step.done { env.reset(out.len()).unwrap() } else { step.next };
        out.push(obs.clone());
    }
    out
}

fn entity_width(obs: &Observation) -> usize {
    obs.state.n_base() + obs.state.n_spatial()
}

fn small_config(entity: usize) -> QNetConfig {
    QNetConfig {
        n_heads: 5,
        n_templates: 24,
        embed_width: 3,
        trunk_width: 6,
        head_hidden: 4,
        attention: Some(AttentionShape { heads: 2, d_k: 2, d_v: 2, d_model: 3 }),
        gnn: Some(GnnShape { width: 3, layers: 2 }),
        latent_width: 2,
        entity_width: entity,
    }
}

fn initial_w() -> Vec<f64> {
    StakeholderWeights::initial().as_array().to_vec()
}

/// Every parameter drawn from U(−0.5, 0.5) so no unit sits on a ReLU kink by construction.
fn randomized(config: QNetConfig, rng: &mut ChaCha8Rng) -> QNetParams {
    let mut p = QNetParams::zeros(config).unwrap();
    let flat: Vec<f64> = (0..p.param_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
    p.assign(&flat).unwrap();
    p
}

fn constant_heads(config: QNetConfig, values: &[f64]) -> QNetParams {
    let mut p = QNetParams::zeros(config).unwrap();
    for (h, v) in p.heads.iter_mut().zip(values) {
        h.out.bias[0] = *v;
    }
    p
}

#[test]
fn zero_weights_give_the_output_bias() {
    let obs = observations(0, 1);
    let mut p = QNetParams::zeros(QNetConfig::cama(24, entity_width(&obs[0]), 8)).unwrap();
    for h in &mut p.heads {
        h.out.bias[0] = 0.7;
    }
    let z = vec![0.3; 8];
    for head in 0..5 {
        let q = q_values(&obs[0].input(&z), &p, head).unwrap();
        assert_eq!(q.len(), 24);
        assert!(q.iter().all(|v| *v == 0.7));
    }
    assert!(matches!(q_values(&obs[0].input(&z), &p, 5), Err(Error::Argument(_))));
}

#[test]
fn outputs_cover_every_template_and_ignore_scratch_fields() {
    let obs = observations(1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = QNetParams::init(QNetConfig::cama(24, entity_width(&obs[0]), 8), &mut rng).unwrap();
    let z = vec![0.1; 8];
    let mut other = obs[0].clone();
    other.state.complexity = 0.99;
    other.state.t += 17;
    for head in 0..5 {
        let a = q_values(&obs[0].input(&z), &p, head).unwrap();
        let b = q_values(&other.input(&z), &p, head).unwrap();
        assert_eq!(a.len(), p.n_templates());
        assert_eq!(a, b);
    }
}

#[test]
fn missing_inputs_are_reported() {
    let obs = observations(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = QNetParams::init(QNetConfig::cama(24, entity_width(&obs[0]), 8), &mut rng).unwrap();
    let z = vec![0.0; 8];
    let no_graph = QInput { state: &obs[0].state, graph: None, latent: &z };
    assert!(matches!(q_values(&no_graph, &p, 0), Err(Error::Argument(_))));
    assert!(matches!(q_values(&obs[0].input(&[0.0; 3]), &p, 0), Err(Error::Shape { .. })));
    let mut bad = QNetConfig::cama(24, 1, 8);
    bad.trunk_width = 0;
    assert!(matches!(QNetParams::init(bad, &mut rng), Err(Error::Config { .. })));
}

#[test]
fn q_total_examples() {
    let obs = observations(3, 1);
    let z = vec![0.2; 8];
    let input = obs[0].input(&z);
    let cfg = QNetConfig::cama(24, entity_width(&obs[0]), 8);

    let consts = constant_heads(cfg.clone(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    // 0.25·1 + 0.2·2 + 0.2·3 + 0.2·4 + 0.15·5
    let q = q_total(&input, &consts, &initial_w()).unwrap();
    assert!(q.iter().all(|v| (v - 2.8).abs() < 1e-12), "{q:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = QNetParams::init(cfg.clone(), &mut rng).unwrap();
    for k in 0..5 {
        let one_hot = StakeholderWeights::one_hot(k).unwrap().as_array();
        assert_eq!(q_total(&input, &p, &one_hot).unwrap(), q_values(&input, &p, k).unwrap());
    }

    let mut same = p.clone();
    for i in 1..5 {
        same.heads[i] = same.heads[0].clone();
    }
    let single = q_values(&input, &same, 0).unwrap();
    for w in [initial_w(), vec![0.1, 0.1, 0.1, 0.6, 0.1]] {
        let q = q_total(&input, &same, &w).unwrap();
        for (a, b) in q.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    assert!(matches!(q_total(&input, &p, &[0.5, 0.5, 0.5, 0.0, 0.0]), Err(Error::Invariant(_))));
    assert!(matches!(q_total(&input, &p, &[1.0]), Err(Error::Shape { .. })));
}

#[test]
fn epsilon_examples() {
    let p = ExplorationParams { eps_base: 0.8, lambda_t: 0.3, lambda_c: 0.7, eps_min: 0.0 };
    assert_eq!(epsilon_ctx(0, 0.0, &p), 0.8);
    let flat = ExplorationParams { lambda_t: 0.0, lambda_c: 0.0, ..p };
    for (t, c) in [(0, 0.0), (10, 0.5), (1000, 1.0)] {
        assert_eq!(epsilon_ctx(t, c, &flat), 0.8);
    }
    let halving = ExplorationParams { eps_base: 0.8, lambda_t: 0.0, lambda_c: std::f64::consts::LN_2, eps_min: 0.0 };
    assert!((epsilon_ctx(0, 1.0, &halving) - 0.4).abs() < 1e-15);
    let floored = ExplorationParams { eps_min: 0.05, ..p };
    assert_eq!(epsilon_ctx(10_000, 1.0, &floored), 0.05);
    assert!(ExplorationParams { eps_base: 1.5, ..p }.validate().is_err());
    assert!(ExplorationParams { lambda_c: -1.0, ..p }.validate().is_err());
}

#[test]
fn select_action_examples() {
    let obs = observations(4, 1);
    let z = vec![0.0; 8];
    let input = obs[0].input(&z);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = QNetParams::init(QNetConfig::cama(24, entity_width(&obs[0]), 8), &mut rng).unwrap();
    let w = initial_w();
    let best = argmax(&q_total(&input, &p, &w).unwrap());
    for _ in 0..20 {
        assert_eq!(select_action(&input, &p, &w, 0.0, &mut rng).unwrap(), (best, true));
    }

    let mut shifted = p.clone();
    for h in &mut shifted.heads {
        h.out.bias[0] += 123.0;
    }
    assert_eq!(select_action(&input, &shifted, &w, 0.0, &mut rng).unwrap().0, best);

    let mut counts = vec![0usize; 24];
    for _ in 0..10_000 {
        let (a, greedy) = select_action(&input, &p, &w, 1.0, &mut rng).unwrap();
        assert!(!greedy);
        counts[a] += 1;
    }
    let pval = uniform_chi_square_p(&counts);
    assert!(pval > 0.01, "chi-square p = {pval}");
    assert!(select_action(&input, &p, &w, 1.5, &mut rng).is_err());
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0; 4]), 0);
    assert_eq!(argmax(&[-1.0]), 0);
}

#[test]
fn td_examples() {
    let obs = observations(5, 1);
    let z = vec![0.0; 8];
    let input = obs[0].input(&z);
    let cfg = QNetConfig::cama(24, entity_width(&obs[0]), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = QNetParams::init(cfg.clone(), &mut rng).unwrap();
    let w = initial_w();
    assert_eq!(td_target(1.25, &input, &p, &w, 0.9, true).unwrap(), 1.25);
    assert_eq!(td_target(1.25, &input, &p, &w, 0.0, false).unwrap(), 1.25);
    let c = constant_heads(cfg, &[3.0; 5]);
    let y = td_target(1.0, &input, &c, &w, 0.9, false).unwrap();
    assert!((y - (1.0 + 0.9 * 3.0)).abs() < 1e-12);
    assert_eq!(td_error(2.5, 2.5), 0.0);
    assert_eq!(td_error(1.0, 0.0), 1.0);
}

#[test]
fn head_targets_recombine_to_the_coordinated_target() {
    let obs = observations(6, 2);
    let z = vec![0.4; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = QNetParams::init(QNetConfig::cama(24, entity_width(&obs[0]), 8), &mut rng).unwrap();
    let w = initial_w();
    for gamma_coord in [0.0, 0.3, 1.0] {
        for done in [false, true] {
            let rewards: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r_coord: f64 = rewards.iter().zip(&w).map(|(r, w)| r * w).sum();
            let y = head_targets(&rewards, r_coord, &obs[1].input(&z), &p, &w, 0.9, gamma_coord, done).unwrap();
            let combined: f64 = y.iter().zip(&w).map(|(y, w)| y * w).sum();
            let td = td_target(r_coord, &obs[1].input(&z), &p, &w, 0.9, done).unwrap();
            assert!((combined - td).abs() < 1e-12, "{combined} vs {td}");
        }
    }
}

fn transitions(obs: &[Observation], rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let w = StakeholderWeights::initial();
    obs.windows(2)
        .map(|pair| {
            let rewards: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            Transition::new(
                std::sync::Arc::new(pair[0].clone()),
                rng.random_range(0..24),
                rewards,
                &w,
                std::sync::Arc::new(pair[1].clone()),
                rng.random_bool(0.25),
            )
        })
        .collect()
}

fn encoder_for(obs: &Observation, d_z: usize, rng: &mut ChaCha8Rng) -> ContextEncoder {
    ContextEncoder::init(obs.state.dim(), 6, d_z, rng)
}

#[test]
fn batch_update_at_zero_rate_reports_loss_only() {
    let obs = observations(7, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = small_config(entity_width(&obs[0]));
    let mut online = QNetParams::init(cfg.clone(), &mut rng).unwrap();
    let target = QNetParams::init(cfg, &mut rng).unwrap();
    let enc = encoder_for(&obs[0], 2, &mut rng);
    let batch = transitions(&obs, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let before = online.clone();
    let params = UpdateParams { gamma: 0.9, gamma_coord: 0.5, max_grad_norm: None };
    let loss = batch_update(&refs, &mut online, &target, Some(&enc), &initial_w(), &params, &mut Optimizer::new(OptimizerKind::Adam, 0.0)).unwrap();
    assert!(loss > 0.0 && loss.is_finite());
    assert_eq!(online, before);
    let mut sgd = Optimizer::new(OptimizerKind::Sgd, 1e-2);
    batch_update(&refs, &mut online, &target, Some(&enc), &initial_w(), &params, &mut sgd).unwrap();
    assert_ne!(online, before);
    assert!(batch_update(&[], &mut online, &target, Some(&enc), &initial_w(), &params, &mut sgd).is_err());
}

#[test]
fn exact_targets_give_zero_loss_and_gradient() {
    let obs = observations(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = QNetParams::init(small_config(entity_width(&obs[0])), &mut rng).unwrap();
    let z = vec![0.1, -0.2];
    let samples: Vec<Sample> = obs
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let input = o.input(&z);
            let targets = p.evaluate(&input).unwrap().iter().map(|q| q[k]).collect();
            Sample { input, action: k, targets }
        })
        .collect();
    let (loss, grads) = p.loss_and_grad(&samples).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.flatten().iter().all(|g| *g == 0.0));
}

/// Central differences of the batch loss over every parameter of a small
/// five-head network with all pathways enabled.
///
/// Parameters are redrawn until every ReLU pre-activation on the batch is at
/// least `100 h` from zero, so the loss is differentiable across the stencil.
fn batch_gradient_error(seed: u64, obs: &[Observation]) -> f64 {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = randomized(small_config(entity_width(&obs[0])), &mut rng);
    let w = initial_w();
    let latents: Vec<Vec<f64>> = obs.iter().map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut samples = Vec::new();
    for k in 0..4 {
        let rewards: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r_coord = rewards.iter().zip(&w).map(|(r, w)| r * w).sum();
        let targets = head_targets(&rewards, r_coord, &obs[k + 1].input(&latents[k + 1]), &target, &w, 0.9, 0.5, false).unwrap();
        samples.push(Sample { input: obs[k].input(&latents[k]), action: rng.random_range(0..24), targets });
    }
    let p = loop {
        let p = randomized(small_config(entity_width(&obs[0])), &mut rng);
        let margin = samples
            .iter()
            .map(|s| p.relu_margin(&s.input, s.action).unwrap())
            .fold(f64::INFINITY, f64::min);
        if margin > 100.0 * STEP {
            break p;
        }
    };
    let (_, grads) = p.loss_and_grad(&samples).unwrap();
    let mut probe = p.clone();
    let report = grad_check(
        |theta| {
            probe.assign(theta).unwrap();
            probe.loss_and_grad(&samples).unwrap().0
        },
        &p.flatten(),
        &grads.flatten(),
        STEP,
    )
    .unwrap();
    report.max_relative_error
}

#[test]
fn batch_loss_gradient_matches_finite_differences() {
    let obs = observations(9, 40);
    for seed in 0..100u64 {
        let start = (seed as usize * 7) % 35;
        let err = batch_gradient_error(seed, &obs[start..start + 5]);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn q_total_is_linear_in_the_weights() {
    let obs = observations(10, 1);
    let z = vec![0.0; 8];
    let input = obs[0].input(&z);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = QNetParams::init(QNetConfig::cama(24, entity_width(&obs[0]), 8), &mut rng).unwrap();
    for _ in 0..50 {
        let a: f64 = rng.random_range(0.0..1.0);
        let w1 = random_weights(&mut rng);
        let w2 = random_weights(&mut rng);
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let (q1, q2, qm) = (q_total(&input, &p, &w1).unwrap(), q_total(&input, &p, &w2).unwrap(), q_total(&input, &p, &mix).unwrap());
        for k in 0..24 {
            assert!((qm[k] - (a * q1[k] + (1.0 - a) * q2[k])).abs() < 1e-12);
        }
    }
}

fn random_weights(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn target_network_is_frozen_between_syncs() {
    let obs = observations(11, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = small_config(entity_width(&obs[0]));
    let mut online = QNetParams::init(cfg, &mut rng).unwrap();
    let target = online.clone();
    let enc = encoder_for(&obs[0], 2, &mut rng);
    let batch = transitions(&obs, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let z = enc.encode_vector(&obs[4].state.to_vector()).unwrap();
    let w = initial_w();
    let y0 = td_target(0.3, &obs[4].input(&z), &target, &w, 0.9, false).unwrap();
    let params = UpdateParams { gamma: 0.9, gamma_coord: 0.5, max_grad_norm: Some(10.0) };
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2);
    for _ in 0..5 {
        batch_update(&refs, &mut online, &target, Some(&enc), &w, &params, &mut opt).unwrap();
        assert_eq!(td_target(0.3, &obs[4].input(&z), &target, &w, 0.9, false).unwrap(), y0);
    }
    assert_ne!(online, target);
}

#[test]
fn analytic_parameter_count_matches_layout() {
    for cfg in [QNetConfig::cama(24, 95, 8), QNetConfig::dqn(24, 95), small_config(11)] {
        let p = QNetParams::zeros(cfg.clone()).unwrap();
        assert_eq!(cfg.param_count(), Some(p.param_count()));
    }
    let shape = EncoderShape { n_ctx: 17, hidden: 5, d_z: 3 };
    let enc = ContextEncoder::init(17, 5, 3, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(shape.param_count(), Some(enc.param_count()));
}

fn model(seed: u64, obs: &Observation) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = QNetParams::init(QNetConfig::cama(24, entity_width(obs), 8), &mut rng).unwrap();
    let encoder = ContextEncoder::init(obs.state.dim(), 16, 8, &mut rng);
    Model {
        network,
        encoder: Some(encoder),
        adaptation: AdaptationParams::init(obs.state.dim(), 96.0, &mut rng),
        weights: initial_w(),
    }
}

#[test]
fn checkpoint_round_trip_reproduces_q_values() {
    let obs = observations(12, 3);
    let m = model(12, &obs[0]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, m);
    for o in &obs {
        let (za, zb) = (m.latent(o).unwrap(), loaded.latent(o).unwrap());
        let a = q_total(&o.input(&za), &m.network, &m.weights).unwrap();
        let b = q_total(&o.input(&zb), &loaded.network, &loaded.weights).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert_eq!(m.act(o).unwrap(), loaded.act(o).unwrap());
    }
    let cp = m.to_checkpoint();
    assert_eq!(cp.format, "camac-checkpoint");
    assert_eq!(cp.version, 1);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let obs = observations(13, 1);
    let good = model(13, &obs[0]).to_checkpoint();
    let cases: Vec<Box<dyn Fn(&mut Checkpoint)>> = vec![
        Box::new(|c| c.format = "other".into()),
        Box::new(|c| c.version = 2),
        Box::new(|c| {
            c.values.pop();
        }),
        Box::new(|c| c.values[0] = f64::NAN),
        Box::new(|c| c.layout[0].0 = "renamed".into()),
        Box::new(|c| c.weights = vec![0.5, 0.5, 0.5, 0.0, 0.0]),
        Box::new(|c| c.network.trunk_width = usize::MAX / 2),
        Box::new(|c| c.encoder = None),
    ];
    for (k, corrupt) in cases.iter().enumerate() {
        let mut cp = good.clone();
        corrupt(&mut cp);
        assert!(Model::from_checkpoint(cp).is_err(), "case {k} accepted");
    }
    assert!(Model::from_json("{").is_err());
    assert!(Model::from_json("[]").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dqn_is_blind_to_context(seed in 0u64..1000, features in prop::collection::vec(-1.0f64..1.0, N_CONTEXT_FEATURES)) {
        let obs = observations(seed % 7, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = QNetParams::init(QNetConfig::dqn(24, entity_width(&obs[0])), &mut rng).unwrap();
        let mut mutated = obs[0].state.clone();
        mutated.set_context_features(&features.clone().try_into().unwrap());
        let a = p.evaluate(&QInput { state: &obs[0].state, graph: None, latent: &[] }).unwrap();
        let b = p.evaluate(&QInput { state: &mutated, graph: None, latent: &[] }).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn argmax_survives_monotone_transforms(v in prop::collection::vec(-50.0f64..50.0, 1..30), scale in 0.01f64..10.0, shift in -5.0f64..5.0) {
        let best = argmax(&v);
        let affine: Vec<f64> = v.iter().map(|x| scale * x + shift).collect();
        let cubed: Vec<f64> = v.iter().map(|x| x.powi(3)).collect();
        prop_assert_eq!(argmax(&affine), best);
        prop_assert_eq!(argmax(&cubed), best);
    }
}

