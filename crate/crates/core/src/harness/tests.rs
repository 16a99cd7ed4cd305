use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::envs::Task;
use crate::objectives::AeVariant;
use crate::tensor::Tensor;

fn tiny(mode: AgentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.experiment.mode = mode;
    c.experiment.steps = 30;
    c.experiment.seed_steps = 8;
    c.experiment.batch_size = 4;
    c.experiment.eval_interval = 10;
    c.experiment.eval_episodes = 2;
    c.experiment.log_interval = 5;
    c.experiment.pretrain_steps = 3;
    c.experiment.iter_n = (mode == AgentKind::SacVaeIter).then_some(Refresh::Every(3));
    c.net.hidden = 16;
    c.net.latent_dim = 4;
    c.net.conv_depth = 2;
    c.net.conv_channels = 4;
    c.env.render_size = 16;
    c.env.episode_len = 40;
    c.replay.capacity = 1000;
    c
}

#[test]
fn seed_collect_is_uniform_and_deterministic() {
    let cfg = tiny(AgentKind::SacState).env.env_config(2);
    let collect = || {
        let mut env = Env::new(cfg.clone()).unwrap();
        let mut buf = ReplayBuffer::new(layout_for(&cfg), 2000, 0).unwrap();
        seed_collect(&mut env, &mut buf, 1000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        buf
    };
    let (a, b) = (collect(), collect());
    assert_eq!(a.len(), 1000);
    assert!(a.same_contents(&b));
    let actions: Vec<f64> = a.iter().map(|t| t.action[0]).collect();
    let (mean, _) = mean_std(&actions);
    // Uniform on [-1, 1] has variance 1/3.
    let sigma = (1.0 / 3.0 / 1000.0_f64).sqrt();
    assert!(mean.abs() < 3.0 * sigma, "{mean}");
    assert!(actions.iter().all(|a| a.abs() <= 1.0));
}

#[test]
fn update_counts_follow_the_ledger() {
    for mode in [AgentKind::SacState, AgentKind::SacPixel, AgentKind::SacAe, AgentKind::SacVaeJoint] {
        let cfg = tiny(mode);
        let run = run_training(&cfg, 0, None).unwrap();
        let e = cfg.experiment.steps;
        let joint = cfg.ae_variant() != AeVariant::None;
        assert_eq!(run.env_steps, e);
        assert_eq!(
            run.counts,
            UpdateCounts {
                critic: e,
                actor: e / 2,
                target: e / 2,
                ae: if joint { e } else { 0 },
            },
            "{mode}"
        );
    }
}

#[test]
fn iterative_schedule_counts() {
    let mut cfg = tiny(AgentKind::SacVaeIter);
    let (e, s, p) = (cfg.experiment.steps, cfg.experiment.seed_steps, cfg.experiment.pretrain_steps);
    cfg.experiment.iter_n = Some(Refresh::Never);
    assert_eq!(run_training(&cfg, 0, None).unwrap().counts.ae, p);
    cfg.experiment.iter_n = Some(Refresh::Every(1));
    assert_eq!(run_training(&cfg, 0, None).unwrap().counts.ae, p + (e - s));
}

#[test]
fn iterative_encoder_changes_only_at_refresh_boundaries() {
    let cfg = tiny(AgentKind::SacVaeIter);
    let (s, n) = (cfg.experiment.seed_steps, 3);
    let mut tr = Trainer::new(&cfg, 1).unwrap();
    let mut hash = tr.agent.encoder_hash();
    for _ in 0..cfg.experiment.steps {
        tr.advance().unwrap();
        let t = tr.env_steps();
        let boundary = t == s || (t > s && (t - s) % n == 0);
        let h = tr.agent.encoder_hash();
        assert_eq!(h != hash, boundary, "t={t}");
        hash = h;
    }
}

#[test]
fn pixel_mode_never_touches_decoder_and_blocked_actor_leaves_trunk() {
    let cfg = tiny(AgentKind::SacPixel);
    let run = run_training(&cfg, 0, None).unwrap();
    assert!(run.agent.decoder_params().is_empty());
    let norms: Vec<f64> = run.records.iter().filter_map(|r| r.grad_norm_enc_actor).collect();
    assert!(!norms.is_empty());
    assert!(norms.iter().all(|&v| v == 0.0));

    let mut open = cfg.clone();
    open.experiment.block_actor_grads = false;
    let run = run_training(&open, 0, None).unwrap();
    assert!(run.records.iter().filter_map(|r| r.grad_norm_enc_actor).any(|v| v > 0.0));
}

#[test]
fn runs_are_bit_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(AgentKind::SacAe);
    let a = run_training(&cfg, 3, Some(&dir.path().join("a"))).unwrap();
    let b = run_training(&cfg, 3, Some(&dir.path().join("b"))).unwrap();
    let read = |r: &RunResult| std::fs::read(r.run_dir.as_ref().unwrap().join(METRICS_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), a.metrics_jsonl().into_bytes());
    assert_eq!(a.evals.len(), 3);
    let c = run_training(&cfg, 4, None).unwrap();
    assert_ne!(a.metrics_jsonl(), c.metrics_jsonl());
}

#[test]
fn run_directory_holds_config_echo_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(AgentKind::SacAe);
    cfg.experiment.steps = 0;
    let run = run_training(&cfg, 7, Some(dir.path())).unwrap();
    assert!(run.evals.is_empty() && run.records.is_empty());
    let rd = run.run_dir.unwrap();
    assert_eq!(rd, dir.path().join(cfg.run_id(7)));
    let echo = ExperimentConfig::load(&rd.join("config.toml")).unwrap();
    assert_eq!(echo.experiment.seeds, vec![7]);
    assert_eq!(echo, cfg.with_seed(7));
    let mut agent = Agent::new(&cfg, 99).unwrap();
    agent.load_checkpoint(&rd.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(agent.encoder_hash(), run.agent.encoder_hash());
}

#[test]
fn numerical_abort_writes_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(AgentKind::SacState);
    let mut tr = Trainer::new(&cfg, 0).unwrap();
    let bias = *tr.agent.critic.params().last().unwrap();
    tr.agent.store.value_mut(bias).data_mut()[0] = f64::NAN;
    let id = tr.run_id();
    let err = tr.run(Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Numerical { step: 8, .. }), "{err}");
    let text = std::fs::read_to_string(dir.path().join(id).join(METRICS_FILE)).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["abort"]["loss"], "critic");
    assert_eq!(last["abort"]["step"], 8);
}

#[test]
fn distractors_leave_scripted_interaction_unchanged() {
    let mut clean = tiny(AgentKind::SacPixel);
    clean.experiment.steps = 6;
    let mut noisy = clean.clone();
    noisy.env.distractors = true;
    let (a, b) = (run_training(&clean, 5, None).unwrap(), run_training(&noisy, 5, None).unwrap());
    let pairs: Vec<_> = a.buffer.iter().zip(b.buffer.iter()).collect();
    assert_eq!(pairs.len(), 6);
    for (x, y) in pairs {
        assert_eq!(x.action, y.action);
        assert_eq!(x.state, y.state);
        assert_eq!(x.reward.to_bits(), y.reward.to_bits());
    }
}

fn frozen_buffer(cfg: &ExperimentConfig, n: usize) -> ReplayBuffer {
    let env_cfg = cfg.env.env_config(11);
    let mut buf = ReplayBuffer::new(layout_for(&env_cfg), n, 0).unwrap();
    let mut env = Env::new(env_cfg).unwrap();
    seed_collect(&mut env, &mut buf, n, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    buf.freeze();
    buf
}

#[test]
fn fixed_buffer_runs_offline() {
    let cfg = tiny(AgentKind::SacAe);
    let buf = frozen_buffer(&cfg, 50);
    let before = buf.to_bytes();
    let (state, ae) = fixed_buffer_experiment(&cfg, &buf, 1, None).unwrap();
    assert_eq!(buf.to_bytes(), before);
    for r in [&state, &ae] {
        assert_eq!(r.env_steps, 0);
        assert_eq!(r.counts.critic, cfg.experiment.steps);
        assert!(r.evals.iter().all(|e| e.mean_return.is_finite()));
    }
    assert_eq!(state.agent.kind, AgentKind::SacState);
    assert_eq!(ae.agent.kind, AgentKind::SacAe);
    let (again, _) = fixed_buffer_experiment(&cfg, &buf, 1, None).unwrap();
    assert_eq!(again.metrics_jsonl(), state.metrics_jsonl());

    let mut open = ReplayBuffer::new(buf.layout(), 50, 0).unwrap();
    open.push(buf.get(0).unwrap()).unwrap();
    assert!(matches!(fixed_buffer_experiment(&cfg, &open, 1, None), Err(Error::Contract(_))));
}

#[test]
fn transfer_loads_encoder_and_keeps_scratch_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let src_cfg = tiny(AgentKind::SacAe);
    let src = run_training(&src_cfg, 0, Some(&dir.path().join("src"))).unwrap();
    let ckpt = src.run_dir.as_ref().unwrap().join(CHECKPOINT_FILE);

    let mut target = src_cfg.clone();
    target.env.task = Task::PendulumSparse;
    target.experiment.steps = 0;
    let (p, s) = transfer_experiment(&target, &ckpt, 1, None).unwrap();
    let frames = src.buffer.gather((0..4).collect()).obs;
    assert_eq!(p.agent.latents(&frames).unwrap(), src.agent.latents(&frames).unwrap());
    let fresh = Agent::new(&target.with_seed(1), 1).unwrap();
    assert_eq!(s.agent.encoder_hash(), fresh.encoder_hash());
    assert_ne!(p.agent.encoder_hash(), s.agent.encoder_hash());

    let mut bigger = target.clone();
    bigger.net.conv_channels = 8;
    let out = dir.path().join("mismatch");
    assert!(matches!(transfer_experiment(&bigger, &ckpt, 1, Some(&out)), Err(Error::Contract(_))));
    assert!(!out.exists());
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| StandardNormal.sample(&mut rng))
}

#[test]
fn probe_recovers_exact_linear_latents() {
    let states = gaussian(400, 3, 1);
    // Five latents from three states: full column rank in s, rank deficient in z.
    let map = [[1.0, 0.5, -2.0], [0.0, 3.0, 1.0], [2.0, 0.0, 0.5], [1.0, 3.5, -1.0], [0.3, 0.0, 0.0]];
    let z = Tensor::from_fn(&[400, 5], |k| {
        let (i, j) = (k / 5, k % 5);
        (0..3).map(|c| map[j][c] * states.data()[i * 3 + c]).sum::<f64>() + 0.7
    });
    let r = linear_probe(&z, &states, 0).unwrap();
    assert!(r.coords.iter().all(|c| (c.r2 - 1.0).abs() < 1e-8), "{r:?}");
    assert_eq!(r.rank, 3);
    assert!(r.rank_deficient);
    assert_eq!((r.n_train, r.n_test), (320, 80));
}

#[test]
fn probe_on_noise_explains_nothing() {
    let r = linear_probe(&gaussian(2000, 5, 2), &gaussian(2000, 3, 3), 0).unwrap();
    assert!(r.coords.iter().all(|c| c.r2 <= 0.05), "{r:?}");
    assert!(!r.rank_deficient);
}

#[test]
fn probe_is_affine_invariant() {
    let states = gaussian(300, 2, 4);
    let z = Tensor::from_fn(&[300, 4], |k| {
        let (i, j) = (k / 4, k % 4);
        states.data()[i * 2 + j % 2].powi(j as i32 / 2 + 1) + 0.1 * ((k as f64) * 0.37).sin()
    });
    let scaled = Tensor::from_fn(&[300, 4], |k| z.data()[k] * (1.5 + (k % 4) as f64) - 3.0);
    let (a, b) = (linear_probe(&z, &states, 9).unwrap(), linear_probe(&scaled, &states, 9).unwrap());
    for (x, y) in a.coords.iter().zip(&b.coords) {
        assert!((x.r2 - y.r2).abs() < 1e-8);
    }
    assert!(matches!(linear_probe(&z, &gaussian(299, 2, 0), 0), Err(Error::Dimension { .. })));
}

#[test]
fn probe_of_untrained_agent_reports() {
    let cfg = tiny(AgentKind::SacAe);
    let agent = Agent::new(&cfg, 0).unwrap();
    let r = probe_agent(&agent, &frozen_buffer(&cfg, 60), 0).unwrap();
    assert_eq!(r.coords.len(), 3);
    assert!(r.coords.iter().all(|c| c.mse.is_finite()));
}

#[test]
fn ablation_grid_composes_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(AgentKind::SacVaeJoint);
    cfg.experiment.steps = 10;
    let one = ablation_grid(&cfg, AblationKind::Beta, &["1e-6".into()], None).unwrap();
    let mut direct_cfg = cfg.clone();
    direct_cfg.ae.beta = 1e-6;
    let direct = run_training(&direct_cfg, 0, None).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].final_mean, direct.final_mean().unwrap());

    cfg.experiment.seeds = vec![0, 1];
    let rows = ablation_grid(&cfg, AblationKind::ActionRepeat, &["2".into(), "4".into()], Some(dir.path())).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 4);
    for r in &rows {
        assert_eq!(r.cells.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![0, 1]);
        assert!(r.cells.iter().all(|c| c.setting == r.setting));
    }
    let csv = dir.path().join("grid.csv");
    write_csv(&rows, &csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("setting,seed,final_mean,final_std\n2,0;1,"));

    assert!(matches!(ablation_grid(&cfg, AblationKind::Beta, &[], None), Err(Error::Config(_))));
    assert!(matches!(AblationKind::parse("width"), Err(Error::Config(m)) if m.contains("action_repeat, capacity, beta")));
    assert!(matches!(AblationKind::Capacity.apply(&cfg, "4by32"), Err(Error::Config(_))));
    assert_eq!(AblationKind::Capacity.apply(&cfg, "3x8").unwrap().net.conv_depth, 3);
}
