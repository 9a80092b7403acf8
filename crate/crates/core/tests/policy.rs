mod common;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sculpt_nn::{Graph, ParamStore, Scalar, Tensor, Var};
use sculptdiff_core::dataset::{DatasetSplit, GraspAction, Trajectory, Workspace};
use sculptdiff_core::encoder::{EncoderConfig, Grouping, PointEncoder};
use sculptdiff_core::policy::*;
use sculptdiff_core::sim::{init as sim_init, ClayConfig};
use sculptdiff_core::{PointCloud, StageFrame};

use common::*;

fn train_toy(trajs: Vec<Trajectory>, cfg: &PolicyConfig, steps: usize) -> TrainOutcome {
    let split = DatasetSplit { train: trajs, val: Vec::new(), seed: 0 };
    train(&split, &tiny_encoder(), cfg, TrainOptions { max_steps: Some(steps), ..Default::default() }).unwrap()
}

// ---------------------------------------------------------------- schedule

#[test]
fn schedule_single_step_and_errors() {
    let s = make_schedule(1, 0.1, 0.1).unwrap();
    assert_eq!(s.alpha_bar, vec![0.9]);
    assert_eq!(s.sigma[0], 0.0);
    assert!(make_schedule(0, 0.1, 0.2).is_err());
    assert!(make_schedule(10, 0.0, 0.2).is_err());
    assert!(make_schedule(10, 0.3, 0.2).is_err());
    assert!(make_schedule(10, 0.1, 1.0).is_err());
}

#[test]
fn schedule_matches_independent_products() {
    let s = make_schedule(50, 1e-4, 0.02).unwrap();
    let mut prod = 1.0;
    for i in 0..50 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 49.0;
        assert!((s.beta[i] - beta).abs() < 1e-15);
        prod *= 1.0 - beta;
    }
    assert!((s.alpha_bar[49] - prod).abs() < 1e-12);
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(s.sigma[0], 0.0);
}

#[test]
fn eq1_coefficients_match_posterior_mean() {
    let s = make_schedule(50, 0.002, 0.33).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=50 {
        let i = k - 1;
        let (a, e): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let ours = s.alpha[i] * (a - s.gamma[i] * e);
        let standard = (a - s.beta[i] / (1.0 - s.alpha_bar[i]).sqrt() * e) / (1.0 - s.beta[i]).sqrt();
        assert!((ours - standard).abs() <= 1e-9, "k={k}");
        // σ² is the posterior variance β̃
        let prev = if i == 0 { 1.0 } else { s.alpha_bar[i - 1] };
        let var = s.beta[i] * (1.0 - prev) / (1.0 - s.alpha_bar[i]);
        assert!((s.sigma[i].powi(2) - var).abs() <= 1e-12);
    }
}

#[test]
fn add_noise_cases() {
    let s = make_schedule(50, 1e-4, 0.02).unwrap();
    let a0 = [0.5, -0.25, 1.0];
    let out = s.add_noise(&a0, 10, &[0.0; 3]).unwrap();
    for (o, a) in out.iter().zip(a0) {
        assert!((o - s.alpha_bar[9].sqrt() * a).abs() < 1e-15);
    }
    let eps = [0.3, -1.2, 2.0];
    let out = s.add_noise(&[0.0; 3], 50, &eps).unwrap();
    for (o, e) in out.iter().zip(eps) {
        assert!((o - (1.0 - s.alpha_bar[49]).sqrt() * e).abs() < 1e-15);
    }
    assert!(s.add_noise(&a0, 10, &[0.0; 2]).is_err());
    assert!(s.add_noise(&a0, 0, &[0.0; 3]).is_err());
    assert!(s.add_noise(&a0, 51, &[0.0; 3]).is_err());
}

#[test]
fn add_noise_variance_monte_carlo() {
    let s = make_schedule(50, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a0 = [0.4, -0.7];
    let n = 10_000;
    for (j, &a) in a0.iter().enumerate() {
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                s.add_noise(&a0, 50, &eps).unwrap()[j]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - s.alpha_bar[49];
        assert!((var - expect).abs() / expect < 0.05, "var {var} vs {expect}");
        assert!((mean - s.alpha_bar[49].sqrt() * a).abs() < 0.05);
    }
}

/// Predicts a fixed tensor regardless of input.
struct Fixed(Vec<f64>);

impl<T: Scalar> NoisePredictor<T> for Fixed {
    fn predict(&self, g: &mut Graph<T>, noisy: Var, _: &[usize], _: Var) -> sculptdiff_core::Result<Var> {
        let shape = g.shape(noisy).to_vec();
        Ok(g.constant(Tensor::new(&shape, self.0.iter().map(|&v| T::of(v)).collect())?)?)
    }
}

fn zero_obs(g: &mut Graph<f64>, b: usize) -> Var {
    g.constant(Tensor::zeros(&[b, 3])).unwrap()
}

#[test]
fn zero_prediction_step_scales_by_alpha() {
    let s = make_schedule(50, 0.002, 0.33).unwrap();
    let mut g = Graph::<f64>::new();
    let obs = zero_obs(&mut g, 1);
    let a = vec![vec![0.3, -0.1, 0.8, 0.0, 1.5]];
    // k = 1 has σ = 0
    let out = denoise_step(&mut g, &Fixed(vec![0.0; 5]), &a, 1, obs, &s, &[vec![9.0; 5]]).unwrap();
    for (o, x) in out[0].iter().zip(&a[0]) {
        assert!((o - s.alpha[0] * x).abs() <= 1e-12);
    }
}

#[test]
fn zero_prediction_chain_matches_closed_form() {
    let s = make_schedule(50, 0.002, 0.33).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
    let mut g = Graph::<f64>::new();
    let obs = zero_obs(&mut g, 1);
    let mut a = vec![start.clone()];
    for k in (1..=50).rev() {
        a = denoise_step(&mut g, &Fixed(vec![0.0; 20]), &a, k, obs, &s, &[vec![0.0; 20]]).unwrap();
    }
    let prod: f64 = s.alpha.iter().product();
    for (o, x) in a[0].iter().zip(&start) {
        assert!((o - prod * x).abs() <= 1e-9 * prod.max(1.0));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&a[0]) <= prod * norm(&start) * (1.0 + 1e-12));
}

// ---------------------------------------------------------------- loss

fn toy_groupings(cfg: &EncoderConfig, n: usize) -> Vec<Arc<Grouping>> {
    (0..n)
        .map(|i| {
            let c = blob(100 + i as u64, [0.02, 0.015, 0.01], 0.3 * i as f64);
            let c = sculptdiff_core::pointcloud::downsample(
                &c,
                cfg.cloud_size,
                sculptdiff_core::pointcloud::DownsampleMethod::UniformRandom,
                0,
            )
            .unwrap();
            Arc::new(sculptdiff_core::encoder::group(&c, cfg).unwrap())
        })
        .collect()
}

fn toy_items(cfg: &EncoderConfig, horizon: usize) -> Vec<TrainItem> {
    let gr = toy_groupings(cfg, 3);
    vec![
        TrainItem {
            state: gr[0].clone(),
            goal: gr[2].clone(),
            prev: [0.0; 5],
            target: vec![[0.1, -0.2, 0.3, 0.9, -0.5]; horizon],
        },
        TrainItem {
            state: gr[1].clone(),
            goal: gr[2].clone(),
            prev: [0.5, 0.1, -0.3, 0.2, 0.0],
            target: vec![[-0.7, 0.4, 0.0, -0.1, 0.6]; horizon],
        },
    ]
}

#[test]
fn loss_with_stub_predictors() {
    let enc_cfg = tiny_encoder();
    let mut store = ParamStore::<f64>::new();
    let enc = PointEncoder::init(&enc_cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let items = toy_items(&enc_cfg, 4);
    let refs: Vec<&TrainItem> = items.iter().collect();
    let sched = make_schedule(50, 0.002, 0.33).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<NoiseDraw> = (0..2).map(|_| NoiseDraw::sample(&mut rng, 50, 20)).collect();
    let exact: Vec<f64> = draws.iter().flat_map(|d| d.eps.clone()).collect();
    for (offset, expect) in [(0.0, 0.0), (0.3, 0.09)] {
        let mut g = Graph::<f64>::new();
        store.bind(&mut g, true).unwrap();
        let stub = Fixed(exact.iter().map(|e| e + offset).collect());
        let loss = diffusion_loss(&mut g, &enc, &stub, &refs, &draws, &sched, true).unwrap();
        assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
    }
}

#[test]
fn composed_loss_gradients_match_finite_differences() {
    let enc_cfg = EncoderConfig {
        groups: 4,
        group_size: 4,
        token_dim: 4,
        heads: 2,
        latent_dim: 3,
        point_hidden: 4,
        cloud_size: 24,
        ..tiny_encoder()
    };
    let pcfg =
        PolicyConfig { horizon: 2, channels: vec![4, 8], norm_groups: 2, time_dim: 4, ..PolicyConfig::default() };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = PointEncoder::init(&enc_cfg, &mut store, &mut rng).unwrap();
    let net = ConditionalUnet1d::init(&pcfg.unet_shape(enc_cfg.latent_dim), &mut store, &mut rng).unwrap();
    // FiLM starts as the identity with zero weights, which would hide the
    // encoder's gradient path; perturb everything
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let items = toy_items(&enc_cfg, pcfg.horizon);
    let refs: Vec<&TrainItem> = items.iter().collect();
    let sched = make_schedule(50, 0.002, 0.33).unwrap();
    let draws: Vec<NoiseDraw> = (0..4).map(|_| NoiseDraw::sample(&mut rng, 50, 10)).collect();
    let report = sculpt_nn::gradcheck::check_gradients(&store, 1e-5, 4, |g| {
        Ok(diffusion_loss(g, &enc, &net, &refs, &draws, &sched, true).unwrap())
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");

    // both encoder passes and the denoiser receive gradient
    let mut g = Graph::<f64>::new();
    store.bind(&mut g, true).unwrap();
    let loss = diffusion_loss(&mut g, &enc, &net, &refs, &draws, &sched, true).unwrap();
    g.backward(loss).unwrap();
    for (name, grad) in store.grads(&g).unwrap() {
        assert!(grad.norm() > 0.0, "{name}");
    }
}

// ---------------------------------------------------------------- training

#[test]
fn unimodal_recovery() {
    let goal = blob(1, [0.03, 0.01, 0.01], 0.0);
    let states: Vec<_> = (0..4).map(|i| blob(10 + i, [0.02 + 0.003 * i as f64, 0.02, 0.012], 0.0)).collect();
    let actions = vec![action(0.01, 0.0, 0.2, 0.03), action(-0.01, 0.005, 1.0, 0.02), action(0.0, -0.01, 2.0, 0.015)];
    let t = traj(goal.clone(), states.clone(), actions.clone());
    let out = train_toy(vec![t], &PolicyConfig { batch_size: 3, ..tiny_policy() }, 1200);
    let model = &out.model;
    let seeds: Vec<u64> = (0..20).collect();
    let mut hits = 0;
    for i in 0..3 {
        let prev = (i > 0).then(|| actions[i - 1]);
        let want = model.stats.normalize(&actions[i]);
        for seq in model.sample_normalized(&states[i], &goal, prev.as_ref(), &seeds).unwrap() {
            let err = seq[0].iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            hits += (err <= 0.05) as usize;
        }
    }
    let frac = hits as f64 / 60.0;
    eprintln!("unimodal fraction {frac}");
    assert!(frac >= 0.9, "only {frac} of samples within 0.05");
}

#[test]
fn multimodal_samples_cover_both_modes() {
    let data = two_mode_dataset();
    let out = train_toy(data.clone(), &PolicyConfig { batch_size: 2, ..tiny_policy() }, 1200);
    let seeds: Vec<u64> = (0..100).collect();
    let samples = out.model.sample_normalized(&data[0].states[0], &data[0].goal, None, &seeds).unwrap();
    let xs: Vec<f64> = samples.iter().map(|s| s[0][0]).collect();
    let left = xs.iter().filter(|&&x| x < -0.5).count();
    let right = xs.iter().filter(|&&x| x > 0.5).count();
    let mid = xs.iter().filter(|&&x| x.abs() < 0.5).count();
    eprintln!("modes {left}/{right}, mid {mid}");
    assert!(left >= 20 && right >= 20 && mid < 5, "left {left} right {right} mid {mid}");
}

fn rotation_toy(angles: &[f64]) -> Vec<Trajectory> {
    let state = blob(5, [0.02, 0.02, 0.01], 0.0);
    angles
        .iter()
        .map(|&a| {
            let goal = blob(6, [0.035, 0.008, 0.01], a);
            traj(goal, vec![state.clone(), state.clone()], vec![action(0.0, 0.0, a, 0.02)])
        })
        .collect()
}

fn rotation_error(model: &SculptDiff, data: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    for (i, t) in data.iter().enumerate() {
        let want = model.stats.normalize(&t.actions[0]);
        let seq = model.sample_normalized(&t.states[0], &t.goal, None, &[i as u64]).unwrap();
        total += (seq[0][0][3] - want[3]).abs();
    }
    total / data.len() as f64
}

#[test]
fn goal_conditioning_is_needed_to_resolve_rotation() {
    let train_angles: Vec<f64> = (0..13).map(|i| 0.3 + 0.2 * i as f64).collect();
    let val_angles: Vec<f64> = (0..12).map(|i| 0.4 + 0.2 * i as f64).collect();
    let (train_set, val_set) = (rotation_toy(&train_angles), rotation_toy(&val_angles));
    let cfg = PolicyConfig { batch_size: 13, noise_samples: 8, ..tiny_policy() };
    let with_goal = train_toy(train_set.clone(), &cfg, 1500);
    let without = train_toy(train_set, &PolicyConfig { goal_conditioning: false, ..cfg }, 1500);
    let (e_goal, e_blind) = (rotation_error(&with_goal.model, &val_set), rotation_error(&without.model, &val_set));
    eprintln!("rotation error {e_goal} vs {e_blind}");
    assert!(e_blind >= 2.0 * e_goal, "with goal {e_goal}, without {e_blind}");
}

#[test]
fn single_item_overfits() {
    let goal = blob(1, [0.03, 0.01, 0.01], 0.0);
    let t = traj(goal, vec![blob(2, [0.02; 3], 0.0), blob(3, [0.02; 3], 0.0)], vec![action(0.01, 0.0, 0.3, 0.02)]);
    let out = train_toy(vec![t], &PolicyConfig { batch_size: 1, ..tiny_policy() }, 500);
    let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 500);
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[480..].iter().sum::<f64>() / 20.0;
    eprintln!("overfit {head} -> {tail}");
    assert!(head >= 10.0 * tail, "loss {head} -> {tail}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = two_mode_dataset();
    let cfg = PolicyConfig { batch_size: 2, noise_samples: 4, ..tiny_policy() };
    let a = train_toy(data.clone(), &cfg, 15);
    let b = train_toy(data.clone(), &cfg, 15);
    let la: Vec<f64> = a.log.iter().map(|r| r.train_loss).collect();
    let lb: Vec<f64> = b.log.iter().map(|r| r.train_loss).collect();
    assert_eq!(la, lb);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.sdck");
    a.model.save(&path).unwrap();
    let loaded = SculptDiff::load(&path).unwrap();
    assert_eq!(loaded.cfg, a.model.cfg);
    assert_eq!(loaded.stats, a.model.stats);
    let s = &data[0].states[0];
    let p1 = a.model.predict_actions(s, &data[0].goal, None, 9).unwrap();
    let p2 = loaded.predict_actions(s, &data[0].goal, None, 9).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(p1, a.model.predict_actions(s, &data[0].goal, None, 9).unwrap());
    assert_eq!(p1.len(), cfg.horizon);
    assert!(a.model.params.iter().all(|(n, t)| t == loaded.params.get(n).unwrap()));

    // corrupt header
    std::fs::write(&path, b"SDCK\x01\x00junk").unwrap();
    assert!(SculptDiff::load(&path).is_err());
}

#[test]
fn validation_does_not_touch_parameters() {
    let data = two_mode_dataset();
    let cfg = PolicyConfig { batch_size: 2, noise_samples: 2, epochs: 3, ..tiny_policy() };
    let split = DatasetSplit { train: data.clone(), val: data.clone(), seed: 0 };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.sdck");
    let mut log = Vec::new();
    let out = train(
        &split,
        &tiny_encoder(),
        &cfg,
        TrainOptions { log: Some(&mut log), checkpoint: Some(&ckpt), max_steps: None },
    )
    .unwrap();
    assert_eq!(out.log.len(), 3);
    let lines: Vec<serde_json::Value> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for key in ["epoch", "train_loss", "val_loss", "wall_s"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    let best = out.log.iter().map(|r| r.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[out.best_epoch].val_loss.unwrap(), best);
    let saved = SculptDiff::load(&ckpt).unwrap();
    assert!(saved.params.iter().all(|(n, t)| t == out.model.params.get(n).unwrap()));
}

#[test]
fn outputs_stay_in_the_training_box() {
    let data = two_mode_dataset();
    let out = train_toy(data.clone(), &PolicyConfig { batch_size: 2, noise_samples: 2, ..tiny_policy() }, 3);
    let ws = Workspace::default();
    let frame = StageFrame::default();
    let stats = out.model.stats;
    for seed in 0..20 {
        for a in out.model.predict_actions(&data[0].states[0], &data[0].goal, None, seed).unwrap() {
            ws.check(&a, &frame).unwrap();
            let arr = a.to_array();
            for d in 0..5 {
                assert!(arr[d] >= stats.min[d] - 1e-9 && arr[d] <= stats.max[d] + 1e-9);
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(PolicyConfig::default().validate().is_ok());
    assert!(PolicyConfig { execute_steps: 5, ..PolicyConfig::default() }.validate().is_err());
    assert!(PolicyConfig { execute_steps: 0, ..PolicyConfig::default() }.validate().is_err());
    assert!(PolicyConfig { norm_groups: 7, ..PolicyConfig::default() }.validate().is_err());
    assert!(PolicyConfig { beta_hi: 1.5, ..PolicyConfig::default() }.validate().is_err());
    let empty = DatasetSplit { train: Vec::new(), val: Vec::new(), seed: 0 };
    assert!(train(&empty, &tiny_encoder(), &tiny_policy(), TrainOptions::default()).is_err());
}

// ---------------------------------------------------------------- rollout

struct Scripted(Vec<GraspAction>, usize);

impl Policy for Scripted {
    fn plan(
        &mut self,
        _: &PointCloud,
        _: &PointCloud,
        _: Option<&GraspAction>,
        _: u64,
    ) -> sculptdiff_core::Result<Vec<GraspAction>> {
        self.1 += 1;
        Ok(self.0.clone())
    }
}

#[test]
fn rollout_caps_and_stops() {
    let frame = StageFrame::default();
    let env = sim_init(&ClayConfig::default(), &frame).unwrap();
    let goal = env.observe(2048, 99).unwrap();
    let squeeze = action(0.0, 0.0, 0.0, 0.03);

    let mut p = Scripted(vec![squeeze], 0);
    let cfg = RolloutConfig { stop_threshold: f64::INFINITY, ..RolloutConfig::default() };
    let r = rollout(&env, &goal, &mut p, &cfg, |_| {}).unwrap();
    assert_eq!(r.trajectory.num_grasps(), 0);
    assert_eq!(p.1, 0);

    let mut events = Vec::new();
    let mut p = Scripted(vec![squeeze, squeeze], 0);
    let cfg = RolloutConfig { max_grasps: 3, execute_steps: 2, ..RolloutConfig::default() };
    let r = rollout(&env, &goal, &mut p, &cfg, |s| events.push(s.clone())).unwrap();
    assert_eq!(r.trajectory.num_grasps(), 3);
    assert_eq!(p.1, 2);
    assert_eq!(events.len(), 3);
    assert_eq!(r.chamfers.len(), 4);
    r.trajectory.validate(Some(2048)).unwrap();
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.grasp_index, i);
        assert_eq!(e.chamfer, r.chamfers[i + 1]);
    }
    // out-of-workspace proposals are clamped before execution
    let mut p = Scripted(vec![GraspAction::new(1.0, 0.0, 0.0125, 0.0, 0.5)], 0);
    let r = rollout(&env, &goal, &mut p, &RolloutConfig { max_grasps: 1, ..RolloutConfig::default() }, |_| {}).unwrap();
    Workspace::default().check(&r.trajectory.actions[0], &frame).unwrap();
}
