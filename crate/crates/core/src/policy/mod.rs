//! Goal-conditioned diffusion policy over grasp-action sequences.

mod network;
mod rollout;
mod schedule;
mod train;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sculpt_nn::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use network::{ConditionalUnet1d, NoisePredictor, UnetShape};
pub use rollout::{rollout, Policy, RolloutConfig, RolloutResult, RolloutStep};
pub use schedule::{make_schedule, NoiseSchedule};
pub use train::{build_items, train, EpochLog, GroupingCache, TrainOptions, TrainOutcome};

use crate::dataset::{ActionStats, GraspAction, ACTION_DIM};
use crate::encoder::{EncoderConfig, Grouping, PointEncoder};
use crate::error::{invalid, Error, Result};
use crate::pointcloud::PointCloud;

pub const CHECKPOINT_FORMAT: &str = "sculptdiff";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub execute_steps: usize,
    pub diffusion_steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub norm_groups: usize,
    pub time_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate to zero over the planned steps.
    pub lr_decay: bool,
    pub epochs: usize,
    pub seed: u64,
    /// Noise draws per item and step; the encoder runs once per cloud.
    pub noise_samples: usize,
    pub grad_clip: Option<f64>,
    pub ema_decay: Option<f64>,
    /// When false the goal latent is replaced by zeros.
    pub goal_conditioning: bool,
    /// Stop training after this many seconds, keeping the best checkpoint so far.
    pub time_budget_s: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            execute_steps: 1,
            diffusion_steps: 50,
            beta_lo: 0.002,
            beta_hi: 0.33,
            channels: vec![64, 128, 256],
            kernel: 3,
            norm_groups: 8,
            time_dim: 64,
            batch_size: 64,
            learning_rate: 3e-4,
            lr_decay: true,
            epochs: 100,
            seed: 0,
            noise_samples: 1,
            grad_clip: Some(1.0),
            ema_decay: None,
            goal_conditioning: true,
            time_budget_s: None,
        }
    }
}

impl PolicyConfig {
    /// Desk-scale training: a narrower U-Net, several noise draws per
    /// encoded cloud, a 15 minute budget and 4-grasp chunks at rollout.
    pub fn lite() -> Self {
        Self {
            execute_steps: 4,
            channels: vec![32, 64, 128],
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 1000,
            noise_samples: 4,
            time_budget_s: Some(900.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return invalid("policy.horizon must be > 0");
        }
        if self.execute_steps == 0 || self.execute_steps > self.horizon {
            return invalid("policy.execute_steps must be in [1, horizon]");
        }
        for (name, v) in [("batch_size", self.batch_size), ("noise_samples", self.noise_samples)] {
            if v == 0 {
                return invalid(format!("policy.{name} must be > 0"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return invalid("policy.learning_rate must be > 0");
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return invalid("policy.ema_decay must be in [0, 1)");
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return invalid("policy.grad_clip must be > 0");
            }
        }
        make_schedule(self.diffusion_steps, self.beta_lo, self.beta_hi)?;
        self.unet_shape(1).validate()
    }

    pub fn unet_shape(&self, latent_dim: usize) -> UnetShape {
        UnetShape {
            action_dim: ACTION_DIM,
            obs_dim: 2 * latent_dim + ACTION_DIM,
            channels: self.channels.clone(),
            kernel: self.kernel,
            norm_groups: self.norm_groups,
            time_dim: self.time_dim,
        }
    }
}

/// One supervised window: observation at the window start and the next
/// `horizon` normalized actions.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub state: Arc<Grouping>,
    pub goal: Arc<Grouping>,
    pub prev: [f64; ACTION_DIM],
    pub target: Vec<[f64; ACTION_DIM]>,
}

/// Diffusion step and noise for one loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub step: usize,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample<R: Rng>(rng: &mut R, steps: usize, len: usize) -> Self {
        let step = rng.random_range(1..=steps);
        let eps = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Self { step, eps }
    }
}

/// Picks rows of a `[N, D]` variable.
fn gather_rows<T: Scalar>(g: &mut Graph<T>, x: Var, rows: &[usize]) -> Result<Var> {
    let parts = rows.iter().map(|&r| g.narrow(x, 0, r, 1)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(g.concat(&parts, 0)?)
}

/// Builds `O_t = [state latent, goal latent, prev action]` for each entry,
/// running the encoder once per distinct cloud.
pub fn observation<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &PointEncoder,
    states: &[&Arc<Grouping>],
    goals: &[&Arc<Grouping>],
    prevs: &[[f64; ACTION_DIM]],
    goal_conditioning: bool,
) -> Result<Var> {
    let n = states.len();
    if goals.len() != n || prevs.len() != n || n == 0 {
        return invalid("observation inputs must be non-empty and equally long");
    }
    let mut unique: Vec<Arc<Grouping>> = Vec::new();
    let mut slot: HashMap<*const Grouping, usize> = HashMap::new();
    let mut index = |gr: &Arc<Grouping>, unique: &mut Vec<Arc<Grouping>>| {
        *slot.entry(Arc::as_ptr(gr)).or_insert_with(|| {
            unique.push(gr.clone());
            unique.len() - 1
        })
    };
    let s_idx: Vec<usize> = states.iter().map(|s| index(s, &mut unique)).collect();
    let g_idx: Vec<usize> =
        if goal_conditioning { goals.iter().map(|s| index(s, &mut unique)).collect() } else { Vec::new() };
    let latent = encoder.forward(g, &unique)?.latent;
    let state = gather_rows(g, latent, &s_idx)?;
    let goal = if goal_conditioning {
        gather_rows(g, latent, &g_idx)?
    } else {
        g.constant(Tensor::zeros(&[n, encoder.cfg.latent_dim]))?
    };
    let prev = g.constant(Tensor::new(&[n, ACTION_DIM], prevs.iter().flatten().map(|&v| T::of(v)).collect())?)?;
    Ok(g.concat(&[state, goal, prev], 1)?)
}

/// Mean squared error between drawn and predicted noise. `draws` holds
/// `m` consecutive draws per item.
pub fn diffusion_loss<T: Scalar, P: NoisePredictor<T>>(
    g: &mut Graph<T>,
    encoder: &PointEncoder,
    net: &P,
    items: &[&TrainItem],
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
    goal_conditioning: bool,
) -> Result<Var> {
    if items.is_empty() || draws.is_empty() || draws.len() % items.len() != 0 {
        return invalid("need a whole number of noise draws per item");
    }
    let m = draws.len() / items.len();
    let horizon = items[0].target.len();
    let states: Vec<_> = items.iter().map(|i| &i.state).collect();
    let goals: Vec<_> = items.iter().map(|i| &i.goal).collect();
    let prevs: Vec<_> = items.iter().map(|i| i.prev).collect();
    let obs = observation(g, encoder, &states, &goals, &prevs, goal_conditioning)?;
    let obs = if m == 1 {
        obs
    } else {
        let rows: Vec<usize> = (0..draws.len()).map(|j| j / m).collect();
        gather_rows(g, obs, &rows)?
    };
    let mut noisy = Vec::with_capacity(draws.len() * horizon * ACTION_DIM);
    let mut eps = Vec::with_capacity(noisy.capacity());
    for (j, d) in draws.iter().enumerate() {
        let item = items[j / m];
        if item.target.len() != horizon {
            return invalid("items differ in horizon");
        }
        let a0: Vec<f64> = item.target.iter().flatten().copied().collect();
        noisy.extend(sched.add_noise(&a0, d.step, &d.eps)?.into_iter().map(T::of));
        eps.extend(d.eps.iter().map(|&v| T::of(v)));
    }
    let shape = [draws.len(), horizon, ACTION_DIM];
    let noisy = g.constant(Tensor::new(&shape, noisy)?)?;
    let eps = g.constant(Tensor::new(&shape, eps)?)?;
    let steps: Vec<usize> = draws.iter().map(|d| d.step).collect();
    let pred = net.predict(g, noisy, &steps, obs)?;
    Ok(g.mse(pred, eps)?)
}

/// One reverse step for a batch of flattened `horizon × 5` sequences, with
/// the noise estimate from `net` and standard normal draws `z`.
pub fn denoise_step<T: Scalar, P: NoisePredictor<T>>(
    g: &mut Graph<T>,
    net: &P,
    ak: &[Vec<f64>],
    k: usize,
    obs: Var,
    sched: &NoiseSchedule,
    z: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let b = ak.len();
    let len = ak.first().map_or(0, Vec::len);
    if b == 0 || len % ACTION_DIM != 0 || z.len() != b {
        return invalid("denoise_step needs a non-empty batch of whole action rows and one draw per sequence");
    }
    let flat: Vec<T> = ak.iter().flatten().map(|&v| T::of(v)).collect();
    if flat.len() != b * len {
        return invalid("sequences differ in length");
    }
    let x = g.constant(Tensor::new(&[b, len / ACTION_DIM, ACTION_DIM], flat)?)?;
    let eps = net.predict(g, x, &vec![k; b], obs)?;
    let eps = g.value(eps).data();
    (0..b)
        .map(|i| {
            let e: Vec<f64> = eps[i * len..(i + 1) * len].iter().map(|v| v.as_f64()).collect();
            sched.denoise_update(&ak[i], k, &e, &z[i])
        })
        .collect()
}

/// Trained encoder + denoiser with the normalization used in training.
#[derive(Clone, Debug)]
pub struct SculptDiff {
    pub encoder: PointEncoder,
    pub net: ConditionalUnet1d,
    pub encoder_cfg: EncoderConfig,
    pub cfg: PolicyConfig,
    pub schedule: NoiseSchedule,
    pub stats: ActionStats,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    encoder: EncoderConfig,
    policy: PolicyConfig,
    stats: ActionStats,
}

impl SculptDiff {
    pub fn init(encoder_cfg: &EncoderConfig, cfg: &PolicyConfig, stats: ActionStats) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let encoder = PointEncoder::init(encoder_cfg, &mut params, &mut rng)?;
        let net = ConditionalUnet1d::init(&cfg.unet_shape(encoder_cfg.latent_dim), &mut params, &mut rng)?;
        let schedule = make_schedule(cfg.diffusion_steps, cfg.beta_lo, cfg.beta_hi)?;
        Ok(Self { encoder, net, encoder_cfg: encoder_cfg.clone(), cfg: cfg.clone(), schedule, stats, params })
    }

    pub fn group(&self, cloud: &PointCloud) -> Result<Arc<Grouping>> {
        Ok(Arc::new(self.encoder.group(cloud)?))
    }

    /// Runs the full reverse chain once per seed, all seeds in one batch.
    /// Returns clipped normalized sequences, `horizon × 5` each.
    pub fn sample_normalized(
        &self,
        state: &PointCloud,
        goal: &PointCloud,
        prev: Option<&GraspAction>,
        seeds: &[u64],
    ) -> Result<Vec<Vec<[f64; ACTION_DIM]>>> {
        let (state, goal) = (self.group(state)?, self.group(goal)?);
        let prev = prev.map(|a| self.stats.normalize(a)).unwrap_or([0.0; ACTION_DIM]);
        self.sample_grouped(&state, &goal, prev, seeds)
    }

    pub fn sample_grouped(
        &self,
        state: &Arc<Grouping>,
        goal: &Arc<Grouping>,
        prev: [f64; ACTION_DIM],
        seeds: &[u64],
    ) -> Result<Vec<Vec<[f64; ACTION_DIM]>>> {
        let b = seeds.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let h = self.cfg.horizon;
        let len = h * ACTION_DIM;
        let mut g = Graph::<f32>::new();
        self.params.bind(&mut g, false)?;
        let obs = observation(&mut g, &self.encoder, &[state], &[goal], &[prev], self.cfg.goal_conditioning)?;
        let obs = gather_rows(&mut g, obs, &vec![0; b])?;

        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut a: Vec<Vec<f64>> =
            rngs.iter_mut().map(|r| (0..len).map(|_| r.sample(StandardNormal)).collect()).collect();
        for k in (1..=self.schedule.steps()).rev() {
            let z: Vec<Vec<f64>> =
                rngs.iter_mut().map(|r| (0..len).map(|_| r.sample(StandardNormal)).collect()).collect();
            a = denoise_step(&mut g, &self.net, &a, k, obs, &self.schedule, &z)?;
        }
        Ok(a.into_iter()
            .map(|v| v.chunks(ACTION_DIM).map(|c| std::array::from_fn(|j| c[j].clamp(-1.0, 1.0))).collect())
            .collect())
    }

    /// `horizon` de-normalized grasps, deterministic per seed.
    pub fn predict_actions(
        &self,
        state: &PointCloud,
        goal: &PointCloud,
        prev: Option<&GraspAction>,
        seed: u64,
    ) -> Result<Vec<GraspAction>> {
        let seq = self.sample_normalized(state, goal, prev, &[seed])?.remove(0);
        Ok(seq.iter().map(|n| self.stats.denormalize(n)).collect())
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<Vec<f32>> {
        Ok(self.encoder.encode(cloud, &self.params)?.latent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_value(Header {
            format: CHECKPOINT_FORMAT.into(),
            encoder: self.encoder_cfg.clone(),
            policy: self.cfg.clone(),
            stats: self.stats.clone(),
        })?;
        Ok(sculpt_nn::checkpoint::save_checkpoint(path, &header, &self.params)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = sculpt_nn::checkpoint::load_checkpoint(path)?;
        let header: Header = serde_json::from_value(header)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("checkpoint format {:?} is not {CHECKPOINT_FORMAT:?}", header.format)));
        }
        let mut model = Self::init(&header.encoder, &header.policy, header.stats)?;
        for (name, t) in model.params.iter_mut() {
            let loaded = params.get(name).map_err(|_| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded.clone();
        }
        if params.len() != model.params.len() {
            return Err(Error::Format("checkpoint has unexpected parameters".into()));
        }
        Ok(model)
    }
}
