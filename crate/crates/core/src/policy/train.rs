//! Minibatch Adam training with best-validation checkpointing.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sculpt_nn::{global_grad_norm, Adam, AdamConfig, Graph, ParamStore};
use serde::{Deserialize, Serialize};

use super::{diffusion_loss, NoiseDraw, PolicyConfig, SculptDiff, TrainItem};
use crate::dataset::{ActionStats, DatasetSplit, Trajectory, ACTION_DIM};
use crate::encoder::{EncoderConfig, Grouping, PointEncoder};
use crate::error::{invalid, Result};
use crate::pointcloud::PointCloud;

/// Groupings keyed by cloud content, so repeated clouds (shared goals,
/// overlapping windows) are grouped once and deduplicated within batches.
#[derive(Debug, Default)]
pub struct GroupingCache {
    map: HashMap<u64, Arc<Grouping>>,
}

impl GroupingCache {
    pub fn get(&mut self, encoder: &PointEncoder, cloud: &PointCloud) -> Result<Arc<Grouping>> {
        let key = cloud.content_hash();
        if let Some(g) = self.map.get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(encoder.group(cloud)?);
        self.map.insert(key, g.clone());
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One item per grasp: the window of `horizon` actions starting there,
/// padded by repeating the final action.
pub fn build_items(
    trajs: &[Trajectory],
    stats: &ActionStats,
    horizon: usize,
    encoder: &PointEncoder,
    cache: &mut GroupingCache,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for t in trajs {
        t.validate(Some(encoder.cfg.cloud_size))?;
        let goal = cache.get(encoder, &t.goal)?;
        let norm: Vec<[f64; ACTION_DIM]> = t.actions.iter().map(|a| stats.normalize(a)).collect();
        for i in 0..norm.len() {
            let target = (0..horizon).map(|j| norm[(i + j).min(norm.len() - 1)]).collect();
            items.push(TrainItem {
                state: cache.get(encoder, &t.states[i])?,
                goal: goal.clone(),
                prev: if i == 0 { [0.0; ACTION_DIM] } else { norm[i - 1] },
                target,
            });
        }
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_s: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives one JSON line per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Best-validation checkpoint destination, rewritten on improvement.
    pub checkpoint: Option<&'a Path>,
    /// Hard cap on optimizer steps, mostly for tests.
    pub max_steps: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SculptDiff,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: usize,
}

fn validation_draws(n: usize, cfg: &PolicyConfig) -> Vec<NoiseDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_da7e);
    (0..n).map(|_| NoiseDraw::sample(&mut rng, cfg.diffusion_steps, cfg.horizon * ACTION_DIM)).collect()
}

/// Mean loss over `items` under fixed draws, without touching parameters.
pub(crate) fn evaluate(
    model: &SculptDiff,
    params: &ParamStore<f32>,
    items: &[TrainItem],
    draws: &[NoiseDraw],
) -> Result<f64> {
    let bs = model.cfg.batch_size;
    let mut total = 0.0;
    for (chunk, d) in items.chunks(bs).zip(draws.chunks(bs)) {
        let mut g = Graph::<f32>::new();
        params.bind(&mut g, false)?;
        let refs: Vec<&TrainItem> = chunk.iter().collect();
        let loss =
            diffusion_loss(&mut g, &model.encoder, &model.net, &refs, d, &model.schedule, model.cfg.goal_conditioning)?;
        total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

pub fn train(
    split: &DatasetSplit,
    encoder_cfg: &EncoderConfig,
    cfg: &PolicyConfig,
    mut opts: TrainOptions,
) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        return invalid("training set is empty");
    }
    let stats = ActionStats::from_actions(split.train.iter().flat_map(|t| &t.actions))?;
    let mut model = SculptDiff::init(encoder_cfg, cfg, stats)?;
    let mut cache = GroupingCache::default();
    let train_items = build_items(&split.train, &stats, cfg.horizon, &model.encoder, &mut cache)?;
    let val_items = build_items(&split.val, &stats, cfg.horizon, &model.encoder, &mut cache)?;
    let val_draws = validation_draws(val_items.len(), cfg);
    log::info!(
        "training on {} items ({} val), {} distinct clouds, {} parameters",
        train_items.len(),
        val_items.len(),
        cache.len(),
        model.params.numel()
    );

    let mut opt = Adam::<f32>::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut ema = cfg.ema_decay.map(|_| model.params.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut log_rows = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut steps = 0usize;
    let per_epoch = train_items.len().div_ceil(cfg.batch_size);
    let planned = opts.max_steps.unwrap_or(usize::MAX).min(per_epoch.saturating_mul(cfg.epochs)).max(1);
    let out_of_time = |steps: usize| {
        opts.max_steps.is_some_and(|m| steps >= m)
            || cfg.time_budget_s.is_some_and(|b| start.elapsed().as_secs_f64() >= b)
    };

    for epoch in 0..cfg.epochs {
        if out_of_time(steps) {
            break;
        }
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if out_of_time(steps) {
                break;
            }
            let items: Vec<&TrainItem> = batch.iter().map(|&i| &train_items[i]).collect();
            let draws: Vec<NoiseDraw> = (0..items.len() * cfg.noise_samples)
                .map(|_| NoiseDraw::sample(&mut rng, cfg.diffusion_steps, cfg.horizon * ACTION_DIM))
                .collect();
            let mut g = Graph::<f32>::new();
            model.params.bind(&mut g, true)?;
            let loss = diffusion_loss(
                &mut g,
                &model.encoder,
                &model.net,
                &items,
                &draws,
                &model.schedule,
                cfg.goal_conditioning,
            )?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return invalid(format!("training loss diverged at step {steps}"));
            }
            g.backward(loss)?;
            let mut grads = model.params.grads(&g)?;
            if let Some(clip) = cfg.grad_clip {
                let norm = global_grad_norm(&grads);
                if norm > clip {
                    let s = (clip / norm) as f32;
                    grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            if cfg.lr_decay {
                let by_time = cfg.time_budget_s.map_or(0.0, |b| start.elapsed().as_secs_f64() / b);
                let progress = (steps as f64 / planned as f64).max(by_time).min(1.0);
                opt.cfg.lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            opt.step(&mut model.params, &grads);
            if let (Some(ema), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
                let d = d as f32;
                for ((_, e), (_, p)) in ema.iter_mut().zip(model.params.iter()) {
                    e.data_mut().iter_mut().zip(p.data()).for_each(|(e, p)| *e = d * *e + (1.0 - d) * p);
                }
            }
            steps += 1;
            sum += value * items.len() as f64;
            count += items.len();
        }
        if count == 0 {
            break;
        }
        let current = ema.as_ref().unwrap_or(&model.params);
        let val_loss =
            if val_items.is_empty() { None } else { Some(evaluate(&model, current, &val_items, &val_draws)?) };
        let row = EpochLog { epoch, train_loss: sum / count as f64, val_loss, wall_s: start.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: train {:.5} val {:?}", row.train_loss, row.val_loss);
        if let Some(w) = opts.log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&row)?)?;
        }
        // without a validation set the latest parameters count as best
        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b || val_loss.is_none()) {
            best = Some((score, epoch, current.clone()));
            if let Some(path) = opts.checkpoint {
                let mut snapshot = model.clone();
                snapshot.params = current.clone();
                snapshot.save(path)?;
            }
        }
        log_rows.push(row);
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome { model, log: log_rows, best_epoch, steps })
}
