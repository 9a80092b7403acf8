//! Comparison policies: a learning-free radius-of-gyration heuristic and a
//! nearest-neighbor lookup over encoder embeddings.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::dataset::{wrap_rot, GraspAction, Trajectory, ACTION_DIM};
use crate::error::{invalid, Result};
use crate::pointcloud::{PointCloud, StageFrame};
use crate::policy::{Policy, SculptDiff};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicMode {
    /// Angular sectors about the stage center.
    Radial,
    /// Slabs along x.
    Linear,
}

impl std::str::FromStr for HeuristicMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "radial" => Ok(Self::Radial),
            "linear" => Ok(Self::Linear),
            _ => invalid(format!("unknown heuristic mode {s:?} (expected radial or linear)")),
        }
    }
}

/// Reference that segment radii of gyration are measured about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gyration {
    /// The segment's own centroid.
    Centroid,
    /// The stage: its vertical axis in radial mode, the mid-plane `y = cy`
    /// in linear mode. Measures how far the clay reaches out.
    Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub mode: HeuristicMode,
    pub segments: usize,
    pub gyration: Gyration,
    /// Grasp height as a quantile of the current cloud's z values.
    pub height_quantile: f64,
    /// Width reduction per meter of summed radius-of-gyration excess.
    pub width_gain: f64,
    pub width_max: f64,
    pub width_min: f64,
    /// Half-length of the x range split into slabs (linear mode).
    pub slab_extent: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            mode: HeuristicMode::Radial,
            segments: 8,
            gyration: Gyration::Stage,
            height_quantile: 0.7,
            width_gain: 4.0,
            width_max: 0.05,
            width_min: 0.012,
            slab_extent: 0.06,
        }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments < 4 || self.segments % 2 != 0 {
            return invalid("heuristic.segments must be even and >= 4");
        }
        if !(self.width_min > 0.0 && self.width_min <= self.width_max) {
            return invalid("heuristic widths must satisfy 0 < width_min <= width_max");
        }
        if !(0.0..=1.0).contains(&self.height_quantile) {
            return invalid("heuristic.height_quantile must be in [0, 1]");
        }
        if !(self.width_gain >= 0.0 && self.slab_extent > 0.0) {
            return invalid("heuristic.width_gain must be >= 0 and slab_extent > 0");
        }
        Ok(())
    }

    /// Segment paired with `i`: the opposite sector, or the slab mirrored
    /// about the stage center.
    pub fn opposite(&self, i: usize) -> usize {
        match self.mode {
            HeuristicMode::Radial => (i + self.segments / 2) % self.segments,
            HeuristicMode::Linear => self.segments - 1 - i,
        }
    }

    fn segment_of(&self, p: &[f64; 3], frame: &StageFrame) -> usize {
        let n = self.segments;
        let (dx, dy) = (p[0] - frame.center[0], p[1] - frame.center[1]);
        let t = match self.mode {
            HeuristicMode::Radial => dy.atan2(dx).rem_euclid(TAU) / TAU,
            HeuristicMode::Linear => (dx + self.slab_extent) / (2.0 * self.slab_extent),
        };
        ((t * n as f64).floor().max(0.0) as usize).min(n - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub index: usize,
    pub count: usize,
    pub radius_of_gyration: f64,
}

pub fn segment_stats(cloud: &PointCloud, cfg: &HeuristicConfig, frame: &StageFrame) -> Result<Vec<SegmentStats>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return invalid("segment stats need a non-empty cloud");
    }
    let mut bins: Vec<Vec<[f64; 3]>> = vec![Vec::new(); cfg.segments];
    let [cx, cy] = frame.center;
    for p in cloud.points() {
        // a point on the stage axis has no azimuth and belongs to no sector
        if cfg.mode == HeuristicMode::Radial && (p[0] - cx).hypot(p[1] - cy) < 1e-12 {
            continue;
        }
        bins[cfg.segment_of(p, frame)].push(*p);
    }
    Ok(bins
        .iter()
        .enumerate()
        .map(|(index, pts)| SegmentStats {
            index,
            count: pts.len(),
            radius_of_gyration: radius_of_gyration(pts, cfg, frame),
        })
        .collect())
}

fn radius_of_gyration(pts: &[[f64; 3]], cfg: &HeuristicConfig, frame: &StageFrame) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    let n = pts.len() as f64;
    let [cx, cy] = frame.center;
    let ss: f64 = match (cfg.gyration, cfg.mode) {
        (Gyration::Stage, HeuristicMode::Radial) => pts.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum(),
        (Gyration::Stage, HeuristicMode::Linear) => pts.iter().map(|p| (p[1] - cy).powi(2)).sum(),
        (Gyration::Centroid, _) => {
            let c: [f64; 3] = std::array::from_fn(|i| pts.iter().map(|p| p[i]).sum::<f64>() / n);
            pts.iter().map(|p| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>()).sum()
        }
    };
    (ss / n).sqrt()
}

/// Summed radius-of-gyration excess of each pair `(i, opposite(i))`.
pub fn pair_excess(
    current: &PointCloud,
    goal: &PointCloud,
    cfg: &HeuristicConfig,
    frame: &StageFrame,
) -> Result<Vec<f64>> {
    let (cur, tgt) = (segment_stats(current, cfg, frame)?, segment_stats(goal, cfg, frame)?);
    let d = segment_excess(&cur, &tgt);
    Ok((0..cfg.segments / 2).map(|i| d[i] + d[cfg.opposite(i)]).collect())
}

fn segment_excess(cur: &[SegmentStats], tgt: &[SegmentStats]) -> Vec<f64> {
    cur.iter().zip(tgt).map(|(c, t)| c.radius_of_gyration - t.radius_of_gyration).collect()
}

/// `width_max − κΔ`, clamped to `[width_min, width_max]`.
pub fn width_for(cfg: &HeuristicConfig, delta: f64) -> f64 {
    (cfg.width_max - cfg.width_gain * delta).clamp(cfg.width_min, cfg.width_max)
}

/// Picks the pair with the largest excess (lowest index on ties) and
/// squeezes across it. Linear mode grasps the pair's worse slab.
pub fn select_grasp(
    current: &PointCloud,
    goal: &PointCloud,
    cfg: &HeuristicConfig,
    frame: &StageFrame,
) -> Result<GraspAction> {
    let excess = pair_excess(current, goal, cfg, frame)?;
    let (pair, delta) =
        excess.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
    let width = width_for(cfg, delta);
    let mut zs: Vec<f64> = current.points().iter().map(|p| p[2]).collect();
    zs.sort_by(f64::total_cmp);
    let z = zs[((zs.len() - 1) as f64 * cfg.height_quantile).round() as usize];
    let [cx, cy] = frame.center;
    let n = cfg.segments as f64;
    Ok(match cfg.mode {
        HeuristicMode::Radial => {
            // close along the bisector of the chosen sector
            let phi = (pair as f64 + 0.5) * TAU / n;
            GraspAction::new(cx, cy, z, wrap_rot(phi - FRAC_PI_2), width)
        }
        HeuristicMode::Linear => {
            // squeeze the worse slab of the pair
            let d = segment_excess(&segment_stats(current, cfg, frame)?, &segment_stats(goal, cfg, frame)?);
            let mirror = cfg.opposite(pair);
            let slab = if d[mirror] > d[pair] { mirror } else { pair };
            let x = cx - cfg.slab_extent + (slab as f64 + 0.5) * 2.0 * cfg.slab_extent / n;
            GraspAction::new(x, cy, z, 0.0, width)
        }
    })
}

#[derive(Clone, Debug)]
pub struct HeuristicPolicy {
    pub cfg: HeuristicConfig,
    pub frame: StageFrame,
}

impl Policy for HeuristicPolicy {
    fn plan(
        &mut self,
        state: &PointCloud,
        goal: &PointCloud,
        _: Option<&GraspAction>,
        _: u64,
    ) -> Result<Vec<GraspAction>> {
        Ok(vec![select_grasp(state, goal, &self.cfg, &self.frame)?])
    }
}

/// Stored `(embedding of [state, goal], next action)` pairs.
#[derive(Clone, Debug, Default)]
pub struct NnDatabase {
    keys: Vec<Vec<f32>>,
    actions: Vec<GraspAction>,
}

impl NnDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: Vec<f32>, action: GraspAction) -> Result<()> {
        if let Some(k) = self.keys.first() {
            if k.len() != key.len() {
                return invalid(format!("key has length {}, database uses {}", key.len(), k.len()));
            }
        }
        self.keys.push(key);
        self.actions.push(action);
        Ok(())
    }

    /// Embeds every (state, goal) pair of the trajectories with `model`'s encoder.
    pub fn build(model: &SculptDiff, trajs: &[Trajectory]) -> Result<Self> {
        let mut db = Self::new();
        for t in trajs {
            let goal = model.encode(&t.goal)?;
            for (s, a) in t.states.iter().zip(&t.actions) {
                db.push(query_key(&model.encode(s)?, &goal), *a)?;
            }
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn actions(&self) -> &[GraspAction] {
        &self.actions
    }
}

pub fn query_key(state: &[f32], goal: &[f32]) -> Vec<f32> {
    state.iter().chain(goal).copied().collect()
}

/// Inverse-distance weighted mean of the `k` nearest stored actions (ties
/// broken by insertion order). Exact matches share the weight equally.
pub fn nn_action(db: &NnDatabase, key: &[f32], k: usize) -> Result<GraspAction> {
    if db.is_empty() {
        return invalid("nearest-neighbor database is empty");
    }
    if k == 0 {
        return invalid("k must be > 0");
    }
    if db.keys[0].len() != key.len() {
        return invalid(format!("query has length {}, database uses {}", key.len(), db.keys[0].len()));
    }
    let mut dist: Vec<(f64, usize)> = db
        .keys
        .iter()
        .enumerate()
        .map(|(i, s)| (s.iter().zip(key).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.truncate(k);
    if k == 1 {
        return Ok(db.actions[dist[0].1]);
    }
    let exact: Vec<usize> = dist.iter().filter(|(d, _)| *d == 0.0).map(|&(_, i)| i).collect();
    let weighted: Vec<(f64, usize)> = if exact.is_empty() {
        dist.iter().map(|&(d, i)| (1.0 / d, i)).collect()
    } else {
        exact.into_iter().map(|i| (1.0, i)).collect()
    };
    let total: f64 = weighted.iter().map(|w| w.0).sum();
    let mut out = [0.0; ACTION_DIM];
    for &(w, i) in &weighted {
        for (o, v) in out.iter_mut().zip(db.actions[i].to_array()) {
            *o += w / total * v;
        }
    }
    Ok(GraspAction::from_array(out))
}

/// VINN-style policy over the diffusion model's encoder.
#[derive(Clone, Debug)]
pub struct NnPolicy {
    pub model: SculptDiff,
    pub db: NnDatabase,
    pub k: usize,
}

impl NnPolicy {
    pub fn act(&self, state: &PointCloud, goal: &PointCloud) -> Result<GraspAction> {
        let key = query_key(&self.model.encode(state)?, &self.model.encode(goal)?);
        nn_action(&self.db, &key, self.k)
    }
}

impl Policy for NnPolicy {
    fn plan(
        &mut self,
        state: &PointCloud,
        goal: &PointCloud,
        _: Option<&GraspAction>,
        _: u64,
    ) -> Result<Vec<GraspAction>> {
        Ok(vec![self.act(state, goal)?])
    }
}
