//! Demonstration trajectories: representation, on-disk format, rotation
//! augmentation, raw-demo splitting, and action normalization.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pointcloud::{rotate_point, rotate_z, sdpc, PointCloud, StageFrame};

pub const ACTION_DIM: usize = 5;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One parallel-jaw squeeze. `z` is the grasp center height; `rot` is the
/// finger-plane direction about +z, kept in [0, π) since the gripper is
/// symmetric under a half turn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspAction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rot: f64,
    pub width: f64,
}

impl GraspAction {
    pub fn new(x: f64, y: f64, z: f64, rot: f64, width: f64) -> Self {
        Self { x, y, z, rot: wrap_rot(rot), width }
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [self.x, self.y, self.z, self.rot, self.width]
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    /// Rotates the grasp pose by `angle` about the vertical axis through `center`.
    pub fn rotated(&self, angle: f64, center: [f64; 2]) -> Self {
        if angle == 0.0 {
            return *self;
        }
        let (s, c) = angle.sin_cos();
        let p = rotate_point(&[self.x, self.y, self.z], s, c, center);
        Self { x: p[0], y: p[1], z: self.z, rot: wrap_rot(self.rot + angle), width: self.width }
    }

    fn quantized(&self) -> Self {
        let a = self.to_array().map(|v| v as f32 as f64);
        Self { x: a[0], y: a[1], z: a[2], rot: a[3], width: a[4] }
    }
}

pub fn wrap_rot(rot: f64) -> f64 {
    let r = rot.rem_euclid(PI);
    // rem_euclid can round up to exactly π for tiny negative inputs
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Reachable grasp poses, in the stage frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    /// Horizontal half-extent around the stage center.
    pub half_extent: f64,
    /// Grasp height range above the stage surface.
    pub z_range: [f64; 2],
    pub width_max: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self { half_extent: 0.08, z_range: [0.0, 0.1], width_max: 0.08 }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_extent > 0.0) {
            return invalid("workspace.half_extent must be > 0");
        }
        if !(self.z_range[0] < self.z_range[1]) {
            return invalid("workspace.z_range must be increasing");
        }
        if !(self.width_max > 0.0) {
            return invalid("workspace.width_max must be > 0");
        }
        Ok(())
    }

    pub fn check(&self, a: &GraspAction, frame: &StageFrame) -> Result<()> {
        if !a.to_array().iter().all(|v| v.is_finite()) {
            return invalid("action must be finite");
        }
        if !(a.width > 0.0 && a.width <= self.width_max) {
            return invalid(format!("width {} outside (0, {}]", a.width, self.width_max));
        }
        if !(0.0..PI).contains(&a.rot) {
            return invalid(format!("rot {} outside [0, pi)", a.rot));
        }
        let dx = a.x - frame.center[0];
        let dy = a.y - frame.center[1];
        if dx.abs() > self.half_extent || dy.abs() > self.half_extent {
            return invalid(format!("position ({}, {}) outside workspace", a.x, a.y));
        }
        let h = a.z - frame.surface_z;
        if h < self.z_range[0] || h > self.z_range[1] {
            return invalid(format!("z {} outside workspace", a.z));
        }
        Ok(())
    }

    /// Nearest action inside the workspace.
    pub fn clamp(&self, a: &GraspAction, frame: &StageFrame) -> GraspAction {
        let he = self.half_extent;
        GraspAction {
            x: a.x.clamp(frame.center[0] - he, frame.center[0] + he),
            y: a.y.clamp(frame.center[1] - he, frame.center[1] + he),
            z: a.z.clamp(frame.surface_z + self.z_range[0], frame.surface_z + self.z_range[1]),
            rot: wrap_rot(a.rot),
            width: a.width.clamp(self.width_max * 1e-3, self.width_max),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub goal: PointCloud,
    pub states: Vec<PointCloud>,
    pub actions: Vec<GraspAction>,
    pub shape_label: String,
    /// Identity of the raw demonstration this trajectory derives from.
    pub source: String,
}

impl Trajectory {
    pub fn validate(&self, cloud_size: Option<usize>) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 {
            return invalid(format!(
                "states must equal actions + 1 (got {} states, {} actions)",
                self.states.len(),
                self.actions.len()
            ));
        }
        if let Some(n) = cloud_size {
            if self.goal.len() != n {
                return invalid(format!("goal has {} points, expected {n}", self.goal.len()));
            }
            if let Some(i) = self.states.iter().position(|s| s.len() != n) {
                return invalid(format!("state {i} has {} points, expected {n}", self.states[i].len()));
            }
        }
        Ok(())
    }

    pub fn num_grasps(&self) -> usize {
        self.actions.len()
    }

    pub fn rotated(&self, angle: f64, frame: &StageFrame) -> Self {
        Self {
            goal: rotate_z(&self.goal, angle, frame.center),
            states: self.states.iter().map(|s| rotate_z(s, angle, frame.center)).collect(),
            actions: self.actions.iter().map(|a| a.rotated(angle, frame.center)).collect(),
            shape_label: self.shape_label.clone(),
            source: self.source.clone(),
        }
    }
}

/// Number of copies for a rotation increment, or an error when it does not
/// divide a full turn.
pub fn rotation_count(increment: f64) -> Result<usize> {
    if !(increment > 0.0) || !increment.is_finite() {
        return invalid("rotation increment must be > 0");
    }
    let count = (TAU / increment).round();
    if count < 1.0 || (count * increment - TAU).abs() > 1e-9 {
        return invalid(format!("rotation increment {increment} does not divide 2*pi"));
    }
    Ok(count as usize)
}

pub fn augment_rotations(demo: &Trajectory, increment: f64, frame: &StageFrame) -> Result<Vec<Trajectory>> {
    let count = rotation_count(increment)?;
    Ok((0..count).map(|k| demo.rotated(k as f64 * increment, frame)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn augmented(&self, increment: f64, frame: &StageFrame) -> Result<Self> {
        let aug = |list: &[Trajectory]| -> Result<Vec<Trajectory>> {
            let mut out = Vec::new();
            for t in list {
                out.extend(augment_rotations(t, increment, frame)?);
            }
            Ok(out)
        };
        Ok(Self { train: aug(&self.train)?, val: aug(&self.val)?, seed: self.seed })
    }
}

/// Number of raw demos assigned to training for a given fraction; both
/// sides keep at least one demo.
pub fn train_count(total: usize, train_fraction: f64) -> usize {
    ((total as f64 * train_fraction).round() as usize).clamp(1, total - 1)
}

/// Seeded shuffle of raw demos, then a prefix goes to training.
pub fn split(demos: Vec<Trajectory>, train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return invalid("train_fraction must be in (0, 1)");
    }
    if demos.len() < 2 {
        return invalid("split requires at least 2 demos");
    }
    let n_train = train_count(demos.len(), train_fraction);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Trajectory>> = demos.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let val = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok(DatasetSplit { train, val, seed })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    shape: String,
    actions: Vec<[f32; ACTION_DIM]>,
    states: Vec<String>,
    goal: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// Writes `dir/manifest.json` plus one SDPC file per cloud.
pub fn save(traj: &Trajectory, dir: &Path) -> Result<()> {
    traj.validate(None)?;
    std::fs::create_dir_all(dir)?;
    let mut states = Vec::with_capacity(traj.states.len());
    for (i, s) in traj.states.iter().enumerate() {
        let name = format!("s_{i:03}.sdpc");
        sdpc::save(&dir.join(&name), s)?;
        states.push(name);
    }
    sdpc::save(&dir.join("goal.sdpc"), &traj.goal)?;
    let manifest = Manifest {
        shape: traj.shape_label.clone(),
        actions: traj.actions.iter().map(|a| a.to_array().map(|v| v as f32)).collect(),
        states,
        goal: "goal.sdpc".into(),
        version: MANIFEST_VERSION,
        source: Some(traj.source.clone()),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

fn manifest_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("manifest {field}: {msg}"))
}

pub fn load(dir: &Path) -> Result<Trajectory> {
    let path = dir.join(MANIFEST_FILE);
    let raw = std::fs::read(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| manifest_error("json", e))?;
    if m.version != MANIFEST_VERSION {
        return Err(manifest_error("version", format!("unsupported version {}", m.version)));
    }
    let cloud = |name: &str| -> Result<PointCloud> {
        if Path::new(name).is_absolute() || name.contains("..") {
            return Err(manifest_error("states", format!("path {name:?} escapes the trajectory directory")));
        }
        sdpc::load(&dir.join(name)).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{name}: {msg}")),
            other => other,
        })
    };
    let states = m.states.iter().map(|s| cloud(s)).collect::<Result<Vec<_>>>()?;
    let goal = cloud(&m.goal)?;
    let actions: Vec<GraspAction> = m
        .actions
        .iter()
        .map(|a| GraspAction { x: a[0] as f64, y: a[1] as f64, z: a[2] as f64, rot: a[3] as f64, width: a[4] as f64 })
        .collect();
    let source =
        m.source.unwrap_or_else(|| dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let t = Trajectory { goal, states, actions, shape_label: m.shape, source };
    t.validate(None)?;
    Ok(t)
}

/// The trajectory as it reads back from disk.
pub fn storage_round(traj: &Trajectory) -> Trajectory {
    Trajectory {
        goal: traj.goal.quantized(),
        states: traj.states.iter().map(PointCloud::quantized).collect(),
        actions: traj.actions.iter().map(GraspAction::quantized).collect(),
        shape_label: traj.shape_label.clone(),
        source: traj.source.clone(),
    }
}

/// Trajectory directories under `root` (any depth), sorted by path.
pub fn find_trajectories(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_FILE).is_file() {
            out.push(dir);
            continue;
        }
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                stack.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Per-dimension bounds used to map actions onto [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub min: [f64; ACTION_DIM],
    pub max: [f64; ACTION_DIM],
}

impl ActionStats {
    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a GraspAction>) -> Result<Self> {
        let mut min = [f64::INFINITY; ACTION_DIM];
        let mut max = [f64::NEG_INFINITY; ACTION_DIM];
        let mut any = false;
        for a in actions {
            any = true;
            for (d, v) in a.to_array().into_iter().enumerate() {
                min[d] = min[d].min(v);
                max[d] = max[d].max(v);
            }
        }
        if !any {
            return invalid("action statistics need at least one action");
        }
        let stats = Self { min, max };
        stats.warn_degenerate();
        Ok(stats)
    }

    pub fn degenerate_dims(&self) -> Vec<usize> {
        (0..ACTION_DIM).filter(|&d| !(self.min[d] < self.max[d])).collect()
    }

    fn warn_degenerate(&self) {
        for d in self.degenerate_dims() {
            log::warn!("action dimension {d} is constant ({}); it normalizes to 0", self.min[d]);
        }
    }

    pub fn normalize(&self, a: &GraspAction) -> [f64; ACTION_DIM] {
        let v = a.to_array();
        std::array::from_fn(|d| {
            let span = self.max[d] - self.min[d];
            if span > 0.0 {
                2.0 * (v[d] - self.min[d]) / span - 1.0
            } else {
                0.0
            }
        })
    }

    /// Inverse map. Degenerate dimensions return their single value.
    pub fn denormalize(&self, n: &[f64; ACTION_DIM]) -> GraspAction {
        let v: [f64; ACTION_DIM] = std::array::from_fn(|d| {
            let span = self.max[d] - self.min[d];
            if span > 0.0 {
                self.min[d] + (n[d] + 1.0) * 0.5 * span
            } else {
                self.min[d]
            }
        });
        GraspAction::from_array(v)
    }
}

pub fn normalize_actions(actions: &[GraspAction], stats: &ActionStats) -> Vec<[f64; ACTION_DIM]> {
    stats.warn_degenerate();
    actions.iter().map(|a| stats.normalize(a)).collect()
}

pub fn denormalize_actions(normalized: &[[f64; ACTION_DIM]], stats: &ActionStats) -> Vec<GraspAction> {
    normalized.iter().map(|n| stats.denormalize(n)).collect()
}
