//! Kinematic particle clay. Grasps project particles onto the closing
//! finger planes and redistribute the displaced material sideways and up.

mod recipes;

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GraspAction;
use crate::error::{invalid, Result};
use crate::pointcloud::{add_base_plane, downsample, DownsampleMethod, Point, PointCloud, StageFrame};

pub use recipes::{goal_cloud, mix, nominal_grasps, scripted_demo, DemoSettings, ShapeRecipe};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialShape {
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl InitialShape {
    fn volume(&self) -> f64 {
        match *self {
            Self::Cylinder { radius, height } => PI * radius * radius * height,
            Self::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClayConfig {
    pub particle_count: usize,
    pub initial_shape: InitialShape,
    /// Finger pad extent along the finger plane.
    pub finger_width: f64,
    /// Finger pad extent along z.
    pub finger_height: f64,
    /// Contact tolerance: particles within this distance of a plane are untouched.
    pub skin: f64,
    pub bulge_gain: f64,
    /// Surface voxel edge, in units of the mean particle spacing.
    pub surface_cell_factor: f64,
    pub seed: u64,
}

impl Default for ClayConfig {
    fn default() -> Self {
        Self {
            particle_count: 4096,
            initial_shape: InitialShape::Cylinder { radius: 0.03, height: 0.025 },
            finger_width: 0.02,
            finger_height: 0.03,
            skin: 0.0005,
            bulge_gain: 0.4,
            surface_cell_factor: 1.0,
            seed: 0,
        }
    }
}

impl ClayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count == 0 {
            return invalid("particle_count must be > 0");
        }
        let dims_ok = match self.initial_shape {
            InitialShape::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
            InitialShape::Sphere { radius } => radius > 0.0,
        };
        if !dims_ok {
            return invalid("initial_shape dimensions must be > 0");
        }
        for (name, v) in [
            ("finger_width", self.finger_width),
            ("finger_height", self.finger_height),
            ("skin", self.skin),
            ("bulge_gain", self.bulge_gain),
            ("surface_cell_factor", self.surface_cell_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be > 0"));
            }
        }
        Ok(())
    }

    /// Mean particle spacing of the undeformed fill.
    pub fn spacing(&self) -> f64 {
        (self.initial_shape.volume() / self.particle_count as f64).cbrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClayState {
    pub particles: Vec<Point>,
    pub seed: u64,
    pub config: ClayConfig,
    pub frame: StageFrame,
}

/// Seeded lattice fill of the configured initial shape, centered on the stage.
pub fn init(config: &ClayConfig, frame: &StageFrame) -> Result<ClayState> {
    config.validate()?;
    frame.validate()?;
    let n = config.particle_count;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [cx, cy] = frame.center;
    let z0 = frame.surface_z;
    let mut h = config.spacing();
    let lattice = loop {
        let pts = lattice_points(&config.initial_shape, h, [cx, cy, z0]);
        if pts.len() >= n {
            break pts;
        }
        h *= 0.9995;
    };
    let mut keep = index::sample(&mut rng, lattice.len(), n).into_vec();
    keep.sort_unstable();
    let j = 0.05 * h;
    let particles = keep
        .into_iter()
        .map(|i| {
            let p = lattice[i];
            let q = [p[0] + rng.random_range(-j..=j), p[1] + rng.random_range(-j..=j), p[2] + rng.random_range(-j..=j)];
            clamp_into(&config.initial_shape, q, [cx, cy, z0])
        })
        .collect();
    Ok(ClayState { particles, seed: config.seed, config: config.clone(), frame: *frame })
}

fn lattice_points(shape: &InitialShape, h: f64, base: [f64; 3]) -> Vec<Point> {
    let mut out = Vec::new();
    match *shape {
        InitialShape::Cylinder { radius, height } => {
            let m = (radius / h).floor() as i64;
            let layers = ((height - 0.5 * h) / h).floor() as i64;
            for k in 0..=layers.max(0) {
                for j in -m..=m {
                    for i in -m..=m {
                        let (x, y) = (i as f64 * h, j as f64 * h);
                        if x * x + y * y <= radius * radius {
                            out.push([base[0] + x, base[1] + y, base[2] + (k as f64 + 0.5) * h]);
                        }
                    }
                }
            }
        }
        InitialShape::Sphere { radius } => {
            let m = (radius / h).floor() as i64;
            for k in -m..=m {
                for j in -m..=m {
                    for i in -m..=m {
                        let (x, y, z) = (i as f64 * h, j as f64 * h, k as f64 * h);
                        if x * x + y * y + z * z <= radius * radius {
                            out.push([base[0] + x, base[1] + y, base[2] + radius + z]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn clamp_into(shape: &InitialShape, mut p: Point, base: [f64; 3]) -> Point {
    match *shape {
        InitialShape::Cylinder { radius, height } => {
            let (dx, dy) = (p[0] - base[0], p[1] - base[1]);
            let r = (dx * dx + dy * dy).sqrt();
            if r > radius {
                p[0] = base[0] + dx * radius / r;
                p[1] = base[1] + dy * radius / r;
            }
            p[2] = p[2].clamp(base[2], base[2] + height);
        }
        InitialShape::Sphere { radius } => {
            let c = [base[0], base[1], base[2] + radius];
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r > radius {
                p = [c[0] + d[0] * radius / r, c[1] + d[1] * radius / r, c[2] + d[2] * radius / r];
            }
            p[2] = p[2].max(base[2]);
        }
    }
    p
}

impl ClayState {
    pub fn spacing(&self) -> f64 {
        self.config.spacing()
    }

    /// Applies one squeeze and returns the deformed state.
    pub fn apply_grasp(&self, action: &GraspAction) -> ClayState {
        let cfg = &self.config;
        let (sin, cos) = action.rot.sin_cos();
        // u runs along the finger plane, n along the closing axis
        let u = [cos, sin];
        let n = [-sin, cos];
        let half = 0.5 * action.width;
        let pad_w = 0.5 * cfg.finger_width;
        let pad_h = 0.5 * cfg.finger_height;
        let floor = self.frame.surface_z;
        let particles = self
            .particles
            .iter()
            .map(|p| {
                let rx = p[0] - action.x;
                let ry = p[1] - action.y;
                let s = rx * u[0] + ry * u[1];
                let d = rx * n[0] + ry * n[1];
                let h = p[2] - action.z;
                if s.abs() > pad_w || h.abs() > pad_h || d.abs() <= half + cfg.skin {
                    return *p;
                }
                let pen = d.abs() - half;
                let d2 = half.copysign(d);
                let s2 = if s == 0.0 { s } else { s + (cfg.bulge_gain * pen).copysign(s) };
                let h2 = h + cfg.bulge_gain * pen;
                [action.x + s2 * u[0] + d2 * n[0], action.y + s2 * u[1] + d2 * n[1], (action.z + h2).max(floor)]
            })
            .collect();
        ClayState { particles, seed: self.seed, config: self.config.clone(), frame: self.frame }
    }

    /// Particles whose voxel touches the exterior air region. Occupancy is
    /// closed (dilate, then erode) to seal single-voxel gaps in the fill, and
    /// the exterior is flood-filled from outside the clay. Voxels below the
    /// stage are solid, which hides the bottom face as it would be from
    /// cameras above the stage.
    pub fn surface_particles(&self, frame: &StageFrame) -> Vec<Point> {
        if self.particles.is_empty() {
            return Vec::new();
        }
        let cell = self.config.surface_cell_factor * self.spacing();
        let [cx, cy] = frame.center;
        let z0 = frame.surface_z;
        let keys: Vec<[i64; 3]> = self
            .particles
            .iter()
            .map(|p| {
                // xy cells centered on the stage axis, z cells start at the surface,
                // which puts the undeformed fill lattice at cell centers
                [
                    ((p[0] - cx) / cell + 0.5).floor() as i64,
                    ((p[1] - cy) / cell + 0.5).floor() as i64,
                    ((p[2] - z0) / cell).floor().max(0.0) as i64,
                ]
            })
            .collect();
        let grid = VoxelGrid::around(&keys, 3);
        let mut occupied = vec![false; grid.len()];
        for k in &keys {
            occupied[grid.at(*k)] = true;
        }
        let dilated = grid.morph(&occupied, true);
        let closed = grid.morph(&dilated, false);

        // exterior air: everything reachable from the top corner of the box
        let mut exterior = vec![false; grid.len()];
        let start = [grid.lo[0], grid.lo[1], grid.hi[2]];
        let mut stack = vec![start];
        exterior[grid.at(start)] = true;
        while let Some(k) = stack.pop() {
            for q in grid.neighbors(k) {
                let i = grid.at(q);
                if !closed[i] && !exterior[i] {
                    exterior[i] = true;
                    stack.push(q);
                }
            }
        }
        self.particles
            .iter()
            .zip(&keys)
            .filter(|(_, k)| grid.neighbors(**k).any(|q| exterior[grid.at(q)]))
            .map(|(p, _)| *p)
            .collect()
    }

    /// Simulated capture: surface shell plus base plane, downsampled to
    /// exactly `n` points and rounded to storage precision.
    pub fn observe(&self, n: usize, seed: u64) -> Result<PointCloud> {
        observe(self, n, &self.frame, seed)
    }
}

pub fn apply_grasp(state: &ClayState, action: &GraspAction) -> ClayState {
    state.apply_grasp(action)
}

pub fn observe(state: &ClayState, n: usize, frame: &StageFrame, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return invalid("observation size must be > 0");
    }
    let shell = PointCloud::new(state.surface_particles(frame))?;
    let with_base = add_base_plane(&shell, frame, state.spacing())?;
    Ok(downsample(&with_base, n, DownsampleMethod::UniformRandom, seed)?.quantized())
}

const FACES: [[i64; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Dense voxel box; z starts at the stage surface and everything below is solid.
struct VoxelGrid {
    lo: [i64; 3],
    hi: [i64; 3],
    dims: [usize; 3],
}

impl VoxelGrid {
    fn around(keys: &[[i64; 3]], pad: i64) -> Self {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for k in keys {
            for d in 0..3 {
                lo[d] = lo[d].min(k[d] - pad);
                hi[d] = hi[d].max(k[d] + pad);
            }
        }
        lo[2] = 0;
        let dims = [(hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize, (hi[2] - lo[2] + 1) as usize];
        Self { lo, hi, dims }
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    fn at(&self, k: [i64; 3]) -> usize {
        ((k[2] - self.lo[2]) as usize * self.dims[1] + (k[1] - self.lo[1]) as usize) * self.dims[0]
            + (k[0] - self.lo[0]) as usize
    }

    fn neighbors(&self, k: [i64; 3]) -> impl Iterator<Item = [i64; 3]> + '_ {
        FACES
            .iter()
            .map(move |f| [k[0] + f[0], k[1] + f[1], k[2] + f[2]])
            .filter(move |q| (0..3).all(|d| q[d] >= self.lo[d] && q[d] <= self.hi[d]))
    }

    /// One step of dilation (`grow`) or erosion with the face-neighbor
    /// cross. Out-of-box neighbors read as empty, except below the stage
    /// which reads as solid.
    fn morph(&self, src: &[bool], grow: bool) -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for z in self.lo[2]..=self.hi[2] {
            for y in self.lo[1]..=self.hi[1] {
                for x in self.lo[0]..=self.hi[0] {
                    let k = [x, y, z];
                    let here = src[self.at(k)];
                    let value = |f: &[i64; 3]| {
                        let q = [x + f[0], y + f[1], z + f[2]];
                        if q[2] < self.lo[2] {
                            true
                        } else if (0..3).any(|d| q[d] < self.lo[d] || q[d] > self.hi[d]) {
                            false
                        } else {
                            src[self.at(q)]
                        }
                    };
                    out[self.at(k)] =
                        if grow { here || FACES.iter().any(value) } else { here && FACES.iter().all(value) };
                }
            }
        }
        out
    }
}
