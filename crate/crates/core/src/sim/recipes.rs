use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_8};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init, ClayConfig};
use crate::dataset::{GraspAction, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::pointcloud::StageFrame;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeRecipe {
    X,
    Line,
    Cone,
}

impl ShapeRecipe {
    pub const ALL: [ShapeRecipe; 3] = [ShapeRecipe::X, ShapeRecipe::Line, ShapeRecipe::Cone];

    pub fn name(&self) -> &'static str {
        match self {
            Self::X => "X",
            Self::Line => "Line",
            Self::Cone => "Cone",
        }
    }
}

impl fmt::Display for ShapeRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Self::X),
            "line" => Ok(Self::Line),
            "cone" => Ok(Self::Cone),
            _ => invalid(format!("unknown shape {s:?} (expected X, Line or Cone)")),
        }
    }
}

/// Per-demo perturbation of the authored script, standing in for the
/// variation between human demonstrations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoSettings {
    pub cloud_size: usize,
    pub position_jitter: f64,
    pub rot_jitter: f64,
    pub width_jitter: f64,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self { cloud_size: 2048, position_jitter: 0.0015, rot_jitter: 0.04, width_jitter: 0.001 }
    }
}

/// The authored grasp script for a shape, without jitter.
pub fn nominal_grasps(recipe: ShapeRecipe, frame: &StageFrame) -> Vec<GraspAction> {
    let [cx, cy] = frame.center;
    let z0 = frame.surface_z;
    let along = |rot: f64, offset: f64, z: f64, width: f64| {
        GraspAction::new(cx + offset * rot.cos(), cy + offset * rot.sin(), z0 + z, rot, width)
    };
    match recipe {
        ShapeRecipe::Line => vec![
            along(0.0, 0.0, 0.0125, 0.03),
            along(0.0, 0.016, 0.0125, 0.02),
            along(0.0, -0.016, 0.0125, 0.02),
            along(0.0, 0.0, 0.0125, 0.016),
            along(0.0, 0.028, 0.0125, 0.016),
            along(0.0, -0.028, 0.0125, 0.016),
        ],
        ShapeRecipe::X => {
            let (a, b) = (FRAC_PI_4, 3.0 * FRAC_PI_4);
            vec![
                along(a, 0.02, 0.0125, 0.014),
                along(a, -0.02, 0.0125, 0.014),
                along(b, 0.02, 0.0125, 0.014),
                along(b, -0.02, 0.0125, 0.014),
                along(a, 0.034, 0.0125, 0.012),
                along(a, -0.034, 0.0125, 0.012),
                along(b, 0.034, 0.0125, 0.012),
                along(b, -0.034, 0.0125, 0.012),
            ]
        }
        ShapeRecipe::Cone => {
            let mut g: Vec<GraspAction> = (0..4).map(|i| along(i as f64 * FRAC_PI_4, 0.0, 0.02, 0.036)).collect();
            g.extend((0..4).map(|i| along(FRAC_PI_8 + i as f64 * FRAC_PI_4, 0.0, 0.028, 0.022)));
            g.push(along(0.0, 0.0, 0.036, 0.014));
            g.push(along(FRAC_PI_2, 0.0, 0.036, 0.014));
            g
        }
    }
}

/// Derives an independent seed from `seed` and a salt (splitmix64 finalizer).
pub fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Goal cloud for a shape: the nominal script run on the canonical fill.
pub fn goal_cloud(
    recipe: ShapeRecipe,
    clay: &ClayConfig,
    frame: &StageFrame,
    cloud_size: usize,
) -> Result<crate::PointCloud> {
    let mut state = init(clay, frame)?;
    for a in nominal_grasps(recipe, frame) {
        state = state.apply_grasp(&a);
    }
    state.observe(cloud_size, mix(clay.seed, 0x90a1))
}

/// Runs a jittered copy of the authored script on a seeded fill and records
/// every observation. The goal is the nominal script's final observation,
/// so a demo's own final chamfer measures how far one human-like execution
/// lands from the target.
pub fn scripted_demo(
    recipe: ShapeRecipe,
    clay: &ClayConfig,
    frame: &StageFrame,
    settings: &DemoSettings,
    seed: u64,
) -> Result<Trajectory> {
    let goal = goal_cloud(recipe, clay, frame, settings.cloud_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed));
    let fill = ClayConfig { seed: mix(seed, 0xf111), ..clay.clone() };
    let mut state = init(&fill, frame)?;
    let mut states = vec![state.observe(settings.cloud_size, mix(seed, 0))?];
    let mut actions = Vec::new();
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
    for (i, a) in nominal_grasps(recipe, frame).into_iter().enumerate() {
        let p = settings.position_jitter;
        let a = GraspAction::new(
            a.x + jitter(&mut rng, p),
            a.y + jitter(&mut rng, p),
            a.z + jitter(&mut rng, p),
            a.rot + jitter(&mut rng, settings.rot_jitter),
            (a.width + jitter(&mut rng, settings.width_jitter)).max(1e-3),
        );
        state = state.apply_grasp(&a);
        actions.push(a);
        states.push(state.observe(settings.cloud_size, mix(seed, i as u64 + 1))?);
    }
    Ok(Trajectory {
        goal,
        states,
        actions,
        shape_label: recipe.name().into(),
        source: format!("{}-{seed}", recipe.name()),
    })
}
