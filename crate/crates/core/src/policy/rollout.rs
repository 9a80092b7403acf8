//! Receding-horizon closed-loop execution in the simulator.

use crate::dataset::{GraspAction, Trajectory, Workspace};
use crate::error::Result;
use crate::metrics::chamfer;
use crate::pointcloud::PointCloud;
use crate::sim::{mix, ClayState};

use super::SculptDiff;

/// Anything that proposes grasps from the current and goal clouds.
pub trait Policy {
    /// At least one grasp; only the first `execute_steps` are executed.
    fn plan(
        &mut self,
        state: &PointCloud,
        goal: &PointCloud,
        prev: Option<&GraspAction>,
        seed: u64,
    ) -> Result<Vec<GraspAction>>;
}

impl Policy for SculptDiff {
    fn plan(
        &mut self,
        state: &PointCloud,
        goal: &PointCloud,
        prev: Option<&GraspAction>,
        seed: u64,
    ) -> Result<Vec<GraspAction>> {
        self.predict_actions(state, goal, prev, seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub max_grasps: usize,
    /// Stop once chamfer to the goal drops below this.
    pub stop_threshold: f64,
    pub execute_steps: usize,
    pub cloud_size: usize,
    pub seed: u64,
    pub workspace: Workspace,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_grasps: 10,
            stop_threshold: 0.0,
            execute_steps: 1,
            cloud_size: 2048,
            seed: 0,
            workspace: Workspace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub grasp_index: usize,
    pub action: GraspAction,
    pub chamfer: f64,
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    /// Chamfer to the goal before any grasp and after each one.
    pub chamfers: Vec<f64>,
    pub final_state: ClayState,
}

impl RolloutResult {
    pub fn initial_chamfer(&self) -> f64 {
        self.chamfers[0]
    }

    pub fn final_chamfer(&self) -> f64 {
        *self.chamfers.last().unwrap()
    }
}

/// Observe, plan, execute the first `execute_steps` grasps (clamped into
/// the workspace), repeat. `on_step` sees every executed grasp.
pub fn rollout(
    env: &ClayState,
    goal: &PointCloud,
    policy: &mut dyn Policy,
    cfg: &RolloutConfig,
    mut on_step: impl FnMut(&RolloutStep),
) -> Result<RolloutResult> {
    let frame = env.frame;
    let mut state = env.clone();
    let mut cloud = state.observe(cfg.cloud_size, mix(cfg.seed, 0))?;
    let mut traj = Trajectory {
        goal: goal.clone(),
        states: vec![cloud.clone()],
        actions: Vec::new(),
        shape_label: String::new(),
        source: format!("rollout-{}", cfg.seed),
    };
    let mut chamfers = vec![chamfer(&cloud, goal)?];
    let mut plan_round = 0u64;
    'outer: while traj.actions.len() < cfg.max_grasps && *chamfers.last().unwrap() >= cfg.stop_threshold {
        let plan = policy.plan(&cloud, goal, traj.actions.last(), mix(cfg.seed, 0x9000 + plan_round))?;
        plan_round += 1;
        if plan.is_empty() {
            break;
        }
        for a in plan.iter().take(cfg.execute_steps.max(1)) {
            let action = cfg.workspace.clamp(a, &frame);
            state = state.apply_grasp(&action);
            let i = traj.actions.len();
            cloud = state.observe(cfg.cloud_size, mix(cfg.seed, i as u64 + 1))?;
            let c = chamfer(&cloud, goal)?;
            on_step(&RolloutStep { grasp_index: i, action, chamfer: c });
            traj.actions.push(action);
            traj.states.push(cloud.clone());
            chamfers.push(c);
            if traj.actions.len() >= cfg.max_grasps || c < cfg.stop_threshold {
                break 'outer;
            }
        }
    }
    Ok(RolloutResult { trajectory: traj, chamfers, final_state: state })
}
