//! Shape-similarity metrics between point clouds. All distances are
//! unsquared Euclidean, in the clouds' units.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pointcloud::{KdTree, Point, PointCloud};

/// Point-count ceiling for the O(n³) exact assignment solver.
pub const EXACT_EMD_MAX_POINTS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer: f64,
    pub emd: f64,
    pub hausdorff: f64,
}

impl MetricReport {
    /// Exact EMD when both clouds are small enough, Sinkhorn otherwise.
    /// Unequal counts are brought to the smaller size by farthest-point
    /// downsampling before EMD; chamfer and hausdorff use the full clouds.
    pub fn compute(a: &PointCloud, b: &PointCloud) -> Result<Self> {
        let chamfer = chamfer(a, b)?;
        let hausdorff = hausdorff(a, b)?;
        let (a2, b2);
        let (ea, eb) = if a.len() == b.len() {
            (a, b)
        } else {
            let n = a.len().min(b.len());
            let m = crate::pointcloud::DownsampleMethod::FarthestPoint;
            a2 = crate::pointcloud::downsample(a, n, m, 0)?;
            b2 = crate::pointcloud::downsample(b, n, m, 0)?;
            (&a2, &b2)
        };
        let mode = if ea.len() <= EXACT_EMD_MAX_POINTS { EmdMode::Exact } else { EmdMode::Approximate };
        let emd = emd(ea, eb, mode)?;
        Ok(Self { chamfer, emd, hausdorff })
    }
}

fn nn_distances<'a>(from: &'a [Point], to: &'a KdTree) -> impl Iterator<Item = f64> + 'a {
    // sqrt is monotone and correctly rounded, so sqrt(min d²) == min sqrt(d²)
    from.iter().map(move |p| to.nearest(p).expect("non-empty tree").0.sqrt())
}

fn require_nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return invalid("metric requires non-empty clouds");
    }
    Ok(())
}

/// Mean of the two directed mean nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    require_nonempty(a, b)?;
    let ta = KdTree::new(a.points());
    let tb = KdTree::new(b.points());
    let ab: f64 = nn_distances(a.points(), &tb).sum::<f64>() / a.len() as f64;
    let ba: f64 = nn_distances(b.points(), &ta).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// One-sided mean nearest-neighbor distance from `a` to `b`.
pub fn directed_chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    require_nonempty(a, b)?;
    let tb = KdTree::new(b.points());
    Ok(nn_distances(a.points(), &tb).sum::<f64>() / a.len() as f64)
}

pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    require_nonempty(a, b)?;
    let ta = KdTree::new(a.points());
    let tb = KdTree::new(b.points());
    let ab = nn_distances(a.points(), &tb).fold(0.0, f64::max);
    let ba = nn_distances(b.points(), &ta).fold(0.0, f64::max);
    Ok(ab.max(ba))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmdMode {
    Exact,
    Approximate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Upper bound on the entropic regularization, in distance units.
    pub epsilon: f64,
    /// The regularization actually used is at most this fraction of the
    /// mean nearest-neighbor cost, so the bias stays small at any scale.
    pub relative_epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L1 row-marginal violation drops below this.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.002, relative_epsilon: 0.05, max_iters: 500, tolerance: 1e-6 }
    }
}

pub fn emd(a: &PointCloud, b: &PointCloud, mode: EmdMode) -> Result<f64> {
    match mode {
        EmdMode::Exact => emd_exact(a, b),
        EmdMode::Approximate => emd_sinkhorn(a, b, &SinkhornConfig::default()),
    }
}

fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return invalid("EMD requires equal-size clouds");
    }
    require_nonempty(a, b)?;
    let mut c = Vec::with_capacity(a.len() * b.len());
    for p in a.points() {
        for q in b.points() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            c.push((dx * dx + dy * dy + dz * dz).sqrt());
        }
    }
    Ok(c)
}

pub fn emd_exact(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let cost = cost_matrix(a, b)?;
    let n = a.len();
    if n > EXACT_EMD_MAX_POINTS {
        return invalid(format!("exact EMD is limited to {EXACT_EMD_MAX_POINTS} points, got {n}"));
    }
    let assign = min_cost_assignment(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Minimum-cost perfect matching on a dense n×n cost matrix using
/// shortest augmenting paths with vertex potentials. Returns the column
/// assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based bookkeeping; index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    assign
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport between uniform marginals, solved in the log
/// domain with epsilon annealing. Returns the transport cost of the plan.
pub fn emd_sinkhorn(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    if !(cfg.epsilon > 0.0) || !(cfg.relative_epsilon > 0.0) {
        return invalid("sinkhorn epsilon must be > 0");
    }
    let cost = cost_matrix(a, b)?;
    let n = a.len();
    let max_cost = cost.iter().cloned().fold(0.0, f64::max);
    if max_cost == 0.0 {
        return Ok(0.0);
    }
    let nn_scale =
        (0..n).map(|i| cost[i * n..(i + 1) * n].iter().cloned().fold(f64::INFINITY, f64::min)).sum::<f64>() / n as f64;
    let target = cfg.epsilon.min(cfg.relative_epsilon * nn_scale).max(1e-6 * max_cost);

    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut eps = max_cost.max(target);
    let mut budget = cfg.max_iters.max(1);
    loop {
        let last = eps <= target;
        let stage_iters = if last { budget } else { budget.min(20) };
        for _ in 0..stage_iters {
            budget -= 1;
            let violation = sinkhorn_sweep(&cost, n, eps, log_w, &mut f, &mut g);
            if violation < cfg.tolerance {
                break;
            }
        }
        if last || budget == 0 {
            break;
        }
        eps = (eps * 0.5).max(target);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = cost[i * n + j];
            total += ((f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    Ok(total)
}

/// One pair of potential updates; returns the row-marginal violation.
fn sinkhorn_sweep(cost: &[f64], n: usize, eps: f64, log_w: f64, f: &mut [f64], g: &mut [f64]) -> f64 {
    for i in 0..n {
        let row = &cost[i * n..(i + 1) * n];
        f[i] = eps * log_w - eps * log_sum_exp(row.iter().zip(g.iter()).map(|(c, gj)| (gj - c) / eps));
    }
    for j in 0..n {
        g[j] = eps * log_w - eps * log_sum_exp((0..n).map(|i| (f[i] - cost[i * n + j]) / eps));
    }
    // columns are exact after the g-update; measure the rows
    (0..n)
        .map(|i| {
            let row = &cost[i * n..(i + 1) * n];
            let mass: f64 = row.iter().zip(g.iter()).map(|(c, gj)| ((f[i] + gj - c) / eps).exp()).sum();
            (mass - 1.0 / n as f64).abs()
        })
        .sum()
}
