#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sculpt_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use sculptdiff_core::dataset::{GraspAction, Trajectory};
use sculptdiff_core::encoder::EncoderConfig;
use sculptdiff_core::encoder::{group, PointEncoder};
use sculptdiff_core::pointcloud::{downsample, DownsampleMethod, Point};
use sculptdiff_core::policy::PolicyConfig;
use sculptdiff_core::PointCloud;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(n: usize, scale: f64, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    let pts = (0..n)
        .map(|_| [r.random_range(-scale..scale), r.random_range(-scale..scale), r.random_range(0.0..scale)])
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn brute_nn(p: &[f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

pub fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let ab: f64 = a.points().iter().map(|p| brute_nn(p, b.points())).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.points().iter().map(|p| brute_nn(p, a.points())).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

pub fn brute_hausdorff(a: &PointCloud, b: &PointCloud) -> f64 {
    let ab = a.points().iter().map(|p| brute_nn(p, b.points())).fold(0.0, f64::max);
    let ba = b.points().iter().map(|p| brute_nn(p, a.points())).fold(0.0, f64::max);
    ab.max(ba)
}

/// Classic Munkres (starred/primed zeros) on a square matrix; returns the
/// minimum total cost.
pub fn munkres_cost(cost: &[f64], n: usize) -> f64 {
    let mut c = cost.to_vec();
    for i in 0..n {
        let m = c[i * n..(i + 1) * n].iter().cloned().fold(f64::INFINITY, f64::min);
        for j in 0..n {
            c[i * n + j] -= m;
        }
    }
    for j in 0..n {
        let m = (0..n).map(|i| c[i * n + j]).fold(f64::INFINITY, f64::min);
        for i in 0..n {
            c[i * n + j] -= m;
        }
    }
    // mark: 0 none, 1 star, 2 prime
    let mut mark = vec![0u8; n * n];
    let mut row_cov = vec![false; n];
    let mut col_cov = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if c[i * n + j] == 0.0 && !row_cov[i] && !col_cov[j] {
                mark[i * n + j] = 1;
                row_cov[i] = true;
                col_cov[j] = true;
            }
        }
    }
    row_cov.iter_mut().for_each(|v| *v = false);
    col_cov.iter_mut().for_each(|v| *v = false);
    loop {
        for j in 0..n {
            col_cov[j] = (0..n).any(|i| mark[i * n + j] == 1);
        }
        if col_cov.iter().filter(|&&v| v).count() == n {
            break;
        }
        loop {
            // find an uncovered zero
            let mut z = None;
            'find: for i in 0..n {
                if row_cov[i] {
                    continue;
                }
                for j in 0..n {
                    if !col_cov[j] && c[i * n + j] == 0.0 {
                        z = Some((i, j));
                        break 'find;
                    }
                }
            }
            match z {
                None => {
                    let mut m = f64::INFINITY;
                    for i in 0..n {
                        for j in 0..n {
                            if !row_cov[i] && !col_cov[j] {
                                m = m.min(c[i * n + j]);
                            }
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            if row_cov[i] {
                                c[i * n + j] += m;
                            }
                            if !col_cov[j] {
                                c[i * n + j] -= m;
                            }
                        }
                    }
                }
                Some((i, j)) => {
                    mark[i * n + j] = 2;
                    if let Some(js) = (0..n).find(|&jj| mark[i * n + jj] == 1) {
                        row_cov[i] = true;
                        col_cov[js] = false;
                        continue;
                    }
                    // augmenting path of alternating primes and stars
                    let mut path = vec![(i, j)];
                    loop {
                        let (_, pj) = *path.last().unwrap();
                        let Some(si) = (0..n).find(|&ii| mark[ii * n + pj] == 1) else { break };
                        path.push((si, pj));
                        let pj2 = (0..n).find(|&jj| mark[si * n + jj] == 2).unwrap();
                        path.push((si, pj2));
                    }
                    for &(pi, pj) in &path {
                        let m = &mut mark[pi * n + pj];
                        *m = if *m == 1 { 0 } else { 1 };
                    }
                    mark.iter_mut().for_each(|m| {
                        if *m == 2 {
                            *m = 0
                        }
                    });
                    row_cov.iter_mut().for_each(|v| *v = false);
                    col_cov.iter_mut().for_each(|v| *v = false);
                    break;
                }
            }
        }
    }
    (0..n * n).filter(|&k| mark[k] == 1).map(|k| cost[k]).sum()
}

pub fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    let mut c = Vec::new();
    for p in a.points() {
        for q in b.points() {
            c.push(dist(p, q));
        }
    }
    c
}

/// Minimum over all permutations; only for tiny n.
pub fn permutation_min_cost(cost: &[f64], n: usize) -> f64 {
    fn rec(row: usize, n: usize, cost: &[f64], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(row + 1, n, cost, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, n, cost, &mut vec![false; n], 0.0, &mut best);
    best
}

// ---------------------------------------------------------------- policy toys

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        groups: 8,
        group_size: 8,
        token_dim: 16,
        layers: 1,
        heads: 2,
        latent_dim: 16,
        point_hidden: 16,
        mlp_ratio: 2,
        cloud_size: 128,
        position_scale: 0.03,
        local_scale: 0.01,
        ..EncoderConfig::default()
    }
}

pub fn tiny_policy() -> PolicyConfig {
    PolicyConfig {
        channels: vec![32, 64],
        norm_groups: 8,
        time_dim: 16,
        batch_size: 32,
        learning_rate: 1e-3,
        epochs: 100_000,
        noise_samples: 32,
        ..PolicyConfig::default()
    }
}

pub fn blob(seed: u64, half: [f64; 3], angle: f64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, c) = angle.sin_cos();
    let pts = (0..128)
        .map(|_| {
            let p: [f64; 3] = std::array::from_fn(|i| rng.random_range(-half[i]..half[i]));
            [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2] + half[2]]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn traj(goal: PointCloud, states: Vec<PointCloud>, actions: Vec<GraspAction>) -> Trajectory {
    Trajectory { goal, states, actions, shape_label: "toy".into(), source: "toy".into() }
}

pub fn action(x: f64, y: f64, rot: f64, width: f64) -> GraspAction {
    GraspAction::new(x, y, 0.012, rot, width)
}

/// Two demonstrations with the same observation and opposite first grasps.
pub fn two_mode_dataset() -> Vec<Trajectory> {
    let goal = blob(1, [0.03, 0.01, 0.01], 0.0);
    let s0 = blob(2, [0.02, 0.02, 0.012], 0.0);
    let s1 = blob(3, [0.02, 0.015, 0.012], 0.0);
    [-0.02, 0.02]
        .into_iter()
        .map(|x| traj(goal.clone(), vec![s0.clone(), s1.clone()], vec![action(x, 0.0, 0.5, 0.02)]))
        .collect()
}

// ---------------------------------------------------------------- encoder toys

pub fn sphere(n: usize, r: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let pts = (0..n)
        .map(|_| loop {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let m = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if m > 0.1 && m <= 1.0 {
                break [v[0] / m * r, v[1] / m * r, v[2] / m * r + r];
            }
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn cuboid(n: usize, half: [f64; 3], angle: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let pts = (0..n)
        .map(|_| {
            let face = rng.random_range(0..6);
            let mut p: Point = [0.0; 3];
            for (i, v) in p.iter_mut().enumerate() {
                *v = rng.random_range(-half[i]..half[i]);
            }
            p[face / 2] = if face % 2 == 0 { half[face / 2] } else { -half[face / 2] };
            [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2] + half[2]]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn init(cfg: &EncoderConfig, seed: u64) -> (PointEncoder, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let enc = PointEncoder::init(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (enc, store)
}

pub struct Toy {
    pub groupings: Vec<Arc<sculptdiff_core::encoder::Grouping>>,
    pub labels: Vec<f32>,
}

pub fn toy_set(cfg: &EncoderConfig, per_class: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groupings = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * per_class {
        let cloud = if i % 2 == 0 {
            sphere(600, rng.random_range(0.015..0.035), &mut rng)
        } else {
            let half = [rng.random_range(0.012..0.03), rng.random_range(0.012..0.03), rng.random_range(0.012..0.03)];
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            cuboid(600, half, angle, &mut rng)
        };
        let cloud = downsample(&cloud, cfg.cloud_size, DownsampleMethod::UniformRandom, i as u64).unwrap();
        groupings.push(Arc::new(group(&cloud, cfg).unwrap()));
        labels.push(if i % 2 == 0 { 1.0 } else { -1.0 });
    }
    Toy { groupings, labels }
}

/// Linear readout `w·latent + b` fit jointly with the encoder by squared loss.
pub fn train_encoder_probe(cfg: &EncoderConfig, toy: &Toy, steps: usize) -> (PointEncoder, ParamStore<f32>, Vec<f64>) {
    let (enc, mut store) = init(cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let probe = sculpt_nn::layers::Linear::init(&mut store, "probe", cfg.latent_dim, 1, &mut rng);
    let mut opt = Adam::new(AdamConfig { lr: 2e-3, ..AdamConfig::default() });
    let mut losses = Vec::new();
    let n = toy.labels.len();
    for step in 0..steps {
        let idx: Vec<usize> = (0..16).map(|j| (step * 16 + j) % n).collect();
        let mut g = Graph::<f32>::new();
        store.bind(&mut g, true).unwrap();
        let batch: Vec<_> = idx.iter().map(|&i| toy.groupings[i].clone()).collect();
        let vars = enc.forward(&mut g, &batch).unwrap();
        let y = probe.forward(&mut g, vars.latent).unwrap();
        let t = g.constant(Tensor::new(&[16, 1], idx.iter().map(|&i| toy.labels[i]).collect()).unwrap()).unwrap();
        let loss = g.mse(y, t).unwrap();
        losses.push(g.value(loss).data()[0] as f64);
        g.backward(loss).unwrap();
        let grads = store.grads(&g).unwrap();
        opt.step(&mut store, &grads);
    }
    (enc, store, losses)
}

/// Normal equations with a small ridge, solved by Gaussian elimination.
pub fn ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let d = x[0].len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            a[i][d] += row[i] * t;
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += lambda;
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}
