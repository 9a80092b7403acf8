//! Point-cloud container and the geometric preprocessing applied to every
//! captured or simulated cloud.

mod kdtree;
pub mod sdpc;

use std::cmp::Ordering;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use kdtree::KdTree;

pub type Point = [f64; 3];
pub type Rgb = [f64; 3];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    colors: Option<Vec<Rgb>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        check_finite(&points)?;
        Ok(Self { points, colors: None })
    }

    pub fn with_colors(points: Vec<Point>, colors: Vec<Rgb>) -> Result<Self> {
        check_finite(&points)?;
        if colors.len() != points.len() {
            return invalid(format!("colors length {} does not match points length {}", colors.len(), points.len()));
        }
        Ok(Self { points, colors: Some(colors) })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_parts(self) -> (Vec<Point>, Option<Vec<Rgb>>) {
        (self.points, self.colors)
    }

    /// Axis-aligned bounds as (min, max); `None` for an empty cloud.
    pub fn bounding_box(&self) -> Option<(Point, Point)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        Some((lo, hi))
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        let n = self.points.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Rounds every coordinate and color to f32 precision, so the cloud
    /// survives an SDPC round trip unchanged.
    pub fn quantized(&self) -> Self {
        let q = |v: &[f64; 3]| [v[0] as f32 as f64, v[1] as f32 as f64, v[2] as f32 as f64];
        Self {
            points: self.points.iter().map(q).collect(),
            colors: self.colors.as_ref().map(|c| c.iter().map(q).collect()),
        }
    }

    /// Order-independent 64-bit content hash of the exact coordinate bits.
    pub fn content_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.points.len().hash(&mut h);
        for p in &self.points {
            for v in p {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn select(&self, idx: impl IntoIterator<Item = usize>) -> Self {
        let idx: Vec<usize> = idx.into_iter().collect();
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

fn check_finite(points: &[Point]) -> Result<()> {
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return invalid(format!("point {i} has a non-finite coordinate"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFrame {
    pub center: [f64; 2],
    pub surface_z: f64,
    pub crop_radius: f64,
    pub crop_height: f64,
}

impl Default for StageFrame {
    fn default() -> Self {
        Self { center: [0.0, 0.0], surface_z: 0.0, crop_radius: 0.09, crop_height: 0.08 }
    }
}

impl StageFrame {
    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().all(|v| v.is_finite()) && self.surface_z.is_finite();
        if !finite {
            return invalid("stage frame must be finite");
        }
        if !(self.crop_radius > 0.0) {
            return invalid("crop_radius must be > 0");
        }
        if !(self.crop_height > 0.0) {
            return invalid("crop_height must be > 0");
        }
        Ok(())
    }
}

pub fn fuse(clouds: &[PointCloud]) -> Result<PointCloud> {
    if clouds.is_empty() {
        return invalid("no clouds to fuse");
    }
    let with_colors = clouds.iter().all(|c| c.colors.is_some());
    let mut points = Vec::with_capacity(clouds.iter().map(PointCloud::len).sum());
    let mut colors = Vec::new();
    for c in clouds {
        points.extend_from_slice(&c.points);
        if with_colors {
            colors.extend_from_slice(c.colors.as_deref().unwrap_or_default());
        }
    }
    Ok(PointCloud { points, colors: with_colors.then_some(colors) })
}

pub fn crop(cloud: &PointCloud, frame: &StageFrame) -> PointCloud {
    let keep = (0..cloud.len()).filter(|&i| in_crop(&cloud.points[i], frame));
    cloud.select(keep)
}

pub(crate) fn in_crop(p: &Point, frame: &StageFrame) -> bool {
    let dx = p[0] - frame.center[0];
    let dy = p[1] - frame.center[1];
    (dx * dx + dy * dy).sqrt() <= frame.crop_radius
        && p[2] >= frame.surface_z
        && p[2] <= frame.surface_z + frame.crop_height
}

pub fn color_filter(cloud: &PointCloud, lo: Rgb, hi: Rgb) -> Result<PointCloud> {
    let Some(colors) = cloud.colors.as_ref() else {
        return invalid("color filter requires colors");
    };
    let keep = (0..cloud.len()).filter(|&i| (0..3).all(|d| colors[i][d] >= lo[d] && colors[i][d] <= hi[d]));
    Ok(cloud.select(keep))
}

/// Appends a grid at the stage surface covering the convex hull of the
/// cloud's xy-projection. The grid is aligned to the stage center.
pub fn add_base_plane(cloud: &PointCloud, frame: &StageFrame, grid_step: f64) -> Result<PointCloud> {
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return invalid("grid_step must be > 0");
    }
    if cloud.is_empty() {
        return invalid("cannot add a base plane to an empty cloud");
    }
    let xy: Vec<[f64; 2]> = cloud.points.iter().map(|p| [p[0], p[1]]).collect();
    let hull = convex_hull(&xy);
    let (lo, hi) = cloud.bounding_box().expect("non-empty");
    let [cx, cy] = frame.center;
    let i0 = ((lo[0] - cx) / grid_step).floor() as i64;
    let i1 = ((hi[0] - cx) / grid_step).ceil() as i64;
    let j0 = ((lo[1] - cy) / grid_step).floor() as i64;
    let j1 = ((hi[1] - cy) / grid_step).ceil() as i64;
    let tol = 1e-12 * (1.0 + (hi[0] - lo[0]).abs() + (hi[1] - lo[1]).abs());
    let mut added = Vec::new();
    for j in j0..=j1 {
        for i in i0..=i1 {
            let q = [cx + i as f64 * grid_step, cy + j as f64 * grid_step];
            if inside_hull(&hull, q, tol) {
                added.push([q[0], q[1], frame.surface_z]);
            }
        }
    }
    if added.is_empty() {
        let n = hull.len() as f64;
        let mx = hull.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = hull.iter().map(|p| p[1]).sum::<f64>() / n;
        added.push([mx, my, frame.surface_z]);
    }
    let mut out = cloud.clone();
    if let Some(colors) = out.colors.as_mut() {
        let n = colors.len() as f64;
        let mut mean = [0.0; 3];
        for c in colors.iter() {
            for d in 0..3 {
                mean[d] += c[d] / n;
            }
        }
        colors.extend(std::iter::repeat_n(mean, added.len()));
    }
    out.points.extend(added);
    Ok(out)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub(crate) fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], q: [f64; 2], tol: f64) -> bool {
    match hull.len() {
        0 => false,
        1 => (hull[0][0] - q[0]).abs() <= tol && (hull[0][1] - q[1]).abs() <= tol,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if cross(a, b, q).abs() > tol * len.max(1.0) {
                return false;
            }
            let t = (q[0] - a[0]) * (b[0] - a[0]) + (q[1] - a[1]) * (b[1] - a[1]);
            t >= -tol && t <= len * len + tol
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], q) >= -tol),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleMethod {
    UniformRandom,
    FarthestPoint,
}

pub fn downsample(cloud: &PointCloud, n: usize, method: DownsampleMethod, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return invalid("downsample count must be > 0");
    }
    if cloud.is_empty() {
        return invalid("cannot downsample an empty cloud");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cloud.len();
    let mut idx = match method {
        DownsampleMethod::UniformRandom if n < m => {
            let mut v = index::sample(&mut rng, m, n).into_vec();
            v.sort_unstable();
            v
        }
        DownsampleMethod::UniformRandom => (0..m).collect(),
        DownsampleMethod::FarthestPoint => farthest_point_indices(&cloud.points, n.min(m)),
    };
    while idx.len() < n {
        idx.push(rng.random_range(0..m));
    }
    Ok(cloud.select(idx))
}

pub fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point selection of `n` distinct indices.
///
/// Work happens on a lexicographically sorted copy, so every sum and every
/// tie-break sees the same sequence regardless of input order.
pub fn farthest_point_indices(points: &[Point], n: usize) -> Vec<usize> {
    let m = points.len();
    let n = n.min(m);
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]).then(a.cmp(&b)));
    let sorted: Vec<Point> = order.iter().map(|&i| points[i]).collect();

    let mut c = [0.0; 3];
    for p in &sorted {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    for v in &mut c {
        *v /= m as f64;
    }
    // strict comparison keeps the lexicographically smallest among ties
    let mut first = 0;
    let mut best = -1.0;
    for (i, p) in sorted.iter().enumerate() {
        let d = dist2(p, &c);
        if d > best {
            best = d;
            first = i;
        }
    }

    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut cur = first;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == n {
            break;
        }
        let mut next = usize::MAX;
        let mut best = -1.0;
        for i in 0..m {
            if taken[i] {
                continue;
            }
            let d = dist2(&sorted[i], &sorted[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        cur = next;
    }
    chosen.into_iter().map(|i| order[i]).collect()
}

pub fn rotate_z(cloud: &PointCloud, angle: f64, center: [f64; 2]) -> PointCloud {
    if angle == 0.0 {
        return cloud.clone();
    }
    let (s, c) = angle.sin_cos();
    let points = cloud.points.iter().map(|p| rotate_point(p, s, c, center)).collect();
    PointCloud { points, colors: cloud.colors.clone() }
}

pub fn rotate_point(p: &Point, s: f64, c: f64, center: [f64; 2]) -> Point {
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    [c * dx - s * dy + center[0], s * dx + c * dy + center[1], p[2]]
}
