use super::Point;

/// Static 3-d tree over a borrowed point slice.
pub struct KdTree<'a> {
    points: &'a [Point],
    // implicit balanced tree: node at the middle of each index range
    idx: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        build(points, &mut idx, 0);
        Self { points, idx }
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Squared distance and index of the nearest point; ties go to the lower index.
    pub fn nearest(&self, q: &Point) -> Option<(f64, usize)> {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(q, 0, self.idx.len(), 0, &mut best);
        (best.1 != usize::MAX).then_some(best)
    }

    fn nearest_in(&self, q: &Point, lo: usize, hi: usize, depth: usize, best: &mut (f64, usize)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.idx[mid];
        let p = &self.points[i];
        let d = dist2(p, q);
        if d < best.0 || (d == best.0 && i < best.1) {
            *best = (d, i);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_in(q, near.0, near.1, depth + 1, best);
        if diff * diff <= best.0 {
            self.nearest_in(q, far.0, far.1, depth + 1, best);
        }
    }

    /// The `k` nearest points as (squared distance, index), ordered by
    /// distance then index.
    pub fn knn(&self, q: &Point, k: usize) -> Vec<(f64, usize)> {
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(q, k, 0, self.idx.len(), 0, &mut heap);
        }
        heap.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        heap
    }

    fn knn_in(&self, q: &Point, k: usize, lo: usize, hi: usize, depth: usize, found: &mut Vec<(f64, usize)>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.idx[mid];
        let p = &self.points[i];
        offer(found, k, (dist2(p, q), i));
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_in(q, k, near.0, near.1, depth + 1, found);
        let bound = if found.len() < k { f64::INFINITY } else { worst(found).0 };
        if diff * diff <= bound {
            self.knn_in(q, k, far.0, far.1, depth + 1, found);
        }
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn worse(a: &(f64, usize), b: &(f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

fn worst(found: &[(f64, usize)]) -> (f64, usize) {
    let mut w = found[0];
    for c in &found[1..] {
        if worse(c, &w) {
            w = *c;
        }
    }
    w
}

// k is small (tens), a linear scan beats a heap here
fn offer(found: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    if found.len() < k {
        found.push(cand);
        return;
    }
    let (wi, w) =
        found.iter().enumerate().fold((0, found[0]), |acc, (i, c)| if worse(c, &acc.1) { (i, *c) } else { acc });
    if worse(&w, &cand) {
        found[wi] = cand;
    }
}

fn build(points: &[Point], idx: &mut [usize], depth: usize) {
    if idx.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let (left, right) = idx.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}
