mod common;

use std::collections::BTreeSet;

use common::random_cloud;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use sculptdiff_core::pointcloud::{
    add_base_plane, color_filter, crop, downsample, fuse, rotate_z, sdpc, DownsampleMethod, KdTree, PointCloud,
    StageFrame,
};

fn frame() -> StageFrame {
    StageFrame { center: [0.0, 0.0], surface_z: 0.0, crop_radius: 0.05, crop_height: 0.06 }
}

fn key(p: &[f64; 3]) -> [u64; 3] {
    [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]
}

fn as_set(c: &PointCloud) -> BTreeSet<[u64; 3]> {
    c.points().iter().map(key).collect()
}

#[test]
fn fuse_concatenates_in_order() {
    let a = random_cloud(3, 0.1, 1);
    let b = random_cloud(2, 0.1, 2);
    let f = fuse(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(f.len(), 5);
    assert_eq!(&f.points()[..3], a.points());
    assert_eq!(&f.points()[3..], b.points());
    assert_eq!(fuse(&[a.clone()]).unwrap(), a);
    assert_eq!(fuse(&[]).unwrap_err().to_string(), "no clouds to fuse");
}

#[test]
fn fused_sphere_views_bounding_box_is_union() {
    // four 512-point caps of a sphere, one per quadrant of azimuth
    let mut views = Vec::new();
    let mut r = common::rng(7);
    for q in 0..4 {
        let pts: Vec<[f64; 3]> = (0..512)
            .map(|_| {
                use rand::Rng;
                let az = (q as f64 + r.random_range(0.0..1.0)) * std::f64::consts::FRAC_PI_2;
                let el: f64 = r.random_range(0.0..std::f64::consts::PI);
                [0.03 * el.sin() * az.cos(), 0.03 * el.sin() * az.sin(), 0.03 + 0.03 * el.cos()]
            })
            .collect();
        views.push(PointCloud::new(pts).unwrap());
    }
    let fused = fuse(&views).unwrap();
    assert_eq!(fused.len(), 2048);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &views {
        for p in v.points() {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
    }
    assert_eq!(fused.bounding_box().unwrap(), (lo, hi));
}

#[test]
fn crop_boundaries() {
    let f = frame();
    let c =
        PointCloud::new(vec![[0.0, 0.0, 0.0], [0.05 + 1e-6, 0.0, 0.01], [0.0, 0.0, -1e-9], [0.0, 0.05, 0.06]]).unwrap();
    let out = crop(&c, &f);
    assert_eq!(out.points(), &[[0.0, 0.0, 0.0], [0.0, 0.05, 0.06]]);
}

#[test]
fn crop_matches_predicate_oracle() {
    let f = frame();
    let c = random_cloud(1000, 0.08, 11);
    let expected: Vec<[f64; 3]> = c
        .points()
        .iter()
        .filter(|p| (p[0] * p[0] + p[1] * p[1]).sqrt() <= 0.05 && p[2] >= 0.0 && p[2] <= 0.06)
        .cloned()
        .collect();
    assert!(!expected.is_empty() && expected.len() < 1000);
    assert_eq!(crop(&c, &f).points(), expected.as_slice());
}

#[test]
fn color_filter_cases() {
    let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
    let green = PointCloud::with_colors(pts.clone(), vec![[0.1, 0.8, 0.1]; 3]).unwrap();
    let lo = [0.0, 0.5, 0.0];
    let hi = [0.3, 1.0, 0.3];
    assert_eq!(color_filter(&green, lo, hi).unwrap(), green);
    let red = PointCloud::with_colors(pts.clone(), vec![[0.9, 0.1, 0.1]; 3]).unwrap();
    assert!(color_filter(&red, lo, hi).unwrap().is_empty());
    let plain = PointCloud::new(pts).unwrap();
    assert_eq!(color_filter(&plain, lo, hi).unwrap_err().to_string(), "color filter requires colors");
}

#[test]
fn color_filter_matches_predicate_oracle() {
    let base = random_cloud(500, 0.1, 3);
    let mut r = common::rng(4);
    let colors: Vec<[f64; 3]> = (0..500)
        .map(|_| {
            use rand::Rng;
            [r.random(), r.random(), r.random()]
        })
        .collect();
    let c = PointCloud::with_colors(base.points().to_vec(), colors.clone()).unwrap();
    let lo = [0.2, 0.3, 0.1];
    let hi = [0.9, 0.8, 0.7];
    let out = color_filter(&c, lo, hi).unwrap();
    let keep: Vec<usize> =
        (0..500).filter(|&i| (0..3).all(|d| colors[i][d] >= lo[d] && colors[i][d] <= hi[d])).collect();
    assert_eq!(out.len(), keep.len());
    for (k, &i) in keep.iter().enumerate() {
        assert_eq!(out.points()[k], c.points()[i]);
        assert_eq!(out.colors().unwrap()[k], colors[i]);
    }
}

fn hemisphere_shell(n: usize, radius: f64, seed: u64) -> PointCloud {
    use rand::Rng;
    let mut r = common::rng(seed);
    let pts = (0..n)
        .map(|_| {
            let az: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let z: f64 = r.random_range(0.0..1.0);
            let s = (1.0 - z * z).sqrt();
            [radius * s * az.cos(), radius * s * az.sin(), radius * z]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

#[test]
fn base_plane_fills_disc_footprint() {
    let shell = hemisphere_shell(3000, 0.03, 5);
    let step = 0.003;
    let out = add_base_plane(&shell, &frame(), step).unwrap();
    let base: Vec<[f64; 3]> = out.points()[shell.len()..].to_vec();
    assert!(base.iter().all(|p| p[2] == 0.0));
    // independent raster of the footprint: cells whose centers are well inside the disc
    let r_in = 0.03 - 2.0 * step;
    let mut cells = 0;
    let mut x: f64 = -0.03;
    while x <= 0.03 {
        let mut y: f64 = -0.03;
        while y <= 0.03 {
            if (x * x + y * y).sqrt() <= r_in {
                cells += 1;
                let near = base.iter().any(|p| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt() <= step);
                assert!(near, "cell ({x}, {y}) not covered");
            }
            y += step / 2.0;
        }
        x += step / 2.0;
    }
    assert!(cells > 100);
    // nothing outside the footprint
    assert!(base.iter().all(|p| (p[0] * p[0] + p[1] * p[1]).sqrt() <= 0.03 + 1e-9));
}

#[test]
fn base_plane_idempotent_up_to_duplication() {
    let shell = hemisphere_shell(2000, 0.03, 6);
    let once = add_base_plane(&shell, &frame(), 0.004).unwrap();
    let twice = add_base_plane(&once, &frame(), 0.004).unwrap();
    let first: Vec<_> = once.points()[shell.len()..].to_vec();
    for p in &twice.points()[once.len()..] {
        assert!(first.iter().any(|q| common::dist(p, q) <= 0.004));
    }
}

#[test]
fn base_plane_degenerate_and_colors() {
    let tiny = PointCloud::with_colors(
        vec![[0.0011, 0.0012, 0.01], [0.0013, 0.0011, 0.02]],
        vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    )
    .unwrap();
    let out = add_base_plane(&tiny, &frame(), 1.0).unwrap();
    assert!(out.len() >= 3);
    assert_eq!(out.colors().unwrap()[2], [0.5, 0.5, 0.0]);
    assert!(add_base_plane(&tiny, &frame(), 0.0).is_err());
    assert!(add_base_plane(&tiny, &frame(), -1.0).is_err());
}

#[test]
fn downsample_counts_and_padding() {
    let c = random_cloud(5000, 0.05, 9);
    for m in [DownsampleMethod::UniformRandom, DownsampleMethod::FarthestPoint] {
        let d = downsample(&c, 2048, m, 1).unwrap();
        assert_eq!(d.len(), 2048);
        let src = as_set(&c);
        assert!(d.points().iter().all(|p| src.contains(&key(p))));
    }
    let small = random_cloud(10, 0.05, 9);
    let padded = downsample(&small, 25, DownsampleMethod::UniformRandom, 3).unwrap();
    assert_eq!(padded.len(), 25);
    assert_eq!(as_set(&padded), as_set(&small));
    assert_eq!(padded, downsample(&small, 25, DownsampleMethod::UniformRandom, 3).unwrap());
    assert!(downsample(&small, 0, DownsampleMethod::UniformRandom, 3).is_err());
}

#[test]
fn farthest_point_identity_and_square() {
    let c = random_cloud(2048, 0.05, 10);
    let d = downsample(&c, 2048, DownsampleMethod::FarthestPoint, 0).unwrap();
    assert_eq!(as_set(&d), as_set(&c));
    let sq = PointCloud::new(vec![[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    let d = downsample(&sq, 2, DownsampleMethod::FarthestPoint, 0).unwrap();
    assert_eq!(d.points(), &[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
}

#[test]
fn rotate_quarter_turn() {
    let c = PointCloud::new(vec![[0.01, 0.0, 0.02]]).unwrap();
    let r = rotate_z(&c, std::f64::consts::FRAC_PI_2, [0.0, 0.0]);
    let p = r.points()[0];
    assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 0.01).abs() < 1e-12 && p[2] == 0.02);
    assert_eq!(rotate_z(&c, 0.0, [0.3, 0.2]), c);
}

#[test]
fn sdpc_round_trip_and_errors() {
    let c = random_cloud(100, 0.05, 12).quantized();
    assert_eq!(sdpc::decode(&sdpc::encode(&c)).unwrap(), c);
    let colored = PointCloud::with_colors(c.points().to_vec(), vec![[0.25, 0.5, 1.0]; 100]).unwrap();
    assert_eq!(sdpc::decode(&sdpc::encode(&colored)).unwrap(), colored);
    let bytes = sdpc::encode(&c);
    let e = sdpc::decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
    assert!(e.starts_with("unexpected end of stream"), "{e}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(sdpc::decode(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes;
    bad[4] = 9;
    assert!(sdpc::decode(&bad).unwrap_err().to_string().contains("version"));
}

#[test]
fn kdtree_knn_matches_scan() {
    let c = random_cloud(700, 0.05, 13);
    let tree = KdTree::new(c.points());
    let q = random_cloud(50, 0.06, 14);
    for p in q.points() {
        let mut all: Vec<(f64, usize)> = c
            .points()
            .iter()
            .enumerate()
            .map(|(i, r)| ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2) + (p[2] - r[2]).powi(2), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(tree.knn(p, 17), all[..17].to_vec());
        assert_eq!(tree.nearest(p).unwrap(), all[0]);
    }
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-0.1f64..0.1), 1..max).prop_map(|p| PointCloud::new(p).unwrap())
}

proptest! {
    #[test]
    fn crop_is_idempotent(c in cloud_strategy(200)) {
        let f = StageFrame { center: [0.01, -0.02], surface_z: -0.03, crop_radius: 0.07, crop_height: 0.09 };
        let once = crop(&c, &f);
        prop_assert_eq!(crop(&once, &f), once);
    }

    #[test]
    fn rotation_preserves_distances(c in cloud_strategy(40), angle in -7.0f64..7.0) {
        let r = rotate_z(&c, angle, [0.02, -0.01]);
        for i in 0..c.len() {
            for j in 0..c.len() {
                let d0 = common::dist(&c.points()[i], &c.points()[j]);
                let d1 = common::dist(&r.points()[i], &r.points()[j]);
                prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1e-12) + 1e-15);
            }
        }
        let back = rotate_z(&r, -angle, [0.02, -0.01]);
        for (p, q) in back.points().iter().zip(c.points()) {
            for d in 0..3 { prop_assert!((p[d] - q[d]).abs() <= 1e-9); }
        }
    }

    #[test]
    fn farthest_point_is_permutation_invariant(c in cloud_strategy(120), n in 1usize..40, seed in any::<u64>()) {
        let mut pts = c.points().to_vec();
        pts.shuffle(&mut common::rng(seed));
        let shuffled = PointCloud::new(pts).unwrap();
        let a = downsample(&c, n, DownsampleMethod::FarthestPoint, 0).unwrap();
        let b = downsample(&shuffled, n, DownsampleMethod::FarthestPoint, 0).unwrap();
        prop_assert_eq!(as_set(&a), as_set(&b));
    }

    #[test]
    fn fuse_then_crop_equals_crop_then_fuse(a in cloud_strategy(80), b in cloud_strategy(80)) {
        let f = StageFrame { center: [0.0, 0.0], surface_z: 0.0, crop_radius: 0.06, crop_height: 0.05 };
        let lhs = crop(&fuse(&[a.clone(), b.clone()]).unwrap(), &f);
        let rhs = fuse(&[crop(&a, &f), crop(&b, &f)]).unwrap();
        prop_assert_eq!(as_set(&lhs), as_set(&rhs));
    }
}
