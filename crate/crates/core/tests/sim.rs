mod common;

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use proptest::prelude::*;
use sculptdiff_core::dataset::GraspAction;
use sculptdiff_core::metrics::hausdorff;
use sculptdiff_core::sim::{init, scripted_demo, ClayConfig, ClayState, DemoSettings, InitialShape, ShapeRecipe};
use sculptdiff_core::{PointCloud, StageFrame};

fn frame() -> StageFrame {
    StageFrame { center: [0.004, -0.003], surface_z: 0.01, crop_radius: 0.09, crop_height: 0.08 }
}

fn fresh() -> ClayState {
    init(&ClayConfig::default(), &frame()).unwrap()
}

fn rot_about(p: &[f64; 3], angle: f64, c: [f64; 2]) -> [f64; 3] {
    let (s, co) = angle.sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    [c[0] + co * dx - s * dy, c[1] + s * dx + co * dy, p[2]]
}

#[test]
fn init_is_seeded_and_bounded() {
    let f = frame();
    let a = fresh();
    assert_eq!(a.particles.len(), 4096);
    assert_eq!(a, fresh());
    let other = init(&ClayConfig { seed: 9, ..ClayConfig::default() }, &f).unwrap();
    assert_ne!(a.particles, other.particles);
    for p in &a.particles {
        let r = ((p[0] - f.center[0]).powi(2) + (p[1] - f.center[1]).powi(2)).sqrt();
        assert!(r <= 0.03 + 1e-12);
        assert!(p[2] >= f.surface_z && p[2] <= f.surface_z + 0.025);
    }
    let sphere = init(
        &ClayConfig {
            initial_shape: InitialShape::Sphere { radius: 0.02 },
            particle_count: 1000,
            ..ClayConfig::default()
        },
        &f,
    )
    .unwrap();
    assert_eq!(sphere.particles.len(), 1000);
    let c = [f.center[0], f.center[1], f.surface_z + 0.02];
    assert!(sphere.particles.iter().all(|p| common::dist(p, &c) <= 0.02 + 1e-12));
}

#[test]
fn config_validation() {
    let bad = ClayConfig { particle_count: 0, ..ClayConfig::default() };
    assert_eq!(bad.validate().unwrap_err().to_string(), "particle_count must be > 0");
    let bad = ClayConfig { finger_width: -1.0, ..ClayConfig::default() };
    assert!(bad.validate().unwrap_err().to_string().contains("finger_width"));
}

#[test]
fn wide_grasp_leaves_clay_unchanged() {
    let s = fresh();
    let f = frame();
    for rot in [0.0, 0.7, 2.0] {
        let a = GraspAction::new(f.center[0], f.center[1], f.surface_z + 0.012, rot, 0.062);
        assert_eq!(s.apply_grasp(&a), s);
    }
}

#[test]
fn squeeze_bounds_extent_along_closing_axis() {
    let s = fresh();
    let f = frame();
    let cfg = &s.config;
    for (rot, width) in [(0.0, 0.02), (1.1, 0.015), (2.5, 0.03)] {
        let a = GraspAction::new(f.center[0] + 0.002, f.center[1], f.surface_z + 0.012, rot, width);
        let next = s.apply_grasp(&a);
        assert_eq!(next.particles.len(), s.particles.len());
        assert_ne!(next, s);
        let (sin, cos) = a.rot.sin_cos();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in &next.particles {
            let (rx, ry) = (p[0] - a.x, p[1] - a.y);
            let along = rx * cos + ry * sin;
            let d = -rx * sin + ry * cos;
            if along.abs() <= cfg.finger_width / 2.0 && (p[2] - a.z).abs() <= cfg.finger_height / 2.0 {
                lo = lo.min(d);
                hi = hi.max(d);
            }
            assert!(p[2] >= f.surface_z - 1e-9);
        }
        assert!(hi - lo <= width + 2.0 * cfg.skin + 1e-12, "extent {}", hi - lo);
    }
}

/// Dense samples of the cylinder's top, side and bottom surfaces.
fn cylinder_surface(f: &StageFrame, r: f64, h: f64, step: f64) -> PointCloud {
    let mut pts = Vec::new();
    let rings = (r / step).ceil() as usize;
    for z in [f.surface_z, f.surface_z + h] {
        pts.push([f.center[0], f.center[1], z]);
        for i in 1..=rings {
            let rr = r * i as f64 / rings as f64;
            let m = ((TAU * rr / step).ceil() as usize).max(6);
            for k in 0..m {
                let t = TAU * k as f64 / m as f64;
                pts.push([f.center[0] + rr * t.cos(), f.center[1] + rr * t.sin(), z]);
            }
        }
    }
    let m = (TAU * r / step).ceil() as usize;
    let layers = (h / step).ceil() as usize;
    for l in 0..=layers {
        let z = f.surface_z + h * l as f64 / layers as f64;
        for k in 0..m {
            let t = TAU * k as f64 / m as f64;
            pts.push([f.center[0] + r * t.cos(), f.center[1] + r * t.sin(), z]);
        }
    }
    PointCloud::new(pts).unwrap()
}

#[test]
fn observation_of_cylinder_tracks_analytic_surface() {
    let s = fresh();
    let f = frame();
    let obs = s.observe(2048, 3).unwrap();
    assert_eq!(obs.len(), 2048);
    assert_eq!(obs, s.observe(2048, 3).unwrap());
    let h = s.spacing();
    let analytic = cylinder_surface(&f, 0.03, 0.025, h / 4.0);
    let d = hausdorff(&obs, &analytic).unwrap();
    assert!(d <= 2.0 * h, "hausdorff {d} vs spacing {h}");
}

fn anisotropy(c: &PointCloud) -> f64 {
    let n = c.len() as f64;
    let mx = c.points().iter().map(|p| p[0]).sum::<f64>() / n;
    let my = c.points().iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in c.points() {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx / n;
        syy += dy * dy / n;
        sxy += dx * dy / n;
    }
    let half_tr = 0.5 * (sxx + syy);
    let disc = (half_tr * half_tr - (sxx * syy - sxy * sxy)).sqrt();
    (half_tr + disc) / (half_tr - disc)
}

#[test]
fn scripted_demos() {
    let clay = ClayConfig::default();
    let f = frame();
    let settings = DemoSettings::default();
    for seed in 0..3 {
        let line = scripted_demo(ShapeRecipe::Line, &clay, &f, &settings, seed).unwrap();
        line.validate(Some(2048)).unwrap();
        assert!(anisotropy(line.states.last().unwrap()) >= 3.0);
        assert!(anisotropy(&line.goal) >= 3.0);
    }
    let x = scripted_demo(ShapeRecipe::X, &clay, &f, &settings, 5).unwrap();
    assert!(x.actions.len() >= 4);
    // two rotation clusters a quarter turn apart
    let mut rots: Vec<f64> = x.actions.iter().map(|a| a.rot).collect();
    rots.sort_by(f64::total_cmp);
    let (lo, hi): (Vec<f64>, Vec<f64>) = rots.iter().partition(|&&r| r < FRAC_PI_2);
    assert!(!lo.is_empty() && !hi.is_empty());
    let spread = |v: &[f64]| {
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    assert!(spread(&lo) < 0.2 && spread(&hi) < 0.2);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&hi) - mean(&lo) - FRAC_PI_2).abs() < 0.1);

    let a = scripted_demo(ShapeRecipe::Cone, &clay, &f, &settings, 11).unwrap();
    assert_eq!(a, scripted_demo(ShapeRecipe::Cone, &clay, &f, &settings, 11).unwrap());
    assert_ne!(a.actions, scripted_demo(ShapeRecipe::Cone, &clay, &f, &settings, 12).unwrap().actions);
    assert!("Star".parse::<ShapeRecipe>().is_err());
    assert_eq!("line".parse::<ShapeRecipe>().unwrap(), ShapeRecipe::Line);
}

fn grasp_strategy() -> impl Strategy<Value = GraspAction> {
    let f = frame();
    (-0.02f64..0.02, -0.02f64..0.02, 0.0f64..0.03, 0.0f64..PI, 0.008f64..0.05)
        .prop_map(move |(x, y, z, rot, w)| GraspAction::new(f.center[0] + x, f.center[1] + y, f.surface_z + z, rot, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grasp_is_deterministic_and_above_stage(a in grasp_strategy()) {
        let s = fresh();
        let n1 = s.apply_grasp(&a);
        prop_assert_eq!(&n1, &s.apply_grasp(&a));
        prop_assert!(n1.particles.iter().all(|p| p[2] >= frame().surface_z - 1e-9));
    }

    #[test]
    fn repeated_grasp_is_idempotent(a in grasp_strategy()) {
        let s = fresh();
        let once = s.apply_grasp(&a);
        let twice = once.apply_grasp(&a);
        let skin = s.config.skin;
        for (p, q) in once.particles.iter().zip(&twice.particles) {
            prop_assert!(common::dist(p, q) <= skin);
        }
    }

    #[test]
    fn grasp_is_rotation_equivariant(a in grasp_strategy(), theta in -PI..PI) {
        let f = frame();
        let s = fresh();
        let rotated = ClayState {
            particles: s.particles.iter().map(|p| rot_about(p, theta, f.center)).collect(),
            ..s.clone()
        };
        let lhs = rotated.apply_grasp(&a.rotated(theta, f.center));
        let rhs: Vec<[f64; 3]> = s.apply_grasp(&a).particles.iter().map(|p| rot_about(p, theta, f.center)).collect();
        for (p, q) in lhs.particles.iter().zip(&rhs) {
            prop_assert!((0..3).all(|d| (p[d] - q[d]).abs() <= 1e-6));
        }
    }
}
