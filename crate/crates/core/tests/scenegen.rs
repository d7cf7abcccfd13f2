use pidg_core::flow::decompose_backward;
use pidg_core::geom;
use pidg_core::physics::{momentum_residual, Domain};
use pidg_core::ad::{Tape, Tensor};
use pidg_core::scenegen::{analytic_motion_flow_backward, generate, BackdropSpec, Motion, ObjectSpec, SceneSpec};

fn orbiting(motion: Motion) -> SceneSpec {
    let mut s = SceneSpec::rigid_translation();
    s.width = 48;
    s.height = 40;
    s.frames = 4;
    s.motion = motion;
    s.camera.arc_degrees = 25.0;
    s.camera.height = 0.6;
    s.backdrop = Some(BackdropSpec {
        side: 9,
        level: -0.9,
        half_extent: 1.5,
        scale: 0.15,
    });
    s
}

fn max_decomposition_error(spec: &SceneSpec) -> (f64, usize) {
    let scene = generate(spec).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for f in 0..spec.frames - 1 {
        let (_, motion) = decompose_backward(
            &scene.flow_b[f],
            &scene.depths[f + 1].data,
            &scene.cameras[f],
            &scene.cameras[f + 1],
        )
        .unwrap();
        let truth = analytic_motion_flow_backward(&scene, f);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (Some(m), Some(t)) = (motion.get(x, y), truth.get(x, y)) else { continue };
                worst = worst.max((m[0] - t[0]).abs()).max((m[1] - t[1]).abs());
                checked += 1;
            }
        }
    }
    (worst, checked)
}

#[test]
fn decomposition_recovers_object_motion_under_camera_motion() {
    let spec = orbiting(Motion::Rigid {
        velocity: [0.3, 0.1, -0.2],
        angular_velocity: 0.8,
    });
    let (err, n) = max_decomposition_error(&spec);
    assert!(n > 500, "only {n} pixels checked");
    assert!(err < 1e-6, "max error {err:e}");
}

#[test]
fn static_scene_has_no_motion_flow() {
    let spec = orbiting(Motion::Rigid {
        velocity: [0.0; 3],
        angular_velocity: 0.0,
    });
    let scene = generate(&spec).unwrap();
    for f in 0..spec.frames - 1 {
        let (camera, motion) = decompose_backward(
            &scene.flow_b[f],
            &scene.depths[f + 1].data,
            &scene.cameras[f],
            &scene.cameras[f + 1],
        )
        .unwrap();
        assert!(camera.valid_count() > 500);
        let max = motion.data.iter().zip(&motion.valid).filter(|(_, v)| **v).fold(0.0f64, |m, (d, _)| m.max(d[0].hypot(d[1])));
        assert!(max < 1e-6, "frame {f}: {max:e}");
        assert_eq!(scene.masks[f].count(), 0);
    }
}

#[test]
fn translation_with_still_camera_gives_constant_flow() {
    let mut spec = SceneSpec::rigid_translation();
    spec.frames = 3;
    spec.object.radius = 0.3;
    let scene = generate(&spec).unwrap();
    let flow = &scene.flow_b[0];
    // Shift of 0.3 world units seen at depth 3 ± 0.3 with focal 70: the
    // backward flow points left by 70·0.3/z px and has no vertical part.
    let (lo, hi) = (-70.0 * 0.3 / 2.7, -70.0 * 0.3 / 3.3);
    for (d, v) in flow.data.iter().zip(&flow.valid) {
        if *v {
            assert!(d[0] >= lo - 1e-9 && d[0] <= hi + 1e-9 && d[1].abs() < 1e-9, "{d:?}");
        }
    }
    let covered = scene.depths[1].data.iter().filter(|d| **d > 0.0).count();
    assert!(flow.valid_count() <= covered);
}

#[test]
fn depth_at_isolated_center_is_view_depth() {
    let mut spec = SceneSpec::rigid_translation();
    spec.frames = 2;
    spec.object = ObjectSpec {
        count: 1,
        center: [0.1, -0.2, 0.3],
        radius: 0.0,
        scale: [0.1, 0.1],
        opacity: 0.9,
    };
    let scene = generate(&spec).unwrap();
    for f in 0..2 {
        let cam = &scene.cameras[f];
        let mu = scene.pose_at(spec.time(f)).particles[0].mu;
        let (p, z) = cam.project_world(&mu);
        // Sample at the nearest pixel: a lone Gaussian's normalized depth is
        // its own depth everywhere it covers.
        let (x, y) = (p[0].round() as usize, p[1].round() as usize);
        let d = scene.depths[f].data[y * spec.width + x];
        assert!((d - z).abs() < 1e-9, "{d} vs {z}");
    }
}

#[test]
fn asset_counts() {
    let mut spec = SceneSpec::rigid_translation();
    spec.frames = 2;
    let s = generate(&spec).unwrap();
    assert_eq!((s.images.len(), s.flow_b.len(), s.depths.len(), s.masks.len()), (2, 1, 2, 2));
    assert!(s.masks[0].count() > 0);
}

#[test]
fn generation_is_deterministic() {
    let spec = orbiting(Motion::Shear { gamma: 0.5 });
    let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
    assert_eq!(a.images, b.images);
    assert_eq!(a.flow_b, b.flow_b);
    assert_eq!(a.depths, b.depths);
}

#[test]
fn rotation_speed_is_omega_r() {
    let mut spec = SceneSpec::rigid_translation();
    spec.object.count = 100;
    spec.frames = 2;
    let omega = 1.7;
    spec.motion = Motion::Rigid {
        velocity: [0.0; 3],
        angular_velocity: omega,
    };
    let scene = generate(&spec).unwrap();
    let c = spec.object.center;
    for truth in scene.analytic_truth(0.37) {
        let r = (truth.position[0] - c[0]).hypot(truth.position[1] - c[1]);
        assert!((geom::norm(&truth.velocity) - omega * r).abs() < 1e-12);
        assert!(truth.strain.iter().flatten().all(|e| *e == 0.0));
    }
}

#[test]
fn shear_velocity_is_divergence_free() {
    let spec = orbiting(Motion::Shear { gamma: 0.8 });
    let scene = generate(&spec).unwrap();
    let field = spec.motion.analytic_field(&spec.object.center).unwrap();
    let pts: Vec<[f64; 4]> = scene.analytic_truth(0.5).iter().take(50).map(|t| [t.position[0] * 0.3 + 0.5, t.position[1] * 0.3 + 0.5, t.position[2] * 0.3 + 0.5, 0.5]).collect();
    let mut tape = Tape::new();
    let (v, _) = field.eval(&mut tape, &Tensor::from_rows(&pts), &Domain::unit()).unwrap();
    // ∇·v = Σ ∂v_i/∂x_i from the coordinate tangents.
    for r in 0..pts.len() {
        let mut div = 0.0;
        for a in 0..3 {
            if let Some(t) = v.tangents[a] {
                div += tape.value(t).at(r, a);
            }
        }
        assert!(div.abs() < 1e-14);
    }
}

#[test]
fn elastic_wave_truth() {
    let wave = |amplitude| Motion::ElasticWave {
        amplitude,
        k: 2.0,
        lambda: 1.0,
        mu: 0.5,
        density: 1.0,
    };
    let mut spec = SceneSpec::rigid_translation();
    spec.frames = 2;
    spec.motion = wave(0.0);
    let scene = generate(&spec).unwrap();
    for t in scene.analytic_truth(0.6) {
        assert_eq!(t.velocity, [0.0; 3]);
        assert!(t.stress.iter().flatten().all(|s| *s == 0.0));
    }

    // The Eulerian counterpart balances momentum in linear theory.
    let field = wave(0.05).analytic_field(&[0.0; 3]).unwrap();
    let domain = Domain {
        lo: [-1.0, -1.0, -1.0, 0.0],
        extent: [2.0, 2.0, 2.0, 1.0],
    };
    let pts = Tensor::from_rows(&[[0.3, 0.4, 0.5, 0.2], [0.7, 0.1, 0.9, 0.8]]);
    let mut tape = Tape::new();
    let (v, s) = field.eval(&mut tape, &pts, &domain).unwrap();
    let r = momentum_residual(&mut tape, &v, &s, &domain, field.balanced_options()).unwrap();
    assert!(tape.value(r.r).max_abs() < 1e-8);
}
