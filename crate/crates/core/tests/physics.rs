use pidg_core::ad::{Tape, Tensor};
use pidg_core::hashgrid::HashGridConfig;
use pidg_core::material::{slot, MaterialConfig, MaterialField};
use pidg_core::physics::analytic::{AnalyticField, Fixed};
use pidg_core::physics::{
    block_sampled_cmr, field_cmr, momentum_residual, ContinuumField, Domain, ResidualOptions, ResidualSamples,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 4).map(|_| rng.gen_range(0.05..0.95)).collect();
    Tensor::new(vec![n, 4], data).unwrap()
}

fn max_residual(field: AnalyticField, domain: &Domain, pts: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let (v, s) = field.eval(&mut tape, pts, domain).unwrap();
    let r = momentum_residual(&mut tape, &v, &s, domain, field.balanced_options()).unwrap();
    tape.value(r.r).max_abs()
}

#[test]
fn analytic_solutions_have_vanishing_residual() {
    let domain = Domain {
        lo: [-1.0, -0.5, 0.0, 0.0],
        extent: [2.0, 1.0, 1.5, 2.0],
    };
    let fields = [
        AnalyticField::Uniform {
            v: [0.3, -0.2, 1.1],
            sigma: [1.0, -2.0, 0.5, 0.2, 0.1, -0.3],
        },
        AnalyticField::Shear {
            gamma: 2.0,
            sigma: [0.0; 6],
        },
        AnalyticField::Pressure {
            p0: 4.0,
            gradient: [0.0; 3],
        },
        AnalyticField::RigidRotation {
            omega: 0.8,
            center: [0.1, 0.2],
            density: 2.0,
        },
        AnalyticField::ElasticWave {
            amplitude: 0.01,
            k: 3.0,
            lambda: 2.0,
            mu: 1.5,
            density: 1.2,
        },
    ];
    let pts = random_points(64, 7);
    for f in fields {
        let r = max_residual(f, &domain, &pts);
        assert!(r < 1e-8, "{f:?}: residual {r:e}");
    }
}

#[test]
fn elastic_wave_needs_the_matching_speed() {
    // With the wrong density the inertial and stress terms no longer cancel.
    let domain = Domain::unit();
    let pts = random_points(16, 8);
    let f = AnalyticField::ElasticWave {
        amplitude: 0.5,
        k: 2.0,
        lambda: 1.0,
        mu: 1.0,
        density: 1.0,
    };
    let mut tape = Tape::new();
    let (v, s) = f.eval(&mut tape, &pts, &domain).unwrap();
    let opts = ResidualOptions {
        density: 2.0,
        linearized: true,
    };
    let r = momentum_residual(&mut tape, &v, &s, &domain, opts).unwrap();
    assert!(tape.value(r.r).max_abs() > 1e-2);
}

fn small_field(seed: u64, particles: usize) -> MaterialField<f64> {
    let cfg = MaterialConfig {
        plane: HashGridConfig::isotropic(2, 3, 4, 16, 10, 1),
        fourier_frequencies: 3,
        embedding_dim: 4,
        hidden: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = MaterialField::new(cfg, particles, &mut rng).unwrap();
    // Break the zero output layer and give the planes visible structure.
    for s in slot::PLANES.iter().copied().chain([slot::H2_W, slot::H2_B]) {
        for x in f.params.get_mut(s).data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    f
}

#[test]
fn material_residual_matches_central_differences() {
    let field = small_field(3, 4);
    let domain = Domain {
        lo: [0.0, -1.0, 0.5, 0.0],
        extent: [2.0, 3.0, 1.0, 0.5],
    };
    let pts = random_points(4, 11);
    let ids = [0u64, 1, 2, 3];
    let mut tape = Tape::new();
    let vars = field.params.bind_frozen(&mut tape);
    let (v, s) = field.velocity_stress(&mut tape, &vars, &pts, &ids).unwrap();
    let res = momentum_residual(&mut tape, &v, &s, &domain, ResidualOptions::default()).unwrap();
    let r = tape.value(res.r).clone();

    let h = 1e-6;
    for (i, &id) in ids.iter().enumerate() {
        let p = pts.row(i);
        let at = |q: [f64; 4]| field.evaluate(&Tensor::from_rows(&[q]), &[id]).unwrap()[0];
        let (v0, _) = at([p[0], p[1], p[2], p[3]]);
        let mut dv = [[0.0; 3]; 4];
        let mut ds = [[0.0; 6]; 4];
        for a in 0..4 {
            let mut hi = [p[0], p[1], p[2], p[3]];
            let mut lo = hi;
            hi[a] += h;
            lo[a] -= h;
            let ((vh, sh), (vl, sl)) = (at(hi), at(lo));
            for j in 0..3 {
                dv[a][j] = (vh[j] - vl[j]) / (2.0 * h * domain.extent[a]);
            }
            for k in 0..6 {
                ds[a][k] = (sh[k] - sl[k]) / (2.0 * h * domain.extent[a]);
            }
        }
        let idx = |i: usize, j: usize| [[0, 3, 4], [3, 1, 5], [4, 5, 2]][i][j];
        for j in 0..3 {
            let inertial = dv[3][j] + (0..3).map(|k| v0[k] * dv[k][j]).sum::<f64>();
            let div: f64 = (0..3).map(|k| ds[k][idx(k, j)]).sum();
            let want = inertial - div;
            let got = r.at(i, j);
            assert!((got - want).abs() <= 1e-5 * (1.0 + want.abs()), "row {i} comp {j}: {got} vs {want}");
        }
    }
}

fn samples(n: usize, seed: u64) -> ResidualSamples<f64> {
    let ids = (0..n as u64).rev().collect();
    ResidualSamples::new(random_points(n, seed), ids).unwrap()
}

#[test]
fn single_block_is_bit_identical_to_full_loss() {
    let field = small_field(5, 12);
    let smp = samples(12, 2);
    let domain = Domain::unit();
    let opts = ResidualOptions::default();

    // Reference: samples in id order, one tape.
    let mut order: Vec<usize> = (0..smp.len()).collect();
    order.sort_by_key(|&i| smp.ids[i]);
    let sorted = smp.subset(&order);
    let mut tape = Tape::new();
    let vars = field.params.bind(&mut tape);
    let loss = field_cmr(&mut tape, &vars, &field, &sorted, &domain, opts).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = block_sampled_cmr(&field, &smp, &domain, opts, 64, 1.0, &mut rng).unwrap();
    assert_eq!(out.blocks, 1);
    assert_eq!(out.loss.to_bits(), tape.value(loss).item().to_bits());
    for (g, &v) in out.grads.iter().zip(&vars) {
        let want = grads.or_zeros(v, g.shape());
        assert!(g.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn blocks_recombine_to_the_full_loss() {
    let field = small_field(6, 16);
    let smp = samples(16, 4);
    let domain = Domain::unit();
    let opts = ResidualOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = block_sampled_cmr(&field, &smp, &domain, opts, 16, 1.0, &mut rng).unwrap();
    for bs in [8, 5, 1] {
        let part = block_sampled_cmr(&field, &smp, &domain, opts, bs, 1.0, &mut rng).unwrap();
        assert_eq!(part.blocks, 16usize.div_ceil(bs));
        assert!((part.loss - full.loss).abs() <= 1e-12 * full.loss.max(1.0));
        for (a, b) in part.grads.iter().zip(&full.grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }
}

#[test]
fn subsampling_is_unbiased() {
    // Nonlinear residual of a wave gives every sample a different weight.
    let wave = AnalyticField::ElasticWave {
        amplitude: 0.8,
        k: 4.0,
        lambda: 1.0,
        mu: 1.0,
        density: 1.0,
    };
    let field = Fixed::<f64>::new(wave, Domain::unit());
    let smp = samples(20, 9);
    let opts = ResidualOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let full = block_sampled_cmr(&field, &smp, &Domain::unit(), opts, 8, 1.0, &mut rng)
        .unwrap()
        .loss;
    let trials = 10_000;
    let mut acc = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        acc += block_sampled_cmr(&field, &smp, &Domain::unit(), opts, 8, 0.5, &mut rng)
            .unwrap()
            .loss;
    }
    let mean = acc / trials as f64;
    assert!((mean - full).abs() < 0.02 * full, "mean {mean} vs full {full}");
}

#[test]
fn zero_initialized_field_has_zero_loss() {
    let cfg = MaterialConfig {
        plane: HashGridConfig::isotropic(2, 2, 4, 8, 8, 1),
        fourier_frequencies: 2,
        embedding_dim: 4,
        hidden: 8,
    };
    let field = MaterialField::<f64>::new(cfg, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = block_sampled_cmr(&field, &samples(6, 1), &Domain::unit(), ResidualOptions::default(), 4, 1.0, &mut rng)
        .unwrap();
    assert_eq!(out.loss, 0.0);
}
