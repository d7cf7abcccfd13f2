use pidg_core::ad::{gradient_check, Tensor};
use pidg_core::image::Image;
use pidg_core::losses::{dssim, l1, renders_loss, ssim_value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * 3).map(|_| rng.gen_range(0.05..0.95)).collect();
    Tensor::new(vec![h, w, 3], data).unwrap()
}

#[test]
fn dssim_gradient_matches_differences() {
    for seed in 0..3 {
        let x = random_image(12, 13, seed);
        let y = random_image(12, 13, seed + 100);
        let r = gradient_check(&[x], 1e-5, 1e-6, |tape, v| Ok(dssim(tape, v[0], &y).unwrap())).unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn renders_loss_gradient_matches_differences() {
    let x = random_image(11, 14, 7);
    let y = Image {
        width: 14,
        height: 11,
        data: random_image(11, 14, 8).into_data(),
    };
    let r = gradient_check(&[x], 1e-6, 1e-6, |tape, v| Ok(renders_loss(tape, v[0], &y, 0.2).unwrap().total)).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn l1_is_mean_absolute_error() {
    let mut tape = pidg_core::ad::Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[[0.0f64, 1.0], [0.5, 0.25]]));
    let l = l1(&mut tape, x, &Tensor::from_rows(&[[1.0, 1.0], [0.0, 0.0]])).unwrap();
    assert!((tape.value(l).item() - 1.75 / 4.0).abs() < 1e-15);
}

#[test]
fn ssim_metric_is_one_on_identical_images() {
    let a = Image {
        width: 16,
        height: 16,
        data: random_image(16, 16, 3).into_data(),
    };
    assert!((ssim_value(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}
