//! PSNR/SSIM oracle values and symmetry properties.

use hdrcycle_core::metrics::{psnr, ssim, PSNR_CAP_DB};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(v: f32) -> Array3<f32> {
    Array3::from_elem((3, 16, 16), v)
}

fn random_image(seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0f32..1.0))
}

#[test]
fn psnr_identical_is_capped() {
    let a = random_image(1);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
}

#[test]
fn psnr_uniform_offset_oracle() {
    // MSE 0.01 -> 10*log10(1/0.01) = 20 dB
    let v = psnr(&uniform(0.5), &uniform(0.6)).unwrap();
    assert!((v - 20.0).abs() < 1e-4, "{v}");
}

#[test]
fn psnr_symmetric_and_shape_checked() {
    let a = random_image(2);
    let b = random_image(3);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    let c = Array3::zeros((3, 32, 16));
    assert!(psnr(&a, &c).is_err());
}

#[test]
fn ssim_identical_is_one() {
    let a = random_image(4);
    let v = ssim(&a, &a).unwrap();
    assert!((v - 1.0).abs() < 1e-6, "{v}");
}

#[test]
fn ssim_symmetric() {
    let a = random_image(5);
    let b = random_image(6);
    let ab = ssim(&a, &b).unwrap();
    let ba = ssim(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-6);
    assert!(ab < 1.0);
    assert!(ab > -1.0);
}

#[test]
fn ssim_degrades_with_noise() {
    let a = random_image(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let small = &a + &Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(-0.01f32..0.01));
    let big = &a + &Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(-0.2f32..0.2));
    let s_small = ssim(&a, &small).unwrap();
    let s_big = ssim(&a, &big).unwrap();
    assert!(s_small > s_big, "{s_small} vs {s_big}");
}

#[test]
fn ssim_rejects_tiny_images() {
    let a = Array3::<f32>::zeros((3, 8, 8));
    assert!(ssim(&a, &a).is_err());
}
