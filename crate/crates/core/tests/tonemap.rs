//! Tone-mapping operator tests with f64 reference values.

use hdrcycle_core::autograd::Graph;
use hdrcycle_core::imagecore::HdrImage;
use hdrcycle_core::tonemap::{
    inverse_mu_law, inverse_mu_law_value, mu_law, mu_law_value, mu_law_var, normalize_peak,
    normalized_mu_law_var, reinhard, ToneMapParams,
};
use ndarray::Array3;
use proptest::prelude::*;

/// f64 reference for the compressor, frozen as the oracle.
fn reference_mu_law(y: f64, mu: f64) -> f64 {
    (1.0 + mu * y).ln() / (1.0 + mu).ln()
}

#[test]
fn mu_law_reference_values() {
    // T(0.1) with mu = 5000 is ln(501)/ln(5001)
    let want = reference_mu_law(0.1, 5000.0);
    assert!((want - 0.7299).abs() < 5e-5);
    assert!((mu_law_value(0.1, 5000.0) as f64 - want).abs() < 1e-6);
    for y in [0.0, 0.001, 0.01, 0.25, 0.5, 0.9, 1.0] {
        let got = mu_law_value(y, 5000.0) as f64;
        assert!((got - reference_mu_law(y as f64, 5000.0)).abs() < 1e-6, "y={y}");
    }
    assert_eq!(mu_law_value(0.0, 5000.0), 0.0);
    assert!((mu_law_value(1.0, 5000.0) - 1.0).abs() < 1e-6);
}

#[test]
fn mu_law_round_trip() {
    let mu = 5000.0;
    for y in [0.0f32, 1e-4, 0.01, 0.1, 0.33, 0.66, 0.99, 1.0] {
        let back = inverse_mu_law_value(mu_law_value(y, mu), mu);
        assert!((back - y).abs() <= 1e-6 * y.max(1.0), "y={y} back={back}");
    }
}

proptest! {
    #[test]
    fn mu_law_monotone_and_invertible(a in 0.0f32..1.0, b in 0.0f32..1.0) {
        let mu = 5000.0;
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(mu_law_value(lo, mu) <= mu_law_value(hi, mu));
        let back = inverse_mu_law_value(mu_law_value(a, mu), mu);
        prop_assert!((back - a).abs() <= 2e-6);
    }
}

#[test]
fn mu_law_image_requires_normalized_peak() {
    let img = HdrImage::new(Array3::from_elem((3, 16, 16), 3.0)).unwrap();
    assert!(mu_law(&img, ToneMapParams::default()).is_err());
    let (scaled, peak) = normalize_peak(&img);
    assert_eq!(peak, 3.0);
    let mapped = mu_law(&scaled, ToneMapParams::default()).unwrap();
    assert!((mapped.pixels()[[0, 0, 0]] - 1.0).abs() < 1e-6);
    let back = inverse_mu_law(&mapped, ToneMapParams::default()).unwrap();
    assert!((back.pixels()[[1, 5, 5]] - 1.0).abs() < 1e-5);
}

#[test]
fn normalize_peak_zero_image_passthrough() {
    let img = HdrImage::new(Array3::zeros((3, 16, 16))).unwrap();
    let (scaled, peak) = normalize_peak(&img);
    assert_eq!(peak, 1.0);
    assert!(scaled.pixels().iter().all(|&v| v == 0.0));
}

#[test]
fn reinhard_values() {
    let img = HdrImage::new(Array3::from_elem((3, 16, 16), 1.0)).unwrap();
    let out = reinhard(&img);
    assert!((out.pixels()[[0, 0, 0]] - 0.5).abs() < 1e-7);
}

#[test]
fn mu_law_var_matches_scalar_path() {
    let g = Graph::new();
    let vals: Vec<f32> = vec![0.0, 0.05, 0.1, 0.5, 0.9, 1.0];
    let x = g.constant(
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 1, 2, 3]), vals.clone()).unwrap(),
    );
    let y = mu_law_var(&x, 5000.0);
    for (a, &b) in y.value().iter().zip(vals.iter()) {
        assert!((a - mu_law_value(b, 5000.0)).abs() < 1e-6);
    }
}

#[test]
fn normalized_mu_law_var_per_sample_peaks() {
    let g = Graph::new();
    // two samples with different peaks; each must be scaled independently
    let mut data = ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 1, 2, 2]));
    data.as_slice_mut().unwrap()[..4].copy_from_slice(&[1.0, 2.0, 4.0, 0.5]);
    data.as_slice_mut().unwrap()[4..].copy_from_slice(&[10.0, 5.0, 2.5, 1.0]);
    let x = g.constant(data);
    let y = normalized_mu_law_var(&x, 5000.0);
    let v = y.value();
    let s = v.as_slice().unwrap();
    assert!((s[0] - mu_law_value(0.25, 5000.0)).abs() < 1e-6);
    assert!((s[2] - 1.0).abs() < 1e-6);
    assert!((s[4] - 1.0).abs() < 1e-6);
    assert!((s[7] - mu_law_value(0.1, 5000.0)).abs() < 1e-6);
}

#[test]
fn bad_mu_rejected() {
    assert!(ToneMapParams::new(0.0).is_err());
    assert!(ToneMapParams::new(-3.0).is_err());
    assert!(ToneMapParams::new(5000.0).is_ok());
}
