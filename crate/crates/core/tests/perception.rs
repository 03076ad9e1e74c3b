//! Heuristic saliency masks, provider behaviour and the per-epoch cache.

use hdrcycle_core::perception::{
    gaussian_blur, gaussian_kernel_1d, heuristic_artifact_mask, heuristic_exposure_masks,
    laplacian, refresh_cache, soft_artifact_mask, soft_exposure_masks, HeuristicParams,
    HeuristicProvider, PerceptionCache, PerceptionProvider, Role, SaliencyTriplet,
};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn gradient_image() -> Array3<f32> {
    // horizontal luminance ramp 0..1 plus a bright block and a dark block
    let mut px = Array3::zeros((3, 32, 32));
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                px[[c, y, x]] = x as f32 / 31.0;
            }
        }
        for y in 0..4 {
            for x in 0..4 {
                px[[c, y, x]] = 1.0; // overexposed corner
                px[[c, 28 + y, 28 + x]] = 0.0; // underexposed corner
            }
        }
    }
    px
}

#[test]
fn kernel_normalized_and_symmetric() {
    for sigma in [0.5f32, 1.0, 1.5, 3.0] {
        let taps = gaussian_kernel_1d(sigma);
        assert_eq!(taps.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
        let sum: f32 = taps.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
        for i in 0..taps.len() / 2 {
            assert_eq!(taps[i], taps[taps.len() - 1 - i]);
        }
    }
}

#[test]
fn blur_preserves_constant_and_mean() {
    let img = Array2::from_elem((20, 20), 0.7f32);
    let out = gaussian_blur(&img, 1.5);
    assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-5));
}

#[test]
fn laplacian_zero_on_linear_ramp_interior() {
    let mut img = Array2::zeros((16, 16));
    for y in 0..16 {
        for x in 0..16 {
            img[[y, x]] = 0.1 * x as f32 + 0.05 * y as f32;
        }
    }
    let lap = laplacian(&img);
    for y in 1..15 {
        for x in 1..15 {
            assert!(lap[[y, x]].abs() < 1e-5, "({y},{x}): {}", lap[[y, x]]);
        }
    }
}

#[test]
fn exposure_masks_threshold_semantics() {
    let px = gradient_image();
    let (over, under) = heuristic_exposure_masks(&px, 0.95, 0.05).unwrap();
    assert_eq!(over[[0, 0]], 1.0);
    assert_eq!(under[[31, 31]], 1.0);
    assert_eq!(over[[16, 16]], 0.0);
    assert_eq!(under[[16, 16]], 0.0);
    // a pixel is never both over and under
    for (o, u) in over.iter().zip(under.iter()) {
        assert!(o * u == 0.0);
    }
    assert!(heuristic_exposure_masks(&px, 0.05, 0.95).is_err());
    assert!(heuristic_exposure_masks(&px, 1.0, 0.05).is_err());
}

#[test]
fn soft_masks_binarize_to_hard_masks() {
    let px = gradient_image();
    let p = HeuristicParams::default();
    let (so, su) = soft_exposure_masks(&px, &p).unwrap();
    let (ho, hu) = heuristic_exposure_masks(&px, p.t_over, p.t_under).unwrap();
    for ((s, h), (s2, h2)) in so.iter().zip(ho.iter()).zip(su.iter().zip(hu.iter())) {
        assert_eq!((*s >= 0.5) as u8, (*h >= 0.5) as u8);
        assert_eq!((*s2 >= 0.5) as u8, (*h2 >= 0.5) as u8);
    }
    let sa = soft_artifact_mask(&px, &p).unwrap();
    let ha = heuristic_artifact_mask(&px, p.blur_sigma, p.lap_threshold).unwrap();
    for (s, h) in sa.iter().zip(ha.iter()) {
        assert_eq!((*s >= 0.5) as u8, (*h >= 0.5) as u8);
    }
}

#[test]
fn artifact_mask_flags_sharp_block_edges_only() {
    let p = HeuristicParams::default();
    let smooth = Array3::from_elem((3, 32, 32), 0.5f32);
    let mask = heuristic_artifact_mask(&smooth, p.blur_sigma, p.lap_threshold).unwrap();
    assert!(mask.iter().all(|&v| v == 0.0));
    let mask2 = heuristic_artifact_mask(&gradient_image(), p.blur_sigma, p.lap_threshold).unwrap();
    assert!(mask2.iter().any(|&v| v == 1.0));
}

#[test]
fn provider_counts_match_masks_and_role() {
    let px = gradient_image();
    let provider = HeuristicProvider::default();
    let rep = provider.query(&px, Role::HdrOutput).unwrap();
    assert_eq!(rep.provider_id, "heuristic");
    assert_eq!(rep.counts.total, 32 * 32);
    assert_eq!(
        rep.counts.over,
        rep.saliency.over.iter().filter(|&&v| v >= 0.5).count() as u64
    );
    assert!(rep.counts.over >= 16); // the bright corner plus the x=31 column
    assert!(rep.counts.under >= 16);
    assert_eq!(rep.has_artifacts, rep.counts.artifact > 0);

    // LDR outputs are judged only on artifacts
    let ldr_rep = provider.query(&px, Role::LdrOutput).unwrap();
    assert_eq!(ldr_rep.counts.over, 0);
    assert_eq!(ldr_rep.counts.under, 0);
    assert_eq!(ldr_rep.counts.artifact, rep.counts.artifact);
}

#[test]
fn provider_deterministic() {
    let px = gradient_image();
    let provider = HeuristicProvider::default();
    let a = provider.query(&px, Role::HdrOutput).unwrap();
    let b = provider.query(&px, Role::HdrOutput).unwrap();
    assert_eq!(a.saliency.artifact, b.saliency.artifact);
    assert_eq!(a.counts, b.counts);
}

#[test]
fn cache_neutral_before_first_refresh() {
    let cache = PerceptionCache::new();
    assert_eq!(cache.epoch(), None);
    let sal = cache.saliency_or_neutral("ldr/0", 16, 16);
    assert!(sal.is_neutral());
    assert_eq!(sal.artifact.dim(), (16, 16));
}

#[test]
fn cache_refresh_and_lookup() {
    let mut cache = PerceptionCache::new();
    let provider = HeuristicProvider::default();
    let outputs = vec![
        ("fake_hdr/0".to_string(), gradient_image(), Role::HdrOutput),
        ("fake_ldr/0".to_string(), gradient_image(), Role::LdrOutput),
    ];
    refresh_cache(&mut cache, &outputs, &provider, 3).unwrap();
    assert_eq!(cache.epoch(), Some(3));
    assert_eq!(cache.len(), 2);
    assert!(!cache.saliency_or_neutral("fake_hdr/0", 32, 32).is_neutral());
    assert!(cache.saliency_or_neutral("missing", 32, 32).is_neutral());
    assert_eq!(cache.get("fake_ldr/0").unwrap().counts.over, 0);
}

#[test]
fn neutral_triplet_is_identity_shape() {
    let t = SaliencyTriplet::neutral(8, 12);
    assert!(t.is_neutral());
    assert_eq!(t.over.dim(), (8, 12));
    let mut t2 = SaliencyTriplet::neutral(8, 12);
    t2.under[[0, 0]] = 0.0;
    assert!(!t2.is_neutral());
}

#[test]
fn invalid_params_rejected() {
    let mut p = HeuristicParams::default();
    p.t_under = 0.96;
    assert!(p.validate().is_err());
    assert!(HeuristicProvider::new(p).is_err());
    let mut q = HeuristicParams::default();
    q.blur_sigma = 0.0;
    assert!(q.validate().is_err());
}

proptest! {
    #[test]
    fn masks_stay_in_unit_range(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0f32..1.0));
        let p = HeuristicParams::default();
        let (so, su) = soft_exposure_masks(&px, &p).unwrap();
        let sa = soft_artifact_mask(&px, &p).unwrap();
        for v in so.iter().chain(su.iter()).chain(sa.iter()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
