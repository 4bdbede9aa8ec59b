#![cfg(feature = "flow")]

mod common;

use flaming::flowproc::{downsample_area, flow_targets, quantile_suppress_normalize, FlowNorm, FlowPrepConfig};
use proptest::prelude::*;

/// Values on a 1/64 grid keep `raw + c` and every difference exact.
fn grid_values(raw: &[u32]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 64.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn uniform_offset_changes_nothing(raw in prop::collection::vec(0u32..4096, 1..300), offset in 0u32..100_000) {
        let frame = grid_values(&raw);
        let c = f64::from(offset) / 64.0;
        let shifted: Vec<f64> = frame.iter().map(|v| v + c).collect();
        let a = quantile_suppress_normalize(&frame, 0.85).unwrap();
        let b = quantile_suppress_normalize(&shifted, 0.85).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn suppression_leaves_the_top_fraction(raw in prop::collection::vec(0u32..4096, 1..300)) {
        let frame = grid_values(&raw);
        let p = frame.len();
        let out = quantile_suppress_normalize(&frame, 0.85).unwrap();
        let positive = out.iter().filter(|&&v| v > 0.0).count();
        prop_assert!(positive <= p - (85 * p).div_ceil(100));
        prop_assert_eq!(&out, &common::suppress(&frame, 85, 100));
    }

    #[test]
    fn pipeline_output_is_a_flow_map(seed in any::<u64>(), frames in 1usize..4, per_clip in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h0, w0, h, w) = (12, 18, 3, 6);
        let raw: Vec<f32> = (0..frames * h0 * w0)
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..5.0) } else { 0.0 })
            .collect();
        let cfg = FlowPrepConfig { norm: if per_clip { FlowNorm::PerClip } else { FlowNorm::PerFrame }, ..Default::default() };
        let map = flow_targets(&raw, frames, h0, w0, h, w, &cfg).unwrap();
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        if per_clip {
            let max = map.values.iter().cloned().fold(0.0, f64::max);
            prop_assert!(max == 0.0 || max == 1.0);
        } else {
            for t in 0..frames {
                let max = map.frame(t).iter().cloned().fold(0.0, f64::max);
                prop_assert!(max == 0.0 || max == 1.0);
            }
        }
    }

    #[test]
    fn downsampling_preserves_mass(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let frame: Vec<f64> = (0..8 * 12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let small = downsample_area(&frame, 8, 12, 2, 3).unwrap();
        let a: f64 = frame.iter().sum();
        let b: f64 = small.iter().sum::<f64>() * 16.0;
        prop_assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn stated_examples() {
    let ramp: Vec<f64> = (0..10).map(f64::from).collect();
    let out = quantile_suppress_normalize(&ramp, 0.85).unwrap();
    assert_eq!(out, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert!(quantile_suppress_normalize(&[2.5; 7], 0.85).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(downsample_area(&[0.0, 2.0, 4.0, 6.0], 2, 2, 1, 1).unwrap(), [3.0]);
    assert!(downsample_area(&[0.0; 15], 3, 5, 2, 5).is_err());
}
