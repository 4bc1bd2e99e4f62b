mod common;

use implantformer::heatmap::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn codec_suite_passes() {
    for c in common::suites::codec_suite() {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn radius_matches_bisection_oracle() {
    for w in [5.0, 8.0, 12.5, 21.0, 40.0, 64.0, 100.0, 300.0] {
        for h in [5.0, 13.0, 21.0, 50.0, 200.0] {
            for o in [0.3, 0.5, 0.7, 0.9] {
                let r = gaussian_radius(w, h, o).unwrap();
                let oracle = common::radius_by_bisection(w, h, o);
                assert!((r - oracle).abs() < 1e-9, "{w}x{h}@{o}: {r} vs {oracle}");
            }
        }
    }
}

#[test]
fn radius_at_scaled_paper_box() {
    let r = gaussian_radius(21.0 / 4.0, 21.0 / 4.0, 0.7).unwrap();
    assert_eq!(r, common::radius_by_bisection(5.25, 5.25, 0.7));
    assert_eq!(r, 1.0);
    assert!(gaussian_radius(10.0, 10.0, 0.0).is_err());
    assert!(gaussian_radius(10.0, 10.0, 1.0).is_err());
    assert!(gaussian_radius(0.0, 10.0, 0.5).is_err());
    assert!((gaussian_radius(100.0, 100.0, 0.999).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn radius_monotone_in_box_size() {
    for o in [0.5, 0.7, 0.9] {
        let mut prev = 0.0;
        for i in 1..400 {
            let s = i as f64 * 0.5;
            let r = gaussian_radius(s, s * 1.3, o).unwrap();
            assert!(r >= prev - 1e-12, "size {s}");
            prev = r;
        }
    }
}

#[test]
fn gaussian_target_loss_matches_direct_evaluation() {
    let t = encode_target(&[(37.0, 22.0)], 64, 64, 4, 3.0).unwrap();
    let (loss, _) = focal_loss(&t.heatmap, &t.heatmap, 1, &LossConfig::default()).unwrap();
    let eps = 1e-7f64;
    let mut reference = 0.0;
    for &f in &t.heatmap {
        if f != 1.0 {
            let p = f.clamp(eps, 1.0 - eps);
            reference += (1.0 - f).powi(4) * p * p * (1.0 - p).ln();
        }
    }
    assert!((loss + reference).abs() < 1e-15);
    assert!(loss > 0.0);
}

#[test]
fn focal_zero_on_binary_match() {
    let mut f = vec![0.0f64; 25];
    f[12] = 1.0;
    let (loss, _) = focal_loss(&f, &f, 1, &LossConfig::default()).unwrap();
    assert!(loss.abs() < 1e-12);
    assert!(focal_loss(&f, &f, 0, &LossConfig::default()).is_err());
}

#[test]
fn focal_clamp_region_has_zero_gradient() {
    let target = vec![1.0, 0.0, 0.3];
    let pred = vec![0.0f64, 1.0, 0.5];
    let (loss, grad) = focal_loss(&pred, &target, 1, &LossConfig::default()).unwrap();
    assert!(loss.is_finite());
    assert_eq!(&grad[..2], &[0.0, 0.0]);
    assert!(grad[2] != 0.0);
}

#[test]
fn offset_loss_edges() {
    let t = vec![0.1, 0.2, 0.3, 0.4];
    let (l, g) = offset_loss(&t, &t, &[true, false], 2).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
    assert!(offset_loss(&t, &t, &[false, false], 2).is_err());
    assert!(offset_loss(&t, &t[..3], &[true, false], 2).is_err());
}

#[test]
fn peaks_unique_and_offsets_in_unit_interval() {
    let mut r = common::rng(5);
    for _ in 0..200 {
        let mut kps = Vec::new();
        let mut cells = std::collections::BTreeSet::new();
        while kps.len() < 3 {
            let (x, y): (f64, f64) = (r.gen_range(0.0..128.0), r.gen_range(0.0..96.0));
            if cells.insert(((x / 4.0) as usize, (y / 4.0) as usize)) {
                kps.push((x, y));
            }
        }
        let t = encode_target(&kps, 128, 96, 4, r.gen_range(1.0..5.0)).unwrap();
        assert_eq!(t.heatmap.iter().filter(|&&v| v == 1.0).count(), 3);
        assert_eq!(t.keypoint_count(), 3);
        assert!(t.heatmap.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (i, &m) in t.mask.iter().enumerate() {
            let (ox, oy) = (t.offsets[i], t.offsets[t.cells() + i]);
            if m {
                assert!((0.0..1.0).contains(&ox) && (0.0..1.0).contains(&oy));
                assert_eq!(t.heatmap[i], 1.0);
            } else {
                assert_eq!((ox, oy), (0.0, 0.0));
            }
        }
    }
}

#[test]
fn encode_rejects_out_of_bounds() {
    assert!(encode_target(&[(64.0, 3.0)], 64, 64, 4, 2.0).is_err());
    assert!(encode_target(&[(-0.1, 3.0)], 64, 64, 4, 2.0).is_err());
    assert!(encode_target(&[(1.0, 1.0)], 62, 64, 4, 2.0).is_err());
}

proptest! {
    #[test]
    fn decode_confidences_nonincreasing(seed in 0u64..10_000, k in 1usize..20) {
        let mut r = common::rng(seed);
        let (w, h) = (r.gen_range(1..20), r.gen_range(1..20));
        let heat: Vec<f64> = (0..w * h).map(|_| (r.gen_range(0..8) as f64) / 8.0).collect();
        let off: Vec<f64> = (0..2 * w * h).map(|_| r.gen_range(0.0..1.0)).collect();
        let d = decode_topk(&heat, &off, w, h, 4, k).unwrap();
        prop_assert!(!d.is_empty() && d.len() <= k);
        prop_assert!(d.windows(2).all(|p| p[0].confidence >= p[1].confidence));
        for det in &d {
            prop_assert!(det.x >= 0.0 && det.x < (4 * w) as f64 && det.y >= 0.0 && det.y < (4 * h) as f64);
            prop_assert!((0.0..=1.0).contains(&det.confidence));
        }
    }

    #[test]
    fn focal_loss_nonnegative(seed in 0u64..10_000) {
        let mut r = common::rng(seed);
        let t = encode_target(&[(r.gen_range(0.0..32.0), r.gen_range(0.0..32.0))], 32, 32, 4, r.gen_range(1.0..4.0)).unwrap();
        let pred: Vec<f64> = (0..t.cells()).map(|_| r.gen_range(0.0..1.0)).collect();
        let (loss, grad) = focal_loss(&pred, &t.heatmap, 1, &LossConfig::default()).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn total_loss_linear(a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0) {
        prop_assert!((total_loss(a + c, b, 0.55) - total_loss(a, b, 0.55) - c).abs() < 1e-12);
        prop_assert!((total_loss(a, b + c, 0.55) - total_loss(a, b, 0.55) - 0.55 * c).abs() < 1e-12);
    }
}
