//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the code under test to produce an expected
//! value.
#![allow(dead_code)]

pub mod grad;
pub mod suites;

use implantformer::autograd::Tensor;
use implantformer::network::{ModelParams, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, or the plain difference norm when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        diff
    } else {
        diff / (na + nb)
    }
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Parameter names starting with any of `prefixes`.
pub fn names_with(params: &ModelParams<f64>, prefixes: &[&str]) -> Vec<String> {
    params.names().filter(|n| prefixes.iter().any(|p| n.starts_with(p))).cloned().collect()
}

/// Tiny network used by the gradient checks.
pub fn toy_config() -> NetConfig {
    NetConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        layers: 2,
        mlp_ratio: 2,
        taps: vec![1, 2],
        ratios: vec![2, 4],
        reassemble_dim: 3,
        decoder_dim: 3,
        stem_width: 2,
        head_width: 3,
        ..NetConfig::default()
    }
}

/// Least squares by exhaustive refinement: a coarse grid over `(k, b)` is
/// repeatedly narrowed around the best cell. Independent of any closed form.
pub fn grid_search_line(zs: &[f64], xs: &[f64]) -> (f64, f64) {
    let q = |k: f64, b: f64| zs.iter().zip(xs).map(|(z, x)| (x - k * z - b).powi(2)).sum::<f64>();
    let (mut kc, mut bc) = (0.0, xs.iter().sum::<f64>() / xs.len() as f64);
    let (mut kw, mut bw) = (50.0, 500.0);
    for _ in 0..200 {
        let mut best = (q(kc, bc), kc, bc);
        for i in -10..=10 {
            for j in -10..=10 {
                let (k, b) = (kc + kw * i as f64 / 10.0, bc + bw * j as f64 / 10.0);
                let v = q(k, b);
                if v < best.0 {
                    best = (v, k, b);
                }
            }
        }
        kc = best.1;
        bc = best.2;
        kw *= 0.5;
        bw *= 0.5;
        if kw < 1e-13 && bw < 1e-13 {
            break;
        }
    }
    (kc, bc)
}

/// Area under the all-point precision envelope by midpoint integration
/// over recall steps of `step`. `labels` are `(confidence, is_tp)`.
pub fn ap_integration_oracle(labels: &[(f64, bool)], n_gt: usize, step: f64) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // Operating points after each distinct confidence level.
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == c {
            tp += sorted[i].1 as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
    }
    let steps = (1.0 / step).round() as usize;
    (0..steps)
        .map(|s| {
            let r = (s as f64 + 0.5) * step;
            points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        * step
}

/// Gaussian radius by bisection on the three corner-displacement IoU
/// conditions. Each case's IoU decreases monotonically in `r`.
pub fn radius_by_bisection(w: f64, h: f64, overlap: f64) -> f64 {
    let one_in_one_out = |r: f64| {
        let inter = (w - r).max(0.0) * (h - r).max(0.0);
        inter / (2.0 * w * h - inter)
    };
    let both_inside = |r: f64| (w - 2.0 * r).max(0.0) * (h - 2.0 * r).max(0.0) / (w * h);
    let both_outside = |r: f64| w * h / ((w + 2.0 * r) * (h + 2.0 * r));
    let solve = |f: &dyn Fn(f64) -> f64| {
        let (mut lo, mut hi) = (0.0, w.max(h) * 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) >= overlap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    solve(&one_in_one_out).min(solve(&both_inside)).min(solve(&both_outside)).max(1.0)
}
