//! Property checks grouped the way the acceptance runner reports them.
//! Each check returns its worst observed error so callers can print it.

use implantformer::autograd::{Graph, Tensor};
use implantformer::centerline::{fit_centerline, project_crown_to_root, project_root_to_crown, residual_q, CenterlineFit};
use implantformer::evaluation::{average_precision, iou, keypoint_box, match_predictions, Interpolation, MatchResult};
use implantformer::heatmap::{decode_topk, encode_target, Detection};
use implantformer::network::{layers, predict, ModelParams, NetConfig};
use implantformer::volume::{KeypointTrack, Region, TrackPoint};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{ap_integration_oracle, grid_search_line, rng};

#[derive(Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn track(region: Region, pts: impl IntoIterator<Item = (f64, f64, usize)>) -> KeypointTrack {
    KeypointTrack::new("t", region, pts.into_iter().map(|(x, y, z)| TrackPoint { x, y, z }).collect()).unwrap()
}

fn noisy_line(seed: u64, n: usize) -> KeypointTrack {
    let mut r = rng(seed);
    let (k1, b1, k2, b2) = (r.gen_range(-2.0..2.0), r.gen_range(0.0..100.0), r.gen_range(-2.0..2.0), r.gen_range(0.0..100.0));
    track(
        Region::Root,
        (0..n).map(|z| {
            let zf = z as f64;
            (k1 * zf + b1 + r.gen_range(-2.0..2.0), k2 * zf + b2 + r.gen_range(-2.0..2.0), z)
        }),
    )
}

pub fn centerline_suite() -> Vec<Check> {
    let mut r = rng(41);
    let mut exact = 0.0f64;
    for _ in 0..200 {
        let (k1, b1, k2, b2) = (r.gen_range(-3.0..3.0), r.gen_range(-50.0..50.0), r.gen_range(-3.0..3.0), r.gen_range(-50.0..50.0));
        let t = track(Region::Root, (5..20).map(|z| (k1 * z as f64 + b1, k2 * z as f64 + b2, z)));
        let f = fit_centerline(&t).unwrap();
        exact = exact.max((f.k1 - k1).abs()).max((f.b1 - b1).abs()).max((f.k2 - k2).abs()).max((f.b2 - b2).abs());
    }
    let mut noisy = 0.0f64;
    for seed in 0..20 {
        let t = noisy_line(seed, 20);
        let f = fit_centerline(&t).unwrap();
        let zs: Vec<f64> = t.points.iter().map(|p| p.z as f64).collect();
        let (k1, b1) = grid_search_line(&zs, &t.points.iter().map(|p| p.x).collect::<Vec<_>>());
        let (k2, b2) = grid_search_line(&zs, &t.points.iter().map(|p| p.y).collect::<Vec<_>>());
        noisy = noisy.max((f.k1 - k1).abs()).max((f.b1 - b1).abs()).max((f.k2 - k2).abs()).max((f.b2 - b2).abs());
    }
    let mut round = 0.0f64;
    for seed in 0..50 {
        let root = noisy_line(100 + seed, 20);
        let f = fit_centerline(&root).unwrap();
        let crown = project_root_to_crown(&root, &(20..40).collect::<Vec<_>>()).unwrap();
        let back = project_crown_to_root(&crown, &(0..20).collect::<Vec<_>>()).unwrap();
        for p in &back.points {
            let (x, y) = f.eval(p.z as f64);
            round = round.max((p.x - x).abs()).max((p.y - y).abs());
        }
    }
    let mut violations = 0;
    for seed in 0..10 {
        let t = noisy_line(200 + seed, 15);
        let f = fit_centerline(&t).unwrap();
        for _ in 0..1000 {
            let s = 10f64.powi(r.gen_range(-6..1));
            let o = CenterlineFit::from_coefficients(
                f.k1 + r.gen_range(-1.0..1.0) * s,
                f.b1 + r.gen_range(-1.0..1.0) * s,
                f.k2 + r.gen_range(-1.0..1.0) * s,
                f.b2 + r.gen_range(-1.0..1.0) * s,
            );
            let (q1, q2) = residual_q(&o, &t);
            if f.q1 > q1 + 1e-9 * q1.max(1.0) || f.q2 > q2 + 1e-9 * q2.max(1.0) {
                violations += 1;
            }
        }
    }
    vec![
        check("exact-line fits", exact < 1e-9, format!("max err {:.1e}", exact)),
        check("noisy fits vs grid oracle", noisy < 1e-6, format!("max err {:.1e}", noisy)),
        check("root-crown-root round trip", round < 1e-9, format!("max err {:.1e}", round)),
        check("optimality (10 x 1000 perturbations)", violations == 0, format!("{} violations", violations)),
    ]
}

pub fn codec_suite() -> Vec<Check> {
    let mut r = rng(43);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (x, y) = (r.gen_range(0.0..512.0), r.gen_range(0.0..512.0));
        let t = encode_target(&[(x, y)], 512, 512, 4, r.gen_range(1.0..6.0)).unwrap();
        let d = decode_topk(&t.heatmap, &t.offsets, t.width, t.height, 4, 1).unwrap();
        worst = worst.max((d[0].x - x).abs()).max((d[0].y - y).abs());
    }
    let (w, h) = (40, 40);
    let mut heat = vec![0.0f64; w * h];
    heat[10 * w + 10] = 0.9;
    heat[30 * w + 30] = 0.7;
    let off = vec![0.0; 2 * w * h];
    let top = decode_topk(&heat, &off, w, h, 4, 1).unwrap();
    let top_ok = top.len() == 1 && top[0] == Detection { x: 40.0, y: 40.0, confidence: 0.9 };
    let flat = vec![0.5f64; w * h];
    let a = decode_topk(&flat, &off, w, h, 4, 3).unwrap();
    let b = decode_topk(&flat, &off, w, h, 4, 3).unwrap();
    let ties_ok = a == b && (a[0].x, a[0].y) == (0.0, 0.0) && (a[1].x, a[1].y) == (4.0, 0.0) && (a[2].x, a[2].y) == (8.0, 0.0);
    vec![
        check("decode(encode(p)) over 1000 keypoints", worst < 1e-6, format!("max err {:.1e} px", worst)),
        check("top-1 selection", top_ok, format!("{:?}", top)),
        check("tie-break determinism (row-major)", ties_ok, format!("first {:?}", (a[0].x, a[0].y))),
    ]
}

/// Random match results whose pooled ground-truth count divides 10⁴, so
/// the fine-step oracle integrates the envelope exactly.
pub fn random_matches(seed: u64) -> Vec<MatchResult> {
    let mut r = rng(seed);
    let total = *[10usize, 16, 20, 25, 40, 50, 80, 100].choose(&mut r).unwrap();
    let parts = r.gen_range(1..4usize).min(total);
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| r.gen_range(1..total)).collect();
    cuts.sort();
    cuts.insert(0, 0);
    cuts.push(total);
    cuts.windows(2)
        .map(|w| {
            let n_gt = w[1] - w[0];
            let n_pred = r.gen_range(0..n_gt + 10);
            let mut tps = 0;
            let labels = (0..n_pred)
                .map(|_| {
                    let conf = (r.gen_range(0..20) as f64) / 20.0;
                    let tp = tps < n_gt && r.gen_bool(0.6);
                    tps += tp as usize;
                    (conf, tp)
                })
                .collect();
            MatchResult {
                labels,
                n_gt,
                false_negatives: n_gt - tps,
            }
        })
        .collect()
}

/// Random image set: ground truths and jittered, partly spurious
/// predictions. Returns `(predictions, ground truths)` per image.
pub fn random_prediction_set(seed: u64) -> Vec<(Vec<Detection>, Vec<(f64, f64)>)> {
    let mut r = rng(seed);
    (0..r.gen_range(1..20))
        .map(|_| {
            let gts: Vec<(f64, f64)> = (0..r.gen_range(1..3)).map(|_| (r.gen_range(0.0..64.0), r.gen_range(0.0..64.0))).collect();
            let mut preds = Vec::new();
            for &(x, y) in &gts {
                if r.gen_bool(0.8) {
                    preds.push(Detection {
                        x: x + r.gen_range(-4.0..4.0),
                        y: y + r.gen_range(-4.0..4.0),
                        confidence: r.gen_range(0.0..1.0),
                    });
                }
            }
            for _ in 0..r.gen_range(0..2) {
                preds.push(Detection {
                    x: r.gen_range(0.0..64.0),
                    y: r.gen_range(0.0..64.0),
                    confidence: r.gen_range(0.0..1.0),
                });
            }
            (preds, gts)
        })
        .collect()
}

pub fn ap_for(set: &[(Vec<Detection>, Vec<(f64, f64)>)], threshold: f64, box_size: f64) -> f64 {
    let results: Vec<MatchResult> = set.iter().map(|(p, g)| match_predictions(p, g, threshold, box_size)).collect();
    average_precision(&results, Interpolation::AllPoint).unwrap().0
}

pub fn metric_suite() -> Vec<Check> {
    let v = iou(&keypoint_box(100.0, 100.0, 21.0), &keypoint_box(105.0, 100.0, 21.0));
    let iou_err = (v - 336.0 / 546.0).abs();
    let mut oracle = 0.0f64;
    for seed in 0..100 {
        let m = random_matches(seed);
        let labels: Vec<(f64, bool)> = m.iter().flat_map(|r| r.labels.iter().copied()).collect();
        let n_gt = m.iter().map(|r| r.n_gt).sum();
        let (ap, _) = average_precision(&m, Interpolation::AllPoint).unwrap();
        oracle = oracle.max((ap - ap_integration_oracle(&labels, n_gt, 1e-4)).abs());
    }
    let mut order_bad = 0;
    for seed in 0..100 {
        let set = random_prediction_set(500 + seed);
        if ap_for(&set, 0.75, 11.0) > ap_for(&set, 0.5, 11.0) + 1e-12 {
            order_bad += 1;
        }
    }
    let mut r = rng(47);
    let perfect: Vec<(Vec<Detection>, Vec<(f64, f64)>)> = (0..30)
        .map(|_| {
            let (x, y) = (r.gen_range(0.0..64.0), r.gen_range(0.0..64.0));
            (vec![Detection { x, y, confidence: r.gen_range(0.0..1.0) }], vec![(x, y)])
        })
        .collect();
    let perfect_ap = ap_for(&perfect, 0.75, 11.0);
    vec![
        check("IoU of 21x21 boxes offset 5 px", iou_err < 1e-9, format!("{:.12} vs 336/546", v)),
        check("AP vs integration oracle (100 sets)", oracle < 1e-6, format!("max err {:.1e}", oracle)),
        check("AP75 <= AP50 (100 sets)", order_bad == 0, format!("{} violations", order_bad)),
        check("perfect predictions give AP75 = 1", perfect_ap == 1.0, format!("AP75 {}", perfect_ap)),
    ]
}

/// Tiny-width network with the given image and patch geometry.
pub fn tiny_net(image: usize, patch: usize) -> NetConfig {
    NetConfig {
        image_size: image,
        patch_size: patch,
        embed_dim: 8,
        heads: 2,
        layers: 4,
        mlp_ratio: 1,
        taps: vec![1, 2, 3, 4],
        ratios: vec![4, 8, 16, 32],
        reassemble_dim: 2,
        decoder_dim: 2,
        stem_width: 2,
        head_width: 2,
        ..NetConfig::default()
    }
}

/// `(tokens, heatmap side, worst attention row-sum deviation)`.
pub fn net_shapes(cfg: &NetConfig) -> (usize, usize, f64) {
    let params: ModelParams<f32> = ModelParams::init(cfg, 1).unwrap();
    let mut g = Graph::<f32>::new();
    let vars = params.register(&mut g);
    let x = g.input(Tensor::full(&[1, 3, cfg.image_size, cfg.image_size], 0.5));
    let tokens = layers::patch_embed(&mut g, &vars, x, cfg).unwrap();
    let n_tokens = g.shape(tokens)[1];
    let out = predict(cfg, &params, &Tensor::full(&[1, 3, cfg.image_size, cfg.image_size], 0.5f32)).unwrap();
    let hm = out.heatmap.shape();
    assert_eq!(hm[2], hm[3]);
    let mut dev = 0.0f64;
    for a in &out.attention {
        let t = *a.shape().last().unwrap();
        for row in a.data().chunks(t) {
            dev = dev.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    (n_tokens, hm[2], dev)
}

pub fn shape_suite() -> Vec<Check> {
    let (t512, h512, d512) = net_shapes(&tiny_net(512, 16));
    let toy = NetConfig::default();
    let (t64, h64, d64) = net_shapes(&toy);
    vec![
        check(
            "512 input, patch 16",
            t512 == 1025 && h512 == 128,
            format!("{} tokens, {}x{} heatmap", t512, h512, h512),
        ),
        check("64 input, patch 8", t64 == 65 && h64 == 16, format!("{} tokens, {}x{} heatmap", t64, h64, h64)),
        check(
            "attention rows sum to 1",
            d512.max(d64) <= 1e-6,
            format!("max deviation {:.1e}", d512.max(d64)),
        ),
    ]
}
