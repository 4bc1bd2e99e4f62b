//! Keypoint-box AP, distance histograms and five-fold splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Detection, DetectionsFile, SliceDetections};
use crate::volume::KeypointTrack;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

/// Square box of side `size` centred on `(x, y)`.
pub fn keypoint_box(x: f64, y: f64, size: f64) -> BBox {
    let h = size / 2.0;
    BBox {
        x0: x - h,
        y0: y - h,
        x1: x + h,
        y1: y + h,
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(confidence, is_tp)` per prediction, in matching order.
    pub labels: Vec<(f64, bool)>,
    pub n_gt: usize,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.labels.iter().filter(|l| l.1).count()
    }

    pub fn false_positives(&self) -> usize {
        self.labels.len() - self.true_positives()
    }
}

/// Greedy one-to-one matching in descending confidence; each prediction
/// takes the unmatched ground truth of highest IoU, if at least `threshold`.
pub fn match_predictions(preds: &[Detection], gts: &[(f64, f64)], threshold: f64, box_size: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let gt_boxes: Vec<BBox> = gts.iter().map(|&(x, y)| keypoint_box(x, y, box_size)).collect();
    let mut taken = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(preds.len());
    for i in order {
        let p = &preds[i];
        let pb = keypoint_box(p.x, p.y, box_size);
        let best = gt_boxes
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, iou(&pb, g)))
            .filter(|&(_, v)| v >= threshold)
            .fold(None::<(usize, f64)>, |acc, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        labels.push((p.confidence, best.is_some()));
    }
    MatchResult {
        labels,
        n_gt: gts.len(),
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// AP over the pooled matches of a dataset, plus the raw PR curve.
/// Predictions sharing a confidence are admitted together.
pub fn average_precision(results: &[MatchResult], mode: Interpolation) -> Result<(f64, Vec<PrPoint>)> {
    let n_gt: usize = results.iter().map(|r| r.n_gt).sum();
    if n_gt == 0 {
        return Err(Error::Empty("average precision needs at least one ground truth".into()));
    }
    let mut all: Vec<(f64, bool)> = results.iter().flat_map(|r| r.labels.iter().copied()).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let conf = all[i].0;
        while i < all.len() && all[i].0 == conf {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / n_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    let ap = match mode {
        Interpolation::AllPoint => {
            let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
            for k in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[k] = envelope[k].max(envelope[k + 1]);
            }
            let mut prev = 0.0;
            let mut area = 0.0;
            for (p, e) in curve.iter().zip(&envelope) {
                area += (p.recall - prev) * e;
                prev = p.recall;
            }
            area
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|p| p.recall >= r - 1e-12)
                        .map(|p| p.precision)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Ok((ap, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of distances below `limit` (must be a multiple of the bin width).
    pub fn fraction_below(&self, limit: f64) -> f64 {
        let bins = (limit / self.bin_width).round() as usize;
        let below: usize = self.counts.iter().take(bins).sum();
        if self.total() == 0 {
            0.0
        } else {
            below as f64 / self.total() as f64
        }
    }

    /// `(bin_start, bin_end, count)` rows.
    pub fn rows(&self) -> Vec<(f64, f64, usize)> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as f64 * self.bin_width, (i + 1) as f64 * self.bin_width, c))
            .collect()
    }
}

/// Bins Euclidean prediction-to-truth distances into `[0, w), [w, 2w), …`.
pub fn distance_histogram(pairs: &[((f64, f64), (f64, f64))], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidConfig(format!("bin width {} must be positive", bin_width)));
    }
    let mut counts = Vec::new();
    for &((px, py), (gx, gy)) in pairs {
        let d = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
        let bin = (d / bin_width).floor() as usize;
        if counts.len() <= bin {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    Ok(Histogram { bin_width, counts })
}

/// Seeded patient-level partition into five near-equal folds.
pub fn five_fold_split(ids: &[String], seed: u64) -> Result<Vec<Vec<String>>> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::IdMismatch("duplicate patient ids in split".into()));
    }
    if ids.len() < 5 {
        return Err(Error::InvalidConfig(format!("five folds need at least 5 patients, got {}", ids.len())));
    }
    let mut shuffled: Vec<String> = unique.into_iter().cloned().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    Ok((0..5).map(|f| shuffled[f * n / 5..(f + 1) * n / 5].to_vec()).collect())
}

/// Sample mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `"34.3±2.2684"`: mean and standard deviation of fractional scores, in percent.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.4}", mean * 100.0, std * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub box_size: f64,
    pub bin_width: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 0.75],
            box_size: 21.0,
            bin_width: 5.0,
            interpolation: Interpolation::AllPoint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAp {
    pub fold: usize,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou: f64,
    pub ap: f64,
    pub pr_curve: Vec<PrPoint>,
    pub folds: Vec<FoldAp>,
    pub fold_mean: Option<f64>,
    pub fold_std: Option<f64>,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patients: usize,
    pub ground_truths: usize,
    pub predictions: usize,
    pub box_size: f64,
    pub interpolation: Interpolation,
    pub thresholds: Vec<ThresholdReport>,
    pub histogram: Histogram,
}

impl EvalReport {
    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| (t.iou - iou).abs() < 1e-12).map(|t| t.ap)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Treats a track as detections with a fixed confidence.
pub fn detections_from_track(track: &KeypointTrack, confidence: f64, fold: Option<usize>) -> DetectionsFile {
    DetectionsFile {
        patient: track.patient.clone(),
        fold,
        slices: track
            .points
            .iter()
            .map(|p| SliceDetections {
                z: p.z,
                detections: vec![Detection {
                    x: p.x,
                    y: p.y,
                    confidence,
                }],
            })
            .collect(),
    }
}

struct PatientMatches {
    fold: Option<usize>,
    per_threshold: Vec<Vec<MatchResult>>,
    pairs: Vec<((f64, f64), (f64, f64))>,
    n_pred: usize,
    n_gt: usize,
}

fn match_patient(pred: &DetectionsFile, gt: &KeypointTrack, cfg: &EvalConfig) -> PatientMatches {
    let mut by_z: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for s in &pred.slices {
        by_z.entry(s.z).or_default().extend(s.detections.iter().copied());
    }
    let gts: BTreeMap<usize, (f64, f64)> = gt.points.iter().map(|p| (p.z, (p.x, p.y))).collect();
    let zs: BTreeSet<usize> = by_z.keys().chain(gts.keys()).copied().collect();
    let mut per_threshold = vec![Vec::new(); cfg.thresholds.len()];
    let mut pairs = Vec::new();
    let empty = Vec::new();
    for z in zs {
        let preds = by_z.get(&z).unwrap_or(&empty);
        let g: Vec<(f64, f64)> = gts.get(&z).copied().into_iter().collect();
        for (k, &t) in cfg.thresholds.iter().enumerate() {
            per_threshold[k].push(match_predictions(preds, &g, t, cfg.box_size));
        }
        if let (Some(&gp), Some(top)) = (gts.get(&z), preds.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence))) {
            pairs.push(((top.x, top.y), gp));
        }
    }
    PatientMatches {
        fold: pred.fold,
        per_threshold,
        pairs,
        n_pred: by_z.values().map(Vec::len).sum(),
        n_gt: gts.len(),
    }
}

/// Scores prediction files against ground-truth tracks, pairing them by
/// patient id.
pub fn evaluate(preds: &[DetectionsFile], gts: &[KeypointTrack], cfg: &EvalConfig) -> Result<EvalReport> {
    if preds.is_empty() || gts.is_empty() {
        return Err(Error::Empty("evaluation needs predictions and ground truth".into()));
    }
    if cfg.thresholds.is_empty() || cfg.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidConfig(format!("bad IoU thresholds {:?}", cfg.thresholds)));
    }
    let mut pred_map: BTreeMap<&str, &DetectionsFile> = BTreeMap::new();
    for p in preds {
        if pred_map.insert(p.patient.as_str(), p).is_some() {
            return Err(Error::IdMismatch(format!("duplicate prediction file for {}", p.patient)));
        }
    }
    let mut gt_map: BTreeMap<&str, &KeypointTrack> = BTreeMap::new();
    for g in gts {
        if gt_map.insert(g.patient.as_str(), g).is_some() {
            return Err(Error::IdMismatch(format!("duplicate ground truth for {}", g.patient)));
        }
    }
    if let Some(id) = pred_map.keys().find(|k| !gt_map.contains_key(*k)) {
        return Err(Error::IdMismatch(format!("no ground truth for patient {}", id)));
    }
    if let Some(id) = gt_map.keys().find(|k| !pred_map.contains_key(*k)) {
        return Err(Error::IdMismatch(format!("no predictions for patient {}", id)));
    }
    let patients: Vec<PatientMatches> = pred_map
        .iter()
        .map(|(id, p)| match_patient(p, gt_map[id], cfg))
        .collect();
    let n_gt: usize = patients.iter().map(|p| p.n_gt).sum();
    if n_gt == 0 {
        return Err(Error::Empty("ground-truth tracks contain no points".into()));
    }
    let folds: BTreeSet<usize> = patients.iter().filter_map(|p| p.fold).collect();
    let mut thresholds = Vec::new();
    for (k, &t) in cfg.thresholds.iter().enumerate() {
        let pooled: Vec<MatchResult> = patients.iter().flat_map(|p| p.per_threshold[k].iter().cloned()).collect();
        let (ap, pr_curve) = average_precision(&pooled, cfg.interpolation)?;
        let mut fold_aps = Vec::new();
        for &f in &folds {
            let subset: Vec<MatchResult> = patients
                .iter()
                .filter(|p| p.fold == Some(f))
                .flat_map(|p| p.per_threshold[k].iter().cloned())
                .collect();
            if subset.iter().any(|m| m.n_gt > 0) {
                fold_aps.push(FoldAp {
                    fold: f,
                    ap: average_precision(&subset, cfg.interpolation)?.0,
                });
            }
        }
        let (fold_mean, fold_std, summary) = if fold_aps.is_empty() {
            (None, None, format!("{:.1}", ap * 100.0))
        } else {
            let (m, s) = mean_std(&fold_aps.iter().map(|f| f.ap).collect::<Vec<_>>());
            (Some(m), Some(s), format_mean_std(m, s))
        };
        thresholds.push(ThresholdReport {
            iou: t,
            ap,
            pr_curve,
            folds: fold_aps,
            fold_mean,
            fold_std,
            summary,
        });
    }
    let pairs: Vec<_> = patients.iter().flat_map(|p| p.pairs.iter().copied()).collect();
    Ok(EvalReport {
        patients: patients.len(),
        ground_truths: n_gt,
        predictions: patients.iter().map(|p| p.n_pred).sum(),
        box_size: cfg.box_size,
        interpolation: cfg.interpolation,
        thresholds,
        histogram: distance_histogram(&pairs, cfg.bin_width)?,
    })
}
