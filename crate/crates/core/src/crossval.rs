//! Patient-level five-fold training and evaluation on a phantom cohort.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::{evaluate, five_fold_split, EvalConfig, EvalReport};
use crate::heatmap::DetectionsFile;
use crate::network::{Model, NetConfig};
use crate::phantom::PhantomPatient;
use crate::pipeline::{crown_labels, detect_slices, track_samples, InferConfig};
use crate::training::{train, TrainConfig, TrainSample};
use crate::volume::{IntensityWindow, KeypointTrack, Region};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Which slices are trained on and scored.
    pub region: Region,
    pub split_seed: u64,
    pub window: IntensityWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_samples: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldOutcome>,
    pub report: EvalReport,
    pub seconds: f64,
}

/// Ground-truth keypoints of one patient for a region: the annotation
/// itself for root slices, its crown projection otherwise.
pub fn region_labels(patient: &PhantomPatient, region: Region) -> Result<KeypointTrack> {
    match region {
        Region::Root => Ok(patient.root_track.clone()),
        Region::Crown => crown_labels(&patient.volume, &patient.root_track),
    }
}

/// Trains one model per fold on the other four folds and scores it on the
/// held-out patients. `on_fold` sees each fold's outcome and model.
pub fn cross_validate(cohort: &[PhantomPatient], cfg: &CrossValConfig, mut on_fold: impl FnMut(&FoldOutcome, &Model)) -> Result<CrossValReport> {
    let start = Instant::now();
    let ids: Vec<String> = cohort.iter().map(|p| p.id.clone()).collect();
    let folds = five_fold_split(&ids, cfg.split_seed)?;
    let labels = cohort
        .iter()
        .map(|p| region_labels(p, cfg.region))
        .collect::<Result<Vec<_>>>()?;
    let infer = InferConfig {
        window: cfg.window,
        ..InferConfig::default()
    };
    let mut outcomes = Vec::new();
    let mut preds = Vec::new();
    for (f, test_ids) in folds.iter().enumerate() {
        let t0 = Instant::now();
        let is_test = |id: &String| test_ids.contains(id);
        let mut samples: Vec<TrainSample> = Vec::new();
        for (p, track) in cohort.iter().zip(&labels) {
            if !is_test(&p.id) {
                samples.extend(track_samples(&p.volume, track, cfg.window)?);
            }
        }
        let train_cfg = TrainConfig {
            seed: cfg.train.seed.wrapping_add(f as u64),
            ..cfg.train.clone()
        };
        let (model, records) = train(&samples, &cfg.net, &train_cfg, |_| {})?;
        for (p, track) in cohort.iter().zip(&labels) {
            if is_test(&p.id) {
                let zs: Vec<usize> = track.points.iter().map(|q| q.z).collect();
                preds.push(DetectionsFile {
                    patient: p.id.clone(),
                    fold: Some(f),
                    slices: detect_slices(&model, &p.volume, &zs, &infer)?,
                });
            }
        }
        let outcome = FoldOutcome {
            fold: f,
            train_patients: cohort.len() - test_ids.len(),
            test_patients: test_ids.len(),
            train_samples: samples.len(),
            steps: records.len(),
            final_loss: records.last().map_or(f64::NAN, |r| r.l_total),
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_fold(&outcome, &model);
        outcomes.push(outcome);
    }
    let report = evaluate(&preds, &labels, &cfg.eval)?;
    Ok(CrossValReport {
        folds: outcomes,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
