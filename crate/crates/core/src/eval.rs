//! Precision/recall against ground truth.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::GroundTruth;
use crate::pipeline::RunReport;

/// How detections are matched against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Each detected (query, candidate) pair is scored on its own.
    #[default]
    Pair,
    /// Each query frame is one event: a frame with detections is a true
    /// positive when any of them is a ground-truth pair.
    Event,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Flattens per-frame detection lists into `(query, candidate)` pairs.
pub fn detection_pairs(per_frame: &[Vec<usize>]) -> BTreeSet<(usize, usize)> {
    per_frame
        .iter()
        .enumerate()
        .flat_map(|(q, cs)| cs.iter().map(move |&c| (q, c)))
        .collect()
}

/// Precision is 1 when nothing is detected; recall is 0 when the ground truth
/// is empty.
pub fn precision_recall(
    detections: &BTreeSet<(usize, usize)>,
    gt: &GroundTruth,
    granularity: Granularity,
) -> PrecisionRecall {
    let (tp, fp, positives) = match granularity {
        Granularity::Pair => {
            let tp = detections
                .iter()
                .filter(|&&(q, c)| gt.contains(q, c))
                .count();
            (tp, detections.len() - tp, gt.len())
        }
        Granularity::Event => {
            let frames: BTreeSet<usize> = detections.iter().map(|&(q, _)| q).collect();
            let hit: BTreeSet<usize> = detections
                .iter()
                .filter(|&&(q, c)| gt.contains(q, c))
                .map(|&(q, _)| q)
                .collect();
            (hit.len(), frames.len() - hit.len(), gt.query_frames().len())
        }
    };
    PrecisionRecall {
        precision: if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: if positives == 0 {
            0.0
        } else {
            tp as f64 / positives as f64
        },
        true_positives: tp,
        false_positives: fp,
    }
}

// Every scored (posterior, is_loop) pair, highest posterior first.
fn ranked(report: &RunReport, gt: &GroundTruth) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = report
        .frames
        .iter()
        .flat_map(|f| {
            f.posterior
                .iter()
                .enumerate()
                .map(move |(c, &p)| (p, gt.contains(f.frame, c)))
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

/// Highest pair recall reachable by a posterior threshold that admits no
/// false positive. Thresholds are taken at every observed posterior.
pub fn recall_at_full_precision(report: &RunReport, gt: &GroundTruth) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let all = ranked(report, gt);
    let mut tp = 0usize;
    let mut best = 0usize;
    let mut i = 0;
    while i < all.len() {
        // Pairs with equal posterior enter together.
        let v = all[i].0;
        let mut j = i;
        let mut clean = true;
        while j < all.len() && all[j].0 == v {
            if all[j].1 {
                tp += 1;
            } else {
                clean = false;
            }
            j += 1;
        }
        if !clean {
            break;
        }
        best = tp;
        i = j;
    }
    best as f64 / gt.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Pair precision/recall when detecting every posterior strictly above each
/// threshold.
pub fn threshold_sweep(
    report: &RunReport,
    gt: &GroundTruth,
    thresholds: &[f64],
) -> Vec<SweepPoint> {
    let all = ranked(report, gt);
    let mut cum_tp = Vec::with_capacity(all.len() + 1);
    cum_tp.push(0usize);
    for &(_, t) in &all {
        cum_tp.push(cum_tp.last().unwrap() + t as usize);
    }
    thresholds
        .iter()
        .map(|&threshold| {
            let n = all.partition_point(|&(p, _)| p > threshold);
            let tp = cum_tp[n];
            SweepPoint {
                threshold,
                precision: if n == 0 { 1.0 } else { tp as f64 / n as f64 },
                recall: if gt.is_empty() {
                    0.0
                } else {
                    tp as f64 / gt.len() as f64
                },
            }
        })
        .collect()
}

/// Thresholds 0.00, 0.01, …, 1.00.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}
