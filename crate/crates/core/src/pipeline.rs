//! The online detection loop and its run artifacts.
//!
//! Frames are processed strictly in order. Each frame is first scored against
//! the images already in the index (minus the most recent `exclusion_window`
//! frames), then filtered, and only afterwards inserted.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bayes::{detect, posterior_update, BayesParams, BeliefState};
use crate::dataset::{DescriptorDataset, GroundTruth};
use crate::descriptor::SubstringConfig;
use crate::error::{Error, Result};
use crate::eval::{
    default_thresholds, detection_pairs, precision_recall, recall_at_full_precision,
    threshold_sweep, Granularity, PrecisionRecall, SweepPoint,
};
use crate::index::{MultiIndexTables, DEFAULT_BUCKET_CAP, DEFAULT_POINTER_SIZE};
use crate::similarity::{
    approx_similarity_with, brute_force_scores, QueryOptions, QueryStats, SimilarityParams,
};

mod cap_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    // 0 stands for "no cap" so the value fits formats without a null.
    pub fn serialize<S: Serializer>(cap: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(cap.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let v = u64::deserialize(d)?;
        Ok((v != 0).then_some(v as usize))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub substrings: SubstringConfig,
    pub similarity: SimilarityParams,
    pub bayes: BayesParams,
    /// Number of most recent frames excluded from scoring and detection.
    pub exclusion_window: usize,
    /// Maximum references per bucket; `None` (0 in files) disables the cap.
    #[serde(with = "cap_serde")]
    pub bucket_cap: Option<usize>,
    /// Worker threads for feature-level parallelism within a frame.
    pub workers: usize,
    /// Score with the exhaustive pairwise similarity instead of the index.
    pub brute_force: bool,
    /// Pointer size used by the memory model.
    pub pointer_size: u64,
    pub granularity: Granularity,
    pub dataset: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            substrings: SubstringConfig::default(),
            similarity: SimilarityParams::default(),
            bayes: BayesParams::default(),
            exclusion_window: 10,
            bucket_cap: Some(DEFAULT_BUCKET_CAP),
            workers: 1,
            brute_force: false,
            pointer_size: DEFAULT_POINTER_SIZE,
            granularity: Granularity::Pair,
            dataset: None,
            ground_truth: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.similarity.validate()?;
        self.bayes.validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidInput("workers must be at least 1".into()));
        }
        if !self.substrings.keyable() {
            return Err(Error::InvalidInput(format!(
                "m = {} gives {}-bit substrings; the index needs m >= 4",
                self.substrings.m(),
                self.substrings.l()
            )));
        }
        Ok(())
    }
}

/// Wall time of one frame's stages, in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub similarity_us: f64,
    pub inference_us: f64,
    pub insert_us: f64,
    pub total_us: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    /// Similarity to each eligible candidate, indexed by image id.
    pub scores: Vec<f64>,
    /// Loop posterior of each eligible candidate.
    pub posterior: Vec<f64>,
    pub detections: Vec<usize>,
    pub timing: FrameTiming,
    pub stats: QueryStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub frames: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub mean_similarity_ms: f64,
    pub mean_inference_ms: f64,
    pub mean_insert_ms: f64,
}

impl TimingSummary {
    /// Summary over every frame but the first, which warms caches and
    /// allocations.
    pub fn from_frames(frames: &[FrameRecord]) -> Self {
        let body = frames.get(1..).unwrap_or(&[]);
        if body.is_empty() {
            return Self::default();
        }
        let n = body.len() as f64;
        let mean =
            |f: fn(&FrameTiming) -> f64| body.iter().map(|r| f(&r.timing)).sum::<f64>() / n / 1e3;
        let mut totals: Vec<f64> = body.iter().map(|r| r.timing.total_us / 1e3).collect();
        totals.sort_by(f64::total_cmp);
        let mid = totals.len() / 2;
        let median = if totals.len().is_multiple_of(2) {
            (totals[mid - 1] + totals[mid]) / 2.0
        } else {
            totals[mid]
        };
        Self {
            frames: body.len(),
            mean_ms: mean(|t| t.total_us),
            median_ms: median,
            mean_similarity_ms: mean(|t| t.similarity_us),
            mean_inference_ms: mean(|t| t.inference_us),
            mean_insert_ms: mean(|t| t.insert_us),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub frames: Vec<FrameRecord>,
    pub timing: TimingSummary,
    pub total_distance_computations: u64,
    pub total_features: usize,
    pub skipped_insertions: usize,
    /// Memory model figure for the final index, in bytes.
    pub memory_bytes: u64,
}

impl RunReport {
    pub fn detections(&self) -> Vec<Vec<usize>> {
        self.frames.iter().map(|f| f.detections.clone()).collect()
    }
}

fn micros(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e6
}

/// Runs the detector over every frame of `ds`.
pub fn run_lcd(ds: &DescriptorDataset, cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut tables = MultiIndexTables::new(cfg.substrings, cfg.bucket_cap)?;
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::InvalidInput(e.to_string()))?,
        )
    } else {
        None
    };

    let mut belief = BeliefState::new();
    let mut frames = Vec::with_capacity(ds.len());
    let mut total_distances = 0u64;
    for (n, features) in ds.images.iter().enumerate() {
        let start = Instant::now();
        let eligible = n.saturating_sub(cfg.exclusion_window);
        let (scores, stats) = if cfg.brute_force {
            let s = brute_force_scores(&tables, features, &cfg.similarity, Some(eligible));
            let cost = tables.features_before(eligible) as u64 * features.len() as u64;
            (
                s,
                QueryStats {
                    distance_computations: cost,
                    matches: 0,
                },
            )
        } else {
            approx_similarity_with(
                &tables,
                features,
                &cfg.similarity,
                QueryOptions {
                    limit: Some(eligible),
                    pool: pool.as_ref(),
                },
            )
        };
        let similarity_us = micros(start);

        let t = Instant::now();
        belief = posterior_update(&belief, &scores, &cfg.bayes);
        let detections = detect(&belief, &cfg.bayes);
        let inference_us = micros(t);

        let t = Instant::now();
        tables.insert_image(n, features)?;
        let insert_us = micros(t);

        total_distances += stats.distance_computations;
        frames.push(FrameRecord {
            frame: n,
            scores: scores.into_inner(),
            posterior: belief.posterior.clone(),
            detections,
            timing: FrameTiming {
                similarity_us,
                inference_us,
                insert_us,
                total_us: micros(start),
            },
            stats,
        });
    }

    Ok(RunReport {
        dataset: ds.name.clone(),
        timing: TimingSummary::from_frames(&frames),
        frames,
        total_distance_computations: total_distances,
        total_features: tables.total_features(),
        skipped_insertions: tables.skipped_insertions(),
        memory_bytes: tables.memory_footprint(cfg.pointer_size),
    })
}

/// Accuracy figures of a run against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub granularity: Granularity,
    pub ground_truth_pairs: usize,
    /// At the configured detection threshold.
    pub at_threshold: PrecisionRecall,
    pub recall_at_full_precision: f64,
    pub sweep: Vec<SweepPoint>,
}

pub fn evaluate(report: &RunReport, gt: &GroundTruth, granularity: Granularity) -> Evaluation {
    let detected = detection_pairs(&report.detections());
    Evaluation {
        granularity,
        ground_truth_pairs: gt.len(),
        at_threshold: precision_recall(&detected, gt, granularity),
        recall_at_full_precision: recall_at_full_precision(report, gt),
        sweep: threshold_sweep(report, gt, &default_thresholds()),
    }
}

fn write_matrix<F>(path: &Path, n: usize, value: F) -> io::Result<()>
where
    F: Fn(usize, usize) -> String,
{
    let mut w = BufWriter::new(File::create(path)?);
    for row in 0..n {
        let line: Vec<String> = (0..n).map(|col| value(row, col)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

/// Writes `similarity.csv` and `detections.csv`: n×n, row = query frame,
/// column = candidate image. Entries outside each frame's eligible
/// candidates are zero.
pub fn export_matrices(report: &RunReport, dir: &Path) -> io::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let n = report.frames.len();
    let sim = dir.join("similarity.csv");
    let det = dir.join("detections.csv");
    write_matrix(&sim, n, |q, c| {
        let v = report.frames[q].scores.get(c).copied().unwrap_or(0.0);
        if v == 0.0 {
            "0".into()
        } else {
            v.to_string()
        }
    })?;
    write_matrix(&det, n, |q, c| {
        if report.frames[q].detections.contains(&c) {
            "1".into()
        } else {
            "0".into()
        }
    })?;
    Ok((sim, det))
}

/// Writes a complete run directory: config snapshot, report JSON, matrices,
/// and (with ground truth) the evaluation and its threshold sweep.
pub fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    report: &RunReport,
    evaluation: Option<&Evaluation>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), to_json(cfg)?)?;
    fs::write(dir.join("report.json"), to_json(report)?)?;
    export_matrices(report, dir)?;
    if let Some(e) = evaluation {
        fs::write(dir.join("evaluation.json"), to_json(e)?)?;
        let mut w = BufWriter::new(File::create(dir.join("pr_curve.csv"))?);
        writeln!(w, "threshold,precision,recall")?;
        for p in &e.sweep {
            writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::InvalidInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::descriptor::BinaryDescriptor;
    use crate::similarity::exact_image_similarity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(seed: u64, n: usize, f: usize) -> Vec<Vec<BinaryDescriptor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..f)
                    .map(|_| BinaryDescriptor::from_array(rng.gen()))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_frame_run() {
        let ds = DescriptorDataset::new("one", random_images(1, 1, 20));
        let r = run_lcd(&ds, &RunConfig::default()).unwrap();
        assert_eq!(r.frames.len(), 1);
        assert!(r.frames[0].detections.is_empty());
        assert_eq!(r.total_features, 20);
        let dir = tempfile::tempdir().unwrap();
        let (sim, det) = export_matrices(&r, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(sim).unwrap(), "0\n");
        assert_eq!(fs::read_to_string(det).unwrap(), "0\n");
    }

    #[test]
    fn identical_frames_carry_no_evidence() {
        // Every eligible candidate gets the same score (the self-similarity
        // of a 50-feature image, 1/50), so the score sequence has zero spread
        // and the likelihood is flat; posteriors follow the transition model
        // alone and settle at its fixed point 0.5.
        let img = random_images(2, 1, 50).remove(0);
        let self_sim = exact_image_similarity(&img, &img, &SimilarityParams::default()).unwrap();
        assert!((self_sim - 1.0 / 50.0).abs() < 1e-12);
        let ds = DescriptorDataset::new("dup", vec![img; 30]);
        let r = run_lcd(&ds, &RunConfig::default()).unwrap();
        for f in &r.frames {
            assert!(f.scores.iter().all(|&s| (s - self_sim).abs() < 1e-15));
            assert!(f.detections.is_empty());
            assert!(f.posterior.iter().all(|&p| p < 0.5));
        }
        // Candidate 0 is updated at frames 11..=29, starting from the prior:
        // p <- 0.1 + 0.8 p, so p = 0.5 - 0.4 * 0.8^k after k updates.
        let last = &r.frames[29].posterior;
        assert!((last[0] - (0.5 - 0.4 * 0.8f64.powi(19))).abs() < 1e-12);
    }

    #[test]
    fn revisited_frames_are_detected() {
        // 40 distinct frames, then frames 40..50 repeat frames 5..15.
        let mut images = random_images(3, 40, 60);
        for i in 0..10 {
            images.push(images[5 + i].clone());
        }
        let ds = DescriptorDataset::new("revisit", images);
        let cfg = RunConfig::default();
        let r = run_lcd(&ds, &cfg).unwrap();
        for q in 40..50 {
            assert!(r.frames[q].detections.contains(&(q - 35)), "frame {q}");
            let exact =
                exact_image_similarity(&ds.images[q], &ds.images[q - 35], &cfg.similarity).unwrap();
            assert_eq!(r.frames[q].scores[q - 35], exact);
        }
        for f in &r.frames[..40] {
            assert!(f.detections.is_empty());
        }
    }

    #[test]
    fn detections_respect_the_exclusion_window() {
        let (ds, _) = generate_synthetic(&SyntheticSpec::loop_benchmark(5)).unwrap();
        for w in [0, 10, 25] {
            let cfg = RunConfig {
                exclusion_window: w,
                ..RunConfig::default()
            };
            let r = run_lcd(&ds, &cfg).unwrap();
            for f in &r.frames {
                assert_eq!(f.scores.len(), f.frame.saturating_sub(w));
                assert!(f.detections.iter().all(|&c| c + w < f.frame));
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_parallel_agrees() {
        let (ds, _) = generate_synthetic(&SyntheticSpec::loop_benchmark(6)).unwrap();
        let cfg = RunConfig::default();
        let a = run_lcd(&ds, &cfg).unwrap();
        let b = run_lcd(&ds, &cfg).unwrap();
        let strip = |r: &RunReport| -> Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> {
            r.frames
                .iter()
                .map(|f| (f.scores.clone(), f.posterior.clone(), f.detections.clone()))
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));

        let par = run_lcd(
            &ds,
            &RunConfig {
                workers: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        for (x, y) in a.frames.iter().zip(&par.frames) {
            for (s, t) in x.scores.iter().zip(&y.scores) {
                assert!((s - t).abs() <= 1e-9 * s.abs());
            }
            assert_eq!(x.detections, y.detections);
        }
    }

    #[test]
    fn brute_force_mode_upper_bounds_index_scores() {
        let (ds, _) = generate_synthetic(
            &SyntheticSpec {
                n_images: 30,
                features_per_image: 40,
                ..SyntheticSpec::loop_benchmark(8)
            }
            .with_loops(&[(25, 5), (26, 6)]),
        )
        .unwrap();
        let approx = run_lcd(&ds, &RunConfig::default()).unwrap();
        let exact = run_lcd(
            &ds,
            &RunConfig {
                brute_force: true,
                ..RunConfig::default()
            },
        )
        .unwrap();
        for (a, e) in approx.frames.iter().zip(&exact.frames) {
            for (x, y) in a.scores.iter().zip(&e.scores) {
                assert!(*x <= y + 1e-12);
            }
        }
        assert!(exact.frames[25].scores[5] > 0.0);
    }

    #[test]
    fn config_round_trips_through_json_with_unbounded_cap() {
        let cfg = RunConfig {
            bucket_cap: None,
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"bucket_cap\":0"));
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"exclusion_window": 3}"#).unwrap();
        assert_eq!(partial.exclusion_window, 3);
        assert_eq!(partial.bucket_cap, Some(128));
        assert!(serde_json::from_str::<RunConfig>(r#"{"substrings": {"m": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn run_dir_contains_all_artifacts() {
        let (ds, gt) = generate_synthetic(
            &SyntheticSpec {
                n_images: 20,
                features_per_image: 30,
                ..SyntheticSpec::default()
            }
            .with_loops(&[(15, 2)]),
        )
        .unwrap();
        let cfg = RunConfig::default();
        let r = run_lcd(&ds, &cfg).unwrap();
        let e = evaluate(&r, &gt, Granularity::Pair);
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &cfg, &r, Some(&e)).unwrap();
        for f in [
            "config.json",
            "report.json",
            "similarity.csv",
            "detections.csv",
            "evaluation.json",
            "pr_curve.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let sim = fs::read_to_string(dir.path().join("similarity.csv")).unwrap();
        let rows: Vec<&str> = sim.lines().collect();
        assert_eq!(rows.len(), 20);
        assert!(rows.iter().all(|r| r.split(',').count() == 20));
    }

    #[test]
    fn timing_summary_skips_warm_up() {
        let frame = |us: f64| FrameRecord {
            timing: FrameTiming {
                total_us: us,
                ..FrameTiming::default()
            },
            ..FrameRecord::default()
        };
        let s = TimingSummary::from_frames(&[frame(9e6), frame(1e3), frame(3e3)]);
        assert_eq!(s.frames, 2);
        assert_eq!(s.mean_ms, 2.0);
        assert_eq!(s.median_ms, 2.0);
        assert_eq!(
            TimingSummary::from_frames(&[frame(1.0)]),
            TimingSummary::default()
        );
    }
}
