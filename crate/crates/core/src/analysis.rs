//! Closed-form recall, accuracy and complexity of the substring index.
//!
//! A pair of descriptors at Hamming distance `d` is retrieved when at least
//! one of the `m` substrings carries no error. Treating the `d` errors as
//! balls thrown independently into `m` bins gives [`recall_probability`];
//! weighting it by inlier and outlier distance models gives the accuracy and
//! complexity curves used to pick `m`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::descriptor::DESCRIPTOR_BITS;

// Above this many bins the alternating sum loses more than ~1e-10 to
// cancellation; the occupancy recurrence is used instead.
const MAX_ALTERNATING_BINS: usize = 32;

/// Probability that `d` balls thrown uniformly into `m` bins leave at least
/// one bin empty.
pub fn recall_probability(m: usize, d: usize) -> f64 {
    assert!(m >= 1, "need at least one bin");
    if d < m {
        return 1.0;
    }
    if m <= MAX_ALTERNATING_BINS {
        alternating_sum(m, d)
    } else {
        1.0 - occupancy_full(m, d)
    }
}

// Σ_{k=1}^{m} (-1)^{k+1} C(m,k) (1 - k/m)^d with compensated summation.
fn alternating_sum(m: usize, d: usize) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut binom = 1.0f64;
    for k in 1..=m {
        binom = binom * (m - k + 1) as f64 / k as f64;
        let term = binom * (1.0 - k as f64 / m as f64).powi(d as i32);
        let term = if k % 2 == 1 { term } else { -term };
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum.clamp(0.0, 1.0)
}

// Probability that all m bins are occupied after d throws, by tracking the
// distribution of the number of occupied bins.
fn occupancy_full(m: usize, d: usize) -> f64 {
    let mut p = vec![0.0f64; m + 1];
    p[0] = 1.0;
    let mf = m as f64;
    for throw in 0..d {
        let top = (throw + 1).min(m);
        for j in (1..=top).rev() {
            p[j] = p[j] * (j as f64 / mf) + p[j - 1] * ((m - j + 1) as f64 / mf);
        }
        p[0] = 0.0;
    }
    p[m]
}

/// Retrieval probability when the `d` errors sit on distinct bit positions of
/// a 256-bit descriptor split into `m` substrings of `256/m` bits.
///
/// Unlike the ball model, a substring cannot hold more errors than it has
/// bits, so this is what the index achieves for pairs at exact distance `d`.
pub fn recall_probability_distinct_bits(m: usize, d: usize) -> f64 {
    assert!(
        m >= 1 && DESCRIPTOR_BITS.is_multiple_of(m),
        "m must divide 256"
    );
    assert!(d <= DESCRIPTOR_BITS, "distance exceeds descriptor length");
    if d < m {
        return 1.0;
    }
    let l = DESCRIPTOR_BITS / m;
    // P(k given substrings are error free) = C(256 - k l, d) / C(256, d).
    let mut sum = 0.0f64;
    let mut binom = 1.0f64;
    for k in 1..=m {
        binom = binom * (m - k + 1) as f64 / k as f64;
        let free = DESCRIPTOR_BITS - k * l;
        if free < d {
            break;
        }
        let ratio = ln_choose(free, d) - ln_choose(DESCRIPTOR_BITS, d);
        let term = binom * ratio.exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    sum.clamp(0.0, 1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

/// Gaussian model of Hamming distances between feature pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceModel {
    pub mean: f64,
    pub stddev: f64,
}

impl DistanceModel {
    pub const INLIER: DistanceModel = DistanceModel {
        mean: 32.0,
        stddev: 10.0,
    };
    pub const OUTLIER: DistanceModel = DistanceModel {
        mean: 128.0,
        stddev: 20.0,
    };

    pub fn new(mean: f64, stddev: f64) -> Self {
        assert!(stddev > 0.0, "stddev must be positive");
        Self { mean, stddev }
    }

    /// Density at each integer distance 0..=256, normalized to sum to 1.
    pub fn pmf(&self) -> Vec<f64> {
        distance_pmf(self)
    }
}

pub fn distance_pmf(model: &DistanceModel) -> Vec<f64> {
    let raw: Vec<f64> = (0..=DESCRIPTOR_BITS)
        .map(|d| {
            let z = (d as f64 - model.mean) / model.stddev;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn weighted_recall(m: usize, max_distance: usize, model: &DistanceModel) -> f64 {
    let pmf = distance_pmf(model);
    (0..=max_distance.min(DESCRIPTOR_BITS))
        .map(|d| recall_probability(m, d) * pmf[d])
        .sum()
}

/// Probability mass of inlier pairs within `max_distance` that the index
/// retrieves.
pub fn accuracy_r(m: usize, max_distance: usize, inlier: &DistanceModel) -> f64 {
    weighted_recall(m, max_distance, inlier)
}

/// Probability mass of outlier pairs within `max_distance` that the index
/// retrieves anyway.
pub fn complexity_e(m: usize, max_distance: usize, outlier: &DistanceModel) -> f64 {
    weighted_recall(m, max_distance, outlier)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub m: usize,
    pub r: f64,
    pub e: f64,
}

pub fn tradeoff_curve(
    m_values: &[usize],
    max_distance: usize,
    inlier: &DistanceModel,
    outlier: &DistanceModel,
) -> Vec<TradeoffPoint> {
    m_values
        .iter()
        .map(|&m| TradeoffPoint {
            m,
            r: accuracy_r(m, max_distance, inlier),
            e: complexity_e(m, max_distance, outlier),
        })
        .collect()
}

/// One row of the recall table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallRow {
    pub m: usize,
    pub d: usize,
    pub p_recall: f64,
}

pub fn recall_table(m_values: &[usize], d_max: usize) -> Vec<RecallRow> {
    m_values
        .iter()
        .flat_map(|&m| {
            (0..=d_max).map(move |d| RecallRow {
                m,
                d,
                p_recall: recall_probability(m, d),
            })
        })
        .collect()
}

pub fn write_recall_csv<W: Write>(mut w: W, rows: &[RecallRow]) -> io::Result<()> {
    writeln!(w, "m,d,p_recall")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.m, r.d, r.p_recall)?;
    }
    w.flush()
}

pub fn write_tradeoff_csv<W: Write>(mut w: W, points: &[TradeoffPoint]) -> io::Result<()> {
    writeln!(w, "m,R,E")?;
    for p in points {
        writeln!(w, "{},{},{}", p.m, p.r, p.e)?;
    }
    w.flush()
}

/// Settings for [`emit_curves`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub m_values: Vec<usize>,
    pub d_max: usize,
    pub max_distance: usize,
    pub inlier: DistanceModel,
    pub outlier: DistanceModel,
}

impl Default for CurveSpec {
    fn default() -> Self {
        Self {
            m_values: vec![1, 2, 4, 8, 16, 32, 64],
            d_max: DESCRIPTOR_BITS,
            max_distance: 60,
            inlier: DistanceModel::INLIER,
            outlier: DistanceModel::OUTLIER,
        }
    }
}

/// Writes `recall.csv` and `tradeoff.csv` into `dir` and returns their paths.
pub fn emit_curves(dir: &Path, spec: &CurveSpec) -> io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let recall_path = dir.join("recall.csv");
    let tradeoff_path = dir.join("tradeoff.csv");
    write_recall_csv(
        BufWriter::new(File::create(&recall_path)?),
        &recall_table(&spec.m_values, spec.d_max),
    )?;
    write_tradeoff_csv(
        BufWriter::new(File::create(&tradeoff_path)?),
        &tradeoff_curve(
            &spec.m_values,
            spec.max_distance,
            &spec.inlier,
            &spec.outlier,
        ),
    )?;
    Ok((recall_path, tradeoff_path))
}
