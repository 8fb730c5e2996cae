//! Descriptor files, ground truth, and synthetic datasets.
//!
//! Binary descriptor file, all integers little-endian:
//!
//! ```text
//! "MILD"  u32 version = 1  u32 descriptor_bytes = 32  u32 n_images
//! per image: u32 n_features, then n_features × 32 descriptor bytes
//! ```
//!
//! Descriptor bytes follow the bit order documented in [`crate::descriptor`].
//!
//! Ground truth is a text file with one `query candidate` pair per line,
//! separated by whitespace or a comma; `#` starts a comment.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::DistanceModel;
use crate::descriptor::{BinaryDescriptor, DESCRIPTOR_BITS, DESCRIPTOR_BYTES};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"MILD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DescriptorDataset {
    pub name: String,
    pub images: Vec<Vec<BinaryDescriptor>>,
}

impl DescriptorDataset {
    pub fn new(name: impl Into<String>, images: Vec<Vec<BinaryDescriptor>>) -> Self {
        Self {
            name: name.into(),
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn total_features(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }
}

pub fn encode_dataset<W: Write>(ds: &DescriptorDataset, mut w: W) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(DESCRIPTOR_BYTES as u32).to_le_bytes())?;
    w.write_all(&(ds.images.len() as u32).to_le_bytes())?;
    for image in &ds.images {
        w.write_all(&(image.len() as u32).to_le_bytes())?;
        for d in image {
            w.write_all(&d.to_bytes())?;
        }
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos as u64,
                what,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a descriptor file held in memory. `name` is attached to the result.
pub fn decode_dataset(buf: &[u8], name: &str) -> Result<DescriptorDataset, FormatError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            offset: 0,
            found: magic.try_into().unwrap(),
        });
    }
    let at = c.pos as u64;
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: at,
            version,
        });
    }
    let at = c.pos as u64;
    let bytes = c.u32("descriptor size")?;
    if bytes as usize != DESCRIPTOR_BYTES {
        return Err(FormatError::DescriptorBytes {
            offset: at,
            value: bytes,
        });
    }
    let n_images = c.u32("image count")? as usize;
    let mut images = Vec::with_capacity(n_images.min(1 << 20));
    for _ in 0..n_images {
        let n = c.u32("feature count")? as usize;
        let payload = c.take(n.saturating_mul(DESCRIPTOR_BYTES), "descriptors")?;
        images.push(
            payload
                .chunks_exact(DESCRIPTOR_BYTES)
                .map(|b| BinaryDescriptor::from_array(b.try_into().unwrap()))
                .collect(),
        );
    }
    if c.pos != buf.len() {
        return Err(FormatError::TrailingBytes {
            offset: c.pos as u64,
            extra: (buf.len() - c.pos) as u64,
        });
    }
    Ok(DescriptorDataset {
        name: name.to_string(),
        images,
    })
}

pub fn write_dataset(ds: &DescriptorDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    encode_dataset(ds, io::BufWriter::new(file))?;
    Ok(())
}

/// Reads a descriptor file; the dataset is named after the file stem.
pub fn read_dataset(path: &Path) -> Result<DescriptorDataset> {
    let buf = fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(decode_dataset(&buf, &name)?)
}

/// Loop-closure pairs `(query, candidate)` with `candidate < query`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: BTreeSet<(usize, usize)>,
}

impl GroundTruth {
    /// Adds a pair in either order. Self-pairs are rejected.
    pub fn insert(&mut self, a: usize, b: usize) -> Result<bool> {
        if a == b {
            return Err(Error::InvalidInput(format!("self-pair ({a}, {a})")));
        }
        Ok(self.pairs.insert((a.max(b), a.min(b))))
    }

    pub fn contains(&self, query: usize, candidate: usize) -> bool {
        self.pairs.contains(&(query, candidate))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct query frames that have at least one loop closure.
    pub fn query_frames(&self) -> BTreeSet<usize> {
        self.pairs.iter().map(|&(q, _)| q).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# query candidate\n");
        for (q, c) in &self.pairs {
            s.push_str(&format!("{q} {c}\n"));
        }
        s
    }
}

fn split_fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|f| !f.is_empty())
}

/// Parses the pair-list ground truth. With `n_images`, indices must lie below it.
pub fn parse_ground_truth(text: &str, n_images: Option<usize>) -> Result<GroundTruth> {
    let mut gt = GroundTruth::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::GroundTruth {
            line: line_no,
            message,
        };
        let line = raw.split('#').next().unwrap_or("");
        let fields: Vec<&str> = split_fields(line).collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 2 {
            return Err(err(format!("expected two indices, found {}", fields.len())));
        }
        let mut idx = [0usize; 2];
        for (slot, f) in idx.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| err(format!("{f:?} is not an image index")))?;
            if let Some(n) = n_images {
                if *slot >= n {
                    return Err(err(format!("index {slot} out of range for {n} images")));
                }
            }
        }
        if idx[0] == idx[1] {
            return Err(err(format!("self-pair ({}, {})", idx[0], idx[1])));
        }
        gt.insert(idx[0], idx[1])?;
    }
    Ok(gt)
}

pub fn load_ground_truth(path: &Path, n_images: Option<usize>) -> Result<GroundTruth> {
    parse_ground_truth(&fs::read_to_string(path)?, n_images)
}

pub fn write_ground_truth(gt: &GroundTruth, path: &Path) -> Result<()> {
    fs::write(path, gt.to_text())?;
    Ok(())
}

/// Which off-diagonal entries of a ground-truth matrix are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Triangle {
    /// Entries with column > row.
    Upper,
    /// Entries with row > column.
    Lower,
    /// Both, normalized and merged.
    #[default]
    Both,
}

/// Converts a dense N×N matrix (rows of numbers separated by whitespace or
/// commas; nonzero marks a loop) into pairs. The diagonal is ignored.
pub fn matrix_to_pairs(text: &str, triangle: Triangle) -> Result<GroundTruth> {
    let mut rows: Vec<(usize, Vec<bool>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let mut row = Vec::new();
        for f in split_fields(line) {
            let v: f64 = f.parse().map_err(|_| Error::GroundTruth {
                line: i + 1,
                message: format!("{f:?} is not a number"),
            })?;
            row.push(v != 0.0);
        }
        if !row.is_empty() {
            rows.push((i + 1, row));
        }
    }
    let n = rows.len();
    let mut gt = GroundTruth::default();
    for (r, (line, row)) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::GroundTruth {
                line: *line,
                message: format!("row has {} entries, matrix has {n} rows", row.len()),
            });
        }
        for (c, &set) in row.iter().enumerate() {
            let wanted = match triangle {
                Triangle::Upper => c > r,
                Triangle::Lower => r > c,
                Triangle::Both => r != c,
            };
            if set && wanted {
                gt.insert(r, c)?;
            }
        }
    }
    Ok(gt)
}

/// One planted loop closure: `inlier_fraction` of the query's features are
/// perturbed copies of the candidate's.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopPair {
    pub query: usize,
    pub candidate: usize,
    pub inlier_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_images: usize,
    pub features_per_image: usize,
    pub loop_pairs: Vec<LoopPair>,
    /// Distribution of the number of flipped bits in a planted inlier.
    pub inlier_model: DistanceModel,
    /// Reference outlier model. Non-loop features are uniform random bits,
    /// whose pairwise distances follow Binomial(256, 1/2).
    pub outlier_model: DistanceModel,
    /// Flip counts are drawn from `inlier_model` truncated to `[0, max_flips]`.
    pub max_flips: u32,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            n_images: 100,
            features_per_image: 200,
            loop_pairs: Vec::new(),
            inlier_model: DistanceModel::INLIER,
            outlier_model: DistanceModel::OUTLIER,
            max_flips: 60,
            rng_seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// 100 images where frames 60..=70 revisit frames 10..=20.
    pub fn loop_benchmark(rng_seed: u64) -> Self {
        Self {
            name: "loop-benchmark".into(),
            loop_pairs: (0..=10)
                .map(|i| LoopPair {
                    query: 60 + i,
                    candidate: 10 + i,
                    inlier_fraction: 0.5,
                })
                .collect(),
            rng_seed,
            ..Self::default()
        }
    }

    /// Copy of this spec with the given `(query, candidate)` loops at an
    /// inlier fraction of one half.
    pub fn with_loops(&self, pairs: &[(usize, usize)]) -> Self {
        Self {
            loop_pairs: pairs
                .iter()
                .map(|&(query, candidate)| LoopPair {
                    query,
                    candidate,
                    inlier_fraction: 0.5,
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.loop_pairs {
            if p.query <= p.candidate {
                return Err(Error::InvalidInput(format!(
                    "loop pair ({}, {}) must have candidate < query",
                    p.query, p.candidate
                )));
            }
            if p.query >= self.n_images {
                return Err(Error::InvalidInput(format!(
                    "loop pair query {} out of range for {} images",
                    p.query, self.n_images
                )));
            }
            if !(0.0..=1.0).contains(&p.inlier_fraction) {
                return Err(Error::InvalidInput(format!(
                    "inlier fraction {} not in [0, 1]",
                    p.inlier_fraction
                )));
            }
        }
        for m in [&self.inlier_model, &self.outlier_model] {
            if m.stddev.is_nan()
                || m.stddev <= 0.0
                || !(0.0..=DESCRIPTOR_BITS as f64).contains(&m.mean)
            {
                return Err(Error::InvalidInput(format!("bad distance model {m:?}")));
            }
        }
        if self.max_flips as usize > DESCRIPTOR_BITS {
            return Err(Error::InvalidInput("max_flips exceeds 256".into()));
        }
        Ok(())
    }
}

/// Copy of `d` with `k` distinct uniformly chosen bits flipped.
pub fn flip_random_bits<R: Rng + ?Sized>(
    d: &BinaryDescriptor,
    k: usize,
    rng: &mut R,
) -> BinaryDescriptor {
    let mut out = *d;
    for bit in sample(rng, DESCRIPTOR_BITS, k) {
        out.flip_bit(bit);
    }
    out
}

fn truncated_flips<R: Rng + ?Sized>(normal: &Normal<f64>, max: u32, rng: &mut R) -> usize {
    for _ in 0..64 {
        let k = normal.sample(rng).round();
        if (0.0..=max as f64).contains(&k) {
            return k as usize;
        }
    }
    normal.sample(rng).round().clamp(0.0, max as f64) as usize
}

/// Builds a seeded dataset with planted loop closures and its ground truth.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DescriptorDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut images: Vec<Vec<BinaryDescriptor>> = (0..spec.n_images)
        .map(|_| {
            (0..spec.features_per_image)
                .map(|_| BinaryDescriptor::from_array(rng.gen()))
                .collect()
        })
        .collect();
    let normal = Normal::new(spec.inlier_model.mean, spec.inlier_model.stddev)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut pairs = spec.loop_pairs.clone();
    pairs.sort_by_key(|p| (p.query, p.candidate));
    let mut free_slots: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut gt = GroundTruth::default();
    for p in &pairs {
        let slots = free_slots.entry(p.query).or_insert_with(|| {
            let mut s: Vec<usize> = (0..spec.features_per_image).collect();
            s.shuffle(&mut rng);
            s
        });
        let n_in = ((p.inlier_fraction * spec.features_per_image as f64).round() as usize)
            .min(slots.len());
        let sources = sample(&mut rng, spec.features_per_image, n_in).into_vec();
        for src in sources {
            let slot = slots.pop().expect("checked above");
            let k = truncated_flips(&normal, spec.max_flips, &mut rng);
            images[p.query][slot] = flip_random_bits(&images[p.candidate][src], k, &mut rng);
        }
        gt.insert(p.query, p.candidate)?;
    }
    Ok((DescriptorDataset::new(spec.name.clone(), images), gt))
}
