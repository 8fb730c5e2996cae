//! Feature similarity, the exact pairwise image similarity, and its
//! multi-index approximation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{hamming_distance, BinaryDescriptor, DESCRIPTOR_BITS};
use crate::error::{Error, Result};
use crate::index::{MultiIndexTables, VisitedSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityParams {
    /// Hamming threshold beyond which a pair contributes nothing.
    pub d0: u32,
    /// Gaussian weighting width, in bits.
    pub sigma: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self {
            d0: 60,
            sigma: 16.0,
        }
    }
}

impl SimilarityParams {
    pub fn new(d0: u32, sigma: f64) -> Result<Self> {
        let p = Self { d0, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d0 as usize > DESCRIPTOR_BITS {
            return Err(Error::InvalidInput(format!(
                "d0 = {} exceeds {DESCRIPTOR_BITS}",
                self.d0
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// φ for every distance 0..=256.
    pub fn weight_table(&self) -> [f64; DESCRIPTOR_BITS + 1] {
        std::array::from_fn(|d| feature_similarity(d as u32, self))
    }
}

/// `exp(-d²/σ²)` for `d <= d0`, zero beyond.
pub fn feature_similarity(d: u32, p: &SimilarityParams) -> f64 {
    if d > p.d0 {
        return 0.0;
    }
    let d = d as f64;
    (-(d * d) / (p.sigma * p.sigma)).exp()
}

/// Exact image similarity: the mean of φ over all `|Fp|·|Fq|` feature pairs.
pub fn exact_image_similarity(
    fp: &[BinaryDescriptor],
    fq: &[BinaryDescriptor],
    p: &SimilarityParams,
) -> Result<f64> {
    if fp.is_empty() || fq.is_empty() {
        return Err(Error::InvalidInput(
            "image similarity needs non-empty feature sets".into(),
        ));
    }
    let w = p.weight_table();
    let total: f64 = fp
        .iter()
        .map(|a| {
            fq.iter()
                .map(|b| w[hamming_distance(a, b) as usize])
                .sum::<f64>()
        })
        .sum();
    Ok(total / (fp.len() as f64 * fq.len() as f64))
}

/// Per-candidate similarity scores of one query image, indexed by image id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn truncate(&mut self, len: usize) {
        self.0.truncate(len);
    }
}

impl std::ops::Index<usize> for ScoreVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Work counters for one approximate query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    /// Full 256-bit distances computed (distinct retrieved candidates).
    pub distance_computations: u64,
    /// Retrieved pairs within `d0`.
    pub matches: u64,
}

impl std::ops::AddAssign for QueryStats {
    fn add_assign(&mut self, o: Self) {
        self.distance_computations += o.distance_computations;
        self.matches += o.matches;
    }
}

/// Options for [`approx_similarity_with`].
#[derive(Clone, Copy, Default)]
pub struct QueryOptions<'a> {
    /// Score only images `0..limit`; later images are skipped before any
    /// distance is computed.
    pub limit: Option<usize>,
    /// Spread query features over this pool.
    pub pool: Option<&'a rayon::ThreadPool>,
}

/// Approximate similarity of the query against every stored image: one pass
/// over the query features, summing φ over each feature's candidate set only.
pub fn approx_similarity(
    tables: &MultiIndexTables,
    query: &[BinaryDescriptor],
    p: &SimilarityParams,
) -> ScoreVector {
    approx_similarity_with(tables, query, p, QueryOptions::default()).0
}

pub fn approx_similarity_with(
    tables: &MultiIndexTables,
    query: &[BinaryDescriptor],
    p: &SimilarityParams,
    opts: QueryOptions<'_>,
) -> (ScoreVector, QueryStats) {
    let n = opts
        .limit
        .map_or(tables.image_count(), |l| l.min(tables.image_count()));
    let weights = p.weight_table();

    let (mut acc, stats) = match opts.pool {
        None => {
            let mut acc = vec![0.0; n];
            let mut visited = VisitedSet::new();
            let stats = accumulate(tables, query, &weights, n, &mut acc, &mut visited);
            (acc, stats)
        }
        Some(pool) => pool.install(|| {
            query
                .par_chunks(32)
                .map_init(VisitedSet::new, |visited, chunk| {
                    let mut acc = vec![0.0; n];
                    let stats = accumulate(tables, chunk, &weights, n, &mut acc, visited);
                    (acc, stats)
                })
                .reduce(
                    || (vec![0.0; n], QueryStats::default()),
                    |(mut a, mut sa), (b, sb)| {
                        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                        sa += sb;
                        (a, sa)
                    },
                )
        }),
    };

    let nq = query.len() as f64;
    for (k, s) in acc.iter_mut().enumerate() {
        let fk = tables.feature_count(k);
        *s = if fk == 0 || query.is_empty() {
            0.0
        } else {
            *s / (nq * fk as f64)
        };
    }
    (ScoreVector(acc), stats)
}

fn accumulate(
    tables: &MultiIndexTables,
    query: &[BinaryDescriptor],
    weights: &[f64; DESCRIPTOR_BITS + 1],
    limit: usize,
    acc: &mut [f64],
    visited: &mut VisitedSet,
) -> QueryStats {
    let mut stats = QueryStats::default();
    for q in query {
        tables.for_each_candidate(q, visited, |r, d| {
            let image = r.image_id as usize;
            if image >= limit {
                return;
            }
            stats.distance_computations += 1;
            let w = weights[hamming_distance(q, d) as usize];
            if w > 0.0 {
                stats.matches += 1;
                acc[image] += w;
            }
        });
    }
    stats
}

/// Exact similarity of the query against every stored image `0..limit` by
/// exhaustive comparison. Images without features score 0.
pub fn brute_force_scores(
    tables: &MultiIndexTables,
    query: &[BinaryDescriptor],
    p: &SimilarityParams,
    limit: Option<usize>,
) -> ScoreVector {
    let n = limit.map_or(tables.image_count(), |l| l.min(tables.image_count()));
    let scores = (0..n)
        .map(|k| exact_image_similarity(query, tables.image_descriptors(k), p).unwrap_or(0.0))
        .collect();
    ScoreVector(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{substring_index, SubstringConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_desc(rng: &mut impl Rng) -> BinaryDescriptor {
        BinaryDescriptor::from_array(rng.gen())
    }

    fn flipped(d: &BinaryDescriptor, bits: &[usize]) -> BinaryDescriptor {
        let mut out = *d;
        bits.iter().for_each(|&b| out.flip_bit(b));
        out
    }

    // Definitional evaluation: a pair counts iff it shares a substring.
    fn share_a_substring_scores(
        images: &[Vec<BinaryDescriptor>],
        query: &[BinaryDescriptor],
        cfg: &SubstringConfig,
        p: &SimilarityParams,
    ) -> Vec<f64> {
        images
            .iter()
            .map(|img| {
                let mut sum = 0.0;
                for q in query {
                    for f in img {
                        let shares = (0..cfg.m()).any(|k| {
                            substring_index(q, k, cfg).unwrap()
                                == substring_index(f, k, cfg).unwrap()
                        });
                        if shares {
                            sum += feature_similarity(hamming_distance(q, f), p);
                        }
                    }
                }
                sum / (query.len() * img.len()) as f64
            })
            .collect()
    }

    #[test]
    fn feature_similarity_values() {
        let p = SimilarityParams::default();
        assert_eq!(feature_similarity(0, &p), 1.0);
        assert_eq!(feature_similarity(61, &p), 0.0);
        assert!(feature_similarity(60, &p) > 0.0);
        assert!((feature_similarity(16, &p) - (-1.0f64).exp()).abs() < 1e-15);
        let w = p.weight_table();
        assert!(w.windows(2).all(|x| x[1] <= x[0]));
    }

    #[test]
    fn params_validation() {
        assert!(SimilarityParams::new(257, 16.0).is_err());
        assert!(SimilarityParams::new(60, 0.0).is_err());
        assert!(SimilarityParams::new(60, f64::NAN).is_err());
        assert!(SimilarityParams::new(256, 1.0).is_ok());
    }

    #[test]
    fn exact_similarity_examples() {
        let p = SimilarityParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_desc(&mut rng);
        assert_eq!(exact_image_similarity(&[x], &[x], &p).unwrap(), 1.0);
        assert_eq!(
            exact_image_similarity(&[x], &[x.complement()], &p).unwrap(),
            0.0
        );

        let c = x;
        let a = x;
        let b = flipped(&x, &(0..61).map(|i| i * 4).collect::<Vec<_>>());
        assert_eq!(hamming_distance(&b, &c), 61);
        assert_eq!(exact_image_similarity(&[a, b], &[c], &p).unwrap(), 0.5);

        assert!(exact_image_similarity(&[], &[x], &p).is_err());
        assert!(exact_image_similarity(&[x], &[], &p).is_err());
    }

    #[test]
    fn duplicate_image_scores_exactly() {
        let p = SimilarityParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img: Vec<_> = (0..40).map(|_| rand_desc(&mut rng)).collect();
        let mut t = MultiIndexTables::new(SubstringConfig::default(), None).unwrap();
        t.insert_image(0, &img).unwrap();
        let s = approx_similarity(&t, &img, &p);
        let exact = exact_image_similarity(&img, &img, &p).unwrap();
        assert!((s[0] - exact).abs() < 1e-15);
    }

    #[test]
    fn far_images_score_zero_and_empty_database_is_empty() {
        let p = SimilarityParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q: Vec<_> = (0..10).map(|_| rand_desc(&mut rng)).collect();
        let t0 = MultiIndexTables::new(SubstringConfig::default(), None).unwrap();
        assert!(approx_similarity(&t0, &q, &p).is_empty());

        let mut t = MultiIndexTables::new(SubstringConfig::default(), None).unwrap();
        let far: Vec<_> = q.iter().map(|d| d.complement()).collect();
        t.insert_image(0, &far).unwrap();
        t.insert_image(1, &[]).unwrap();
        assert_eq!(approx_similarity(&t, &q, &p).into_inner(), vec![0.0, 0.0]);
        assert_eq!(approx_similarity(&t, &[], &p).into_inner(), vec![0.0, 0.0]);
    }

    #[test]
    fn matches_definitional_evaluation_on_random_database() {
        let p = SimilarityParams::default();
        let cfg = SubstringConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut images: Vec<Vec<BinaryDescriptor>> = (0..10)
            .map(|_| (0..30).map(|_| rand_desc(&mut rng)).collect())
            .collect();
        let query: Vec<_> = (0..30).map(|_| rand_desc(&mut rng)).collect();
        // Plant near and mid-range copies so some pairs are retrieved.
        for (i, q) in query.iter().enumerate().take(20) {
            let n_flips = [3usize, 12, 20, 35, 50][i % 5];
            let bits: Vec<usize> = (0..n_flips).map(|_| rng.gen_range(0..256)).collect();
            images[i % 10][i] = flipped(q, &bits);
        }
        let mut t = MultiIndexTables::new(cfg, None).unwrap();
        for (i, img) in images.iter().enumerate() {
            t.insert_image(i, img).unwrap();
        }
        let got = approx_similarity(&t, &query, &p);
        let want = share_a_substring_scores(&images, &query, &cfg, &p);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs(), "{g} vs {w}");
        }
        for (k, img) in images.iter().enumerate() {
            let exact = exact_image_similarity(&query, img, &p).unwrap();
            assert!(got[k] <= exact + 1e-15);
        }
        assert!(got.as_slice().iter().any(|&s| s > 0.0));
    }

    #[test]
    fn parallel_matches_sequential() {
        let p = SimilarityParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut t = MultiIndexTables::new(SubstringConfig::default(), None).unwrap();
        let base: Vec<_> = (0..200).map(|_| rand_desc(&mut rng)).collect();
        for i in 0..8 {
            let img: Vec<_> = base
                .iter()
                .map(|d| flipped(d, &[(i * 7) % 256, (i * 13 + 5) % 256]))
                .collect();
            t.insert_image(i, &img).unwrap();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let (seq, s1) = approx_similarity_with(&t, &base, &p, QueryOptions::default());
        let (par, s2) = approx_similarity_with(
            &t,
            &base,
            &p,
            QueryOptions {
                limit: None,
                pool: Some(&pool),
            },
        );
        assert_eq!(s1, s2);
        for (a, b) in seq.as_slice().iter().zip(par.as_slice()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn limit_skips_later_images() {
        let p = SimilarityParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let img: Vec<_> = (0..5).map(|_| rand_desc(&mut rng)).collect();
        let mut t = MultiIndexTables::new(SubstringConfig::default(), None).unwrap();
        for i in 0..3 {
            t.insert_image(i, &img).unwrap();
        }
        let (s, stats) = approx_similarity_with(
            &t,
            &img,
            &p,
            QueryOptions {
                limit: Some(1),
                pool: None,
            },
        );
        assert_eq!(s.len(), 1);
        assert_eq!(stats.distance_computations, 5);
        assert_eq!(brute_force_scores(&t, &img, &p, Some(2)).len(), 2);
    }
}
