//! Multi-index hash tables over descriptor substrings.
//!
//! Each of the `m` tables is keyed by one `l`-bit substring. Every stored
//! feature is referenced once per table, so two descriptors that agree on at
//! least one substring meet in at least one bucket. Images are appended in
//! order and never removed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::descriptor::{slice_unchecked, BinaryDescriptor, SubstringConfig, DESCRIPTOR_BYTES};
use crate::error::{Error, Result};

/// Default cap on references per bucket.
pub const DEFAULT_BUCKET_CAP: usize = 128;
/// Default pointer size used by the memory model.
pub const DEFAULT_POINTER_SIZE: u64 = 8;
/// Bytes charged per feature per table by the memory model.
pub const REF_BYTES: u64 = 4;

// Widest substring stored in a flat array of 2^l buckets.
const MAX_DENSE_BITS: usize = 16;

/// Identifies one stored descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureRef {
    pub image_id: u32,
    pub feature_id: u32,
}

impl FeatureRef {
    pub fn new(image_id: usize, feature_id: usize) -> Self {
        Self {
            image_id: image_id as u32,
            feature_id: feature_id as u32,
        }
    }
}

#[derive(Clone, Debug)]
enum BucketTable {
    Dense(Vec<Vec<FeatureRef>>),
    Sparse(HashMap<u64, Vec<FeatureRef>>),
}

impl BucketTable {
    fn new(l: usize) -> Self {
        if l <= MAX_DENSE_BITS {
            BucketTable::Dense(vec![Vec::new(); 1usize << l])
        } else {
            BucketTable::Sparse(HashMap::new())
        }
    }

    #[inline]
    fn get(&self, key: u64) -> &[FeatureRef] {
        match self {
            BucketTable::Dense(b) => &b[key as usize],
            BucketTable::Sparse(map) => map.get(&key).map(Vec::as_slice).unwrap_or(&[]),
        }
    }

    fn get_mut(&mut self, key: u64) -> &mut Vec<FeatureRef> {
        match self {
            BucketTable::Dense(b) => &mut b[key as usize],
            BucketTable::Sparse(map) => map.entry(key).or_default(),
        }
    }

    fn occupied(&self) -> usize {
        match self {
            BucketTable::Dense(b) => b.iter().filter(|v| !v.is_empty()).count(),
            BucketTable::Sparse(map) => map.values().filter(|v| !v.is_empty()).count(),
        }
    }

    fn total_refs(&self) -> usize {
        match self {
            BucketTable::Dense(b) => b.iter().map(Vec::len).sum(),
            BucketTable::Sparse(map) => map.values().map(Vec::len).sum(),
        }
    }
}

/// Per-query dedup set over global feature slots, reset in O(1) by bumping a
/// generation counter.
#[derive(Clone, Debug, Default)]
pub struct VisitedSet {
    stamps: Vec<u32>,
    generation: u32,
}

impl VisitedSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn begin(&mut self, len: usize) {
        if self.stamps.len() < len {
            self.stamps.resize(len, 0);
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamps.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
    }

    #[inline]
    fn insert(&mut self, slot: usize) -> bool {
        let s = &mut self.stamps[slot];
        if *s == self.generation {
            false
        } else {
            *s = self.generation;
            true
        }
    }
}

/// The MIH database: `m` tables of buckets plus the descriptor store.
#[derive(Clone, Debug)]
pub struct MultiIndexTables {
    cfg: SubstringConfig,
    tables: Vec<BucketTable>,
    store: Vec<BinaryDescriptor>,
    // offsets[i] is the store slot of image i's first feature; one extra
    // trailing entry holds the store length.
    offsets: Vec<usize>,
    bucket_cap: Option<usize>,
    skipped: usize,
}

impl MultiIndexTables {
    /// `bucket_cap = None` disables the overflow policy.
    pub fn new(cfg: SubstringConfig, bucket_cap: Option<usize>) -> Result<Self> {
        if !cfg.keyable() {
            return Err(Error::InvalidInput(format!(
                "substring length {} is wider than 64 bits; use m >= 4",
                cfg.l()
            )));
        }
        if bucket_cap == Some(0) {
            return Err(Error::InvalidInput("bucket cap must be positive".into()));
        }
        Ok(Self {
            cfg,
            tables: (0..cfg.m()).map(|_| BucketTable::new(cfg.l())).collect(),
            store: Vec::new(),
            offsets: vec![0],
            bucket_cap,
            skipped: 0,
        })
    }

    pub fn config(&self) -> &SubstringConfig {
        &self.cfg
    }

    pub fn bucket_cap(&self) -> Option<usize> {
        self.bucket_cap
    }

    pub fn image_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_features(&self) -> usize {
        self.store.len()
    }

    /// `|F_k|` for a stored image.
    pub fn feature_count(&self, image_id: usize) -> usize {
        self.offsets[image_id + 1] - self.offsets[image_id]
    }

    pub fn feature_counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Number of (feature, table) insertions dropped because the bucket was full.
    pub fn skipped_insertions(&self) -> usize {
        self.skipped
    }

    pub fn descriptor(&self, r: FeatureRef) -> Option<&BinaryDescriptor> {
        let image = r.image_id as usize;
        if image >= self.image_count() || r.feature_id as usize >= self.feature_count(image) {
            return None;
        }
        Some(&self.store[self.offsets[image] + r.feature_id as usize])
    }

    /// Descriptors of a stored image, in feature order.
    pub fn image_descriptors(&self, image_id: usize) -> &[BinaryDescriptor] {
        &self.store[self.offsets[image_id]..self.offsets[image_id + 1]]
    }

    /// Number of stored features belonging to images `0..image_id`.
    pub fn features_before(&self, image_id: usize) -> usize {
        self.offsets[image_id.min(self.image_count())]
    }

    /// Contents of bucket `key` in table `k`.
    pub fn bucket(&self, k: usize, key: u64) -> &[FeatureRef] {
        self.tables[k].get(key)
    }

    pub fn occupied_buckets(&self, k: usize) -> usize {
        self.tables[k].occupied()
    }

    /// Total references held by table `k`.
    pub fn table_refs(&self, k: usize) -> usize {
        self.tables[k].total_refs()
    }

    /// Appends image `image_id`, which must equal the current image count.
    pub fn insert_image(
        &mut self,
        image_id: usize,
        descriptors: &[BinaryDescriptor],
    ) -> Result<()> {
        let expected = self.image_count();
        if image_id != expected {
            return Err(Error::NonSequentialImage {
                expected,
                actual: image_id,
            });
        }
        if self.store.len() + descriptors.len() > u32::MAX as usize {
            return Err(Error::InvalidInput("feature store is full".into()));
        }
        let l = self.cfg.l();
        for (feature_id, desc) in descriptors.iter().enumerate() {
            let r = FeatureRef::new(image_id, feature_id);
            for (k, table) in self.tables.iter_mut().enumerate() {
                let bucket = table.get_mut(slice_unchecked(desc, k, l));
                match self.bucket_cap {
                    Some(cap) if bucket.len() >= cap => self.skipped += 1,
                    _ => bucket.push(r),
                }
            }
        }
        self.store.extend_from_slice(descriptors);
        self.offsets.push(self.store.len());
        Ok(())
    }

    /// The set of stored features sharing at least one substring bucket with
    /// `q`, each listed once, in ascending order.
    pub fn query_candidates(&self, q: &BinaryDescriptor) -> Vec<FeatureRef> {
        let mut out = Vec::new();
        let mut visited = VisitedSet::new();
        self.for_each_candidate(q, &mut visited, |r, _| out.push(r));
        out.sort_unstable();
        out
    }

    /// Visits every distinct candidate of `q` once, with its stored descriptor.
    pub fn for_each_candidate<F>(&self, q: &BinaryDescriptor, visited: &mut VisitedSet, mut f: F)
    where
        F: FnMut(FeatureRef, &BinaryDescriptor),
    {
        visited.begin(self.store.len());
        let l = self.cfg.l();
        for (k, table) in self.tables.iter().enumerate() {
            for &r in table.get(slice_unchecked(q, k, l)) {
                let slot = self.offsets[r.image_id as usize] + r.feature_id as usize;
                if visited.insert(slot) {
                    f(r, &self.store[slot]);
                }
            }
        }
    }

    /// Memory model figure in bytes for the current contents.
    pub fn memory_footprint(&self, pointer_size: u64) -> u64 {
        memory_model(self.store.len() as u64, &self.cfg, pointer_size)
    }
}

/// Accounting model: each feature costs 32 descriptor bytes plus a 4-byte
/// reference per table; each table has a fixed array of `2^l` pointers.
pub fn memory_model(n_features: u64, cfg: &SubstringConfig, pointer_size: u64) -> u64 {
    let m = cfg.m() as u64;
    let per_feature = DESCRIPTOR_BYTES as u64 + REF_BYTES * m;
    let buckets = 1u64.checked_shl(cfg.l() as u32).unwrap_or(u64::MAX);
    n_features * per_feature + m.saturating_mul(buckets).saturating_mul(pointer_size)
}
