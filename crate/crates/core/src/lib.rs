//! Appearance-based loop closure detection over binary feature descriptors.
//!
//! Image similarity is the mean Gaussian-weighted agreement of all feature
//! pairs within a Hamming threshold. Instead of comparing every pair, each
//! stored descriptor is indexed by its disjoint substrings in one hash table
//! per substring, and only pairs meeting in some bucket are compared. A
//! per-candidate Bayesian filter turns the resulting scores into loop
//! closure probabilities, allowing several simultaneous detections.
//!
//! [`analysis`] gives the closed-form retrieval probability of the index and
//! the accuracy/complexity trade-off it implies for a choice of substring
//! count.

pub mod analysis;
pub mod bayes;
pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod similarity;

pub use bayes::{BayesParams, BeliefState};
pub use dataset::{DescriptorDataset, GroundTruth, SyntheticSpec};
pub use descriptor::{hamming_distance, substring_index, BinaryDescriptor, SubstringConfig};
pub use error::{Error, FormatError, Result};
pub use index::{FeatureRef, MultiIndexTables};
pub use pipeline::{run_lcd, RunConfig, RunReport};
pub use similarity::{approx_similarity, exact_image_similarity, ScoreVector, SimilarityParams};
