//! Hard-sample-aware metric learning for clothes-changing re-identification.
//!
//! Labels (identity, clothing, viewpoint) define which pairs in a batch are
//! hard positives or hard negatives. Those pairs get their distances scaled
//! before a second triplet term is computed, and the two triplet terms are
//! blended with a classification loss. Everything runs on small feed-forward
//! models over feature vectors, with a synthetic scenario generator standing
//! in for real imagery.
//!
//! Module map:
//!
//! - [`data`]: samples, manifests, label unification, P×K batch sampling
//! - [`analyzer`]: hard-pair assessment and distance-adjustment matrices
//! - [`losses`]: distances, triplet variants, cross-entropy, gradients
//! - [`model`]: MLP embedding network with hand-written backward pass
//! - [`trainer`]: Adam, coarse pretraining, the main fit loop
//! - [`synth`]: synthetic base / coarse / fine scenario generator
//! - [`curation`]: pose filter, Laplacian sharpness, top-k selection, plans
//! - [`eval`]: CMC and mAP under standard / cloth-changing / same-clothes
//! - [`experiment`]: ablation grid and α×λ sweep harness

pub mod analyzer;
pub mod curation;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
