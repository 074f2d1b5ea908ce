//! Semi-supervised federated domain generalization via feature alignment.
//!
//! A labeled server and unlabeled clients train one `G∘F` model in
//! alternating rounds. The server pulls its per-class features toward
//! Gaussians `N(w_G^k, λI)` anchored at the classifier columns, so the
//! distribution travels inside the ordinary model payload; clients then
//! align their pseudo-labeled features to the same Gaussians.
//!
//! Modules:
//! - [`nncore`]: float64 tensors, layers, explicit backprop, SGD.
//! - [`alignlosses`]: cross-entropy, multi-RBF MMD, CDD and covariance losses.
//! - [`featdist`]: the classifier-anchored Gaussian bank and overhead maths.
//! - [`pseudolabel`]: weighted k-means nearest-centroid pseudo-labels.
//! - [`federation`]: server/client stages, FedAvg with BN skip, rounds.
//! - [`datagen`]: MNIST IDX loading, rotated domains, blob domains.
//! - [`harness`]: experiment configs, metrics files, sweeps, verification.

pub mod alignlosses;
pub mod datagen;
pub mod featdist;
pub mod federation;
pub mod harness;
pub mod nncore;
pub mod pseudolabel;
pub mod seeding;
