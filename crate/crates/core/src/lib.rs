//! Cluster-guided asymmetric contrastive learning for unsupervised
//! re-identification, at desk scale.
//!
//! A siamese pair of encoders sees two views of each image: a basic augmented
//! color view and a grayscale view. Pseudo labels come from density clustering
//! of the first branch's features, refined by a sub-cluster noise score, and
//! drive instance-level and cluster-level contrastive losses.

pub mod augment;
pub mod autodiff;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod loss_check;
pub mod model;
pub mod rng;
pub mod trainer;

pub use autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
pub use error::{Error, Result};
