//! Semi-supervised meta-training for few-shot classification.
//!
//! The pipeline pre-trains a feature extractor and base classifier on a
//! partly labeled base set, pseudo-labels the unlabeled remainder, then
//! meta-trains episodically (prototype or embedding-propagation head) on
//! the union, and finally evaluates few-shot tasks on novel classes.

pub mod datastore;
pub mod diffmath;
pub mod eval;
pub mod heads;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod trainers;
