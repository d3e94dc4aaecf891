//! Blood-smear cell classification: colour-histogram and raw-pixel kNN, a
//! from-scratch CNN engine, dataset tooling and an experiment harness.

pub mod data;
pub mod harness;
pub mod imaging;
pub mod knn;
pub mod nn;
