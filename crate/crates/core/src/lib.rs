//! Drug-target binding affinity prediction with a power-graph GCN drug
//! encoder and a Bi-LSTM protein encoder.
//!
//! The crate covers the whole path from SMILES text and amino-acid strings
//! to trained models, evaluation metrics and combined-score drug ranking.

pub mod autodiff;
pub mod datasets;
pub mod featurize;
pub mod graph_ops;
pub mod metrics;
pub mod model;
pub mod protein;
pub mod repurpose;
pub mod smiles;
pub mod training;
