//! Dual-space prototype propagation for zero-shot classification.
//!
//! Classes get a visual prototype (projected mean feature) and a semantic
//! prototype (encoded attribute vector). Both are refined by attention
//! propagation over similarity graphs of the classes, kept consistent by a
//! KL penalty between the two spaces' class-affinity distributions, and
//! scored against query features by a small relation network.

pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod params;
pub mod propagation;
pub mod prototypes;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use datasets::{generate_synthetic, load_dataset, save_dataset, Dataset, SplitSpec, SyntheticSpec, Topology};
pub use error::{Error, Result};
pub use evaluation::{evaluate, harmonic, hit_at_k, per_class_accuracy, EvalReport, Protocol};
pub use params::{ModelDims, ModelParams};
pub use training::{fit, AblationVariant, Hyperparams, Model};
