//! Label-noise-robust representation learning with a supervised VAE branch.
//!
//! A backbone feeds both a discriminative task head and a VAE whose latent
//! drives a duplicated generative task head. Per mini-batch, samples whose
//! normalized discriminative loss most exceeds their generative loss are
//! treated as noisy; the backbone learns from the generative head on those
//! samples and from the discriminative head on the rest.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod losses;
pub mod model;
pub mod tensor;

pub use error::{Error, FieldError, Result};
pub use data::{Batch, Dataset, NoiseSpec, Targets};
pub use eval::{DetectionTrace, Selector};
pub use experiment::{ExperimentConfig, RunSummary, Scenario};
pub use grid::{LambdaSpec, Mode, Partition};
pub use losses::BatchLossReport;
pub use model::{GridModel, ModelConfig, ParameterCounts, TaskSpec};
pub use tensor::{Gradients, GroupSet, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
