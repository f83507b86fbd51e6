//! Consistency toolkit for multi-frame latent diffusion editing.
//!
//! Three mechanisms, each usable on its own:
//!
//! * temporal adapters: low-rank residual branches on attention projections,
//!   trained with a frame-similarity loss and gated by timestep windows;
//! * bilateral inversion: an edge-preserving filter applied to the latent
//!   at each deterministic inversion step;
//! * semantic tokens: a learned shared token block plus per-frame pooled
//!   tokens prepended to the text conditioning.
//!
//! Everything runs on a self-contained toy latent pipeline with closed-form
//! oracles, so every numerical claim here is checked against an independent
//! reference in the test suite.

pub mod adapter;
pub mod bilateral;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod harness;
pub mod mat;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod tape;
pub mod tokens;
pub mod train;

pub use bilateral::{BilateralConfig, Boundary, FilterDirection};
pub use denoiser::{ToyDenoiser, ToyDenoiserConfig, TrainScope};
pub use error::{CoreError, Result};
pub use grid::{Grid, GridShape, LatentGrid, NoiseSpec, Scalar};
pub use harness::{ablation_runner, external_metric_hook, standard_cell_runner, RunConfig};
pub use mat::Mat;
pub use metrics::{flicker_metric, psnr, ssim, MetricReport};
pub use optim::{GradMap, OptimConfig, OptimizerKind, TrainState};
pub use pipeline::{Codec, EditConfig, FrameClip, RunManifest, SyntheticClipSpec};
pub use schedule::{AnalyticGaussianDenoiser, Denoiser, NoiseSchedule};
pub use train::{train_driver, Checkpoint, TrainConfig};
