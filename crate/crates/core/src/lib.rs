//! Diffusion-based surrogate modeling of 2-D airfoil flow fields.
//!
//! The crate trains a conditional denoising diffusion model to predict
//! pressure/velocity fields from an encoded geometry + flow-regime condition,
//! and evaluates ensemble predictions against reference statistics:
//!
//! * [`schedules`] — noise schedules (betas and cumulative alpha products).
//! * [`forward_process`] — closed-form noising and training-pair construction.
//! * [`samplers`] — ancestral and strided non-Markovian reverse sampling.
//! * [`backbone`] — the hybrid conv-encoder / latent-transformer / decoder
//!   noise predictor with its checkpoint format.
//! * [`data`] — dataset ingestion, normalization, condition encoding,
//!   reference statistics and a synthetic potential-flow generator.
//! * [`training`] — minibatch noise-prediction training loop.
//! * [`evaluation`] — ensemble inference and MSE reporting.
//! * [`nn`] — the small f64 tensor/autodiff engine backing the backbone.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod forward_process;
pub mod nn;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod training;

pub use error::CoreError;
pub type Result<T> = std::result::Result<T, CoreError>;
