//! Joint denoising, dereverberation and source separation of multichannel
//! audio with a source-wise factorized convolutional beamformer (CBF).
//!
//! The beamformer is split into one (WPE prediction filter, separation
//! filter) pair per source. Speech sources are modeled with time-varying
//! variances, while the remaining `M - J` outputs span an undifferentiated
//! stationary noise subspace, so only `J + 1` prediction filters and one
//! noise-block update are needed per frequency bin.
//!
//! Module map:
//!
//! - [`stft`]: analysis / overlap-add synthesis.
//! - [`model`]: configuration and the estimated parameter set.
//! - [`wpe`]: delayed stacks, weighted statistics and the prediction-filter update.
//! - [`ive`]: weighted covariances, iterative projection and the noise-block update.
//! - [`variance`]: coarse, fine and prior-guided variance updates.
//! - [`optimizer`]: the coordinate-ascent driver and likelihood.
//! - [`postproc`]: projection back and permutation re-alignment.
//! - [`simulate`]: synthetic sources and convolutive mixing.
//! - [`metrics`]: SI-SDR, frequency-weighted segmental SNR, cepstral distance.
//! - [`io`]: WAV files, prior-spectra files, diagnostics.

pub mod error;
pub mod io;
pub mod ive;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod postproc;
pub mod simulate;
pub mod stft;
pub mod variance;
pub mod wpe;

pub use error::{Error, Result};
pub use model::{CbfState, Mode, PipelineConfig, PriorSpectra, SeparationMatrix, VarianceField};
pub use optimizer::{run, Diagnostics, RunOutput};
pub use stft::{analyze, synthesize, MultichannelSpectrogram, StftParams, TimeSignal};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;
