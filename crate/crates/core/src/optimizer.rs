//! Coordinate-ascent driver.
//!
//! Each pass refreshes the variances, optionally re-estimates the
//! prediction filters (one WPE pass every `ive_iters / wpe_iters` passes,
//! starting with pass 0), then runs one separation pass and recomputes the
//! outputs. Every coordinate step is logged with the objective it
//! maximizes, evaluated before and after the step.
//!
//! The noise outputs enter the objective through their maximum-likelihood
//! covariance `Omega_f = (1/T) sum_t y_N y_N^H`, i.e. the term
//! `-T (M - J) - T log det Omega_f`. It equals the unit-variance noise term
//! whenever `Omega_f = I`, and unlike that term it is invariant to the
//! basis chosen for the noise subspace, which the noise-block update leaves
//! arbitrary.

use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{init_state, variance_floor, CbfState, Mode, OpCounter, OpCounts, PipelineConfig, PriorSpectra, SeparationMatrix, VarianceField};
use crate::postproc::{permutation_realign, projection_back, projection_back_scales};
use crate::stft::MultichannelSpectrogram;
use crate::{ive, variance, wpe, C64};

/// Beamformer outputs `y_j = q_j^H z_slot(j)`, `[F x T x M]`.
pub fn compute_outputs(z: &[Array3<C64>], sep: &[SeparationMatrix], num_sources: usize) -> Array3<C64> {
    let dim = z[0].dim();
    let (bins, frames, mics) = dim;
    let per_bin: Vec<Array2<C64>> = (0..bins)
        .into_par_iter()
        .map(|f| {
            let q = sep[f].matrix();
            let mut out = Array2::zeros((frames, mics));
            for j in 0..mics {
                let slot = j.min(num_sources);
                let qc = q.column(j).mapv(|v| v.conj());
                out.column_mut(j).assign(&z[slot].slice(s![f, .., ..]).dot(&qc));
            }
            out
        })
        .collect();
    let mut y = Array3::zeros(dim);
    for (f, out) in per_bin.into_iter().enumerate() {
        y.slice_mut(s![f, .., ..]).assign(&out);
    }
    y
}

/// Recomputes `z` from the stored prediction filters and returns fresh outputs.
pub fn apply_cbf(state: &CbfState, spec: &MultichannelSpectrogram, cfg: &PipelineConfig) -> Result<Array3<C64>> {
    let slots = state.wpe.slots();
    let mut z = vec![Array3::zeros(spec.data().dim()); slots];
    for (f, frames) in spec.data().outer_iter().enumerate() {
        let xbar = wpe::stack_bin(frames, cfg.delay, state.wpe.taps(f))?;
        for (slot, zs) in z.iter_mut().enumerate() {
            let zf = wpe::dereverberate_bin(frames, xbar.view(), state.wpe.slot(f, slot).view());
            zs.slice_mut(s![f, .., ..]).assign(&zf);
        }
    }
    Ok(compute_outputs(&z, &state.sep, state.num_sources))
}

/// Log-likelihood of outputs `y` under separation matrices `sep` and
/// speech variances `var` (coarse fields are broadcast over frequency).
pub fn objective(y: &Array3<C64>, sep: &[SeparationMatrix], var: &VarianceField, num_sources: usize, floor: f64) -> f64 {
    let (bins, frames, mics) = y.dim();
    let noise_dim = mics - num_sources;
    let per_bin: Vec<f64> = (0..bins)
        .into_par_iter()
        .map(|f| {
            let mut speech = 0.0;
            for t in 0..frames {
                for j in 0..num_sources {
                    let lambda = var.get(f, t, j).max(floor);
                    speech += lambda.ln() + y[[f, t, j]].norm_sqr() / lambda;
                }
            }
            let yn = y.slice(s![f, .., num_sources..]);
            let mut omega = linalg::adjoint(yn).dot(&yn) / C64::new(frames as f64, 0.0);
            linalg::load_diagonal(&mut omega, floor);
            let noise = frames as f64 * (noise_dim as f64 + linalg::log_abs_det(omega.view()));
            let logdet = 2.0 * frames as f64 * linalg::log_abs_det(sep[f].matrix().view());
            -speech - noise + logdet
        })
        .collect();
    per_bin.iter().sum()
}

/// Log-likelihood of the current state with its separation variances.
pub fn log_likelihood(state: &CbfState) -> f64 {
    objective(&state.y, &state.sep, &state.var_sep, state.num_sources, state.var_floor)
}

/// Which coordinate a logged step updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    CoarseVariance,
    FineVariance,
    /// Prior-guided variances; maximizes the posterior, not the likelihood.
    MapVariance,
    Prediction,
    Separation,
}

impl StepKind {
    /// Whether the step is guaranteed not to decrease its logged objective.
    pub fn is_ascent(self) -> bool {
        !matches!(self, StepKind::MapVariance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pass: usize,
    pub kind: StepKind,
    pub before: f64,
    pub after: f64,
}

impl StepRecord {
    /// `(after - before) / |before|`.
    pub fn relative_change(&self) -> f64 {
        (self.after - self.before) / self.before.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Log-likelihood after each pass (separation variances).
    pub likelihood: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub counts: OpCounts,
    pub wpe_passes: usize,
    pub ive_passes: usize,
}

impl Diagnostics {
    /// Most negative relative change over all ascent steps (0 if none decreased).
    pub fn worst_ascent_step(&self) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.kind.is_ascent())
            .map(StepRecord::relative_change)
            .fold(0.0, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Separated speech at the reference microphone, one channel per source.
    pub sources: MultichannelSpectrogram,
    pub state: CbfState,
    pub diagnostics: Diagnostics,
    pub wall_ms: u128,
}

struct Driver<'a> {
    spec: &'a MultichannelSpectrogram,
    cfg: &'a PipelineConfig,
    prior: Option<&'a PriorSpectra>,
    state: CbfState,
    counter: OpCounter,
    diag: Diagnostics,
}

impl Driver<'_> {
    fn eval(&self, var: &VarianceField) -> f64 {
        objective(&self.state.y, &self.state.sep, var, self.state.num_sources, self.state.var_floor)
    }

    fn log(&mut self, pass: usize, kind: StepKind, before: f64, after: f64) {
        self.diag.steps.push(StepRecord { pass, kind, before, after });
    }

    fn refresh_outputs(&mut self) {
        self.state.y = compute_outputs(&self.state.z, &self.state.sep, self.state.num_sources);
    }

    fn update_variances(&mut self, pass: usize) -> Result<()> {
        let j_count = self.state.num_sources;
        let floor = self.state.var_floor;
        match self.cfg.mode {
            Mode::BlindIve => {
                let before = self.eval(&self.state.var_sep);
                let v = variance::update_coarse(self.state.y.view(), j_count, floor);
                self.state.var_sep = v.clone();
                self.state.var_dr = v;
                let after = self.eval(&self.state.var_sep);
                self.log(pass, StepKind::CoarseVariance, before, after);
            }
            Mode::BlindCoarseFine => {
                let before = self.eval(&self.state.var_sep);
                self.state.var_sep = variance::update_coarse(self.state.y.view(), j_count, floor);
                let after = self.eval(&self.state.var_sep);
                self.log(pass, StepKind::CoarseVariance, before, after);

                let before = self.eval(&self.state.var_dr);
                self.state.var_dr = variance::update_fine(self.state.y.view(), j_count, floor);
                let after = self.eval(&self.state.var_dr);
                self.log(pass, StepKind::FineVariance, before, after);
            }
            Mode::NnGuided => {
                let prior = self.prior.ok_or(Error::MissingPrior)?;
                let before = self.eval(&self.state.var_sep);
                let scales = projection_back_scales(&self.state.sep, self.cfg.reference_mic)?;
                let y = &self.state.y;
                let (bins, frames, _) = y.dim();
                let projected = Array3::from_shape_fn((bins, frames, j_count), |(f, t, j)| scales[[f, j]] * y[[f, t, j]]);
                let v = variance::update_map(projected.view(), prior, self.cfg.alpha, floor)?;
                self.state.var_sep = v.clone();
                self.state.var_dr = v;
                let after = self.eval(&self.state.var_sep);
                self.log(pass, StepKind::MapVariance, before, after);
            }
        }
        Ok(())
    }

    fn prediction_step(&mut self, pass: usize) -> Result<()> {
        let before = self.eval(&self.state.var_dr);
        wpe::update_wpe_filters(&mut self.state, self.spec, self.cfg, &self.counter)?;
        self.refresh_outputs();
        let after = self.eval(&self.state.var_dr);
        self.log(pass, StepKind::Prediction, before, after);
        self.diag.wpe_passes += 1;
        Ok(())
    }

    fn separation_step(&mut self, pass: usize) -> Result<()> {
        let before = self.eval(&self.state.var_sep);
        ive::update_separation(&mut self.state, self.cfg, &self.counter)?;
        self.refresh_outputs();
        let after = self.eval(&self.state.var_sep);
        self.log(pass, StepKind::Separation, before, after);
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        let interval = self.cfg.wpe_interval();
        for pass in 0..self.cfg.ive_iters {
            self.update_variances(pass)?;
            if self.diag.wpe_passes < self.cfg.wpe_iters && pass % interval == 0 {
                self.prediction_step(pass)?;
            }
            if self.cfg.update_separation {
                self.separation_step(pass)?;
            }
            self.diag.ive_passes += 1;
            let l = self.eval(&self.state.var_sep);
            self.diag.likelihood.push(l);
        }
        self.diag.counts = self.counter.snapshot();
        Ok(())
    }
}

fn check_prior(spec: &MultichannelSpectrogram, cfg: &PipelineConfig, prior: Option<&PriorSpectra>) -> Result<()> {
    match (cfg.mode, prior) {
        (Mode::NnGuided, None) => Err(Error::MissingPrior),
        (Mode::NnGuided, Some(p)) => {
            let expected = (spec.num_bins(), spec.num_frames(), cfg.num_sources);
            if p.dim() != expected {
                return Err(Error::Shape(format!("prior {:?}, expected {expected:?}", p.dim())));
            }
            Ok(())
        }
        (_, Some(_)) => Err(Error::InvalidParameter("prior spectra are only used in nn-guided mode".into())),
        (_, None) => Ok(()),
    }
}

/// Runs the full schedule and post-processing (projection back, then
/// permutation re-alignment) on the observation `spec`.
pub fn run(spec: &MultichannelSpectrogram, cfg: &PipelineConfig, prior: Option<&PriorSpectra>) -> Result<RunOutput> {
    let start = Instant::now();
    check_prior(spec, cfg, prior)?;
    let state = init_state(spec, cfg)?;
    let mut driver = Driver { spec, cfg, prior, state, counter: OpCounter::default(), diag: Diagnostics::default() };
    driver.run()?;
    let Driver { state, diag, .. } = driver;

    let (scaled, _) = projection_back(state.y.view(), &state.sep, cfg.reference_mic)?;
    let (aligned, _) = permutation_realign(scaled.view());
    let sources = spec.with_data(aligned)?;
    Ok(RunOutput { sources, state, diagnostics: diag, wall_ms: start.elapsed().as_millis() })
}

/// Conventional multichannel WPE: one prediction matrix per bin shared by
/// all channels, weighted by the channel-averaged power of the current
/// estimate. Runs `cfg.wpe_iters` iterations from `z = x`.
pub fn conventional_wpe(spec: &MultichannelSpectrogram, cfg: &PipelineConfig) -> Result<MultichannelSpectrogram> {
    cfg.validate()?;
    let taps = cfg.taps_per_bin(spec)?;
    let floor = variance_floor(spec, cfg.epsilon_var);
    let bins: Vec<Result<Array2<C64>>> = spec
        .data()
        .outer_iter()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(f, frames)| {
            let xbar = wpe::stack_bin(frames, cfg.delay, taps[f])?;
            let mut z = frames.to_owned();
            for _ in 0..cfg.wpe_iters {
                let lambda: Array1<f64> = z.rows().into_iter().map(|r| (r.iter().map(|v| v.norm_sqr()).sum::<f64>() / r.len() as f64).max(floor)).collect();
                let stats = wpe::accumulate_stats(xbar.view(), frames, lambda.view());
                let g = stats.solve(cfg.epsilon_reg).ok_or(Error::Singular { stage: "wpe", freq: f, slot: None })?;
                z = wpe::dereverberate_bin(frames, xbar.view(), g.view());
            }
            Ok(z)
        })
        .collect();
    let mut out = Array3::zeros(spec.data().dim());
    for (f, z) in bins.into_iter().enumerate() {
        out.slice_mut(s![f, .., ..]).assign(&z?);
    }
    spec.with_data(out)
}

/// Cascade baseline: conventional WPE followed by separation with the
/// prediction filters frozen at zero.
pub fn run_cascade(spec: &MultichannelSpectrogram, cfg: &PipelineConfig) -> Result<RunOutput> {
    let dereverberated = conventional_wpe(spec, cfg)?;
    let separation_only = PipelineConfig { wpe_iters: 0, ..cfg.clone() };
    run(&dereverberated, &separation_only, None)
}
