//! Configuration and the estimated parameter set: prediction filters,
//! separation matrices and source variances.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::MultichannelSpectrogram;
use crate::C64;

/// Which source model drives the variance updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Frequency-independent variances for both filter updates.
    BlindIve,
    /// Frequency-pooled variances for separation, per-bin variances for dereverberation.
    BlindCoarseFine,
    /// Per-bin MAP variances under an inverse-Gamma prior built from external spectra.
    NnGuided,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blind-ive" => Ok(Mode::BlindIve),
            "blind-coarse-fine" => Ok(Mode::BlindCoarseFine),
            "nn-guided" => Ok(Mode::NnGuided),
            other => Err(Error::InvalidParameter(format!("unknown mode `{other}`"))),
        }
    }
}

/// Prediction filter length used up to (and including) `upper_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterBand {
    pub upper_hz: f64,
    pub taps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub num_mics: usize,
    pub num_sources: usize,
    /// Prediction delay in frames.
    pub delay: usize,
    /// Ascending bands; the last upper bound must reach Nyquist.
    pub filter_schedule: Vec<FilterBand>,
    pub wpe_iters: usize,
    pub ive_iters: usize,
    pub mode: Mode,
    /// Inverse-Gamma shape.
    pub alpha: f64,
    pub reference_mic: usize,
    /// Variance floor, relative to the mean observed power.
    pub epsilon_var: f64,
    /// Diagonal loading, relative to `trace / dim`.
    pub epsilon_reg: f64,
    /// When false the separation matrices stay at identity (dereverberation only).
    pub update_separation: bool,
}

impl PipelineConfig {
    /// Defaults: D = 2, L = 20 / 16 / 8 taps up to 0.8 / 1.5 / 8 kHz,
    /// 10 WPE and 100 IVE passes, coarse-fine model, alpha = 1.
    pub fn new(num_mics: usize, num_sources: usize) -> Self {
        Self {
            num_mics,
            num_sources,
            delay: 2,
            filter_schedule: vec![
                FilterBand { upper_hz: 800.0, taps: 20 },
                FilterBand { upper_hz: 1500.0, taps: 16 },
                FilterBand { upper_hz: 8000.0, taps: 8 },
            ],
            wpe_iters: 10,
            ive_iters: 100,
            mode: Mode::BlindCoarseFine,
            alpha: 1.0,
            reference_mic: 0,
            epsilon_var: 1e-8,
            epsilon_reg: 1e-10,
            update_separation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.num_sources < 1 || self.num_sources >= self.num_mics {
            return bad(format!(
                "need 1 <= sources < mics, got {} sources for {} mics",
                self.num_sources, self.num_mics
            ));
        }
        if self.delay < 1 {
            return bad("prediction delay must be at least one frame".into());
        }
        if self.filter_schedule.is_empty() {
            return bad("filter schedule is empty".into());
        }
        for pair in self.filter_schedule.windows(2) {
            if pair[1].upper_hz <= pair[0].upper_hz {
                return bad("filter schedule bands must be strictly ascending".into());
            }
        }
        if let Some(b) = self.filter_schedule.iter().find(|b| b.taps <= self.delay) {
            return bad(format!("filter length {} must exceed the delay {}", b.taps, self.delay));
        }
        if self.wpe_iters > self.ive_iters {
            return bad(format!(
                "{} WPE passes cannot be scheduled within {} IVE passes",
                self.wpe_iters, self.ive_iters
            ));
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive".into());
        }
        if self.reference_mic >= self.num_mics {
            return bad(format!("reference mic {} out of range", self.reference_mic));
        }
        if !(self.epsilon_var > 0.0) || !(self.epsilon_reg > 0.0) {
            return bad("epsilon_var and epsilon_reg must be positive".into());
        }
        Ok(())
    }

    /// Prediction filter length at `f_hz`: the first band whose upper bound
    /// reaches `f_hz`.
    pub fn filter_len_at(&self, f_hz: f64, sample_rate: u32) -> Result<usize> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0..=nyquist).contains(&f_hz) {
            return Err(Error::FrequencyOutOfRange { hz: f_hz, nyquist });
        }
        self.filter_schedule
            .iter()
            .find(|b| b.upper_hz >= f_hz)
            .map(|b| b.taps)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("filter schedule does not cover {f_hz} Hz (Nyquist {nyquist})"))
            })
    }

    /// Filter length for every STFT bin of `spec`.
    pub fn taps_per_bin(&self, spec: &MultichannelSpectrogram) -> Result<Vec<usize>> {
        (0..spec.num_bins())
            .map(|f| self.filter_len_at(spec.bin_hz(f), spec.sample_rate()))
            .collect()
    }

    /// IVE passes between consecutive WPE passes.
    pub fn wpe_interval(&self) -> usize {
        if self.wpe_iters == 0 {
            usize::MAX
        } else {
            (self.ive_iters / self.wpe_iters).max(1)
        }
    }
}

/// Prediction matrices `G_f^(j)`, `[M(L_f - D) x M]`.
///
/// Only `J + 1` matrices are stored per bin: noise outputs `j > J` share
/// the filter of slot `J` (zero-based), since they share unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct WpeFilterSet {
    filters: Vec<Vec<Array2<C64>>>,
    taps: Vec<usize>,
    delay: usize,
}

impl WpeFilterSet {
    pub fn zeros(num_mics: usize, num_sources: usize, taps: &[usize], delay: usize) -> Self {
        let filters = taps
            .iter()
            .map(|&l| vec![Array2::zeros((num_mics * (l - delay), num_mics)); num_sources + 1])
            .collect();
        Self { filters, taps: taps.to_vec(), delay }
    }

    pub fn num_bins(&self) -> usize {
        self.filters.len()
    }

    /// Stored matrices per bin (`J + 1`).
    pub fn slots(&self) -> usize {
        self.filters.first().map_or(0, Vec::len)
    }

    pub fn taps(&self, f: usize) -> usize {
        self.taps[f]
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Filter for zero-based output `j`; noise outputs alias the last slot.
    pub fn for_output(&self, f: usize, j: usize) -> &Array2<C64> {
        let slot = j.min(self.slots() - 1);
        &self.filters[f][slot]
    }

    pub fn slot(&self, f: usize, slot: usize) -> &Array2<C64> {
        &self.filters[f][slot]
    }

    pub fn set_slot(&mut self, f: usize, slot: usize, g: Array2<C64>) {
        assert_eq!(g.dim(), self.filters[f][slot].dim(), "prediction matrix shape");
        self.filters[f][slot] = g;
    }

    pub fn bin_mut(&mut self, f: usize) -> &mut Vec<Array2<C64>> {
        &mut self.filters[f]
    }
}

/// Per-bin separation matrix `Q_f = [Q_S, Q_N]`; output `j` is `q_j^H z_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationMatrix {
    q: Array2<C64>,
    num_sources: usize,
}

impl SeparationMatrix {
    pub fn identity(num_mics: usize, num_sources: usize) -> Self {
        Self { q: Array2::eye(num_mics), num_sources }
    }

    pub fn from_matrix(q: Array2<C64>, num_sources: usize) -> Result<Self> {
        if q.nrows() != q.ncols() || num_sources == 0 || num_sources >= q.nrows() {
            return Err(Error::Shape(format!(
                "separation matrix {:?} with {num_sources} sources",
                q.dim()
            )));
        }
        Ok(Self { q, num_sources })
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.q
    }

    pub fn num_mics(&self) -> usize {
        self.q.nrows()
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    /// First `J` columns.
    pub fn speech_block(&self) -> ArrayView2<'_, C64> {
        self.q.slice(s![.., ..self.num_sources])
    }

    /// Last `M - J` columns.
    pub fn noise_block(&self) -> ArrayView2<'_, C64> {
        self.q.slice(s![.., self.num_sources..])
    }

    pub fn set_column(&mut self, j: usize, col: &Array1<C64>) {
        self.q.column_mut(j).assign(col);
    }

    pub fn set_noise_block(&mut self, block: &Array2<C64>) {
        let j = self.num_sources;
        self.q.slice_mut(s![.., j..]).assign(block);
    }

    pub fn det(&self) -> C64 {
        crate::linalg::det(self.q.view())
    }
}

/// Source variances; never below the floor they were produced with.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceField {
    /// `[T x J]`, shared by all frequencies.
    Coarse(Array2<f64>),
    /// `[F x T x J]`.
    Fine(Array3<f64>),
}

impl VarianceField {
    #[inline]
    pub fn get(&self, f: usize, t: usize, j: usize) -> f64 {
        match self {
            VarianceField::Coarse(v) => v[[t, j]],
            VarianceField::Fine(v) => v[[f, t, j]],
        }
    }

    /// Variances of source `j` over time at bin `f`.
    pub fn weights(&self, f: usize, j: usize) -> Array1<f64> {
        match self {
            VarianceField::Coarse(v) => v.column(j).to_owned(),
            VarianceField::Fine(v) => v.slice(s![f, .., j]).to_owned(),
        }
    }

    pub fn num_sources(&self) -> usize {
        match self {
            VarianceField::Coarse(v) => v.ncols(),
            VarianceField::Fine(v) => v.dim().2,
        }
    }

    pub fn min_value(&self) -> f64 {
        let it: Box<dyn Iterator<Item = &f64>> = match self {
            VarianceField::Coarse(v) => Box::new(v.iter()),
            VarianceField::Fine(v) => Box::new(v.iter()),
        };
        it.cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn is_coarse(&self) -> bool {
        matches!(self, VarianceField::Coarse(_))
    }
}

/// Externally estimated per-source power spectra `gamma`, `[F x T x J]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpectra {
    gamma: Array3<f64>,
}

impl PriorSpectra {
    pub fn new(gamma: Array3<f64>) -> Result<Self> {
        if let Some(i) = gamma.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativePrior(i));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> &Array3<f64> {
        &self.gamma
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.gamma.dim()
    }
}

/// The full estimated parameter set plus cached intermediate signals.
#[derive(Debug, Clone)]
pub struct CbfState {
    pub wpe: WpeFilterSet,
    pub sep: Vec<SeparationMatrix>,
    /// Variances weighting the separation (covariance) update.
    pub var_sep: VarianceField,
    /// Variances weighting the prediction-filter update.
    pub var_dr: VarianceField,
    /// Dereverberated observations per filter slot, each `[F x T x M]`.
    pub z: Vec<Array3<C64>>,
    /// Beamformer outputs `[F x T x M]`.
    pub y: Array3<C64>,
    /// Absolute variance floor.
    pub var_floor: f64,
    pub num_sources: usize,
}

impl CbfState {
    pub fn num_bins(&self) -> usize {
        self.y.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.y.dim().1
    }

    pub fn num_mics(&self) -> usize {
        self.y.dim().2
    }
}

/// Absolute floor: `epsilon_var` times the mean observed power (or
/// `epsilon_var` itself for an all-zero observation).
pub fn variance_floor(spec: &MultichannelSpectrogram, epsilon_var: f64) -> f64 {
    let data = spec.data();
    let mean = data.iter().map(|v| v.norm_sqr()).sum::<f64>() / data.len() as f64;
    if mean > 0.0 { epsilon_var * mean } else { epsilon_var }
}

/// Identity beamformer: `Q = I`, `G = 0`, variances from the reference
/// channel power.
pub fn init_state(spec: &MultichannelSpectrogram, cfg: &PipelineConfig) -> Result<CbfState> {
    cfg.validate()?;
    if spec.num_channels() != cfg.num_mics {
        return Err(Error::ChannelMismatch { expected: cfg.num_mics, found: spec.num_channels() });
    }
    let taps = cfg.taps_per_bin(spec)?;
    let (bins, frames, mics) = spec.data().dim();
    let j_count = cfg.num_sources;
    let floor = variance_floor(spec, cfg.epsilon_var);
    let r = cfg.reference_mic;

    let power = spec.data().slice(s![.., .., r]).mapv(|v| v.norm_sqr());
    let coarse = Array2::from_shape_fn((frames, j_count), |(t, _)| {
        (power.column(t).sum() / bins as f64).max(floor)
    });
    let fine = Array3::from_shape_fn((bins, frames, j_count), |(f, t, _)| power[[f, t]].max(floor));
    let (var_sep, var_dr) = match cfg.mode {
        Mode::BlindIve => (VarianceField::Coarse(coarse.clone()), VarianceField::Coarse(coarse)),
        Mode::BlindCoarseFine => (VarianceField::Coarse(coarse), VarianceField::Fine(fine)),
        Mode::NnGuided => (VarianceField::Fine(fine.clone()), VarianceField::Fine(fine)),
    };

    Ok(CbfState {
        wpe: WpeFilterSet::zeros(mics, j_count, &taps, cfg.delay),
        sep: vec![SeparationMatrix::identity(mics, j_count); bins],
        var_sep,
        var_dr,
        z: vec![spec.data().clone(); j_count + 1],
        y: spec.data().clone(),
        var_floor: floor,
        num_sources: j_count,
    })
}

/// Counts of the linear solves performed, for verifying the per-pass cost
/// structure.
#[derive(Debug, Default)]
pub struct OpCounter {
    wpe_solves: AtomicU64,
    wpe_solve_dim: AtomicU64,
    ip_updates: AtomicU64,
    noise_block_solves: AtomicU64,
    noise_block_pivot_dim: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub wpe_solves: u64,
    /// Sum of the system sizes `M(L_f - D)` over all WPE solves.
    pub wpe_solve_dim: u64,
    pub ip_updates: u64,
    pub noise_block_solves: u64,
    /// Sum of the pivot sizes over all noise-block solves.
    pub noise_block_pivot_dim: u64,
}

impl OpCounter {
    pub fn record_wpe_solve(&self, dim: usize) {
        self.wpe_solves.fetch_add(1, Ordering::Relaxed);
        self.wpe_solve_dim.fetch_add(dim as u64, Ordering::Relaxed);
    }

    pub fn record_ip_update(&self) {
        self.ip_updates.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_noise_block_solve(&self, pivot_dim: usize) {
        self.noise_block_solves.fetch_add(1, Ordering::Relaxed);
        self.noise_block_pivot_dim.fetch_add(pivot_dim as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            wpe_solves: self.wpe_solves.load(Ordering::Relaxed),
            wpe_solve_dim: self.wpe_solve_dim.load(Ordering::Relaxed),
            ip_updates: self.ip_updates.load(Ordering::Relaxed),
            noise_block_solves: self.noise_block_solves.load(Ordering::Relaxed),
            noise_block_pivot_dim: self.noise_block_pivot_dim.load(Ordering::Relaxed),
        }
    }
}
