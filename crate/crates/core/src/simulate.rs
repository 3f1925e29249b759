//! Synthetic convolutive mixtures: speech-like and stationary-noise
//! sources, random exponentially decaying FIR mixing, and source images
//! for reference signals.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::stft::TimeSignal;

/// Largest admissible condition number of the direct-path matrix.
pub const MAX_DIRECT_CONDITION: f64 = 100.0;
/// Standard deviation of the reverberant taps relative to the direct path.
pub const TAIL_GAIN: f64 = 0.05;

const DIRECT_CONV_MAX_TAPS: usize = 64;

/// Time-domain FIR mixing system: `x_m[n] = sum_tau sum_j A_tau[m, j] s_j[n - tau]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingSystem {
    /// Taps `[L_A x M x M]` indexed `[tau, mic, source]`.
    taps: Array3<f64>,
}

impl MixingSystem {
    pub fn new(taps: Array3<f64>) -> Result<Self> {
        let (len, mics, sources) = taps.dim();
        if len == 0 || mics == 0 || sources == 0 {
            return Err(Error::Shape(format!("mixing taps {:?}", taps.dim())));
        }
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("mixing taps must be finite".into()));
        }
        Ok(Self { taps })
    }

    /// Single-tap system `x = A_0 s`.
    pub fn instantaneous(a0: Array2<f64>) -> Result<Self> {
        Self::new(a0.insert_axis(ndarray::Axis(0)))
    }

    pub fn taps(&self) -> &Array3<f64> {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_mics(&self) -> usize {
        self.taps.dim().1
    }

    pub fn num_sources(&self) -> usize {
        self.taps.dim().2
    }

    pub fn direct(&self) -> Array2<f64> {
        self.taps.slice(s![0, .., ..]).to_owned()
    }

    /// Filter from source `j` to microphone `m`.
    pub fn response(&self, m: usize, j: usize) -> ArrayView1<'_, f64> {
        self.taps.slice(s![.., m, j])
    }

    /// The first `taps` taps (all of them if fewer exist).
    pub fn truncated(&self, taps: usize) -> Self {
        let n = taps.clamp(1, self.len());
        Self { taps: self.taps.slice(s![..n, .., ..]).to_owned() }
    }
}

/// Condition number from the singular values.
pub fn condition_number(a: &Array2<f64>) -> f64 {
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 { max / min } else { f64::INFINITY }
}

/// Amplitude envelope of reverberant tap `tau`: 60 dB down after `decay_ms`.
pub fn tail_envelope(tau: usize, decay_ms: f64, sample_rate: u32) -> f64 {
    if tau == 0 {
        return 1.0;
    }
    let decay_samples = decay_ms * 1e-3 * sample_rate as f64;
    if decay_samples <= 0.0 {
        return 0.0;
    }
    TAIL_GAIN * 10f64.powf(-3.0 * tau as f64 / decay_samples)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random reverberant `M x M` system with `taps` taps. `A_0` is Gaussian,
/// redrawn until its condition number is at most [`MAX_DIRECT_CONDITION`];
/// later taps are Gaussian under [`tail_envelope`].
pub fn gen_reverberant_system(
    num_mics: usize,
    taps: usize,
    decay_ms: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<MixingSystem> {
    if taps == 0 || num_mics == 0 {
        return Err(Error::InvalidParameter("need at least one tap and one microphone".into()));
    }
    if !(decay_ms >= 0.0 && decay_ms.is_finite()) {
        return Err(Error::InvalidParameter(format!("decay {decay_ms} ms")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a0 = loop {
        let a = Array2::from_shape_fn((num_mics, num_mics), |_| gaussian(&mut rng));
        if condition_number(&a) <= MAX_DIRECT_CONDITION {
            break a;
        }
    };
    let mut all = Array3::zeros((taps, num_mics, num_mics));
    all.slice_mut(s![0, .., ..]).assign(&a0);
    for tau in 1..taps {
        let env = tail_envelope(tau, decay_ms, sample_rate);
        for v in all.slice_mut(s![tau, .., ..]).iter_mut() {
            *v = env * gaussian(&mut rng);
        }
    }
    MixingSystem::new(all)
}

/// Syllable-like segments of 80-400 ms covering `len` samples, as
/// `(start, end, level, resonance_hz)`. A quarter of them are silent.
fn syllables(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64, f64)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let seg = ((rng.random_range(0.08..0.4) * rate) as usize).max(1);
        let level = if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.2..1.0) };
        let hz = rng.random_range(250.0..3500.0);
        out.push((start, (start + seg).min(len), level, hz));
        start += seg;
    }
    out
}

/// Piecewise-constant levels joined by 20 ms raised-cosine ramps.
fn speech_envelope(len: usize, rate: f64, syl: &[(usize, usize, f64, f64)]) -> Vec<f64> {
    let ramp = ((0.02 * rate) as usize).max(1);
    let mut env = vec![0.0; len];
    for (k, &(start, end, level, _)) in syl.iter().enumerate() {
        let prev = if k == 0 { level } else { syl[k - 1].2 };
        for (d, v) in env[start..end].iter_mut().enumerate() {
            *v = if d < ramp {
                let w = 0.5 - 0.5 * (PI * d as f64 / ramp as f64).cos();
                prev + (level - prev) * w
            } else {
                level
            };
        }
    }
    env
}

/// Gaussian excitation through a resonator whose centre frequency glides
/// to a new value at every syllable, giving a time-varying spectral envelope.
fn colored_excitation(len: usize, rate: f64, syl: &[(usize, usize, f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    const BLOCK: usize = 32;
    let mut out = vec![0.0; len];
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut hz = syl[0].3;
    let radius = rng.random_range(0.8..0.92);
    for &(start, end, _, target) in syl {
        for chunk in out[start..end].chunks_mut(BLOCK) {
            hz += 0.3 * (target - hz);
            let theta = 2.0 * PI * hz / rate;
            let (a1, a2) = (2.0 * radius * theta.cos(), -radius * radius);
            for v in chunk.iter_mut() {
                let e = gaussian(rng);
                let y = e + a1 * y1 + a2 * y2;
                *v = 0.5 * e + y;
                y2 = y1;
                y1 = y;
            }
        }
    }
    out
}

fn normalize_power(x: &mut [f64]) {
    let p = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if p > 0.0 {
        let g = p.sqrt().recip();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// `M` source signals: the first `J` speech-like (amplitude-modulated,
/// spectrally colored Gaussian noise with silences), the rest stationary
/// white Gaussian. All have unit average power.
pub fn gen_sources(
    num_samples: usize,
    num_speech: usize,
    num_total: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<TimeSignal> {
    if num_speech >= num_total {
        return Err(Error::InvalidParameter(format!(
            "{num_speech} speech sources need more than {num_total} sources in total"
        )));
    }
    if num_samples == 0 {
        return Err(Error::InvalidParameter("zero-length sources".into()));
    }
    let rate = sample_rate as f64;
    let mut out = Array2::zeros((num_total, num_samples));
    for k in 0..num_total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let mut x: Vec<f64> = if k < num_speech {
            let syl = syllables(num_samples, rate, &mut rng);
            let env = speech_envelope(num_samples, rate, &syl);
            let mut exc = colored_excitation(num_samples, rate, &syl, &mut rng);
            normalize_power(&mut exc);
            exc.iter().zip(&env).map(|(e, a)| e * a).collect()
        } else {
            (0..num_samples).map(|_| gaussian(&mut rng)).collect()
        };
        if k < num_speech {
            normalize_power(&mut x);
        }
        out.row_mut(k).assign(&Array1::from(x));
    }
    TimeSignal::new(out, sample_rate)
}

fn convolve_direct(x: ArrayView1<'_, f64>, h: ArrayView1<'_, f64>, out: &mut [f64]) {
    for (tau, &a) in h.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for n in tau..out.len() {
            out[n] += a * x[n - tau];
        }
    }
}

/// Mixes `sources` through `system`; output has the input length.
pub fn mix(sources: &TimeSignal, system: &MixingSystem) -> Result<TimeSignal> {
    if sources.channels() != system.num_sources() {
        return Err(Error::ChannelMismatch { expected: system.num_sources(), found: sources.channels() });
    }
    let n = sources.len();
    let mics = system.num_mics();
    let mut out = Array2::zeros((mics, n));
    if system.len() <= DIRECT_CONV_MAX_TAPS {
        for m in 0..mics {
            let mut acc = vec![0.0; n];
            for j in 0..system.num_sources() {
                convolve_direct(sources.channel(j), system.response(m, j), &mut acc);
            }
            out.row_mut(m).assign(&Array1::from(acc));
        }
    } else {
        let size = (n + system.len() - 1).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let spectrum = |v: ArrayView1<'_, f64>| {
            let mut buf = vec![Complex::new(0.0, 0.0); size];
            for (b, x) in buf.iter_mut().zip(v.iter()) {
                b.re = *x;
            }
            fwd.process(&mut buf);
            buf
        };
        let source_spectra: Vec<_> = (0..system.num_sources()).map(|j| spectrum(sources.channel(j))).collect();
        for m in 0..mics {
            let mut acc = vec![Complex::new(0.0, 0.0); size];
            for (j, sj) in source_spectra.iter().enumerate() {
                let hj = spectrum(system.response(m, j));
                for ((a, s), h) in acc.iter_mut().zip(sj).zip(&hj) {
                    *a += s * h;
                }
            }
            inv.process(&mut acc);
            for (o, a) in out.row_mut(m).iter_mut().zip(&acc) {
                *o = a.re / size as f64;
            }
        }
    }
    TimeSignal::new(out, sources.sample_rate())
}

/// Multichannel image of source `j` alone through the first `max_taps`
/// taps of `system` (all taps if `None`).
pub fn source_image(sources: &TimeSignal, system: &MixingSystem, j: usize, max_taps: Option<usize>) -> Result<TimeSignal> {
    if j >= sources.channels() {
        return Err(Error::InvalidParameter(format!("source {j} of {}", sources.channels())));
    }
    let mut only = Array2::zeros(sources.samples().dim());
    only.row_mut(j).assign(&sources.channel(j));
    let sys = match max_taps {
        Some(t) => system.truncated(t),
        None => system.clone(),
    };
    mix(&TimeSignal::new(only, sources.sample_rate())?, &sys)
}
