//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Signals are zero-padded by `frame_len - shift` samples at both ends, so
//! every original sample is covered by the same number of frames and
//! [`synthesize`] inverts [`analyze`] exactly on the original support.
//! Synthesis uses the analysis window again and divides by the per-sample
//! sum of squared windows.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView1};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::C64;

/// Multichannel time-domain signal, `[channels x samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::InvalidParameter("a signal needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("signal contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Single-channel signal from a slice.
    pub fn mono(samples: &[f64], sample_rate: u32) -> Result<Self> {
        let data = Array2::from_shape_vec((1, samples.len()), samples.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, sample_rate)
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.samples.row(c)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Analysis window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann window.
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftParams {
    frame_len: usize,
    shift: usize,
    window: Window,
}

impl Default for StftParams {
    /// 32 ms frames with an 8 ms shift at 16 kHz.
    fn default() -> Self {
        Self { frame_len: 512, shift: 128, window: Window::Hann }
    }
}

impl StftParams {
    pub fn new(frame_len: usize, shift: usize, window: Window) -> Result<Self> {
        if frame_len < 2 || frame_len % 2 != 0 {
            return Err(Error::InvalidParameter(format!("frame length {frame_len} must be even and >= 2")));
        }
        if shift == 0 || shift > frame_len || frame_len % shift != 0 {
            return Err(Error::InvalidParameter(format!(
                "shift {shift} must divide the frame length {frame_len}"
            )));
        }
        // Constant overlap-add of the window itself.
        let w = window.coefficients(frame_len);
        let sums: Vec<f64> = (0..shift)
            .map(|n| (n..frame_len).step_by(shift).map(|i| w[i]).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / shift as f64;
        if mean <= 0.0 || sums.iter().any(|s| (s - mean).abs() > 1e-9 * mean) {
            return Err(Error::InvalidParameter(format!(
                "{window:?} window with frame {frame_len} is not overlap-add constant at shift {shift}"
            )));
        }
        Ok(Self { frame_len, shift, window })
    }

    /// 32 ms / 8 ms Hann analysis at the given rate, rounded to even frame lengths.
    pub fn for_sample_rate(sample_rate: u32) -> Result<Self> {
        let shift = (sample_rate as usize * 8 / 1000).max(1);
        Self::new(4 * shift, shift, Window::Hann)
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Boundary padding applied at each end of the signal.
    pub fn padding(&self) -> usize {
        self.frame_len - self.shift
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.padding();
        (padded - self.frame_len).div_ceil(self.shift) + 1
    }
}

/// Complex STFT tensor `[F x T x M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram {
    data: Array3<C64>,
    params: StftParams,
    sample_rate: u32,
    signal_len: usize,
}

impl MultichannelSpectrogram {
    /// Wraps a tensor laid out `[F x T x M]`. `signal_len` is the length of the
    /// time-domain signal that [`synthesize`] reconstructs.
    pub fn new(data: Array3<C64>, params: StftParams, sample_rate: u32, signal_len: usize) -> Result<Self> {
        let (f, t, m) = data.dim();
        if f != params.num_bins() {
            return Err(Error::Shape(format!("{f} bins, expected {}", params.num_bins())));
        }
        if m == 0 {
            return Err(Error::Shape("spectrogram has no channels".into()));
        }
        if t != params.num_frames(signal_len) {
            return Err(Error::Shape(format!(
                "{t} frames do not match a {signal_len}-sample signal ({} frames)",
                params.num_frames(signal_len)
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("spectrogram contains non-finite values".into()));
        }
        Ok(Self { data, params, sample_rate, signal_len })
    }

    /// Same geometry as `self` with different content (e.g. separated outputs).
    pub fn with_data(&self, data: Array3<C64>) -> Result<Self> {
        Self::new(data, self.params, self.sample_rate, self.signal_len)
    }

    pub fn data(&self) -> &Array3<C64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<C64> {
        self.data
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn num_bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().2
    }

    /// Center frequency of bin `f` in Hz.
    pub fn bin_hz(&self, f: usize) -> f64 {
        f as f64 * self.sample_rate as f64 / self.params.frame_len as f64
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
}

/// Multichannel STFT.
pub fn analyze(signal: &TimeSignal, params: &StftParams) -> Result<MultichannelSpectrogram> {
    let n = params.frame_len;
    let len = signal.len();
    if len < n {
        return Err(Error::SignalTooShort { len, frame_len: n });
    }
    let pad = params.padding();
    let frames = params.num_frames(len);
    let bins = params.num_bins();
    let window = params.window.coefficients(n);
    let fft = plans(n).forward;

    let mut data = Array3::<C64>::zeros((bins, frames, signal.channels()));
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for (m, channel) in signal.samples.outer_iter().enumerate() {
        for t in 0..frames {
            let start = (t * params.shift) as isize - pad as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if idx >= 0 && (idx as usize) < len { channel[idx as usize] } else { 0.0 };
                *b = C64::new(v * window[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..bins {
                data[[f, t, m]] = buf[f];
            }
        }
    }
    MultichannelSpectrogram::new(data, *params, signal.sample_rate, len)
}

/// Weighted overlap-add inverse of [`analyze`].
pub fn synthesize(spec: &MultichannelSpectrogram) -> Result<TimeSignal> {
    let params = spec.params;
    let n = params.frame_len;
    let pad = params.padding();
    let (bins, frames, channels) = spec.data.dim();
    let window = params.window.coefficients(n);
    let fft = plans(n).inverse;

    let padded_len = (frames - 1) * params.shift + n;
    let mut norm = vec![0.0; padded_len];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * params.shift + i] += w * w;
        }
    }

    let mut out = Array2::<f64>::zeros((channels, spec.signal_len));
    let mut acc = vec![0.0; padded_len];
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for m in 0..channels {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = spec.data[[f, t, m]];
            }
            // Hermitian completion; DC and Nyquist bins must be real.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for f in 1..n / 2 {
                buf[n - f] = buf[f].conj();
            }
            fft.process(&mut buf);
            let offset = t * params.shift;
            for (i, w) in window.iter().enumerate() {
                acc[offset + i] += buf[i].re / n as f64 * w;
            }
        }
        for (k, v) in out.row_mut(m).iter_mut().enumerate() {
            let idx = k + pad;
            *v = if norm[idx] > 0.0 { acc[idx] / norm[idx] } else { 0.0 };
        }
    }
    TimeSignal::new(out, spec.sample_rate)
}
