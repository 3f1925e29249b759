//! Objective quality metrics on single-channel signals: SI-SDR,
//! frequency-weighted segmental SNR and cepstral distance.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::stft::{analyze, StftParams, TimeSignal};

/// Upper bound returned by [`si_sdr`].
pub const SI_SDR_CAP_DB: f64 = 60.0;

fn check_lengths(estimate: &[f64], reference: &[f64]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::Shape("empty signals".into()));
    }
    Ok(())
}

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / energy;
    let target = alpha * alpha * energy;
    let residual: f64 = estimate.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SDR_CAP_DB))
}

/// Magnitude spectra `[frames x bins]` of a mono signal.
fn magnitudes(x: &[f64], sample_rate: u32, params: &StftParams) -> Result<Array2<f64>> {
    let spec = analyze(&TimeSignal::mono(x, sample_rate)?, params)?;
    Ok(spec.data().index_axis(ndarray::Axis(2), 0).t().mapv(|v| v.norm()))
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[bands x bins]` spanning 0 Hz to Nyquist.
pub fn mel_filterbank(bands: usize, num_bins: usize, sample_rate: u32) -> Array2<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bands + 2).map(|k| mel_to_hz(top * k as f64 / (bands + 1) as f64)).collect();
    let bin_hz = nyquist / (num_bins - 1) as f64;
    Array2::from_shape_fn((bands, num_bins), |(b, k)| {
        let hz = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        if hz <= lo || hz >= hi {
            0.0
        } else if hz <= mid {
            (hz - lo) / (mid - lo)
        } else {
            (hi - hz) / (hi - mid)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwssnrParams {
    pub bands: usize,
    /// Exponent applied to the reference band magnitude to form weights.
    pub weight_exponent: f64,
    pub min_db: f64,
    pub max_db: f64,
    pub stft: StftParams,
    pub sample_rate: u32,
}

impl FwssnrParams {
    pub fn new(sample_rate: u32) -> Result<Self> {
        Ok(Self {
            bands: 23,
            weight_exponent: 0.2,
            min_db: -10.0,
            max_db: 35.0,
            stft: StftParams::for_sample_rate(sample_rate)?,
            sample_rate,
        })
    }
}

/// Frequency-weighted segmental SNR in dB. Per frame and mel band,
/// `SNR = 10 log10(X^2 / (X - X_hat)^2)` on band magnitudes, clipped to
/// `[min_db, max_db]` and averaged with weights `X^weight_exponent`; frames
/// with a silent reference are skipped.
pub fn fwssnr(estimate: &[f64], reference: &[f64], params: &FwssnrParams) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let est = magnitudes(estimate, params.sample_rate, &params.stft)?;
    let reff = magnitudes(reference, params.sample_rate, &params.stft)?;
    let bank = mel_filterbank(params.bands, reff.ncols(), params.sample_rate);
    let eb = est.dot(&bank.t());
    let rb = reff.dot(&bank.t());

    let mut total = 0.0;
    let mut counted = 0usize;
    for (r, e) in rb.rows().into_iter().zip(eb.rows()) {
        let (mut num, mut den) = (0.0, 0.0);
        for (&x, &xh) in r.iter().zip(e.iter()) {
            if x <= 0.0 {
                continue;
            }
            let err = (x - xh).powi(2);
            let snr = if err == 0.0 { params.max_db } else { 10.0 * (x * x / err).log10() };
            let w = x.powf(params.weight_exponent);
            num += w * snr.clamp(params.min_db, params.max_db);
            den += w;
        }
        if den > 0.0 {
            total += num / den;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::ZeroReference);
    }
    Ok(total / counted as f64)
}

/// Default cepstral order.
pub const CEPSTRAL_ORDER: usize = 16;
/// Per-frame clip range of the cepstral distance, in dB.
pub const CD_MAX_DB: f64 = 10.0;
/// Power floor relative to the signal's peak bin power.
const CD_POWER_FLOOR: f64 = 1e-6;

/// Real cepstrum `c_1 .. c_order` of one frame from its one-sided log
/// magnitude spectrum.
fn cepstrum(log_mag: ArrayView1<'_, f64>, order: usize) -> Vec<f64> {
    let bins = log_mag.len();
    let n = 2 * (bins - 1);
    (1..=order)
        .map(|q| {
            let mut acc = log_mag[0] + if q % 2 == 0 { log_mag[bins - 1] } else { -log_mag[bins - 1] };
            for k in 1..bins - 1 {
                acc += 2.0 * log_mag[k] * (2.0 * std::f64::consts::PI * (k * q) as f64 / n as f64).cos();
            }
            acc / n as f64
        })
        .collect()
}

fn log_magnitudes(x: &[f64], sample_rate: u32, params: &StftParams) -> Result<(Array2<f64>, Vec<bool>)> {
    let mag = magnitudes(x, sample_rate, params)?;
    let peak = mag.iter().fold(0.0f64, |a, &v| a.max(v * v));
    let floor = if peak > 0.0 { CD_POWER_FLOOR * peak } else { f64::MIN_POSITIVE };
    let silent = mag.rows().into_iter().map(|r| r.iter().all(|&v| v == 0.0)).collect();
    Ok((mag.mapv(|v| 0.5 * (v * v).max(floor).ln()), silent))
}

/// Frame-averaged cepstral distance in dB over `c_1 .. c_order`,
/// `(10 / ln 10) sqrt(2 sum (c - c_hat)^2)`, each frame clipped to `[0, 10]`.
/// Frames with a silent reference are skipped.
pub fn cepstral_distance(estimate: &[f64], reference: &[f64], order: usize, sample_rate: u32) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let params = StftParams::for_sample_rate(sample_rate)?;
    let (est, _) = log_magnitudes(estimate, sample_rate, &params)?;
    let (reff, silent) = log_magnitudes(reference, sample_rate, &params)?;
    if order == 0 || order >= reff.ncols() {
        return Err(Error::InvalidParameter(format!("cepstral order {order}")));
    }
    let scale = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (t, skip) in silent.iter().enumerate() {
        if *skip {
            continue;
        }
        let c = cepstrum(reff.row(t), order);
        let ch = cepstrum(est.row(t), order);
        let d2: f64 = c.iter().zip(&ch).map(|(a, b)| (a - b).powi(2)).sum();
        total += (scale * (2.0 * d2).sqrt()).clamp(0.0, CD_MAX_DB);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::ZeroReference);
    }
    Ok(total / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn lowpass(x: &[f64]) -> Vec<f64> {
        // Four cascaded one-pole smoothers.
        let mut y = x.to_vec();
        for _ in 0..4 {
            let mut prev = 0.0;
            for v in y.iter_mut() {
                prev = 0.95 * prev + 0.05 * *v;
                *v = prev;
            }
        }
        y
    }

    #[test]
    fn si_sdr_examples() {
        let r = noise(1000, 1);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert_eq!(si_sdr(&neg, &r).unwrap(), SI_SDR_CAP_DB);
        for a in [0.01, 3.0, -7.5] {
            let scaled: Vec<f64> = r.iter().map(|v| a * v).collect();
            assert!(si_sdr(&scaled, &r).unwrap() >= SI_SDR_CAP_DB - 1e-9);
        }
    }

    #[test]
    fn si_sdr_orthogonal_noise_of_equal_energy_is_zero_db() {
        let r = noise(2000, 2);
        let mut n = noise(2000, 3);
        let er: f64 = r.iter().map(|v| v * v).sum();
        let proj = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / er;
        n.iter_mut().zip(&r).for_each(|(a, b)| *a -= proj * b);
        let en: f64 = n.iter().map(|v| v * v).sum();
        let g = (er / en).sqrt();
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + g * b).collect();
        assert!(si_sdr(&est, &r).unwrap().abs() < 1e-9);
    }

    #[test]
    fn si_sdr_errors() {
        assert!(matches!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::ZeroReference)));
        assert!(matches!(si_sdr(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn si_sdr_is_shift_invariant() {
        let r = noise(1000, 4);
        let e: Vec<f64> = r.iter().zip(noise(1000, 5)).map(|(a, b)| a + 0.3 * b).collect();
        let pad = |x: &[f64]| [vec![0.0; 77], x.to_vec()].concat();
        assert!((si_sdr(&pad(&e), &pad(&r)).unwrap() - si_sdr(&e, &r).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fwssnr_bounds() {
        let p = FwssnrParams::new(16000).unwrap();
        let r = noise(8000, 6);
        assert_eq!(fwssnr(&r, &r, &p).unwrap(), 35.0);
        // A silent estimate gives X^2 / X^2 in every band.
        assert!(fwssnr(&vec![0.0; 8000], &r, &p).unwrap().abs() < 1e-12);
        let bad: Vec<f64> = r.iter().map(|v| -10.0 * v).collect();
        assert_eq!(fwssnr(&bad, &r, &p).unwrap(), -10.0);
    }

    /// Straightforward per-frame, per-band evaluation with an explicit DFT.
    #[test]
    fn fwssnr_matches_direct_computation() {
        let p = FwssnrParams::new(16000).unwrap();
        let r = noise(2048, 7);
        let e: Vec<f64> = r.iter().zip(noise(2048, 8)).map(|(a, b)| 0.8 * a + 0.4 * b).collect();
        let got = fwssnr(&e, &r, &p).unwrap();

        let (n, hop) = (512usize, 128usize);
        let win: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
        let pad = n - hop;
        let padded = |x: &[f64]| {
            let mut v = vec![0.0; pad];
            v.extend_from_slice(x);
            v.resize(v.len() + pad, 0.0);
            v
        };
        let (pe, pr) = (padded(&e), padded(&r));
        let frames = (pr.len() - n).div_ceil(hop) + 1;
        let bank = mel_filterbank(23, 257, 16000);
        let dft_mag = |x: &[f64], start: usize| -> Vec<f64> {
            (0..257)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..n {
                        let v = x.get(start + i).copied().unwrap_or(0.0) * win[i];
                        let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect()
        };
        let mut total = 0.0;
        for t in 0..frames {
            let (me, mr) = (dft_mag(&pe, t * hop), dft_mag(&pr, t * hop));
            let (mut num, mut den) = (0.0, 0.0);
            for b in 0..23 {
                let x: f64 = (0..257).map(|k| bank[[b, k]] * mr[k]).sum();
                let xh: f64 = (0..257).map(|k| bank[[b, k]] * me[k]).sum();
                let snr = (10.0 * (x * x / (x - xh).powi(2)).log10()).clamp(-10.0, 35.0);
                num += x.powf(0.2) * snr;
                den += x.powf(0.2);
            }
            total += num / den;
        }
        assert!((got - total / frames as f64).abs() < 1e-9, "{got}");
    }

    #[test]
    fn filterbank_covers_the_band() {
        let bank = mel_filterbank(23, 257, 16000);
        assert!(bank.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for k in 2..255 {
            assert!(bank.column(k).sum() > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn cd_examples() {
        let r = noise(16000, 9);
        assert_eq!(cepstral_distance(&r, &r, 16, 16000).unwrap(), 0.0);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert!(cepstral_distance(&doubled, &r, 16, 16000).unwrap() < 1e-10);
        let lp = lowpass(&r);
        let d = cepstral_distance(&lp, &r, 16, 16000).unwrap();
        assert!(d > 2.0 && d <= 10.0, "{d}");
    }

    #[test]
    fn metrics_survive_joint_shift() {
        let r = noise(6000, 10);
        let e: Vec<f64> = r.iter().zip(noise(6000, 11)).map(|(a, b)| a + 0.5 * b).collect();
        let pad = |x: &[f64]| [vec![0.0; 256], x.to_vec()].concat();
        let p = FwssnrParams::new(16000).unwrap();
        assert!((fwssnr(&pad(&e), &pad(&r), &p).unwrap() - fwssnr(&e, &r, &p).unwrap()).abs() < 1e-9);
        let a = cepstral_distance(&pad(&e), &pad(&r), 16, 16000).unwrap();
        assert!((a - cepstral_distance(&e, &r, 16, 16000).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = FwssnrParams::new(16000).unwrap();
        assert!(fwssnr(&[0.0; 600], &[0.0; 700], &p).is_err());
        assert!(cepstral_distance(&[0.0; 600], &[0.0; 700], 16, 16000).is_err());
    }
}
