//! Source-wise weighted prediction error dereverberation.
//!
//! For each frequency bin and filter slot, the prediction matrix is the
//! weighted least-squares solution `G = R^{-1} P` with
//! `R = sum_t xbar_t xbar_t^H / lambda_t` and `P = sum_t xbar_t x_t^H / lambda_t`,
//! where `xbar_t` stacks the observations delayed by `D .. L-1` frames.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{CbfState, OpCounter, PipelineConfig};
use crate::stft::MultichannelSpectrogram;
use crate::C64;

/// Delayed observation stacks, one `[T x M(L - D)]` matrix per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedStack {
    bins: Vec<Array2<C64>>,
}

impl DelayedStack {
    pub fn bin(&self, f: usize) -> &Array2<C64> {
        &self.bins[f]
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }
}

/// Stack for one bin. Row `t` is `[x_{t-D}; x_{t-D-1}; ...; x_{t-L+1}]`,
/// zero where `t - delay < 0`.
pub fn stack_bin(frames: ArrayView2<'_, C64>, delay: usize, taps: usize) -> Result<Array2<C64>> {
    if delay < 1 || taps <= delay {
        return Err(Error::InvalidParameter(format!(
            "need taps > delay >= 1, got taps {taps}, delay {delay}"
        )));
    }
    let (t_len, mics) = frames.dim();
    let mut out = Array2::zeros((t_len, mics * (taps - delay)));
    for b in 0..taps - delay {
        let lag = delay + b;
        if lag >= t_len {
            break;
        }
        out.slice_mut(s![lag.., b * mics..(b + 1) * mics])
            .assign(&frames.slice(s![..t_len - lag, ..]));
    }
    Ok(out)
}

/// Stacks with the same filter length in every bin.
pub fn build_delayed_stack(spec: &MultichannelSpectrogram, delay: usize, taps: usize) -> Result<DelayedStack> {
    let bins = spec
        .data()
        .outer_iter()
        .map(|frames| stack_bin(frames, delay, taps))
        .collect::<Result<_>>()?;
    Ok(DelayedStack { bins })
}

/// Stacks with the per-band filter lengths of `cfg`.
pub fn build_banded_stack(spec: &MultichannelSpectrogram, cfg: &PipelineConfig) -> Result<DelayedStack> {
    let taps = cfg.taps_per_bin(spec)?;
    let bins = spec
        .data()
        .outer_iter()
        .zip(&taps)
        .map(|(frames, &l)| stack_bin(frames, cfg.delay, l))
        .collect::<Result<_>>()?;
    Ok(DelayedStack { bins })
}

/// Weighted second-order statistics of one bin, before diagonal loading.
#[derive(Debug, Clone, PartialEq)]
pub struct WpeStats {
    /// `[M(L-D) x M(L-D)]`, Hermitian.
    pub r: Array2<C64>,
    /// `[M(L-D) x M]`.
    pub p: Array2<C64>,
}

impl WpeStats {
    /// `R + epsilon_reg * trace(R) / dim * I`.
    pub fn loaded_r(&self, epsilon_reg: f64) -> Array2<C64> {
        let mut r = self.r.clone();
        let dim = r.nrows();
        let load = epsilon_reg * linalg::trace_re(r.view()) / dim as f64;
        linalg::load_diagonal(&mut r, load);
        r
    }

    /// `G = (R + loading)^{-1} P`. An all-zero `R` (no signal) gives `G = 0`.
    pub fn solve(&self, epsilon_reg: f64) -> Option<Array2<C64>> {
        if linalg::trace_re(self.r.view()) == 0.0 {
            return Some(Array2::zeros(self.p.dim()));
        }
        linalg::hermitian_solve(self.loaded_r(epsilon_reg).view(), self.p.view())
    }
}

/// `R` and `P` for one bin and one set of per-frame variances.
pub fn accumulate_stats(
    xbar: ArrayView2<'_, C64>,
    frames: ArrayView2<'_, C64>,
    lambda: ArrayView1<'_, f64>,
) -> WpeStats {
    let (t_len, dim) = xbar.dim();
    let mics = frames.ncols();
    assert_eq!(frames.nrows(), t_len, "stack and observation frame counts differ");
    assert_eq!(lambda.len(), t_len, "one variance per frame");

    let inv = lambda.mapv(|l| 1.0 / l).insert_axis(Axis(1));
    let weighted = &xbar * &inv;
    let mut rhs = Array2::<C64>::zeros((t_len, dim + mics));
    rhs.slice_mut(s![.., ..dim]).assign(&xbar.mapv(|v| v.conj()));
    rhs.slice_mut(s![.., dim..]).assign(&frames.mapv(|v| v.conj()));
    let rp = weighted.t().dot(&rhs);

    let raw = rp.slice(s![.., ..dim]);
    let r = Array2::from_shape_fn((dim, dim), |(a, b)| 0.5 * (raw[[a, b]] + raw[[b, a]].conj()));
    WpeStats { r, p: rp.slice(s![.., dim..]).to_owned() }
}

/// `z_t = x_t - G^H xbar_t` for one bin.
pub fn dereverberate_bin(
    frames: ArrayView2<'_, C64>,
    xbar: ArrayView2<'_, C64>,
    g: ArrayView2<'_, C64>,
) -> Array2<C64> {
    &frames - &xbar.dot(&g.mapv(|v| v.conj()))
}

/// Applies one prediction matrix per bin to the whole spectrogram.
pub fn dereverberate(spec: &MultichannelSpectrogram, stack: &DelayedStack, g: &[Array2<C64>]) -> Result<Array3<C64>> {
    if stack.num_bins() != spec.num_bins() || g.len() != spec.num_bins() {
        return Err(Error::Shape("one stack and filter per bin required".into()));
    }
    let mut z = Array3::zeros(spec.data().dim());
    for (f, frames) in spec.data().outer_iter().enumerate() {
        let xbar = stack.bin(f);
        if g[f].dim() != (xbar.ncols(), spec.num_channels()) {
            return Err(Error::Shape(format!("prediction matrix {:?} at bin {f}", g[f].dim())));
        }
        z.slice_mut(s![f, .., ..]).assign(&dereverberate_bin(frames, xbar.view(), g[f].view()));
    }
    Ok(z)
}

/// Recomputes all `J + 1` prediction matrices from the current
/// dereverberation variances (unit variance for the shared noise slot),
/// then refreshes the dereverberated signals `z`.
pub fn update_wpe_filters(
    state: &mut CbfState,
    spec: &MultichannelSpectrogram,
    cfg: &PipelineConfig,
    counter: &OpCounter,
) -> Result<()> {
    let slots = state.num_sources + 1;
    let frames_len = spec.num_frames();
    let var_dr = &state.var_dr;
    let wpe = &state.wpe;

    let results: Vec<Result<Vec<(Array2<C64>, Array2<C64>)>>> = (0..spec.num_bins())
        .into_par_iter()
        .map(|f| {
            let frames = spec.data().slice(s![f, .., ..]);
            let xbar = stack_bin(frames, cfg.delay, wpe.taps(f))?;
            (0..slots)
                .map(|slot| {
                    let lambda = if slot < slots - 1 { var_dr.weights(f, slot) } else { Array1::ones(frames_len) };
                    let stats = accumulate_stats(xbar.view(), frames, lambda.view());
                    let g = stats.solve(cfg.epsilon_reg).ok_or(Error::Singular {
                        stage: "wpe",
                        freq: f,
                        slot: Some(slot),
                    })?;
                    counter.record_wpe_solve(xbar.ncols());
                    let z = dereverberate_bin(frames, xbar.view(), g.view());
                    Ok((g, z))
                })
                .collect()
        })
        .collect();

    for (f, bin) in results.into_iter().enumerate() {
        for (slot, (g, z)) in bin?.into_iter().enumerate() {
            state.wpe.set_slot(f, slot, g);
            state.z[slot].slice_mut(s![f, .., ..]).assign(&z);
        }
    }
    Ok(())
}
