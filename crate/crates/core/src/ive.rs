//! Separation-matrix updates under the independent vector extraction model.
//!
//! Speech filters are updated one at a time by iterative projection (IP).
//! The noise filters are never separated from each other: a single block
//! solve makes the noise subspace orthogonal to the speech filters in the
//! noise-weighted metric, with an identity lower block.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{CbfState, OpCounter, PipelineConfig, SeparationMatrix};
use crate::C64;

/// `Sigma = (1/T) sum_t z_t z_t^H / lambda_t` and the diagonal loading kept
/// in reserve for solves that fail on the raw matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCovariance {
    pub sigma: Array2<C64>,
    pub load: f64,
}

impl WeightedCovariance {
    /// `Sigma + load * I`.
    pub fn loaded(&self) -> Array2<C64> {
        let mut s = self.sigma.clone();
        linalg::load_diagonal(&mut s, self.load);
        s
    }
}

/// Weighted covariance of one bin's dereverberated frames `z` (`[T x M]`).
pub fn accumulate_sigma(z: ArrayView2<'_, C64>, lambda: ArrayView1<'_, f64>, epsilon_reg: f64) -> WeightedCovariance {
    let (t_len, m) = z.dim();
    assert_eq!(lambda.len(), t_len, "one variance per frame");
    let inv = lambda.mapv(|l| 1.0 / (l * t_len as f64)).insert_axis(Axis(1));
    let weighted = &z * &inv;
    let raw = weighted.t().dot(&z.mapv(|v| v.conj()));
    let sigma = Array2::from_shape_fn((m, m), |(a, b)| 0.5 * (raw[[a, b]] + raw[[b, a]].conj()));
    let load = epsilon_reg * linalg::trace_re(sigma.view()) / m as f64;
    WeightedCovariance { sigma, load }
}

/// IP update of column `j`: `q = (Q^H Sigma)^{-1} e_j`, then `q / sqrt(q^H Sigma q)`.
pub fn update_speech_filter(q: ArrayView2<'_, C64>, sigma: ArrayView2<'_, C64>, j: usize) -> Option<Array1<C64>> {
    let m = q.nrows();
    let a = linalg::adjoint(q).dot(&sigma);
    let mut e = Array2::<C64>::zeros((m, 1));
    e[[j, 0]] = C64::new(1.0, 0.0);
    let col = linalg::solve(a.view(), e.view())?.column(0).to_owned();
    let norm2 = quad_form(col.view(), sigma);
    if !(norm2 > 0.0) || !norm2.is_finite() {
        return None;
    }
    Some(col / norm2.sqrt())
}

/// `v^H Sigma v` (real part).
pub fn quad_form(v: ArrayView1<'_, C64>, sigma: ArrayView2<'_, C64>) -> f64 {
    v.mapv(|x| x.conj()).dot(&sigma.dot(&v)).re
}

/// Noise block `Q_N = [-(Q_S^H Sigma E_S)^{-1} (Q_S^H Sigma E_N); I]`.
pub fn update_noise_block(q: &SeparationMatrix, sigma_noise: ArrayView2<'_, C64>) -> Option<Array2<C64>> {
    let (m, j) = (q.num_mics(), q.num_sources());
    let coupling = linalg::adjoint(q.speech_block()).dot(&sigma_noise);
    let pivot = coupling.slice(s![.., ..j]);
    let rhs = coupling.slice(s![.., j..]);
    let top = linalg::solve(pivot, rhs)?;
    let mut block = Array2::<C64>::zeros((m, m - j));
    block.slice_mut(s![..j, ..]).assign(&top.mapv(|v| -v));
    block.slice_mut(s![j.., ..]).assign(&Array2::eye(m - j));
    Some(block)
}

/// One IVE pass for one bin: `J` IP updates in source order, then one
/// noise-block update. Each solve falls back to the loaded covariance when
/// the raw one is singular.
pub fn separation_pass(
    sep: &mut SeparationMatrix,
    speech: &[WeightedCovariance],
    noise: &WeightedCovariance,
    freq: usize,
    counter: &OpCounter,
) -> Result<()> {
    for (j, cov) in speech.iter().enumerate() {
        let col = update_speech_filter(sep.matrix().view(), cov.sigma.view(), j)
            .or_else(|| update_speech_filter(sep.matrix().view(), cov.loaded().view(), j))
            .ok_or(Error::Singular {
            stage: "ip",
            freq,
            slot: Some(j),
        })?;
        counter.record_ip_update();
        sep.set_column(j, &col);
    }
    let block = update_noise_block(sep, noise.sigma.view())
        .or_else(|| update_noise_block(sep, noise.loaded().view()))
        .ok_or(Error::Singular {
        stage: "noise-block",
        freq,
        slot: None,
    })?;
    counter.record_noise_block_solve(sep.num_sources());
    sep.set_noise_block(&block);
    Ok(())
}

/// Weighted covariances for all slots of one bin: speech sources weighted
/// by the separation variances, the noise slot by unit variance.
pub fn bin_covariances(state: &CbfState, f: usize, epsilon_reg: f64) -> (Vec<WeightedCovariance>, WeightedCovariance) {
    let j_count = state.num_sources;
    let speech = (0..j_count)
        .map(|j| {
            let w = state.var_sep.weights(f, j);
            accumulate_sigma(state.z[j].slice(s![f, .., ..]), w.view(), epsilon_reg)
        })
        .collect();
    let ones = Array1::ones(state.num_frames());
    let noise = accumulate_sigma(state.z[j_count].slice(s![f, .., ..]), ones.view(), epsilon_reg);
    (speech, noise)
}

/// Separation pass over every bin with the current `z` and variances.
pub fn update_separation(state: &mut CbfState, cfg: &PipelineConfig, counter: &OpCounter) -> Result<()> {
    let snapshot: &CbfState = state;
    let updated: Vec<Result<SeparationMatrix>> = (0..snapshot.num_bins())
        .into_par_iter()
        .map(|f| {
            let (speech, noise) = bin_covariances(snapshot, f, cfg.epsilon_reg);
            let mut sep = snapshot.sep[f].clone();
            separation_pass(&mut sep, &speech, &noise, f, counter)?;
            Ok(sep)
        })
        .collect();
    state.sep = updated.into_iter().collect::<Result<_>>()?;
    Ok(())
}
