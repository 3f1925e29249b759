//! Scale and permutation fix-ups for the separated speech outputs.

use itertools::Itertools;
use ndarray::{s, Array1, Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SeparationMatrix;
use crate::C64;

/// Upper bound on refinement sweeps in [`permutation_realign`].
pub const MAX_ALIGN_SWEEPS: usize = 10;

/// Power floor, relative to the mean of each envelope, before taking logs.
const LOG_FLOOR: f64 = 1e-10;

/// Per-bin projection-back factors `[F x J]`: entry `(r, j)` of `Q_f^{-H}`.
pub fn projection_back_scales(sep: &[SeparationMatrix], reference_mic: usize) -> Result<Array2<C64>> {
    let j_count = sep.first().map_or(0, SeparationMatrix::num_sources);
    let mut scales = Array2::zeros((sep.len(), j_count));
    for (f, q) in sep.iter().enumerate() {
        if reference_mic >= q.num_mics() {
            return Err(Error::InvalidParameter(format!("reference mic {reference_mic} out of range")));
        }
        let inv = linalg::inverse(q.matrix().view()).ok_or(Error::Singular {
            stage: "projection-back",
            freq: f,
            slot: None,
        })?;
        // (Q^{-H})_{r,j} = conj((Q^{-1})_{j,r})
        for j in 0..j_count {
            scales[[f, j]] = inv[[j, reference_mic]].conj();
        }
    }
    Ok(scales)
}

/// Rescales each speech output to its image at `reference_mic`.
///
/// Returns the scaled outputs `[F x T x J]` together with the separation
/// matrices whose speech columns absorb the scaling, so applying the
/// operation again with the returned matrices is a no-op.
pub fn projection_back(
    y: ArrayView3<'_, C64>,
    sep: &[SeparationMatrix],
    reference_mic: usize,
) -> Result<(Array3<C64>, Vec<SeparationMatrix>)> {
    let (bins, frames, outputs) = y.dim();
    if sep.len() != bins {
        return Err(Error::Shape(format!("{} separation matrices for {bins} bins", sep.len())));
    }
    let scales = projection_back_scales(sep, reference_mic)?;
    let j_count = scales.ncols();
    if outputs < j_count {
        return Err(Error::Shape(format!("{outputs} outputs for {j_count} sources")));
    }
    let scaled = Array3::from_shape_fn((bins, frames, j_count), |(f, t, j)| scales[[f, j]] * y[[f, t, j]]);
    let rescaled = sep
        .iter()
        .enumerate()
        .map(|(f, q)| {
            let mut q = q.clone();
            for j in 0..j_count {
                let col = q.matrix().column(j).mapv(|v| scales[[f, j]].conj() * v);
                q.set_column(j, &col);
            }
            q
        })
        .collect();
    Ok((scaled, rescaled))
}

/// Log-power envelope of every (bin, source), normalized to zero mean and
/// unit variance over time. Constant envelopes become all-zero.
fn envelopes(y: ArrayView3<'_, C64>) -> Array3<f64> {
    let (bins, frames, j_count) = y.dim();
    let mut env = y.mapv(|v| v.norm_sqr());
    for f in 0..bins {
        for j in 0..j_count {
            let mut e = env.slice_mut(s![f, .., j]);
            let floor = LOG_FLOOR * e.sum() / frames as f64 + f64::MIN_POSITIVE;
            e.mapv_inplace(|v| (v + floor).ln());
            let mean = e.sum() / frames as f64;
            e.mapv_inplace(|v| v - mean);
            let sd = (e.iter().map(|v| v * v).sum::<f64>() / frames as f64).sqrt();
            if sd > 0.0 {
                e.mapv_inplace(|v| v / sd);
            } else {
                e.fill(0.0);
            }
        }
    }
    env
}

fn normalize(v: &mut Array1<f64>) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    v.mapv_inplace(|x| x - mean);
    let sd = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.mapv_inplace(|x| x / sd);
    }
}

/// Pearson correlation of two zero-mean, unit-variance sequences.
fn corr(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / a.len() as f64
}

/// Best assignment `perm` (output `j` takes input `perm[j]`) of bin `f`
/// against normalized centroids.
fn best_permutation(env: &Array3<f64>, f: usize, centroids: &[Array1<f64>], perms: &[Vec<usize>]) -> Vec<usize> {
    let score = |p: &Vec<usize>| -> f64 {
        p.iter().enumerate().map(|(j, &src)| corr(env.slice(s![f, .., src]), centroids[j].view())).sum()
    };
    let mut best = &perms[0];
    let mut best_score = score(best);
    for p in &perms[1..] {
        let sc = score(p);
        if sc > best_score {
            best = p;
            best_score = sc;
        }
    }
    best.clone()
}

fn centroids_from(env: &Array3<f64>, assign: &[Vec<usize>]) -> Vec<Array1<f64>> {
    let (_, frames, j_count) = env.dim();
    (0..j_count)
        .map(|j| {
            let mut c = Array1::zeros(frames);
            for (f, p) in assign.iter().enumerate() {
                c += &env.slice(s![f, .., p[j]]);
            }
            normalize(&mut c);
            c
        })
        .collect()
}

/// Sweeps every bin against refreshed centroids until nothing changes.
fn refine(env: &Array3<f64>, mut assign: Vec<Vec<usize>>, perms: &[Vec<usize>]) -> Vec<Vec<usize>> {
    for _ in 0..MAX_ALIGN_SWEEPS {
        let centroids = centroids_from(env, &assign);
        let mut changed = false;
        for (f, current) in assign.iter_mut().enumerate() {
            let p = best_permutation(env, f, &centroids, perms);
            if &p != current {
                *current = p;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Summed correlation of every placed envelope with its centroid.
fn alignment_score(env: &Array3<f64>, assign: &[Vec<usize>]) -> f64 {
    let centroids = centroids_from(env, assign);
    assign
        .iter()
        .enumerate()
        .flat_map(|(f, p)| p.iter().enumerate().map(move |(j, &src)| (f, j, src)))
        .map(|(f, j, src)| corr(env.slice(s![f, .., src]), centroids[j].view()))
        .sum()
}

/// Resolves the per-bin ordering ambiguity of the speech outputs
/// `[F x T x J]` by correlating log-power envelopes.
///
/// Bins are first visited from the most to the least self-distinct
/// (lowest inter-source envelope correlation), each aligned to centroids
/// accumulated from the bins already placed. Full sweeps against refreshed
/// centroids follow until no bin changes or [`MAX_ALIGN_SWEEPS`] is reached.
/// The same sweeps are run from the input order, and whichever assignment
/// correlates better with its centroids is kept.
/// Finally the global labeling that leaves the most bins untouched is
/// chosen. Returns the aligned outputs and `perm[f][j]`, the input index
/// placed at output `j` of bin `f`.
pub fn permutation_realign(y: ArrayView3<'_, C64>) -> (Array3<C64>, Vec<Vec<usize>>) {
    let (bins, _, j_count) = y.dim();
    let identity: Vec<usize> = (0..j_count).collect();
    if j_count < 2 || bins == 0 {
        return (y.to_owned(), vec![identity; bins]);
    }
    let env = envelopes(y);
    let perms: Vec<Vec<usize>> = (0..j_count).permutations(j_count).collect();

    let distinctness = |f: usize| -> f64 {
        (0..j_count)
            .tuple_combinations()
            .map(|(a, b)| corr(env.slice(s![f, .., a]), env.slice(s![f, .., b])).abs())
            .fold(0.0, f64::max)
    };
    let mut order: Vec<usize> = (0..bins).collect();
    let keys: Vec<f64> = (0..bins).map(distinctness).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));

    // Greedy growth from the most distinct bin.
    let mut assign = vec![identity.clone(); bins];
    let mut sums: Vec<Array1<f64>> = (0..j_count).map(|j| env.slice(s![order[0], .., j]).to_owned()).collect();
    for &f in &order[1..] {
        let centroids: Vec<Array1<f64>> = sums
            .iter()
            .map(|c| {
                let mut c = c.clone();
                normalize(&mut c);
                c
            })
            .collect();
        let p = best_permutation(&env, f, &centroids, &perms);
        for (j, &src) in p.iter().enumerate() {
            sums[j] += &env.slice(s![f, .., src]);
        }
        assign[f] = p;
    }

    let grown = refine(&env, assign, &perms);
    let kept = refine(&env, vec![identity; bins], &perms);
    let assign = if alignment_score(&env, &grown) > alignment_score(&env, &kept) { grown } else { kept };

    // Global relabeling that keeps the most bins in their input order.
    let mut best_global = &perms[0];
    let mut best_kept = 0;
    for g in &perms {
        let kept = assign.iter().filter(|p| (0..j_count).all(|j| p[g[j]] == j)).count();
        if kept > best_kept {
            best_kept = kept;
            best_global = g;
        }
    }
    let assign: Vec<Vec<usize>> = assign.iter().map(|p| best_global.iter().map(|&g| p[g]).collect()).collect();

    let mut out = Array3::zeros(y.dim());
    for (f, p) in assign.iter().enumerate() {
        for (j, &src) in p.iter().enumerate() {
            out.slice_mut(s![f, .., j]).assign(&y.slice(s![f, .., src]));
        }
    }
    (out, assign)
}
