//! Source-variance updates. Every result is clamped at the variance floor.

use ndarray::{s, Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::model::{PriorSpectra, VarianceField};
use crate::C64;

fn check_outputs(y: &ArrayView3<'_, C64>, num_sources: usize) {
    assert!(y.dim().2 >= num_sources, "fewer outputs than sources");
}

/// `lambda_t^(j) = (1/F) sum_f |y_{t,f}^(j)|^2` for the first `J` outputs.
pub fn update_coarse(y: ArrayView3<'_, C64>, num_sources: usize, floor: f64) -> VarianceField {
    check_outputs(&y, num_sources);
    let (bins, frames, _) = y.dim();
    let mut v = Array2::<f64>::zeros((frames, num_sources));
    for f in 0..bins {
        for t in 0..frames {
            for j in 0..num_sources {
                v[[t, j]] += y[[f, t, j]].norm_sqr();
            }
        }
    }
    v.mapv_inplace(|p| (p / bins as f64).max(floor));
    VarianceField::Coarse(v)
}

/// `lambda_{t,f}^(j) = |y_{t,f}^(j)|^2`.
pub fn update_fine(y: ArrayView3<'_, C64>, num_sources: usize, floor: f64) -> VarianceField {
    check_outputs(&y, num_sources);
    let v = y.slice(s![.., .., ..num_sources]).mapv(|v| v.norm_sqr().max(floor));
    VarianceField::Fine(v)
}

/// MAP update under an inverse-Gamma prior with scale `gamma`:
/// `lambda = (|y|^2 + gamma) / (alpha + 2)`. `y` must already be at the
/// reference-microphone scale.
pub fn update_map(
    y_projected: ArrayView3<'_, C64>,
    prior: &PriorSpectra,
    alpha: f64,
    floor: f64,
) -> Result<VarianceField> {
    let (bins, frames, j_count) = prior.dim();
    let (yb, yt, yj) = y_projected.dim();
    if yb != bins || yt != frames || yj < j_count {
        return Err(Error::Shape(format!(
            "prior {:?} does not match outputs {:?}",
            prior.dim(),
            y_projected.dim()
        )));
    }
    let gamma = prior.gamma();
    let v = Array3::from_shape_fn((bins, frames, j_count), |(f, t, j)| {
        ((y_projected[[f, t, j]].norm_sqr() + gamma[[f, t, j]]) / (alpha + 2.0)).max(floor)
    });
    Ok(VarianceField::Fine(v))
}
