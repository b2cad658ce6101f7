use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Correlations are clamped to this distance from ±1 before `atanh`.
pub const CORR_CLAMP: f64 = 1e-7;

/// Fisher r-to-z transformed Pearson correlation between every pair of ROI
/// time series. `timeseries` is `T x n` (one column per ROI). The diagonal is 0.
pub fn compute_fc(timeseries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (t, n) = timeseries.shape();
    if t < 3 {
        return Err(Error::invalid(format!("need at least 3 time points, got {t}")));
    }
    if timeseries.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("time series".into()));
    }

    let mut centered = timeseries.clone();
    let mut norms = Vec::with_capacity(n);
    for (roi, mut col) in centered.column_iter_mut().enumerate() {
        let scale = col.amax();
        let mean = col.sum() / t as f64;
        col.add_scalar_mut(-mean);
        let ss = col.norm_squared();
        // a constant column leaves only rounding residue after centering
        if ss <= (1e-12 * scale).powi(2) * t as f64 {
            return Err(Error::ZeroVariance { roi });
        }
        norms.push(ss.sqrt());
    }

    let cross = centered.transpose() * &centered;
    let lim = 1.0 - CORR_CLAMP;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            // symmetric by construction: evaluate on the upper triangle only
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            let r = cross[(a, b)] / (norms[a] * norms[b]);
            r.clamp(-lim, lim).atanh()
        }
    }))
}
