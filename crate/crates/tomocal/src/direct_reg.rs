//! Dense SVD-based direct regularization: filter factors, TSVD, Tikhonov,
//! and (weighted) generalized cross-validation. Used standalone at desk
//! scale and on the projected bidiagonal problem inside hybrid LSQR.

use crate::error::{Error, Result};
use crate::nls::golden_parabolic_min;
use nalgebra::DMatrix;

/// Thin SVD A = U diag(sigma) V^T with p = min(m, n), sigma nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl SvdTriple {
    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn p(&self) -> usize {
        self.sigma.len()
    }
}

/// Per-singular-value damping coefficients, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpectrum {
    pub phi: Vec<f64>,
}

/// Thin SVD of a dense matrix, singular values sorted nonincreasing.
pub fn svd(a: &DMatrix<f64>) -> Result<SvdTriple> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    let f = a.clone().svd(true, true);
    let u = f.u.expect("svd requested u");
    let v_t = f.v_t.expect("svd requested v_t");
    let p = f.singular_values.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        f.singular_values[j]
            .partial_cmp(&f.singular_values[i])
            .unwrap()
    });
    let sigma: Vec<f64> = order.iter().map(|&i| f.singular_values[i]).collect();
    let u_sorted = DMatrix::from_fn(u.nrows(), p, |r, c| u[(r, order[c])]);
    let v_sorted = DMatrix::from_fn(v_t.ncols(), p, |r, c| v_t[(order[c], r)]);
    Ok(SvdTriple {
        u: u_sorted,
        sigma,
        v: v_sorted,
    })
}

/// Tikhonov filter factors phi_i = sigma_i^2 / (sigma_i^2 + lambda^2).
pub fn tikhonov_filter(sigma: &[f64], lambda: f64) -> Result<FilterSpectrum> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(
            "tikhonov_filter requires lambda >= 0".into(),
        ));
    }
    let phi = sigma
        .iter()
        .map(|&s| {
            if s == 0.0 {
                if lambda > 0.0 {
                    0.0
                } else {
                    1.0
                }
            } else {
                let s2 = s * s;
                s2 / (s2 + lambda * lambda)
            }
        })
        .collect();
    Ok(FilterSpectrum { phi })
}

/// TSVD filter factors: 1 for the first k components, 0 after.
pub fn tsvd_filter(sigma: &[f64], k: usize) -> Result<FilterSpectrum> {
    if k > sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "tsvd truncation index {k} exceeds spectrum length {}",
            sigma.len()
        )));
    }
    let phi = (0..sigma.len())
        .map(|i| if i < k { 1.0 } else { 0.0 })
        .collect();
    Ok(FilterSpectrum { phi })
}

/// x_reg = sum_i phi_i (u_i^T b / sigma_i) v_i, skipping sigma_i = 0 terms.
pub fn filtered_solve(svd: &SvdTriple, b: &[f64], phi: &FilterSpectrum) -> Result<Vec<f64>> {
    if b.len() != svd.m() {
        return Err(Error::DimensionMismatch {
            expected: svd.m(),
            got: b.len(),
        });
    }
    if phi.phi.len() != svd.p() {
        return Err(Error::DimensionMismatch {
            expected: svd.p(),
            got: phi.phi.len(),
        });
    }
    let mut x = vec![0.0; svd.n()];
    for i in 0..svd.p() {
        let s = svd.sigma[i];
        if s == 0.0 {
            continue;
        }
        let ub: f64 = (0..svd.m()).map(|r| svd.u[(r, i)] * b[r]).sum();
        let coeff = phi.phi[i] * ub / s;
        for r in 0..svd.n() {
            x[r] += coeff * svd.v[(r, i)];
        }
    }
    Ok(x)
}

/// Weighted GCV value for Tikhonov filtering at (w, lambda).
///
/// G(w, lambda) = n * [ sum_i ((1 - phi_i) bhat_i)^2 + ||b_perp||^2 ]
///              / [ (m - p) + sum_i (1 - w phi_i) ]^2
///
/// with bhat = U^T b and b_perp = b - U bhat. A degenerate (zero) denominator
/// yields an infinite sentinel so that minimizers avoid it.
pub fn gcv_value(svd: &SvdTriple, b: &[f64], lambda: f64, w: f64) -> Result<f64> {
    if lambda < 0.0 || w <= 0.0 {
        return Err(Error::InvalidArgument(
            "gcv_value requires lambda >= 0 and w > 0".into(),
        ));
    }
    if b.len() != svd.m() {
        return Err(Error::DimensionMismatch {
            expected: svd.m(),
            got: b.len(),
        });
    }
    let phi = tikhonov_filter(&svd.sigma, lambda)?;
    let (m, n, p) = (svd.m(), svd.n(), svd.p());
    let bhat: Vec<f64> = (0..p)
        .map(|i| (0..m).map(|r| svd.u[(r, i)] * b[r]).sum())
        .collect();
    let mut b_perp_sq = 0.0;
    for r in 0..m {
        let proj: f64 = (0..p).map(|i| svd.u[(r, i)] * bhat[i]).sum();
        let e = b[r] - proj;
        b_perp_sq += e * e;
    }
    let fit: f64 = (0..p)
        .map(|i| {
            let e = (1.0 - phi.phi[i]) * bhat[i];
            e * e
        })
        .sum();
    let trace = (m - p) as f64 + (0..p).map(|i| 1.0 - w * phi.phi[i]).sum::<f64>();
    if trace.abs() < 1e-300 {
        return Ok(f64::INFINITY);
    }
    Ok(n as f64 * (fit + b_perp_sq) / (trace * trace))
}

/// Minimize the weighted GCV function over lambda in
/// [1e-6 * sigma_min_positive, sigma_1] with a 1-D golden/parabolic search.
pub fn minimize_gcv(svd: &SvdTriple, b: &[f64], w: f64) -> Result<f64> {
    let sigma_max = *svd
        .sigma
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty spectrum".into()))?;
    let sigma_min_pos = svd
        .sigma
        .iter()
        .rev()
        .find(|&&s| s > 0.0)
        .copied()
        .ok_or_else(|| Error::InvalidArgument("all singular values are zero".into()))?;
    let lo = 1e-6 * sigma_min_pos;
    let hi = sigma_max;
    let res = golden_parabolic_min(
        |lambda| gcv_value(svd, b, lambda, w).unwrap_or(f64::INFINITY),
        lo,
        hi,
        1e-6,
        500,
    )?;
    Ok(res.argmin[0])
}
