//! Golub-Kahan bidiagonalization, plain LSQR, and hybrid LSQR with
//! per-iteration weighted-GCV Tikhonov regularization on the projected
//! bidiagonal problem.

use crate::direct_reg;
use crate::error::{Error, Result};
use crate::geometry::norm2;
use crate::projector::SparseBlockOperator;
use nalgebra::{DMatrix, DVector};

/// Matrix-free linear operator.
pub trait LinearOp {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64>;
}

impl LinearOp for SparseBlockOperator {
    fn nrows(&self) -> usize {
        self.n_rows()
    }

    fn ncols(&self) -> usize {
        self.n_cols
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        crate::projector::apply(self, x).expect("dimension checked by caller")
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        crate::projector::apply_adjoint(self, y).expect("dimension checked by caller")
    }
}

impl LinearOp for DMatrix<f64> {
    fn nrows(&self) -> usize {
        DMatrix::nrows(self)
    }

    fn ncols(&self) -> usize {
        DMatrix::ncols(self)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self * DVector::from_column_slice(x))
            .iter()
            .copied()
            .collect()
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        (self.transpose() * DVector::from_column_slice(y))
            .iter()
            .copied()
            .collect()
    }
}

const BREAKDOWN_TOL: f64 = 1e-14;

/// Golub-Kahan bidiagonalization state after k steps:
/// A V_k = U_{k+1} B_k with B_k lower-bidiagonal (diagonal alpha_1..alpha_k,
/// subdiagonal beta_2..beta_{k+1}).
#[derive(Debug, Clone)]
pub struct BidiagFactor {
    pub beta1: f64,
    pub alphas: Vec<f64>,
    /// beta_2 ... beta_{k+1}.
    pub betas: Vec<f64>,
    /// k+1 left basis vectors.
    pub u: Vec<Vec<f64>>,
    /// k right basis vectors.
    pub v: Vec<Vec<f64>>,
    pub breakdown: bool,
    reorthogonalize: bool,
}

impl BidiagFactor {
    /// Initialize with u_1 = b / ||b||.
    pub fn init(b: &[f64], reorthogonalize: bool) -> Result<Self> {
        let beta1 = norm2(b);
        if beta1 == 0.0 {
            return Err(Error::InvalidArgument(
                "bidiagonalization requires b != 0".into(),
            ));
        }
        let u1: Vec<f64> = b.iter().map(|x| x / beta1).collect();
        Ok(BidiagFactor {
            beta1,
            alphas: Vec::new(),
            betas: Vec::new(),
            u: vec![u1],
            v: Vec::new(),
            breakdown: false,
            reorthogonalize,
        })
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    /// The (k+1) x k lower-bidiagonal projected matrix.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut b = DMatrix::zeros(k + 1, k);
        for j in 0..k {
            b[(j, j)] = self.alphas[j];
            b[(j + 1, j)] = self.betas[j];
        }
        b
    }

    fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
        // Two MGS passes.
        for _ in 0..2 {
            for q in basis {
                let dot: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= dot * qi;
                }
            }
        }
    }

    /// Advance one step, appending alpha_{k+1}, beta_{k+2}, v_{k+1}, u_{k+2}.
    /// Returns false on graceful breakdown.
    pub fn step(&mut self, a: &dyn LinearOp) -> bool {
        if self.breakdown {
            return false;
        }
        let k = self.k();
        let mut w = a.apply_adjoint(&self.u[k]);
        if k > 0 {
            let beta = self.betas[k - 1];
            for (wi, vi) in w.iter_mut().zip(&self.v[k - 1]) {
                *wi -= beta * vi;
            }
        }
        if self.reorthogonalize {
            Self::orthogonalize(&mut w, &self.v);
        }
        let alpha = norm2(&w);
        if alpha < BREAKDOWN_TOL {
            self.breakdown = true;
            return false;
        }
        let v_new: Vec<f64> = w.iter().map(|x| x / alpha).collect();

        let mut q = a.apply(&v_new);
        for (qi, ui) in q.iter_mut().zip(&self.u[k]) {
            *qi -= alpha * ui;
        }
        if self.reorthogonalize {
            Self::orthogonalize(&mut q, &self.u);
        }
        let beta = norm2(&q);
        self.alphas.push(alpha);
        self.v.push(v_new);
        if beta < BREAKDOWN_TOL {
            // v/alpha were still valid; further expansion is impossible.
            self.betas.push(0.0);
            self.u.push(vec![0.0; self.u[0].len()]);
            self.breakdown = true;
            return false;
        }
        self.betas.push(beta);
        self.u.push(q.iter().map(|x| x / beta).collect());
        true
    }
}

/// Solve min ||B y - beta1 e1||^2 + lambda^2 ||y||^2 exactly (dense).
pub fn projected_tikhonov(b_mat: &DMatrix<f64>, beta1: f64, lambda: f64) -> Result<Vec<f64>> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be >= 0".into()));
    }
    let (rows, cols) = (b_mat.nrows(), b_mat.ncols());
    // Stacked system [B; lambda I] y = [beta1 e1; 0].
    let mut stacked = DMatrix::zeros(rows + cols, cols);
    stacked.view_mut((0, 0), (rows, cols)).copy_from(b_mat);
    for j in 0..cols {
        stacked[(rows + j, j)] = lambda;
    }
    let mut rhs = DVector::zeros(rows + cols);
    rhs[0] = beta1;
    let y = stacked
        .svd(true, true)
        .solve(&rhs, 1e-300)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(y.iter().copied().collect())
}

/// Regularization mode for the projected problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularize {
    None,
    Gcv,
    Wgcv,
}

#[derive(Debug, Clone)]
pub struct HybridOptions {
    pub max_k: usize,
    pub w: f64,
    pub regularize: Regularize,
    /// Relative GCV flatness tolerance for stopping.
    pub stop_tol: f64,
    pub reorthogonalize: bool,
}

impl Default for HybridOptions {
    fn default() -> Self {
        HybridOptions {
            max_k: 50,
            w: 0.8,
            regularize: Regularize::Wgcv,
            stop_tol: 1e-2,
            reorthogonalize: true,
        }
    }
}

/// Per-iteration record of the hybrid solve.
#[derive(Debug, Clone)]
pub struct HybridIter {
    pub lambda: f64,
    pub gcv: f64,
    pub residual_norm: f64,
}

#[derive(Debug, Clone)]
pub struct HybridResult {
    pub x: Vec<f64>,
    pub iterations: Vec<HybridIter>,
    /// Iterate after each step (x_1, x_2, ...).
    pub xs: Vec<Vec<f64>>,
}

/// Hybrid LSQR: project onto Krylov subspaces by Golub-Kahan
/// bidiagonalization and regularize the small projected problem each
/// iteration. With `Regularize::None` this is plain LSQR.
pub fn hybrid_lsqr(a: &dyn LinearOp, b: &[f64], opts: &HybridOptions) -> Result<HybridResult> {
    if b.len() != a.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    let mut state = BidiagFactor::init(b, opts.reorthogonalize)?;
    let n = a.ncols();
    let mut result = HybridResult {
        x: vec![0.0; n],
        iterations: Vec::new(),
        xs: Vec::new(),
    };
    let mut g_first: Option<f64> = None;
    let mut g_prev: Option<f64> = None;
    let mut flat_count = 0usize;

    for _k in 1..=opts.max_k {
        let advanced = state.step(a);
        if state.k() == 0 {
            break;
        }
        let b_mat = state.b_matrix();
        let (lambda, g) = match opts.regularize {
            Regularize::None => (0.0, f64::NAN),
            Regularize::Gcv | Regularize::Wgcv => {
                let w = if opts.regularize == Regularize::Gcv {
                    1.0
                } else {
                    opts.w
                };
                let t = direct_reg::svd(&b_mat)?;
                let mut rhs = vec![0.0; state.k() + 1];
                rhs[0] = state.beta1;
                let lambda = direct_reg::minimize_gcv(&t, &rhs, w)?;
                let g = direct_reg::gcv_value(&t, &rhs, lambda, w)?;
                (lambda, g)
            }
        };
        let y = projected_tikhonov(&b_mat, state.beta1, lambda)?;
        let mut x = vec![0.0; n];
        for (j, vj) in state.v.iter().enumerate() {
            let yj = y[j];
            for (xi, vji) in x.iter_mut().zip(vj) {
                *xi += yj * vji;
            }
        }
        let ax = a.apply(&x);
        let residual_norm = ax
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        result.iterations.push(HybridIter {
            lambda,
            gcv: g,
            residual_norm,
        });
        result.xs.push(x.clone());
        result.x = x;

        if !advanced {
            break;
        }
        if opts.regularize != Regularize::None {
            let g1 = *g_first.get_or_insert(g);
            if let Some(gp) = g_prev {
                if (g - gp).abs() <= opts.stop_tol * g1 {
                    flat_count += 1;
                    if flat_count >= 3 {
                        break;
                    }
                } else {
                    flat_count = 0;
                }
            }
            g_prev = Some(g);
        }
    }
    Ok(result)
}
