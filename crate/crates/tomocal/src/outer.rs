//! Outer alternating-minimization schemes: BCD and its separable variant,
//! Nesterov-accelerated ABCD, the fixed-point map of the image vector, and
//! Anderson acceleration with incrementally updated QR factors.

use crate::error::{Error, Result};
use crate::geometry::{norm2, relative_error, ActiveParams, AngleBlockPartition, GeometryParams};
use crate::krylov::{hybrid_lsqr, HybridOptions};
use crate::nls::{golden_parabolic_min, stencil_search_min};
use crate::projector::{assemble, build_block, DetectorSpec, SparseBlockOperator};
use rayon::prelude::*;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Incremental QR with column append (modified Gram-Schmidt) and first-column
// deletion (Givens rotations on the upper-Hessenberg remainder).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IncrementalQr {
    rows: usize,
    /// Orthonormal columns.
    q: Vec<Vec<f64>>,
    /// Upper-triangular factor, column-major; r[j] holds entries 0..=j.
    r: Vec<Vec<f64>>,
}

impl IncrementalQr {
    pub fn new(rows: usize) -> Self {
        IncrementalQr {
            rows,
            q: Vec::new(),
            r: Vec::new(),
        }
    }

    pub fn ncols(&self) -> usize {
        self.q.len()
    }

    /// Append a column on the right via two-pass modified Gram-Schmidt.
    /// Fails when the column is numerically in the span of the existing ones.
    pub fn append_column(&mut self, col: &[f64]) -> Result<()> {
        if col.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: col.len(),
            });
        }
        let col_norm = norm2(col);
        let mut w = col.to_vec();
        let k = self.ncols();
        let mut h = vec![0.0; k];
        for _ in 0..2 {
            for (j, qj) in self.q.iter().enumerate() {
                let dot: f64 = w.iter().zip(qj).map(|(a, b)| a * b).sum();
                h[j] += dot;
                for (wi, qi) in w.iter_mut().zip(qj) {
                    *wi -= dot * qi;
                }
            }
        }
        let rho = norm2(&w);
        if rho < 1e-14 * col_norm.max(1e-300) {
            return Err(Error::InvalidArgument(
                "appended column is numerically in the span of the factor".into(),
            ));
        }
        for wi in &mut w {
            *wi /= rho;
        }
        self.q.push(w);
        h.push(rho);
        self.r.push(h);
        Ok(())
    }

    /// Delete the leftmost column: R(:,2:k) is upper-Hessenberg; Givens
    /// rotations cancel its subdiagonal and are accumulated into Q.
    pub fn drop_first_column(&mut self) -> Result<()> {
        let k = self.ncols();
        if k == 0 {
            return Err(Error::InvalidArgument("no column to drop".into()));
        }
        self.r.remove(0);
        // Column j of the remainder now has entries 0..=j+1.
        for i in 0..self.r.len() {
            let a = self.r[i][i];
            let b = self.r[i][i + 1];
            let rad = (a * a + b * b).sqrt();
            let (c, s) = if rad == 0.0 {
                (1.0, 0.0)
            } else {
                (a / rad, b / rad)
            };
            for col in self.r[i..].iter_mut() {
                let (x, y) = (col[i], col[i + 1]);
                col[i] = c * x + s * y;
                col[i + 1] = -s * x + c * y;
            }
            // Q <- Q G^T on columns (i, i+1).
            for row in 0..self.rows {
                let (x, y) = (self.q[i][row], self.q[i + 1][row]);
                self.q[i][row] = c * x + s * y;
                self.q[i + 1][row] = -s * x + c * y;
            }
        }
        for (j, col) in self.r.iter_mut().enumerate() {
            col.truncate(j + 1);
        }
        self.q.pop();
        Ok(())
    }

    /// Least squares solution of min ||rhs - M gamma|| for the factored M.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let k = self.ncols();
        let mut qtb: Vec<f64> = self
            .q
            .iter()
            .map(|qj| qj.iter().zip(rhs).map(|(a, b)| a * b).sum())
            .collect();
        for i in (0..k).rev() {
            for j in (i + 1)..k {
                qtb[i] -= self.r[j][i] * qtb[j];
            }
            qtb[i] /= self.r[i][i];
        }
        qtb
    }

    /// Crude condition estimate from the triangular diagonal.
    pub fn condition_estimate(&self) -> f64 {
        let diags: Vec<f64> = (0..self.ncols()).map(|j| self.r[j][j].abs()).collect();
        let max = diags.iter().cloned().fold(0.0f64, f64::max);
        let min = diags.iter().cloned().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Reconstruct the factored matrix (tests).
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        (0..self.ncols())
            .map(|j| {
                let mut col = vec![0.0; self.rows];
                for (i, &rij) in self.r[j].iter().enumerate() {
                    for row in 0..self.rows {
                        col[row] += self.q[i][row] * rij;
                    }
                }
                col
            })
            .collect()
    }

    pub fn q_columns(&self) -> &[Vec<f64>] {
        &self.q
    }
}

// ---------------------------------------------------------------------------
// Anderson acceleration window.
// ---------------------------------------------------------------------------

/// Recover the simplex-constrained coefficients alpha from the unconstrained
/// gamma: alpha_0 = gamma_0, alpha_i = gamma_i - gamma_{i-1},
/// alpha_m = 1 - gamma_{m-1}.
pub fn alpha_from_gamma(gamma: &[f64]) -> Vec<f64> {
    let m = gamma.len();
    if m == 0 {
        return vec![1.0];
    }
    let mut alpha = Vec::with_capacity(m + 1);
    alpha.push(gamma[0]);
    for i in 1..m {
        alpha.push(gamma[i] - gamma[i - 1]);
    }
    alpha.push(1.0 - gamma[m - 1]);
    alpha
}

/// Sliding window of residual differences for Anderson mixing, with the QR
/// factors of the difference matrix maintained incrementally.
#[derive(Debug, Clone)]
pub struct AndersonWindow {
    m: usize,
    qr: IncrementalQr,
    dg_cols: Vec<Vec<f64>>,
    prev_f: Option<Vec<f64>>,
    prev_g: Option<Vec<f64>>,
}

impl AndersonWindow {
    pub fn new(m: usize, dim: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("memory size must be >= 1".into()));
        }
        Ok(AndersonWindow {
            m,
            qr: IncrementalQr::new(dim),
            dg_cols: Vec::new(),
            prev_f: None,
            prev_g: None,
        })
    }

    pub fn len(&self) -> usize {
        self.qr.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn drop_oldest(&mut self) {
        let _ = self.qr.drop_first_column();
        self.dg_cols.remove(0);
    }

    /// Given the iterate x_k and its fixed-point image g(x_k), produce the
    /// accelerated x_{k+1} = g(x_k) - G_k gamma and the gamma used.
    pub fn advance(&mut self, x_k: &[f64], g_xk: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let f_k: Vec<f64> = g_xk.iter().zip(x_k).map(|(g, x)| g - x).collect();
        if let (Some(pf), Some(pg)) = (&self.prev_f, &self.prev_g) {
            let df: Vec<f64> = f_k.iter().zip(pf).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = g_xk.iter().zip(pg).map(|(a, b)| a - b).collect();
            loop {
                match self.qr.append_column(&df) {
                    Ok(()) => {
                        self.dg_cols.push(dg);
                        break;
                    }
                    Err(_) if self.len() > 0 => self.drop_oldest(),
                    Err(_) => break,
                }
            }
            while self.len() > self.m {
                self.drop_oldest();
            }
            while self.len() > 1 && self.qr.condition_estimate() > 1e12 {
                self.drop_oldest();
            }
        }
        let gamma = if self.len() > 0 {
            self.qr.solve(&f_k)
        } else {
            Vec::new()
        };
        let mut x_next = g_xk.to_vec();
        for (j, gj) in gamma.iter().enumerate() {
            for (xi, di) in x_next.iter_mut().zip(&self.dg_cols[j]) {
                *xi -= gj * di;
            }
        }
        self.prev_f = Some(f_k);
        self.prev_g = Some(g_xk.to_vec());
        (x_next, gamma)
    }
}

// ---------------------------------------------------------------------------
// Momentum helpers (ABCD).
// ---------------------------------------------------------------------------

/// t_k = (1 + sqrt(1 + 4 t_{k-1}^2)) / 2, starting from t_0 = 1.
pub fn momentum_next(t_prev: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffMode {
    /// Classical momentum: w_k = w~_k + ((t_{k-1} - 1)/t_k)(w~_k - w~_{k-1}).
    Standard,
    /// Literal reading of the update line with the undefined forward index
    /// taken as t_k: w_k = w~_{k-1} + (t_{k-1}/t_k)(w~_k - w~_{k-1}).
    PaperLiteral,
}

/// Extrapolate one vector family per the chosen coefficient mode.
pub fn extrapolate(
    prev_tilde: &[f64],
    cur_tilde: &[f64],
    t_prev: f64,
    t_cur: f64,
    mode: CoeffMode,
) -> Vec<f64> {
    let coeff = match mode {
        CoeffMode::Standard => (t_prev - 1.0) / t_cur,
        CoeffMode::PaperLiteral => t_prev / t_cur,
    };
    match mode {
        CoeffMode::Standard => cur_tilde
            .iter()
            .zip(prev_tilde)
            .map(|(c, p)| c + coeff * (c - p))
            .collect(),
        CoeffMode::PaperLiteral => cur_tilde
            .iter()
            .zip(prev_tilde)
            .map(|(c, p)| p + coeff * (c - p))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Outer solve configuration, trace, and driver.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlsSolver {
    Stencil,
    Golden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccelMode {
    XOnly,
    Both,
}

#[derive(Debug, Clone)]
pub struct OuterOptions {
    pub max_outer: usize,
    /// Relative x-change stopping tolerance.
    pub tol: f64,
    pub separable: bool,
    /// Objective-evaluation budget per geometry solver call.
    pub budget: usize,
    pub nls_solver: NlsSolver,
    /// Bracket tolerance for the golden-section solver.
    pub golden_tol: f64,
    pub hybrid: HybridOptions,
    /// Anderson memory size.
    pub memory: usize,
    pub coeff_mode: CoeffMode,
    pub accel: AccelMode,
    /// Solve independent blocks concurrently (results are identical to
    /// sequential execution).
    pub parallel: bool,
}

impl Default for OuterOptions {
    fn default() -> Self {
        OuterOptions {
            max_outer: 20,
            tol: 1e-4,
            separable: true,
            budget: 100,
            nls_solver: NlsSolver::Stencil,
            golden_tol: 1e-4,
            hybrid: HybridOptions::default(),
            memory: 5,
            coeff_mode: CoeffMode::Standard,
            accel: AccelMode::XOnly,
            parallel: true,
        }
    }
}

/// Ground truth for error reporting.
#[derive(Debug, Clone)]
pub struct Truth {
    pub x_true: Vec<f64>,
    pub d_true: Vec<f64>,
    pub dtheta_true: Vec<f64>,
}

/// One completed outer iteration (row 0 holds the initial guesses).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub rel_err_d: Option<f64>,
    pub rel_err_dtheta: Option<f64>,
    pub rel_err_x: Option<f64>,
    pub secs_geometry: f64,
    pub secs_image: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub x: Vec<f64>,
    pub r: GeometryParams,
    pub trace: SolveTrace,
}

/// Result of one application of the fixed-point map g.
#[derive(Debug, Clone)]
pub struct FixedPointStep {
    pub x: Vec<f64>,
    pub r: GeometryParams,
    pub operator: SparseBlockOperator,
    pub secs_geometry: f64,
    pub secs_image: f64,
}

/// A fixed tomography problem instance the outer schemes operate on.
pub struct OuterProblem<'a> {
    pub partition: &'a AngleBlockPartition,
    pub det: DetectorSpec,
    pub side: usize,
    pub b: &'a [f64],
    pub truth: Option<&'a Truth>,
}

fn pair_from(active: ActiveParams, template: (f64, f64), p: &[f64]) -> (f64, f64) {
    match active {
        ActiveParams::DistanceOnly => (p[0], template.1),
        ActiveParams::AngleOnly => (template.0, p[0]),
        ActiveParams::Both => (p[0], p[1]),
    }
}

impl<'a> OuterProblem<'a> {
    fn block_row_range(&self, i: usize) -> std::ops::Range<usize> {
        let views = self.partition.views_of_block(i);
        (views.start * self.det.n_det)..(views.end * self.det.n_det)
    }

    /// Regularized image solve at fixed geometry.
    pub fn image_step(
        &self,
        r: &GeometryParams,
        opts: &HybridOptions,
    ) -> Result<(Vec<f64>, SparseBlockOperator)> {
        let op = assemble(self.partition, r, &self.det, self.side)
            .map_err(|e| e.in_stage("projector"))?;
        if norm2(self.b) == 0.0 {
            return Ok((vec![0.0; op.n_cols], op));
        }
        let res = hybrid_lsqr(&op, self.b, opts).map_err(|e| e.in_stage("krylov"))?;
        Ok((res.x, op))
    }

    fn solve_block(
        &self,
        i: usize,
        x: &[f64],
        r_prev: &GeometryParams,
        opts: &OuterOptions,
    ) -> Result<Vec<f64>> {
        let b_i = &self.b[self.block_row_range(i)];
        let bounds = r_prev.block_bounds(i);
        let start = r_prev.block_params(i);
        let template = r_prev.block_pair(i);
        let active = r_prev.active;
        let objective = |p: &[f64]| -> f64 {
            match build_block(
                self.partition,
                i,
                pair_from(active, template, p),
                &self.det,
                self.side,
            ) {
                Ok(blk) => blk.residual_norm_sq(x, b_i),
                Err(_) => f64::INFINITY,
            }
        };
        match opts.nls_solver {
            NlsSolver::Stencil => {
                let res = stencil_search_min(objective, &bounds, opts.budget, Some(&start))
                    .map_err(|e| e.in_stage("nls"))?;
                Ok(res.argmin)
            }
            NlsSolver::Golden => {
                if bounds.dim() != 1 {
                    return Err(Error::InvalidArgument(
                        "golden-section geometry solver supports one parameter per block".into(),
                    ));
                }
                let res = golden_parabolic_min(
                    |t| objective(&[t]),
                    bounds.lo[0],
                    bounds.hi[0],
                    opts.golden_tol,
                    opts.budget,
                )
                .map_err(|e| e.in_stage("nls"))?;
                Ok(res.argmin)
            }
        }
    }

    /// Per-block geometry solves (independent; optionally concurrent with
    /// results merged in block order).
    pub fn geometry_step_separable(
        &self,
        x: &[f64],
        r_prev: &GeometryParams,
        opts: &OuterOptions,
    ) -> Result<GeometryParams> {
        let n = r_prev.n_blocks();
        let results: Result<Vec<Vec<f64>>> = if opts.parallel {
            (0..n)
                .into_par_iter()
                .map(|i| self.solve_block(i, x, r_prev, opts))
                .collect()
        } else {
            (0..n)
                .map(|i| self.solve_block(i, x, r_prev, opts))
                .collect()
        };
        let mut r = r_prev.clone();
        for (i, p) in results?.into_iter().enumerate() {
            r.set_block_params(i, &p);
        }
        Ok(r)
    }

    /// One joint geometry solve over all blocks' parameters at once.
    pub fn geometry_step_joint(
        &self,
        x: &[f64],
        r_prev: &GeometryParams,
        opts: &OuterOptions,
    ) -> Result<GeometryParams> {
        let bounds = r_prev.flat_bounds();
        let start = r_prev.flat_active();
        let template = r_prev.clone();
        let objective = |p: &[f64]| -> f64 {
            let mut cand = template.clone();
            cand.set_flat_active(p);
            match assemble(self.partition, &cand, &self.det, self.side) {
                Ok(op) => {
                    let mut acc = 0.0;
                    let mut off = 0;
                    for blk in &op.blocks {
                        acc += blk.residual_norm_sq(x, &self.b[off..off + blk.n_rows]);
                        off += blk.n_rows;
                    }
                    acc
                }
                Err(_) => f64::INFINITY,
            }
        };
        let argmin = match opts.nls_solver {
            NlsSolver::Golden if bounds.dim() == 1 => {
                golden_parabolic_min(
                    |t| objective(&[t]),
                    bounds.lo[0],
                    bounds.hi[0],
                    opts.golden_tol,
                    opts.budget,
                )
                .map_err(|e| e.in_stage("nls"))?
                .argmin
            }
            _ => {
                stencil_search_min(objective, &bounds, opts.budget, Some(&start))
                    .map_err(|e| e.in_stage("nls"))?
                    .argmin
            }
        };
        let mut r = r_prev.clone();
        r.set_flat_active(&argmin);
        Ok(r)
    }

    fn geometry_step(
        &self,
        x: &[f64],
        r_prev: &GeometryParams,
        opts: &OuterOptions,
    ) -> Result<GeometryParams> {
        if opts.separable {
            self.geometry_step_separable(x, r_prev, opts)
        } else {
            self.geometry_step_joint(x, r_prev, opts)
        }
    }

    fn objective_value(&self, op: &SparseBlockOperator, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut off = 0;
        for blk in &op.blocks {
            acc += blk.residual_norm_sq(x, &self.b[off..off + blk.n_rows]);
            off += blk.n_rows;
        }
        acc.sqrt()
    }

    fn trace_row(
        &self,
        iter: usize,
        x: &[f64],
        r: &GeometryParams,
        objective: f64,
        secs_geometry: f64,
        secs_image: f64,
    ) -> TraceRow {
        let (mut rel_err_d, mut rel_err_dtheta, mut rel_err_x) = (None, None, None);
        if let Some(truth) = self.truth {
            rel_err_x = relative_error(x, &truth.x_true).ok();
            if r.active.distance_active() {
                rel_err_d = relative_error(&r.d, &truth.d_true).ok();
            }
            if r.active.angle_active() {
                rel_err_dtheta = relative_error(&r.dtheta, &truth.dtheta_true).ok();
            }
        }
        TraceRow {
            iter,
            rel_err_d,
            rel_err_dtheta,
            rel_err_x,
            secs_geometry,
            secs_image,
            objective,
        }
    }

    /// Block coordinate descent (Algorithm: alternate geometry and image
    /// solves). `opts.separable` chooses per-block vs joint geometry steps.
    pub fn bcd(&self, r0: &GeometryParams, opts: &OuterOptions) -> Result<RunResult> {
        let t = Instant::now();
        let (x0, op0) = self.image_step(r0, &opts.hybrid)?;
        let obj0 = self.objective_value(&op0, &x0);
        let mut trace = SolveTrace::default();
        trace
            .rows
            .push(self.trace_row(0, &x0, r0, obj0, 0.0, t.elapsed().as_secs_f64()));

        let mut x = x0;
        let mut r = r0.clone();
        for k in 1..=opts.max_outer {
            let tg = Instant::now();
            r = self.geometry_step(&x, &r, opts)?;
            let secs_geometry = tg.elapsed().as_secs_f64();
            let ti = Instant::now();
            let (x_new, op) = self.image_step(&r, &opts.hybrid)?;
            let secs_image = ti.elapsed().as_secs_f64();
            let obj = self.objective_value(&op, &x_new);
            trace
                .rows
                .push(self.trace_row(k, &x_new, &r, obj, secs_geometry, secs_image));
            let change = diff_norm(&x_new, &x) / norm2(&x).max(1e-300);
            x = x_new;
            if change < opts.tol {
                break;
            }
        }
        Ok(RunResult { x, r, trace })
    }

    /// Accelerated BCD with Nesterov-style momentum on x (and optionally r).
    pub fn abcd(&self, r0: &GeometryParams, opts: &OuterOptions) -> Result<RunResult> {
        let t = Instant::now();
        let (x0, op0) = self.image_step(r0, &opts.hybrid)?;
        let obj0 = self.objective_value(&op0, &x0);
        let mut trace = SolveTrace::default();
        trace
            .rows
            .push(self.trace_row(0, &x0, r0, obj0, 0.0, t.elapsed().as_secs_f64()));

        let mut x = x0.clone();
        let mut r = r0.clone();
        let mut prev_tilde_x = x0;
        let mut prev_tilde_r = r0.clone();
        let mut t_prev = 1.0f64;
        for k in 1..=opts.max_outer {
            let tg = Instant::now();
            let r_tilde = self.geometry_step(&x, &r, opts)?;
            let secs_geometry = tg.elapsed().as_secs_f64();
            let ti = Instant::now();
            let (x_tilde, op_tilde) = self.image_step(&r_tilde, &opts.hybrid)?;
            let secs_image = ti.elapsed().as_secs_f64();

            let t_cur = momentum_next(t_prev);
            let x_new = extrapolate(&prev_tilde_x, &x_tilde, t_prev, t_cur, opts.coeff_mode);
            let (r_new, op_for_obj) = match opts.accel {
                AccelMode::XOnly => (r_tilde.clone(), op_tilde),
                AccelMode::Both => {
                    let flat = extrapolate(
                        &prev_tilde_r.flat_active(),
                        &r_tilde.flat_active(),
                        t_prev,
                        t_cur,
                        opts.coeff_mode,
                    );
                    let mut r_new = r_tilde.clone();
                    r_new.set_flat_active(&flat);
                    r_new.clip_to_bounds();
                    let op = assemble(self.partition, &r_new, &self.det, self.side)
                        .map_err(|e| e.in_stage("projector"))?;
                    (r_new, op)
                }
            };
            let obj = self.objective_value(&op_for_obj, &x_new);
            trace
                .rows
                .push(self.trace_row(k, &x_new, &r_new, obj, secs_geometry, secs_image));

            let change = diff_norm(&x_new, &x) / norm2(&x).max(1e-300);
            prev_tilde_x = x_tilde;
            prev_tilde_r = r_tilde;
            t_prev = t_cur;
            x = x_new;
            r = r_new;
            if change < opts.tol {
                break;
            }
        }
        Ok(RunResult { x, r, trace })
    }

    /// One application of the fixed-point map of the image vector:
    /// a separable geometry step followed by a regularized image step.
    pub fn fixed_point(
        &self,
        x: &[f64],
        r_warm: &GeometryParams,
        opts: &OuterOptions,
    ) -> Result<FixedPointStep> {
        let tg = Instant::now();
        let r = self.geometry_step_separable(x, r_warm, opts)?;
        let secs_geometry = tg.elapsed().as_secs_f64();
        let ti = Instant::now();
        let (x_new, operator) = self.image_step(&r, &opts.hybrid)?;
        let secs_image = ti.elapsed().as_secs_f64();
        Ok(FixedPointStep {
            x: x_new,
            r,
            operator,
            secs_geometry,
            secs_image,
        })
    }

    /// Anderson acceleration of the fixed-point iteration.
    pub fn anderson(&self, r0: &GeometryParams, opts: &OuterOptions) -> Result<RunResult> {
        let t = Instant::now();
        let (x0, op0) = self.image_step(r0, &opts.hybrid)?;
        let obj0 = self.objective_value(&op0, &x0);
        let mut trace = SolveTrace::default();
        trace
            .rows
            .push(self.trace_row(0, &x0, r0, obj0, 0.0, t.elapsed().as_secs_f64()));

        let mut window = AndersonWindow::new(opts.memory, x0.len())?;
        let mut x = x0;
        let mut r = r0.clone();
        for k in 1..=opts.max_outer {
            let step = self.fixed_point(&x, &r, opts)?;
            r = step.r.clone();
            let (x_next, _gamma) = window.advance(&x, &step.x);
            let obj = self.objective_value(&step.operator, &x_next);
            trace.rows.push(self.trace_row(
                k,
                &x_next,
                &r,
                obj,
                step.secs_geometry,
                step.secs_image,
            ));
            let change = diff_norm(&x_next, &x) / norm2(&x).max(1e-300);
            x = x_next;
            if change < opts.tol {
                break;
            }
        }
        Ok(RunResult { x, r, trace })
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundBox;
    use crate::krylov::Regularize;
    use crate::phantom::shepp_logan;
    use crate::projector::apply;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    // ---- incremental QR ----

    fn random_cols(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cols)
            .map(|_| (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn assert_factors_match(qr: &IncrementalQr, cols: &[Vec<f64>], tol: f64) {
        let rec = qr.matrix();
        assert_eq!(rec.len(), cols.len());
        for (a, b) in rec.iter().zip(cols) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= tol, "{x} vs {y}");
            }
        }
        // Orthonormality of Q.
        let q = qr.q_columns();
        for i in 0..q.len() {
            for j in 0..q.len() {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn qr_append_first_column() {
        let mut qr = IncrementalQr::new(3);
        qr.append_column(&[3.0, 0.0, 4.0]).unwrap();
        assert_eq!(qr.ncols(), 1);
        assert!((qr.r[0][0] - 5.0).abs() < 1e-14);
        for (q, e) in qr.q[0].iter().zip([0.6, 0.0, 0.8]) {
            assert!((q - e).abs() < 1e-14);
        }
    }

    #[test]
    fn qr_appends_match_fresh_factorization() {
        let cols = random_cols(10, 4, 1);
        let mut qr = IncrementalQr::new(10);
        for c in &cols {
            qr.append_column(c).unwrap();
        }
        assert_factors_match(&qr, &cols, 1e-10);
        // Compare against a fresh QR up to column signs.
        let mat = DMatrix::from_fn(10, 4, |r, c| cols[c][r]);
        let fresh = mat.qr();
        let fresh_q = fresh.q();
        for j in 0..4 {
            let dot: f64 = (0..10).map(|r| fresh_q[(r, j)] * qr.q[j][r]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-10, "column {j} not aligned");
        }
    }

    #[test]
    fn qr_append_then_drop_first() {
        let cols = random_cols(9, 5, 2);
        let mut qr = IncrementalQr::new(9);
        for c in &cols {
            qr.append_column(c).unwrap();
        }
        qr.drop_first_column().unwrap();
        assert_factors_match(&qr, &cols[1..], 1e-10);
        qr.drop_first_column().unwrap();
        assert_factors_match(&qr, &cols[2..], 1e-10);
        // Interleave: append another column after dropping.
        let extra: Vec<f64> = (0..9).map(|i| (i as f64 * 0.77).cos()).collect();
        qr.append_column(&extra).unwrap();
        let mut expect: Vec<Vec<f64>> = cols[2..].to_vec();
        expect.push(extra);
        assert_factors_match(&qr, &expect, 1e-10);
    }

    #[test]
    fn qr_flags_dependent_column() {
        let mut qr = IncrementalQr::new(4);
        qr.append_column(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(qr.append_column(&[2.0, 4.0, 6.0, 8.0]).is_err());
        assert_eq!(qr.ncols(), 1);
    }

    #[test]
    fn qr_least_squares_solve() {
        let cols = random_cols(8, 3, 3);
        let mut qr = IncrementalQr::new(8);
        for c in &cols {
            qr.append_column(c).unwrap();
        }
        let rhs: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).sin()).collect();
        let gamma = qr.solve(&rhs);
        // Normal-equations oracle.
        let mat = DMatrix::from_fn(8, 3, |r, c| cols[c][r]);
        let sol = (mat.transpose() * &mat)
            .lu()
            .solve(&(mat.transpose() * DVector::from_column_slice(&rhs)))
            .unwrap();
        for i in 0..3 {
            assert!((gamma[i] - sol[i]).abs() < 1e-10);
        }
    }

    // ---- Anderson ----

    #[test]
    fn anderson_constant_map_converges_in_two() {
        let c = vec![1.0, -2.0, 0.5];
        let g = |_: &[f64]| c.clone();
        let mut window = AndersonWindow::new(1, 3).unwrap();
        let x0 = vec![0.0, 0.0, 0.0];
        let (x1, _) = window.advance(&x0, &g(&x0));
        assert_eq!(x1, c);
        let (x2, _) = window.advance(&x1, &g(&x1));
        assert_eq!(x2, c);
    }

    #[test]
    fn anderson_affine_map_finite_convergence() {
        // g(x) = M x + c with spectral radius < 1; x* = (I - M)^{-1} c.
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.5, 0.1, 0.0, 0.05, //
                0.02, 0.4, 0.1, 0.0, //
                0.0, 0.2, 0.3, 0.1, //
                0.1, 0.0, 0.05, 0.45,
            ],
        );
        let c = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let x_star = (DMatrix::identity(4, 4) - &m).lu().solve(&c).unwrap();
        let g = |x: &[f64]| -> Vec<f64> {
            (&m * DVector::from_column_slice(x) + &c)
                .iter()
                .copied()
                .collect()
        };
        let mut window = AndersonWindow::new(4, 4).unwrap();
        let mut x = vec![0.0; 4];
        let mut best = f64::INFINITY;
        for k in 0..5 {
            let (next, _) = window.advance(&x, &g(&x));
            x = next;
            let err = x
                .iter()
                .zip(x_star.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(err);
            assert!(window.len() <= 4.min(k + 1));
        }
        assert!(best < 1e-8, "best error {best}");
    }

    #[test]
    fn anderson_window_size_tracks_min_m_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Distinct contraction rates per coordinate so that no finite window
        // reaches the fixed point exactly.
        let rates = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let g = move |x: &[f64]| -> Vec<f64> {
            x.iter().zip(rates).map(|(v, a)| a * v + 1.0).collect()
        };
        let m = 3;
        let mut window = AndersonWindow::new(m, 6).unwrap();
        let mut x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for k in 0..8 {
            let (next, _) = window.advance(&x, &g(&x));
            x = next;
            // The first call has no previous residual, so the k-th call
            // leaves min(m, k) difference columns behind.
            assert_eq!(window.len(), m.min(k));
        }
    }

    #[test]
    fn gamma_to_alpha_matches_constrained_oracle() {
        // Random 6x3 residual window F = (f_0, f_1, f_2); gamma solves
        // min ||f_2 - DF gamma|| with DF = (f_1 - f_0, f_2 - f_1).
        let f_cols = random_cols(6, 3, 9);
        let mut qr = IncrementalQr::new(6);
        for w in f_cols.windows(2) {
            let df: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
            qr.append_column(&df).unwrap();
        }
        let gamma = qr.solve(&f_cols[2]);
        let alpha = alpha_from_gamma(&gamma);
        assert_eq!(alpha.len(), 3);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Elimination oracle: substitute alpha_2 = 1 - alpha_0 - alpha_1 and
        // solve the unconstrained least squares min ||F alpha||.
        let reduced = DMatrix::from_fn(6, 2, |r, c| f_cols[c][r] - f_cols[2][r]);
        let rhs = DVector::from_fn(6, |r, _| -f_cols[2][r]);
        let sol = (reduced.transpose() * &reduced)
            .lu()
            .solve(&(reduced.transpose() * rhs))
            .unwrap();
        let oracle = [sol[0], sol[1], 1.0 - sol[0] - sol[1]];
        for (a, o) in alpha.iter().zip(oracle) {
            assert!((a - o).abs() < 1e-8, "{a} vs {o}");
        }
    }

    // ---- momentum ----

    #[test]
    fn momentum_sequence_values() {
        let t1 = momentum_next(1.0);
        assert!((t1 - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);
        let t2 = momentum_next(t1);
        assert!((t2 - 2.193_527_085_331_054).abs() < 1e-12);
    }

    #[test]
    fn momentum_growth_bound() {
        let mut t = 1.0;
        for k in 0..=100 {
            assert!(t >= (k as f64 + 2.0) / 2.0 - 1e-12, "k={k} t={t}");
            t = momentum_next(t);
        }
    }

    #[test]
    fn extrapolation_stationary_fixed_point() {
        let w = vec![1.0, -2.0, 0.3];
        for mode in [CoeffMode::Standard, CoeffMode::PaperLiteral] {
            let out = extrapolate(&w, &w, 1.3, 1.9, mode);
            for (a, b) in out.iter().zip(&w) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    // ---- separability equivalence on synthetic quadratics ----

    #[test]
    fn stencil_joint_matches_per_block_on_separable_quadratic() {
        let f = |p: &[f64]| (p[0] - 0.3).powi(2) + (p[1] + 0.4).powi(2);
        let joint = stencil_search_min(
            f,
            &BoundBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
            100_000,
            None,
        )
        .unwrap();
        let b0 = stencil_search_min(
            |p: &[f64]| (p[0] - 0.3).powi(2),
            &BoundBox::uniform(-1.0, 1.0, 1).unwrap(),
            100_000,
            None,
        )
        .unwrap();
        let b1 = stencil_search_min(
            |p: &[f64]| (p[0] + 0.4).powi(2),
            &BoundBox::uniform(-1.0, 1.0, 1).unwrap(),
            100_000,
            None,
        )
        .unwrap();
        assert!((joint.argmin[0] - b0.argmin[0]).abs() < 1e-4);
        assert!((joint.argmin[1] - b1.argmin[0]).abs() < 1e-4);
    }

    // ---- tomography fixture ----

    struct Fixture {
        partition: AngleBlockPartition,
        det: DetectorSpec,
        side: usize,
        truth: Truth,
        b: Vec<f64>,
        r0: GeometryParams,
    }

    fn fixture(side: usize, n_views: usize, n_blocks: usize) -> Fixture {
        // Views spread uniformly over the full circle.
        let angles: Vec<f64> = (0..n_views)
            .map(|v| 360.0 * v as f64 / n_views as f64)
            .collect();
        let partition = AngleBlockPartition::with_angles(angles, n_blocks).unwrap();
        let det = DetectorSpec::default_for(side);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_true: Vec<f64> = (0..n_blocks).map(|_| rng.gen_range(1.5..2.5)).collect();
        let dtheta_true = vec![0.0; n_blocks];
        let r_true = GeometryParams::new(
            d_true.clone(),
            dtheta_true.clone(),
            ActiveParams::DistanceOnly,
            BoundBox::uniform(1.5, 2.5, n_blocks).unwrap(),
            BoundBox::uniform(-0.5, 0.5, n_blocks).unwrap(),
        )
        .unwrap();
        let x_true = shepp_logan(side).unwrap().values;
        let a = assemble(&partition, &r_true, &det, side).unwrap();
        let b = apply(&a, &x_true).unwrap();
        let r0 = GeometryParams::new(
            vec![2.0; n_blocks],
            vec![0.0; n_blocks],
            ActiveParams::DistanceOnly,
            BoundBox::uniform(1.5, 2.5, n_blocks).unwrap(),
            BoundBox::uniform(-0.5, 0.5, n_blocks).unwrap(),
        )
        .unwrap();
        Fixture {
            partition,
            det,
            side,
            truth: Truth {
                x_true,
                d_true,
                dtheta_true,
            },
            b,
            r0,
        }
    }

    impl Fixture {
        fn problem(&self) -> OuterProblem<'_> {
            OuterProblem {
                partition: &self.partition,
                det: self.det,
                side: self.side,
                b: &self.b,
                truth: Some(&self.truth),
            }
        }

        fn r_true(&self) -> GeometryParams {
            let n = self.truth.d_true.len();
            GeometryParams::new(
                self.truth.d_true.clone(),
                self.truth.dtheta_true.clone(),
                ActiveParams::DistanceOnly,
                BoundBox::uniform(1.5, 2.5, n).unwrap(),
                BoundBox::uniform(-0.5, 0.5, n).unwrap(),
            )
            .unwrap()
        }
    }

    #[test]
    fn image_step_consistent_system() {
        let fx = fixture(12, 24, 2);
        let p = fx.problem();
        let opts = HybridOptions {
            regularize: Regularize::None,
            max_k: 200,
            ..Default::default()
        };
        let (x, _) = p.image_step(&fx.r_true(), &opts).unwrap();
        let err = relative_error(&x, &fx.truth.x_true).unwrap();
        assert!(err < 0.05, "reconstruction error {err}");
    }

    #[test]
    fn image_step_zero_data() {
        let fx = fixture(8, 8, 2);
        let b = vec![0.0; fx.b.len()];
        let p = OuterProblem {
            partition: &fx.partition,
            det: fx.det,
            side: fx.side,
            b: &b,
            truth: None,
        };
        let (x, _) = p.image_step(&fx.r0, &HybridOptions::default()).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_distances_degrade_reconstruction() {
        let fx = fixture(16, 40, 4);
        let p = fx.problem();
        let opts = HybridOptions::default();
        let (x_good, _) = p.image_step(&fx.r_true(), &opts).unwrap();
        let (x_bad, _) = p.image_step(&fx.r0, &opts).unwrap();
        let e_good = relative_error(&x_good, &fx.truth.x_true).unwrap();
        let e_bad = relative_error(&x_bad, &fx.truth.x_true).unwrap();
        assert!(
            e_bad > 2.0 * e_good,
            "good {e_good} vs wrong-geometry {e_bad}"
        );
    }

    #[test]
    fn separable_recovers_distances_from_true_image() {
        let fx = fixture(12, 16, 2);
        let p = fx.problem();
        let opts = OuterOptions {
            budget: 200,
            ..Default::default()
        };
        let r = p
            .geometry_step_separable(&fx.truth.x_true, &fx.r0, &opts)
            .unwrap();
        for i in 0..2 {
            assert!(
                (r.d[i] - fx.truth.d_true[i]).abs() < 0.02,
                "block {i}: {} vs {}",
                r.d[i],
                fx.truth.d_true[i]
            );
            // Per-block grid-search oracle on the same objective.
            let b_i = &fx.b[p.block_row_range(i)];
            let mut best = (f64::INFINITY, 0.0);
            for g in 0..400 {
                let d = 1.5 + (g as f64 + 0.5) / 400.0;
                let blk = build_block(&fx.partition, i, (d, 0.0), &fx.det, fx.side).unwrap();
                let v = blk.residual_norm_sq(&fx.truth.x_true, b_i);
                if v < best.0 {
                    best = (v, d);
                }
            }
            assert!((r.d[i] - best.1).abs() < 0.02, "grid oracle block {i}");
        }
    }

    #[test]
    fn zero_image_leaves_start_unchanged() {
        let fx = fixture(8, 8, 2);
        let p = fx.problem();
        let zero = vec![0.0; 64];
        let r = p
            .geometry_step_separable(&zero, &fx.r0, &OuterOptions::default())
            .unwrap();
        assert_eq!(r.d, fx.r0.d);
        assert_eq!(r.dtheta, fx.r0.dtheta);
    }

    #[test]
    fn concurrent_and_sequential_blocks_identical() {
        let fx = fixture(10, 12, 3);
        let p = fx.problem();
        let par = OuterOptions {
            parallel: true,
            ..Default::default()
        };
        let seq = OuterOptions {
            parallel: false,
            ..Default::default()
        };
        let r_par = p
            .geometry_step_separable(&fx.truth.x_true, &fx.r0, &par)
            .unwrap();
        let r_seq = p
            .geometry_step_separable(&fx.truth.x_true, &fx.r0, &seq)
            .unwrap();
        assert_eq!(r_par, r_seq);
    }

    #[test]
    fn joint_single_block_equals_separable() {
        let fx = fixture(10, 8, 1);
        let p = fx.problem();
        let opts = OuterOptions::default();
        let r_sep = p
            .geometry_step_separable(&fx.truth.x_true, &fx.r0, &opts)
            .unwrap();
        let r_joint = p
            .geometry_step_joint(&fx.truth.x_true, &fx.r0, &opts)
            .unwrap();
        assert_eq!(r_sep, r_joint);
    }

    #[test]
    fn joint_budget_one_returns_start() {
        let fx = fixture(8, 8, 2);
        let p = fx.problem();
        let opts = OuterOptions {
            budget: 1,
            ..Default::default()
        };
        let r = p
            .geometry_step_joint(&fx.truth.x_true, &fx.r0, &opts)
            .unwrap();
        assert_eq!(r.d, fx.r0.d);
    }

    #[test]
    fn joint_objective_not_better_than_separable() {
        let fx = fixture(12, 16, 2);
        let p = fx.problem();
        let opts = OuterOptions::default();
        let x = &fx.truth.x_true;
        let obj = |r: &GeometryParams| {
            let op = assemble(&fx.partition, r, &fx.det, fx.side).unwrap();
            p.objective_value(&op, x)
        };
        let r_sep = p.geometry_step_separable(x, &fx.r0, &opts).unwrap();
        let r_joint = p.geometry_step_joint(x, &fx.r0, &opts).unwrap();
        assert!(obj(&r_joint) >= obj(&r_sep) - 1e-12);
    }

    #[test]
    fn geometry_step_never_worsens_objective() {
        let fx = fixture(12, 16, 2);
        let p = fx.problem();
        let opts = OuterOptions::default();
        let (x0, op0) = p.image_step(&fx.r0, &opts.hybrid).unwrap();
        let before = p.objective_value(&op0, &x0);
        let r1 = p.geometry_step_separable(&x0, &fx.r0, &opts).unwrap();
        let op1 = assemble(&fx.partition, &r1, &fx.det, fx.side).unwrap();
        let after = p.objective_value(&op1, &x0);
        assert!(after <= before + 1e-12, "{after} vs {before}");
    }

    #[test]
    fn bcd_fixed_point_at_truth() {
        let fx = fixture(10, 12, 2);
        let p = fx.problem();
        let opts = OuterOptions {
            max_outer: 3,
            ..Default::default()
        };
        let res = p.bcd(&fx.r_true(), &opts).unwrap();
        let err = relative_error(&res.r.d, &fx.truth.d_true).unwrap();
        assert!(err < 0.02, "drifted from the true geometry: {err}");
        assert_eq!(res.trace.rows[0].iter, 0);
    }

    #[test]
    fn fixed_point_composition_matches_bcd_iterates() {
        let fx = fixture(10, 12, 2);
        let p = fx.problem();
        let opts = OuterOptions {
            max_outer: 2,
            tol: 0.0,
            ..Default::default()
        };
        let bcd = p.bcd(&fx.r0, &opts).unwrap();
        let (x0, _) = p.image_step(&fx.r0, &opts.hybrid).unwrap();
        let s1 = p.fixed_point(&x0, &fx.r0, &opts).unwrap();
        let s2 = p.fixed_point(&s1.x, &s1.r, &opts).unwrap();
        assert_eq!(s2.x, bcd.x);
        assert_eq!(s2.r, bcd.r);
    }

    #[test]
    fn fixed_point_near_truth_is_stable() {
        let fx = fixture(12, 16, 2);
        let p = fx.problem();
        let opts = OuterOptions {
            hybrid: HybridOptions {
                regularize: Regularize::None,
                max_k: 200,
                ..Default::default()
            },
            ..Default::default()
        };
        let step = p
            .fixed_point(&fx.truth.x_true, &fx.r_true(), &opts)
            .unwrap();
        let rel = diff_norm(&step.x, &fx.truth.x_true) / norm2(&fx.truth.x_true);
        assert!(rel < 0.05, "||g(x) - x||/||x|| = {rel}");
    }

    #[test]
    fn abcd_runs_and_respects_bounds() {
        let fx = fixture(10, 12, 2);
        let p = fx.problem();
        for (mode, coeff) in [
            (AccelMode::XOnly, CoeffMode::Standard),
            (AccelMode::Both, CoeffMode::Standard),
            (AccelMode::Both, CoeffMode::PaperLiteral),
        ] {
            let opts = OuterOptions {
                max_outer: 4,
                accel: mode,
                coeff_mode: coeff,
                ..Default::default()
            };
            let res = p.abcd(&fx.r0, &opts).unwrap();
            assert!(res.r.within_bounds());
            assert!(res.trace.rows.len() >= 2);
        }
    }

    #[test]
    fn anderson_runs_with_bounded_window() {
        let fx = fixture(10, 12, 2);
        let p = fx.problem();
        let opts = OuterOptions {
            max_outer: 4,
            memory: 2,
            ..Default::default()
        };
        let res = p.anderson(&fx.r0, &opts).unwrap();
        assert!(res.r.within_bounds());
        assert_eq!(res.trace.rows[0].iter, 0);
        assert!(res.trace.rows.len() <= 5);
    }

    #[test]
    fn golden_solver_drives_separable_step() {
        let fx = fixture(10, 8, 2);
        let p = fx.problem();
        let opts = OuterOptions {
            nls_solver: NlsSolver::Golden,
            ..Default::default()
        };
        let r = p
            .geometry_step_separable(&fx.truth.x_true, &fx.r0, &opts)
            .unwrap();
        for i in 0..2 {
            assert!((r.d[i] - fx.truth.d_true[i]).abs() < 0.05);
        }
    }
}
