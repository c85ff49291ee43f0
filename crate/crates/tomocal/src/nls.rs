//! Derivative-free bound-constrained minimizers: a budget-limited coordinate
//! stencil search for the small per-block geometry problems, and a
//! golden-section / parabolic-interpolation 1-D minimizer.

use crate::error::{Error, Result};
use crate::geometry::BoundBox;

/// Hard cap on objective evaluations.
#[derive(Debug, Clone, Copy)]
pub struct BudgetCounter {
    pub budget: usize,
    pub used: usize,
}

impl BudgetCounter {
    pub fn new(budget: usize) -> Self {
        BudgetCounter { budget, used: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }

    fn charge(&mut self) -> bool {
        if self.used < self.budget {
            self.used += 1;
            true
        } else {
            false
        }
    }
}

/// Outcome of a bounded search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub argmin: Vec<f64>,
    pub fmin: f64,
    pub evals: usize,
    /// True when the scale (or bracket) sequence was exhausted, false when
    /// the evaluation budget ran out first.
    pub converged: bool,
}

/// Coordinate stencil search over a bound box.
///
/// Starting from `start` (or the box center), evaluates the +-h stencil per
/// coordinate at scale h_j = 2^-j * (hi - lo), moves to the best strict
/// improvement, and halves the scale when the stencil fails. Stops when the
/// budget is exhausted or h_j < 1e-6 * (hi - lo). Never returns a point worse
/// than the best one evaluated.
pub fn stencil_search_min<F>(
    mut f: F,
    bounds: &BoundBox,
    budget: usize,
    start: Option<&[f64]>,
) -> Result<SearchResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = bounds.dim();
    if dim == 0 {
        return Err(Error::InvalidArgument("empty bound box".into()));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be >= 1".into()));
    }
    let mut counter = BudgetCounter::new(budget);
    let mut current = match start {
        Some(p) => {
            let mut p = p.to_vec();
            bounds.clip(&mut p);
            p
        }
        None => bounds.center(),
    };
    counter.charge();
    let mut f_current = f(&current);
    if !f_current.is_finite() {
        return Err(Error::NonFinite("stencil_search_min start"));
    }
    let mut best = current.clone();
    let mut f_best = f_current;

    let range: Vec<f64> = bounds
        .lo
        .iter()
        .zip(&bounds.hi)
        .map(|(&l, &h)| h - l)
        .collect();
    let mut scale = 1.0f64;
    let mut converged = false;

    'outer: loop {
        if scale < 1e-6 {
            converged = true;
            break;
        }
        // One stencil sweep at the current scale.
        let mut sweep_best: Option<(Vec<f64>, f64)> = None;
        for c in 0..dim {
            if range[c] == 0.0 {
                continue;
            }
            for sign in [1.0f64, -1.0] {
                let mut cand = current.clone();
                cand[c] = (cand[c] + sign * scale * range[c]).clamp(bounds.lo[c], bounds.hi[c]);
                if cand[c] == current[c] {
                    continue;
                }
                if !counter.charge() {
                    break 'outer;
                }
                let fc = f(&cand);
                if fc < f_best {
                    best = cand.clone();
                    f_best = fc;
                }
                if sweep_best.as_ref().map_or(true, |(_, fb)| fc < *fb) {
                    sweep_best = Some((cand, fc));
                }
            }
        }
        match sweep_best {
            Some((p, fp)) if fp < f_current => {
                current = p;
                f_current = fp;
            }
            _ => scale *= 0.5,
        }
    }

    Ok(SearchResult {
        argmin: best,
        fmin: f_best,
        evals: counter.used,
        converged,
    })
}

/// Brent-style 1-D minimizer combining golden-section search with parabolic
/// interpolation, limited by `tol` on the bracket and by `budget` objective
/// evaluations.
pub fn golden_parabolic_min<F>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
    budget: usize,
) -> Result<SearchResult>
where
    F: FnMut(f64) -> f64,
{
    if lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "golden_parabolic_min requires lo < hi, got [{lo}, {hi}]"
        )));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let mut counter = BudgetCounter::new(budget.max(1));

    let (mut a, mut b) = (lo, hi);
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    counter.charge();
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d = 0.0f64;
    let mut e = 0.0f64;
    let mut converged = false;

    loop {
        let xm = 0.5 * (a + b);
        let tol1 = tol.max(1e-12 * x.abs());
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            converged = true;
            break;
        }
        if counter.remaining() == 0 {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            // Trial parabolic fit through (x, w, v).
            let r = (x - w) * (fx - fv);
            let q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            let mut q2 = 2.0 * (q - r);
            if q2 > 0.0 {
                p = -p;
            }
            q2 = q2.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q2 * etemp).abs() && p > q2 * (a - x) && p < q2 * (b - x) {
                d = p / q2;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1 * (xm - x).signum();
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1 * d.signum()
        };
        counter.charge();
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    Ok(SearchResult {
        argmin: vec![x],
        fmin: fx,
        evals: counter.used,
        converged,
    })
}
