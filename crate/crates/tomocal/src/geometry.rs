//! Geometry parameter vector, its block partition over projection views,
//! bounds, and error metrics.
//!
//! Each angle block is a contiguous run of views that share one value of the
//! source-to-object distance `d` and one angle offset `dtheta`. Angles are in
//! degrees throughout; `d` is dimensionless in units of the image half-width
//! (the image occupies the square [-1,1] x [-1,1]).

use crate::error::{Error, Result};

/// Which geometry parameter families are treated as unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveParams {
    DistanceOnly,
    AngleOnly,
    Both,
}

impl ActiveParams {
    pub fn distance_active(self) -> bool {
        matches!(self, ActiveParams::DistanceOnly | ActiveParams::Both)
    }

    pub fn angle_active(self) -> bool {
        matches!(self, ActiveParams::AngleOnly | ActiveParams::Both)
    }

    /// Number of unknowns per block (1 or 2).
    pub fn dim(self) -> usize {
        match self {
            ActiveParams::Both => 2,
            _ => 1,
        }
    }
}

/// Per-parameter lower/upper bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("bound box has lo > hi".into()));
        }
        Ok(BoundBox { lo, hi })
    }

    /// Uniform scalar bounds replicated over `n` components.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        BoundBox::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&x, (&l, &h))| x >= l && x <= h)
    }

    pub fn clip(&self, p: &mut [f64]) {
        for ((x, &l), &h) in p.iter_mut().zip(&self.lo).zip(&self.hi) {
            *x = x.clamp(l, h);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| 0.5 * (l + h))
            .collect()
    }
}

/// Contiguous partition of projection views into angle blocks.
///
/// Block `i` holds views `floor(i*n_views/n_blocks) .. floor((i+1)*n_views/n_blocks)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleBlockPartition {
    n_views: usize,
    n_blocks: usize,
    view_angles: Vec<f64>,
    block_of_view: Vec<usize>,
}

/// Build the contiguous floor-boundary partition with nominal angles
/// 0, 1, ..., n_views-1 degrees.
pub fn make_partition(n_views: usize, n_blocks: usize) -> Result<AngleBlockPartition> {
    AngleBlockPartition::with_angles((0..n_views).map(|v| v as f64).collect(), n_blocks)
}

impl AngleBlockPartition {
    /// Partition explicit view angles (degrees) into `n_blocks` contiguous blocks.
    pub fn with_angles(view_angles: Vec<f64>, n_blocks: usize) -> Result<Self> {
        let n_views = view_angles.len();
        if n_views == 0 || n_blocks == 0 {
            return Err(Error::InvalidPartition(
                "view and block counts must be positive".into(),
            ));
        }
        if n_blocks > n_views {
            return Err(Error::InvalidPartition(format!(
                "n_blocks {n_blocks} exceeds n_views {n_views}"
            )));
        }
        let mut block_of_view = vec![0usize; n_views];
        for b in 0..n_blocks {
            let start = b * n_views / n_blocks;
            let end = (b + 1) * n_views / n_blocks;
            for slot in &mut block_of_view[start..end] {
                *slot = b;
            }
        }
        Ok(AngleBlockPartition {
            n_views,
            n_blocks,
            view_angles,
            block_of_view,
        })
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn view_angles(&self) -> &[f64] {
        &self.view_angles
    }

    pub fn block_of_view(&self, view: usize) -> usize {
        self.block_of_view[view]
    }

    /// Half-open range of view indices belonging to block `b`.
    pub fn views_of_block(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.n_views / self.n_blocks;
        let end = (b + 1) * self.n_views / self.n_blocks;
        start..end
    }
}

/// Per-block source-to-object distances and angle offsets, with bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryParams {
    pub d: Vec<f64>,
    pub dtheta: Vec<f64>,
    pub active: ActiveParams,
    pub d_bounds: BoundBox,
    pub dtheta_bounds: BoundBox,
}

impl GeometryParams {
    pub fn new(
        d: Vec<f64>,
        dtheta: Vec<f64>,
        active: ActiveParams,
        d_bounds: BoundBox,
        dtheta_bounds: BoundBox,
    ) -> Result<Self> {
        let n = d.len();
        if dtheta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: dtheta.len(),
            });
        }
        if d_bounds.dim() != n || dtheta_bounds.dim() != n {
            return Err(Error::InvalidGeometry(
                "bound dimensions do not match the block count".into(),
            ));
        }
        let g = GeometryParams {
            d,
            dtheta,
            active,
            d_bounds,
            dtheta_bounds,
        };
        if !g.within_bounds() {
            return Err(Error::InvalidGeometry(
                "parameters violate their bound boxes".into(),
            ));
        }
        Ok(g)
    }

    pub fn n_blocks(&self) -> usize {
        self.d.len()
    }

    pub fn within_bounds(&self) -> bool {
        self.d_bounds.contains(&self.d) && self.dtheta_bounds.contains(&self.dtheta)
    }

    /// The active parameters of block `i` as a flat vector ([d], [dtheta] or [d, dtheta]).
    pub fn block_params(&self, i: usize) -> Vec<f64> {
        match self.active {
            ActiveParams::DistanceOnly => vec![self.d[i]],
            ActiveParams::AngleOnly => vec![self.dtheta[i]],
            ActiveParams::Both => vec![self.d[i], self.dtheta[i]],
        }
    }

    /// Write the active parameters of block `i` back from a flat vector.
    pub fn set_block_params(&mut self, i: usize, p: &[f64]) {
        match self.active {
            ActiveParams::DistanceOnly => self.d[i] = p[0],
            ActiveParams::AngleOnly => self.dtheta[i] = p[0],
            ActiveParams::Both => {
                self.d[i] = p[0];
                self.dtheta[i] = p[1];
            }
        }
    }

    /// The (d, dtheta) pair seen by the projector for block `i`.
    pub fn block_pair(&self, i: usize) -> (f64, f64) {
        (self.d[i], self.dtheta[i])
    }

    /// Bound box over the active parameters of one block.
    pub fn block_bounds(&self, i: usize) -> BoundBox {
        match self.active {
            ActiveParams::DistanceOnly => BoundBox {
                lo: vec![self.d_bounds.lo[i]],
                hi: vec![self.d_bounds.hi[i]],
            },
            ActiveParams::AngleOnly => BoundBox {
                lo: vec![self.dtheta_bounds.lo[i]],
                hi: vec![self.dtheta_bounds.hi[i]],
            },
            ActiveParams::Both => BoundBox {
                lo: vec![self.d_bounds.lo[i], self.dtheta_bounds.lo[i]],
                hi: vec![self.d_bounds.hi[i], self.dtheta_bounds.hi[i]],
            },
        }
    }

    /// All active parameters concatenated in block order.
    pub fn flat_active(&self) -> Vec<f64> {
        (0..self.n_blocks())
            .flat_map(|i| self.block_params(i))
            .collect()
    }

    /// Inverse of `flat_active`.
    pub fn set_flat_active(&mut self, p: &[f64]) {
        let k = self.active.dim();
        for i in 0..self.n_blocks() {
            self.set_block_params(i, &p[i * k..(i + 1) * k]);
        }
    }

    /// Bound box over all active parameters in block order.
    pub fn flat_bounds(&self) -> BoundBox {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for i in 0..self.n_blocks() {
            let b = self.block_bounds(i);
            lo.extend_from_slice(&b.lo);
            hi.extend_from_slice(&b.hi);
        }
        BoundBox { lo, hi }
    }

    /// Clip every parameter into its bound box.
    pub fn clip_to_bounds(&mut self) {
        self.d_bounds.clip(&mut self.d);
        self.dtheta_bounds.clip(&mut self.dtheta);
    }
}

/// Relative error ||p - p_true||_2 / ||p_true||_2.
pub fn relative_error(p: &[f64], p_true: &[f64]) -> Result<f64> {
    if p.len() != p_true.len() {
        return Err(Error::DimensionMismatch {
            expected: p_true.len(),
            got: p.len(),
        });
    }
    let denom = norm2(p_true);
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "relative_error requires a nonzero reference vector".into(),
        ));
    }
    let num = p
        .iter()
        .zip(p_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
