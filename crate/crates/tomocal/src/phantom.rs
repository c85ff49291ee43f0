//! Shepp-Logan test image on an s x s grid over [-1,1] x [-1,1].

use crate::error::{Error, Result};

/// Square image sampled at pixel centers, row-major, row 0 at the top
/// (y decreasing with row index).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub side: usize,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::DimensionMismatch {
                expected: side * side,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ImageGrid"));
        }
        Ok(ImageGrid { side, values })
    }

    /// Physical center of pixel (row, col).
    pub fn pixel_center(side: usize, row: usize, col: usize) -> (f64, f64) {
        let h = 2.0 / side as f64;
        let x = -1.0 + (col as f64 + 0.5) * h;
        let y = 1.0 - (row as f64 + 0.5) * h;
        (x, y)
    }
}

/// One ellipse of the phantom: additive intensity, semi-axes, center, rotation (degrees).
struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

/// The standard ten-ellipse Shepp-Logan table.
const STANDARD: [Ellipse; 10] = [
    Ellipse {
        intensity: 2.00,
        a: 0.6900,
        b: 0.9200,
        x0: 0.00,
        y0: 0.0000,
        phi_deg: 0.0,
    },
    Ellipse {
        intensity: -0.98,
        a: 0.6624,
        b: 0.8740,
        x0: 0.00,
        y0: -0.0184,
        phi_deg: 0.0,
    },
    Ellipse {
        intensity: -0.02,
        a: 0.1100,
        b: 0.3100,
        x0: 0.22,
        y0: 0.0000,
        phi_deg: -18.0,
    },
    Ellipse {
        intensity: -0.02,
        a: 0.1600,
        b: 0.4100,
        x0: -0.22,
        y0: 0.0000,
        phi_deg: 18.0,
    },
    Ellipse {
        intensity: 0.01,
        a: 0.2100,
        b: 0.2500,
        x0: 0.00,
        y0: 0.3500,
        phi_deg: 0.0,
    },
    Ellipse {
        intensity: 0.01,
        a: 0.0460,
        b: 0.0460,
        x0: 0.00,
        y0: 0.1000,
        phi_deg: 0.0,
    },
    Ellipse {
        intensity: 0.01,
        a: 0.0460,
        b: 0.0460,
        x0: 0.00,
        y0: -0.1000,
        phi_deg: 0.0,
    },
    Ellipse {
        intensity: 0.01,
        a: 0.0460,
        b: 0.0230,
        x0: -0.08,
        y0: -0.6050,
        phi_deg: 0.0,
    },
    Ellipse {
        intensity: 0.01,
        a: 0.0230,
        b: 0.0230,
        x0: 0.00,
        y0: -0.6060,
        phi_deg: 0.0,
    },
    Ellipse {
        intensity: 0.01,
        a: 0.0230,
        b: 0.0460,
        x0: 0.06,
        y0: -0.6050,
        phi_deg: 0.0,
    },
];

/// Intensities of the higher-contrast ("modified") variant; geometry unchanged.
const MODIFIED_INTENSITIES: [f64; 10] = [1.0, -0.8, -0.2, -0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];

/// Pointwise phantom value at physical coordinates, negatives clamped to 0.
pub fn shepp_logan_at(x: f64, y: f64, modified: bool) -> f64 {
    let mut sum = 0.0;
    for (idx, e) in STANDARD.iter().enumerate() {
        let phi = e.phi_deg.to_radians();
        let (s, c) = phi.sin_cos();
        let dx = x - e.x0;
        let dy = y - e.y0;
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        if (xr / e.a).powi(2) + (yr / e.b).powi(2) <= 1.0 {
            sum += if modified {
                MODIFIED_INTENSITIES[idx]
            } else {
                e.intensity
            };
        }
    }
    sum.max(0.0)
}

/// Shepp-Logan phantom on a `side` x `side` grid (standard intensity table).
pub fn shepp_logan(side: usize) -> Result<ImageGrid> {
    shepp_logan_variant(side, false)
}

pub fn shepp_logan_variant(side: usize, modified: bool) -> Result<ImageGrid> {
    if side < 2 {
        return Err(Error::InvalidArgument("phantom side must be >= 2".into()));
    }
    let mut values = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = ImageGrid::pixel_center(side, row, col);
            values.push(shepp_logan_at(x, y, modified));
        }
    }
    ImageGrid::new(side, values)
}
