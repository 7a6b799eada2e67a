//! Rotation-translation (RT) warps and budgeted parameter generation.
//!
//! A warp rotates the image by `theta` degrees about the pixel-grid centre
//! `((W-1)/2, (H-1)/2)` and then translates it by `(dx, dy)` pixels. Output
//! pixels are pulled from the source through the inverse map; samples that
//! fall outside the source frame read as zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpatialError {
    #[error("affine parameters must be finite, got {0:?}")]
    NonFinite(AffineParams),
    #[error("grid counts must be at least 1, got {0:?}")]
    EmptyGrid((usize, usize, usize)),
    #[error("invalid threat budget: {0}")]
    InvalidBudget(String),
}

/// One RT transformation: degrees, then horizontal/vertical pixel shifts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineParams {
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        theta: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub fn new(theta: f64, dx: f64, dy: f64) -> Self {
        Self { theta, dx, dy }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0 && self.dx == 0.0 && self.dy == 0.0
    }

    /// `|θ| + |δx| + |δy|`, the mixed-unit magnitude used for stability plots.
    pub fn strength(&self) -> f64 {
        self.theta.abs() + self.dx.abs() + self.dy.abs()
    }

    pub fn within(&self, budget: &ThreatBudget) -> bool {
        self.theta.abs() <= budget.theta_max && self.dx.abs() <= budget.dx_max && self.dy.abs() <= budget.dy_max
    }
}

/// Bounds of the ℓ∞ and RT adversaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatBudget {
    pub epsilon: f64,
    pub theta_max: f64,
    pub dx_max: f64,
    pub dy_max: f64,
}

impl ThreatBudget {
    pub fn new(epsilon: f64, theta_max: f64, dx_max: f64, dy_max: f64) -> Result<Self, SpatialError> {
        let b = Self {
            epsilon,
            theta_max,
            dx_max,
            dy_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn zero() -> Self {
        Self {
            epsilon: 0.0,
            theta_max: 0.0,
            dx_max: 0.0,
            dy_max: 0.0,
        }
    }

    /// MNIST budget: ε = 0.3, θmax = 30°, 3 px shifts.
    pub fn mnist() -> Self {
        Self {
            epsilon: 0.3,
            theta_max: 30.0,
            dx_max: 3.0,
            dy_max: 3.0,
        }
    }

    /// CIFAR-10 budget: ε = 0.031, θmax = 30°, 3 px shifts.
    pub fn cifar10() -> Self {
        Self {
            epsilon: 0.031,
            ..Self::mnist()
        }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    pub fn without_rt(self) -> Self {
        Self {
            theta_max: 0.0,
            dx_max: 0.0,
            dy_max: 0.0,
            ..self
        }
    }

    pub fn has_rt(&self) -> bool {
        self.theta_max > 0.0 || self.dx_max > 0.0 || self.dy_max > 0.0
    }

    pub fn validate(&self) -> Result<(), SpatialError> {
        let fields = [self.epsilon, self.theta_max, self.dx_max, self.dy_max];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SpatialError::InvalidBudget(format!(
                "all bounds must be finite and nonnegative: {self:?}"
            )));
        }
        if self.epsilon > 1.0 {
            return Err(SpatialError::InvalidBudget(format!("epsilon {} exceeds 1", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

pub fn apply_affine(image: &Image, params: AffineParams, interp: Interpolation) -> Result<Image, SpatialError> {
    if !(params.theta.is_finite() && params.dx.is_finite() && params.dy.is_finite()) {
        return Err(SpatialError::NonFinite(params));
    }
    if params.is_identity() {
        return Ok(image.clone());
    }
    let shape = image.shape();
    let (h, w) = (shape.height, shape.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = params.theta.to_radians().sin_cos();
    let mut out = Image::zeros(shape);
    let src = image.data();
    let plane = h * w;
    let read = |c: usize, x: i64, y: i64| -> f32 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            src[c * plane + y as usize * w + x as usize]
        }
    };
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: undo the translation, then the rotation
            let u = ox as f64 - params.dx - cx;
            let v = oy as f64 - params.dy - cy;
            let sx = cos * u + sin * v + cx;
            let sy = -sin * u + cos * v + cy;
            match interp {
                Interpolation::Nearest => {
                    let (x, y) = (sx.round() as i64, sy.round() as i64);
                    for c in 0..shape.channels {
                        out.set(c, oy, ox, read(c, x, y));
                    }
                }
                Interpolation::Bilinear => {
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    let weights = [
                        (0, 0, (1.0 - fx) * (1.0 - fy)),
                        (1, 0, fx * (1.0 - fy)),
                        (0, 1, (1.0 - fx) * fy),
                        (1, 1, fx * fy),
                    ];
                    for c in 0..shape.channels {
                        let mut acc = 0.0f32;
                        for &(ddx, ddy, wt) in &weights {
                            if wt != 0.0 {
                                acc += wt * read(c, x0 + ddx, y0 + ddy);
                            }
                        }
                        out.set(c, oy, ox, acc.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn axis_values(max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| -max + 2.0 * max * i as f64 / (count - 1) as f64)
        .collect()
}

/// Evenly spaced grid over the budget, `theta` outermost and `dy` innermost.
pub fn enumerate_grid(budget: &ThreatBudget, counts: (usize, usize, usize)) -> Result<Vec<AffineParams>, SpatialError> {
    let (nt, nx, ny) = counts;
    if nt == 0 || nx == 0 || ny == 0 {
        return Err(SpatialError::EmptyGrid(counts));
    }
    let thetas = axis_values(budget.theta_max, nt);
    let dxs = axis_values(budget.dx_max, nx);
    let dys = axis_values(budget.dy_max, ny);
    let mut out = Vec::with_capacity(nt * nx * ny);
    for &theta in &thetas {
        for &dx in &dxs {
            for &dy in &dys {
                out.push(AffineParams { theta, dx, dy });
            }
        }
    }
    Ok(out)
}

pub fn sample_affine(budget: &ThreatBudget, rng: &mut RngStream) -> AffineParams {
    AffineParams {
        theta: rng.uniform_range(-budget.theta_max, budget.theta_max),
        dx: rng.uniform_range(-budget.dx_max, budget.dx_max),
        dy: rng.uniform_range(-budget.dy_max, budget.dy_max),
    }
}
