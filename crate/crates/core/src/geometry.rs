//! Implicit description of the fan region.
//!
//! Two straight boundaries and two vertical-axis parabolic arcs each define a
//! signed implicit function, positive on the interior side. The soft
//! membership of a pixel is the sigmoid of `kappa` times the plain sum of the
//! four functions.
//!
//! Because the sum is taken before thresholding, the `y` terms of the two
//! parabolas cancel and the two lines add up to a single linear function:
//! `{sum >= 0}` is always the region on one side of a curve
//! `y = quadratic(x)`. It contains the intersection of the four half-regions
//! but is generally larger than it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ProbField};
use crate::par;

/// Number of scalar shape parameters.
pub const N_PARAMS: usize = 10;

/// Default sigmoid steepness, per pixel.
pub const DEFAULT_KAPPA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Centre of a `width x height` image, used as the line-offset anchor.
    pub fn image_center(width: usize, height: usize) -> Self {
        Self::new(width as f64 / 2.0, height as f64 / 2.0)
    }
}

/// The ten fan parameters. Line angles give the direction of the unit normal
/// pointing into the fan; offsets are measured from the anchor point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanParams {
    pub left_line_angle: f64,
    pub left_line_offset: f64,
    pub right_line_angle: f64,
    pub right_line_offset: f64,
    pub top_parabola_curv: f64,
    pub top_parabola_vx: f64,
    pub top_parabola_vy: f64,
    pub bottom_parabola_curv: f64,
    pub bottom_parabola_vx: f64,
    pub bottom_parabola_vy: f64,
}

impl FanParams {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.left_line_angle,
            self.left_line_offset,
            self.right_line_angle,
            self.right_line_offset,
            self.top_parabola_curv,
            self.top_parabola_vx,
            self.top_parabola_vy,
            self.bottom_parabola_curv,
            self.bottom_parabola_vx,
            self.bottom_parabola_vy,
        ]
    }

    pub fn from_array(v: [f64; N_PARAMS]) -> Self {
        Self {
            left_line_angle: v[0],
            left_line_offset: v[1],
            right_line_angle: v[2],
            right_line_offset: v[3],
            top_parabola_curv: v[4],
            top_parabola_vx: v[5],
            top_parabola_vy: v[6],
            bottom_parabola_curv: v[7],
            bottom_parabola_vx: v[8],
            bottom_parabola_vy: v[9],
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; N_PARAMS] = v.try_into().map_err(|_| {
            Error::InvalidParameter(format!("expected {N_PARAMS} parameters, got {}", v.len()))
        })?;
        Ok(Self::from_array(arr))
    }

    /// Checks the canonical-shape invariants: finite values, positive
    /// curvatures and the bottom arc vertex below the top one.
    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite fan parameter".into()));
        }
        if self.top_parabola_curv <= 0.0 || self.bottom_parabola_curv <= 0.0 {
            return Err(Error::InvalidParameter(
                "parabola curvatures must be positive".into(),
            ));
        }
        if self.bottom_parabola_vy <= self.top_parabola_vy {
            return Err(Error::InvalidParameter(
                "bottom arc vertex must lie below the top arc vertex".into(),
            ));
        }
        Ok(())
    }

    /// Moves every positional parameter by `(dx, dy)`. Paired with moving the
    /// anchor by the same amount this translates the whole field.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            top_parabola_vx: self.top_parabola_vx + dx,
            top_parabola_vy: self.top_parabola_vy + dy,
            bottom_parabola_vx: self.bottom_parabola_vx + dx,
            bottom_parabola_vy: self.bottom_parabola_vy + dy,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteepnessConfig {
    pub kappa: f64,
}

impl SteepnessConfig {
    pub fn new(kappa: f64) -> Result<Self> {
        let s = Self { kappa };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

impl Default for SteepnessConfig {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
        }
    }
}

/// On-disk form: the ten parameters plus `kappa` in one flat object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanFile {
    #[serde(flatten)]
    pub theta: FanParams,
    pub kappa: f64,
}

impl FanFile {
    pub fn new(theta: FanParams, steep: SteepnessConfig) -> Self {
        Self {
            theta,
            kappa: steep.kappa,
        }
    }

    pub fn steepness(&self) -> SteepnessConfig {
        SteepnessConfig { kappa: self.kappa }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if file.theta.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "{}: non-finite fan parameter",
                path.display()
            )));
        }
        file.steepness().validate()?;
        Ok(file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArcSide {
    /// Interior lies below the arc (the top arc).
    Below,
    /// Interior lies above the arc (the bottom arc).
    Above,
}

/// Signed distance to the line `{p : n . (p - anchor) = offset}` with
/// `n = (cos angle, sin angle)`; positive on the side `n` points to.
pub fn line_implicit(p: Point, angle: f64, offset: f64, anchor: Point) -> f64 {
    let (s, c) = angle.sin_cos();
    c * (p.x - anchor.x) + s * (p.y - anchor.y) - offset
}

/// Vertical residual to the arc `y = vy - curv (x - vx)^2`.
pub fn parabola_implicit(p: Point, curv: f64, vx: f64, vy: f64, side: ArcSide) -> f64 {
    let dx = p.x - vx;
    let arc_y = vy - curv * dx * dx;
    match side {
        ArcSide::Below => p.y - arc_y,
        ArcSide::Above => arc_y - p.y,
    }
}

/// Logistic function. For every `t < 0` the result is strictly below 1/2,
/// so thresholding at 1/2 always agrees with the sign of `t`.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        let s = e / (1.0 + e);
        if s >= 0.5 {
            f64::from_bits(0.5f64.to_bits() - 1)
        } else {
            s
        }
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Precomputed trigonometry for repeated evaluation of one parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct FanEvaluator {
    theta: FanParams,
    anchor: Point,
    left: (f64, f64),
    right: (f64, f64),
}

impl FanEvaluator {
    pub fn new(theta: &FanParams, anchor: Point) -> Self {
        let (ls, lc) = theta.left_line_angle.sin_cos();
        let (rs, rc) = theta.right_line_angle.sin_cos();
        Self {
            theta: *theta,
            anchor,
            left: (lc, ls),
            right: (rc, rs),
        }
    }

    /// The four implicit values `[left, right, top, bottom]`.
    #[inline]
    pub fn terms(&self, x: f64, y: f64) -> [f64; 4] {
        let t = &self.theta;
        let ax = x - self.anchor.x;
        let ay = y - self.anchor.y;
        let f1 = self.left.0 * ax + self.left.1 * ay - t.left_line_offset;
        let f2 = self.right.0 * ax + self.right.1 * ay - t.right_line_offset;
        let dt = x - t.top_parabola_vx;
        let f3 = y - (t.top_parabola_vy - t.top_parabola_curv * dt * dt);
        let db = x - t.bottom_parabola_vx;
        let f4 = (t.bottom_parabola_vy - t.bottom_parabola_curv * db * db) - y;
        [f1, f2, f3, f4]
    }

    #[inline]
    pub fn field(&self, x: f64, y: f64) -> f64 {
        let [f1, f2, f3, f4] = self.terms(x, y);
        ((f1 + f2) + f3) + f4
    }

    /// Gradient of the summed field with respect to the ten parameters.
    #[inline]
    pub fn field_grad(&self, x: f64, y: f64) -> [f64; N_PARAMS] {
        let t = &self.theta;
        let ax = x - self.anchor.x;
        let ay = y - self.anchor.y;
        let dt = x - t.top_parabola_vx;
        let db = x - t.bottom_parabola_vx;
        [
            -self.left.1 * ax + self.left.0 * ay,
            -1.0,
            -self.right.1 * ax + self.right.0 * ay,
            -1.0,
            dt * dt,
            -2.0 * t.top_parabola_curv * dt,
            -1.0,
            -db * db,
            2.0 * t.bottom_parabola_curv * db,
            1.0,
        ]
    }
}

/// Sum of the four implicit functions at `p`.
pub fn fan_field(p: Point, theta: &FanParams, anchor: Point) -> f64 {
    FanEvaluator::new(theta, anchor).field(p.x, p.y)
}

/// Prior probability that `p` lies in the fan: `sigmoid(kappa * field)`.
pub fn membership_prob(p: Point, theta: &FanParams, steep: SteepnessConfig, anchor: Point) -> f64 {
    sigmoid(steep.kappa * fan_field(p, theta, anchor))
}

/// Gradient of [`membership_prob`] with respect to the ten parameters.
pub fn membership_grad(
    p: Point,
    theta: &FanParams,
    steep: SteepnessConfig,
    anchor: Point,
) -> [f64; N_PARAMS] {
    let eval = FanEvaluator::new(theta, anchor);
    let s = sigmoid(steep.kappa * eval.field(p.x, p.y));
    let scale = steep.kappa * s * (1.0 - s);
    eval.field_grad(p.x, p.y).map(|g| scale * g)
}

/// Membership probability at every pixel centre `(x + 0.5, y + 0.5)`, with
/// the anchor at the image centre.
pub fn rasterize_prior(
    theta: &FanParams,
    width: usize,
    height: usize,
    steep: SteepnessConfig,
) -> ProbField {
    let eval = FanEvaluator::new(theta, Point::image_center(width, height));
    let bands = par::map_row_bands(height, |rows| {
        let mut out = Vec::with_capacity(rows.len() * width);
        for y in rows {
            let py = y as f64 + 0.5;
            for x in 0..width {
                out.push(sigmoid(steep.kappa * eval.field(x as f64 + 0.5, py)));
            }
        }
        out
    });
    ProbField::from_raw(width, height, bands.concat())
}

/// `{field >= 0}` at pixel centres.
pub fn sign_mask(theta: &FanParams, width: usize, height: usize) -> BinaryMask {
    let eval = FanEvaluator::new(theta, Point::image_center(width, height));
    BinaryMask::from_fn(width, height, |x, y| {
        eval.field(x as f64 + 0.5, y as f64 + 0.5) >= 0.0
    })
    .expect("dimensions come from a valid image")
}

/// `{all four implicit functions >= 0}` at pixel centres.
pub fn intersection_mask(theta: &FanParams, width: usize, height: usize) -> BinaryMask {
    let eval = FanEvaluator::new(theta, Point::image_center(width, height));
    BinaryMask::from_fn(width, height, |x, y| {
        eval.terms(x as f64 + 0.5, y as f64 + 0.5)
            .iter()
            .all(|&f| f >= 0.0)
    })
    .expect("dimensions come from a valid image")
}

/// True where `field >= threshold`.
pub fn hard_mask(field: &ProbField, threshold: f64) -> BinaryMask {
    BinaryMask::new(
        field.width(),
        field.height(),
        field.data().iter().map(|&p| p >= threshold).collect(),
    )
    .expect("field dimensions are valid")
}
