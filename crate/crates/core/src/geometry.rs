//! Ellipse model, point membership, rasterization and direct least-squares
//! ellipse fitting.
//!
//! Pixel coordinates place the center of pixel `(col, row)` at the real point
//! `(col, row)`. A pixel belongs to an ellipse iff its center satisfies
//! [`Ellipse::contains`].

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FitError, Result};

/// Which end of the major axis carries the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Option<i8>", into = "Option<i8>")]
pub enum HeadSign {
    /// Head at the end reached by walking along `theta`.
    Forward,
    /// Head at the end reached by walking along `theta + π`.
    Backward,
    #[default]
    Unknown,
}

impl HeadSign {
    pub fn flipped(self) -> Self {
        match self {
            HeadSign::Forward => HeadSign::Backward,
            HeadSign::Backward => HeadSign::Forward,
            HeadSign::Unknown => HeadSign::Unknown,
        }
    }

    pub fn is_known(self) -> bool {
        self != HeadSign::Unknown
    }

    /// +1, -1 or 0.
    pub fn signum(self) -> f64 {
        match self {
            HeadSign::Forward => 1.0,
            HeadSign::Backward => -1.0,
            HeadSign::Unknown => 0.0,
        }
    }
}

impl TryFrom<Option<i8>> for HeadSign {
    type Error = String;

    fn try_from(v: Option<i8>) -> Result<Self, Self::Error> {
        match v {
            Some(1) => Ok(HeadSign::Forward),
            Some(-1) => Ok(HeadSign::Backward),
            None | Some(0) => Ok(HeadSign::Unknown),
            Some(other) => Err(format!("head_sign must be 1, -1 or null, got {other}")),
        }
    }
}

impl From<HeadSign> for Option<i8> {
    fn from(h: HeadSign) -> Self {
        match h {
            HeadSign::Forward => Some(1),
            HeadSign::Backward => Some(-1),
            HeadSign::Unknown => None,
        }
    }
}

/// An annotation ellipse: center, semi-axes `a >= b > 0`, major-axis angle
/// `theta` in `[0, π)`, head side and depth rank (larger = nearer).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    #[serde(default)]
    pub head_sign: HeadSign,
    #[serde(default)]
    pub depth: i32,
}

/// Wraps an angle into `[0, π)`, returning the wrapped angle and whether an
/// odd multiple of π was removed.
fn wrap_half_turn(theta: f64) -> (f64, bool) {
    let turns = (theta / PI).floor();
    let mut t = theta - turns * PI;
    let mut odd = (turns as i64).rem_euclid(2) == 1;
    if t >= PI {
        t -= PI;
        odd = !odd;
    }
    if t < 0.0 {
        t = 0.0;
    }
    (t, odd)
}

impl Ellipse {
    /// Builds a canonical ellipse. Axes are swapped (and the angle rotated by
    /// a quarter turn) if `b > a`; the angle is wrapped into `[0, π)`.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Result<Self> {
        Self::with_direction(cx, cy, a, b, theta, HeadSign::Unknown)
    }

    /// Like [`Ellipse::new`] but keeps the directed heading: if wrapping the
    /// angle removes an odd number of half turns the head side is flipped.
    pub fn with_direction(
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        theta: f64,
        head_sign: HeadSign,
    ) -> Result<Self> {
        if ![cx, cy, a, b, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("ellipse parameters must be finite"));
        }
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::invalid(format!(
                "ellipse semi-axes must be positive (a={a}, b={b})"
            )));
        }
        let (a, b, theta) = if b > a {
            (b, a, theta + FRAC_PI_2)
        } else {
            (a, b, theta)
        };
        let (theta, odd) = wrap_half_turn(theta);
        let head_sign = if odd { head_sign.flipped() } else { head_sign };
        Ok(Ellipse {
            cx,
            cy,
            a,
            b,
            theta,
            head_sign,
            depth: 0,
        })
    }

    /// Builds an ellipse from a directed heading angle (head at the end the
    /// angle points to).
    pub fn from_heading(cx: f64, cy: f64, a: f64, b: f64, heading: f64) -> Result<Self> {
        Self::with_direction(cx, cy, a, b, heading, HeadSign::Forward)
    }

    pub fn with_depth(mut self, depth: i32) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_head(mut self, head_sign: HeadSign) -> Self {
        self.head_sign = head_sign;
        self
    }

    /// Checks the stored invariants.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.a, self.b, self.theta]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.b <= 0.0 || self.a < self.b || !(0.0..PI).contains(&self.theta) {
            return Err(Error::invalid(format!("invalid ellipse {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }

    /// Directed heading angle in `[0, 2π)`, if the head side is known.
    pub fn heading(&self) -> Option<f64> {
        match self.head_sign {
            HeadSign::Forward => Some(self.theta),
            HeadSign::Backward => Some(self.theta + PI),
            HeadSign::Unknown => None,
        }
    }

    /// Coordinates of `(x, y)` in the ellipse frame: along the major axis
    /// (toward `theta`) and along the minor axis.
    #[inline]
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Value of the normalized quadratic form; `<= 1` inside or on the boundary.
    #[inline]
    pub fn level(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.to_local(x, y);
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 1.0
    }

    /// Same center, angle, head and depth; axes multiplied by `factor`.
    pub fn scale(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::invalid(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Ok(Ellipse {
            a: self.a * factor,
            b: self.b * factor,
            ..*self
        })
    }

    /// Axis-aligned half extents of the ellipse.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let hx = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let hy = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (hx, hy)
    }

    /// Pixel indices `(col, row)` of a `width × height` image whose centers lie
    /// inside the ellipse, in row-major order.
    pub fn raster_pixels(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.for_each_pixel(width, height, |x, y| out.push((x, y)));
        out
    }

    pub(crate) fn for_each_pixel(
        &self,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize),
    ) {
        if width == 0 || height == 0 {
            return;
        }
        let (hx, hy) = self.half_extents();
        let x0 = (self.cx - hx).ceil().max(0.0);
        let x1 = (self.cx + hx).floor().min(width as f64 - 1.0);
        let y0 = (self.cy - hy).ceil().max(0.0);
        let y1 = (self.cy + hy).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if self.contains(x as f64, y as f64) {
                    f(x, y);
                }
            }
        }
    }

    /// General conic coefficients of the boundary.
    pub fn to_conic(&self) -> ConicCoefficients {
        let (s, c) = self.theta.sin_cos();
        let a2 = self.a * self.a;
        let b2 = self.b * self.b;
        let a = c * c / a2 + s * s / b2;
        let b = 2.0 * c * s * (1.0 / a2 - 1.0 / b2);
        let cc = s * s / a2 + c * c / b2;
        let d = -2.0 * a * self.cx - b * self.cy;
        let e = -b * self.cx - 2.0 * cc * self.cy;
        let f = a * self.cx * self.cx + b * self.cx * self.cy + cc * self.cy * self.cy - 1.0;
        ConicCoefficients {
            a,
            b,
            c: cc,
            d,
            e,
            f,
        }
    }
}

/// Coefficients of `A x² + B xy + C y² + D x + E y + F = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl ConicCoefficients {
    pub fn discriminant(&self) -> f64 {
        self.b * self.b - 4.0 * self.a * self.c
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.a * x * x + self.b * x * y + self.c * y * y + self.d * x + self.e * y + self.f
    }

    /// Converts to geometric parameters. Fails unless the conic is a real
    /// ellipse.
    pub fn to_ellipse(&self) -> Result<Ellipse, FitError> {
        let ConicCoefficients { a, b, c, d, e, f } = *self;
        let det = 4.0 * a * c - b * b;
        if !(det > 0.0) || !det.is_finite() {
            return Err(FitError::NoEllipse);
        }
        let x0 = (b * e - 2.0 * c * d) / det;
        let y0 = (b * d - 2.0 * a * e) / det;
        let f0 = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0 + f;
        // make the quadratic part positive definite
        let sign = if a + c >= 0.0 { 1.0 } else { -1.0 };
        let (qa, qb, qc, f0) = (a * sign, b * sign, c * sign, f0 * sign);
        let mean = 0.5 * (qa + qc);
        let rad = (0.25 * (qa - qc).powi(2) + 0.25 * qb * qb).sqrt();
        let l_small = mean - rad;
        let l_large = mean + rad;
        if !(l_small > 0.0) || !(f0 < 0.0) {
            return Err(FitError::NoEllipse);
        }
        let major = (-f0 / l_small).sqrt();
        let minor = (-f0 / l_large).sqrt();
        // angle of the large-eigenvalue (minor) direction, then a quarter turn
        let minor_dir = 0.5 * qb.atan2(qa - qc);
        let theta = minor_dir + FRAC_PI_2;
        Ellipse::new(x0, y0, major, minor, theta).map_err(|_| FitError::NoEllipse)
    }
}

/// Sampling lattice used by [`ellipse_iou`]: points
/// `(origin_x + i·step, origin_y + j·step)` for `i < width`, `j < height`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub step: f64,
    pub width: usize,
    pub height: usize,
}

impl RasterGrid {
    /// Unit-step grid matching a label image of the given size.
    pub fn pixels(width: usize, height: usize) -> Self {
        RasterGrid {
            origin_x: 0.0,
            origin_y: 0.0,
            step: 1.0,
            width,
            height,
        }
    }

    /// Indices (`j * width + i`) of lattice points inside `e`, ascending.
    pub fn rasterize(&self, e: &Ellipse) -> Vec<usize> {
        // map into lattice index space where the step is 1
        let local = Ellipse {
            cx: (e.cx - self.origin_x) / self.step,
            cy: (e.cy - self.origin_y) / self.step,
            a: e.a / self.step,
            b: e.b / self.step,
            ..*e
        };
        let mut out = Vec::new();
        local.for_each_pixel(self.width, self.height, |x, y| out.push(y * self.width + x));
        out
    }
}

/// Size of the intersection of two ascending index lists.
pub(crate) fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Raster intersection-over-union of two ellipses on a shared grid.
pub fn ellipse_iou(e1: &Ellipse, e2: &Ellipse, grid: &RasterGrid) -> Result<f64> {
    let r1 = grid.rasterize(e1);
    let r2 = grid.rasterize(e2);
    let inter = sorted_intersection_len(&r1, &r2);
    let union = r1.len() + r2.len() - inter;
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Direct least-squares ellipse fit (constraint `4AC − B² = 1`), returning the
/// conic in the input coordinate frame.
///
/// Points are shifted to their centroid and scaled to unit RMS radius before
/// the reduced 3×3 eigenproblem is solved, then the conic is mapped back.
pub fn fit_conic(points: &[(f64, f64)]) -> Result<ConicCoefficients, FitError> {
    let n = points.len();
    if n < 6 {
        return Err(FitError::TooFewPoints(n));
    }
    if points.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(FitError::Degenerate);
    }
    let inv_n = 1.0 / n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() * inv_n;
    let my = points.iter().map(|p| p.1).sum::<f64>() * inv_n;
    let rms = (points
        .iter()
        .map(|&(x, y)| (x - mx).powi(2) + (y - my).powi(2))
        .sum::<f64>()
        * inv_n)
        .sqrt();
    if !(rms > 0.0) {
        return Err(FitError::Degenerate);
    }
    let s = rms;

    // scatter blocks: quadratic terms [x², xy, y²] and linear terms [x, y, 1]
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(x, y) in points {
        let u = (x - mx) / s;
        let v = (y - my) / s;
        let q = Vector3::new(u * u, u * v, v * v);
        let l = Vector3::new(u, v, 1.0);
        s1 += q * q.transpose();
        s2 += q * l.transpose();
        s3 += l * l.transpose();
    }
    // collinear input makes the linear block rank deficient
    let s3_inv = match s3.try_inverse() {
        Some(m) if s3.determinant().abs() > 1e-10 * (n as f64).powi(3) => m,
        _ => return Err(FitError::Degenerate),
    };
    let t = -s3_inv * s2.transpose();
    let reduced = s1 + s2 * t;
    // inverse of the constraint block [[0,0,2],[0,-1,0],[2,0,0]]
    let c1_inv = Matrix3::new(0.0, 0.0, 0.5, 0.0, -1.0, 0.0, 0.5, 0.0, 0.0);
    let m = c1_inv * reduced;

    let scale = m.abs().max().max(1e-300);
    let mut best: Option<(f64, [f64; 6])> = None;
    for ev in m.complex_eigenvalues().iter() {
        if ev.im.abs() > 1e-8 * scale {
            continue;
        }
        let Some(q) = null_vector(&(m - Matrix3::identity() * ev.re)) else {
            continue;
        };
        let constraint = 4.0 * q[0] * q[2] - q[1] * q[1];
        if !(constraint > 0.0) {
            continue;
        }
        let k = 1.0 / constraint.sqrt();
        let q = q * k;
        let lin = t * q;
        let coeffs = [q[0], q[1], q[2], lin[0], lin[1], lin[2]];
        let residual = (q.transpose() * reduced * q)[(0, 0)].abs();
        if best.as_ref().map_or(true, |(r, _)| residual < *r) {
            best = Some((residual, coeffs));
        }
    }
    let (_, [a, b, c, d, e, f]) = best.ok_or(FitError::NoEllipse)?;

    // undo normalization: u = (x - mx)/s, v = (y - my)/s
    let s2i = 1.0 / (s * s);
    let si = 1.0 / s;
    let conic = ConicCoefficients {
        a: a * s2i,
        b: b * s2i,
        c: c * s2i,
        d: (-2.0 * a * mx - b * my) * s2i + d * si,
        e: (-b * mx - 2.0 * c * my) * s2i + e * si,
        f: (a * mx * mx + b * mx * my + c * my * my) * s2i - (d * mx + e * my) * si + f,
    };
    Ok(conic)
}

/// Null vector of a (numerically) rank-2 matrix via the largest cross product
/// of two rows.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r: [Vector3<f64>; 3] = [
        m.row(0).transpose(),
        m.row(1).transpose(),
        m.row(2).transpose(),
    ];
    let cands = [r[0].cross(&r[1]), r[0].cross(&r[2]), r[1].cross(&r[2])];
    let best = cands
        .into_iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
    let norm = best.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(best / norm)
}

/// Fits an ellipse to points sampled on its boundary. The head side of the
/// result is unknown.
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<Ellipse, FitError> {
    fit_conic(points)?.to_ellipse()
}

/// Fits an ellipse to the pixels filling a region.
///
/// The constrained algebraic fit is affine-equivariant, and on a uniformly
/// filled disc of radius `r` it returns the circle of radius `r/√2`; the raw
/// fit is therefore scaled by `√2`. When the points lie on the integer grid,
/// the result is then refined so that its rasterization agrees with the
/// region (see [`refine_to_region`]).
pub fn fit_region(pixels: &[(f64, f64)]) -> Result<Ellipse, FitError> {
    let e = fit_ellipse(pixels)?;
    let scaled = Ellipse {
        a: e.a * SQRT_2,
        b: e.b * SQRT_2,
        ..e
    };
    Ok(refine_to_region(&scaled, pixels).unwrap_or(scaled))
}

/// Width in pixels of the soft inside/outside step used by the refinement.
const REFINE_SOFTNESS: f64 = 0.05;
const REFINE_MAX_ITERS: u64 = 400;

/// Region membership on a window around the region, plus a margin.
struct RegionWindow {
    x0: i64,
    y0: i64,
    width: usize,
    height: usize,
    inside: Vec<bool>,
}

impl RegionWindow {
    const MARGIN: i64 = 3;

    fn new(pixels: &[(f64, f64)]) -> Option<Self> {
        if pixels.iter().any(|&(x, y)| x.fract() != 0.0 || y.fract() != 0.0) {
            return None;
        }
        let xs = pixels.iter().map(|p| p.0 as i64);
        let ys = pixels.iter().map(|p| p.1 as i64);
        let (x0, x1) = (xs.clone().min()? - Self::MARGIN, xs.max()? + Self::MARGIN);
        let (y0, y1) = (ys.clone().min()? - Self::MARGIN, ys.max()? + Self::MARGIN);
        let (width, height) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        let mut inside = vec![false; width * height];
        for &(x, y) in pixels {
            inside[(y as i64 - y0) as usize * width + (x as i64 - x0) as usize] = true;
        }
        Some(RegionWindow {
            x0,
            y0,
            width,
            height,
            inside,
        })
    }
}

/// Soft count of window pixels whose membership in the ellipse
/// `[cx, cy, ln a, ln b, theta]` disagrees with the region. Membership is a
/// logistic step in the first-order signed distance to the outline.
impl argmin::core::CostFunction for RegionWindow {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let (cx, cy, a, b) = (p[0], p[1], p[2].exp(), p[3].exp());
        let (s, c) = p[4].sin_cos();
        let (ia2, ib2) = (1.0 / (a * a), 1.0 / (b * b));
        let mut loss = 0.0;
        for row in 0..self.height {
            let dy = (self.y0 + row as i64) as f64 - cy;
            for col in 0..self.width {
                let dx = (self.x0 + col as i64) as f64 - cx;
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                let level = u * u * ia2 + v * v * ib2;
                let grad = 2.0 * (u * u * ia2 * ia2 + v * v * ib2 * ib2).sqrt();
                let dist = (1.0 - level) / grad.max(1e-12);
                let soft = 1.0 / (1.0 + (-dist / REFINE_SOFTNESS).exp());
                let target = if self.inside[row * self.width + col] { 1.0 } else { 0.0 };
                loss += (soft - target) * (soft - target);
            }
        }
        Ok(loss)
    }
}

/// Adjusts `e` so that the set of pixel centers it contains matches the
/// region as closely as possible (Nelder-Mead on a smoothed disagreement
/// count, started from `e`). Returns `None` when the pixels are not integer
/// coordinates or nothing better was found.
pub fn refine_to_region(e: &Ellipse, pixels: &[(f64, f64)]) -> Option<Ellipse> {
    use argmin::core::{CostFunction, Executor, State};
    use argmin::solver::neldermead::NelderMead;

    let window = RegionWindow::new(pixels)?;
    let start = vec![e.cx, e.cy, e.a.ln(), e.b.ln(), e.theta];
    let steps = [0.3, 0.3, 0.03, 0.03, 0.03];
    let mut simplex = vec![start.clone()];
    for (k, step) in steps.iter().enumerate() {
        let mut v = start.clone();
        v[k] += step;
        simplex.push(v);
    }
    let initial = window.cost(&start).ok()?;
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-9).ok()?;
    let res = Executor::new(window, solver)
        .configure(|s| s.max_iters(REFINE_MAX_ITERS))
        .run()
        .ok()?;
    let state = res.state();
    let best = state.get_best_param()?;
    if !(state.get_best_cost() < initial) {
        return None;
    }
    Ellipse::new(best[0], best[1], best[2].exp(), best[3].exp(), best[4]).ok()
}
