//! Scaled Poincaré maps `T1` (on `x > 0`) and `T2` (on `x < 0`) near a symmetric
//! saddle-focus loop, their Jacobians and the spiral phase coordinate.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-width of the cross-section in scaled coordinates.
pub const DEFAULT_SECTION_HALF_WIDTH: f64 = 0.1;

/// Exponent gap of the `ScaledBump` small terms above `x^rho`.
pub const DEFAULT_BUMP_EPS0: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("point outside the domain of the map: {0}")]
    Domain(String),
    #[error("non-finite image at x = {x}")]
    Overflow { x: f64 },
    #[error("invalid map parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallTermKind {
    Zero,
    ScaledBump,
}

/// Higher-order corrections `g_k` added to each component of `T1`.
///
/// `ScaledBump` uses `amplitude * x^(rho+eps0) * cos(x + y + sum(z) + k)` for
/// component `k` (0 for `x`, 1 for `y`, 2.. for the `z` block).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallTermModel {
    pub kind: SmallTermKind,
    pub amplitude: f64,
    pub eps0: f64,
}

/// Value and first partials of one small-term component.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallTerm {
    pub value: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: Vec<f64>,
}

impl SmallTermModel {
    pub fn zero() -> Self {
        Self { kind: SmallTermKind::Zero, amplitude: 0.0, eps0: DEFAULT_BUMP_EPS0 }
    }

    pub fn scaled_bump(amplitude: f64) -> Self {
        Self { kind: SmallTermKind::ScaledBump, amplitude, eps0: DEFAULT_BUMP_EPS0 }
    }

    /// True when every value and derivative vanishes identically.
    pub fn is_zero(&self) -> bool {
        self.kind == SmallTermKind::Zero || self.amplitude == 0.0
    }

    /// Component `comp` at `(x, y, z)` with `x >= 0` (the `T1` form).
    pub fn eval(&self, comp: usize, x: f64, y: f64, z: &[f64], rho: f64) -> SmallTerm {
        if self.is_zero() || x == 0.0 {
            // At x = 0 the factor x^(rho+eps0) kills the value; the derivative
            // is not needed there because the maps are not differentiated at Π₀.
            return SmallTerm { value: 0.0, dx: 0.0, dy: 0.0, dz: vec![0.0; z.len()] };
        }
        let p = rho + self.eps0;
        let xp = x.powf(p);
        let arg = x + y + z.iter().sum::<f64>() + comp as f64;
        let (s, c) = arg.sin_cos();
        let amp = self.amplitude;
        let dyz = -amp * xp * s;
        SmallTerm { value: amp * xp * c, dx: amp * (p * xp / x * c - xp * s), dy: dyz, dz: vec![dyz; z.len()] }
    }
}

impl Default for SmallTermModel {
    fn default() -> Self {
        Self::zero()
    }
}

/// Coefficients of the scaled maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnMapParams {
    /// Leading coefficient of `x̄`.
    pub a: f64,
    /// `A_1 .. A_{n-2}`: coefficient of `ȳ` first, then one per `z` component.
    pub a_side: Vec<f64>,
    pub theta: f64,
    pub theta_side: Vec<f64>,
    pub mu: f64,
    pub rho: f64,
    pub omega: f64,
    pub z_plus: Vec<f64>,
    /// Diagonal of the involution `S` acting on the `z` block (entries ±1).
    pub involution: Vec<f64>,
    pub small_terms: SmallTermModel,
    /// Phase-space dimension; the section has dimension `n - 1`.
    pub n: usize,
    /// Section half-width `δ`.
    pub delta: f64,
}

impl Default for ReturnMapParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            a_side: vec![0.5, 0.3],
            theta: 0.0,
            theta_side: vec![FRAC_PI_2, 1.0],
            mu: 0.0,
            rho: 0.25,
            omega: 1.0,
            z_plus: vec![0.02],
            involution: vec![-1.0],
            small_terms: SmallTermModel::zero(),
            n: 4,
            delta: DEFAULT_SECTION_HALF_WIDTH,
        }
    }
}

impl ReturnMapParams {
    /// Number of `z` coordinates, `n - 3`.
    pub fn nz(&self) -> usize {
        self.n - 3
    }

    /// Section dimension, `n - 1`.
    pub fn dim(&self) -> usize {
        self.n - 1
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    pub fn with_rho(&self, rho: f64) -> Self {
        Self { rho, ..self.clone() }
    }

    /// `φ = arctan(ω/ρ)`, so that `ρ cos ξ + ω sin ξ = sqrt(ρ²+ω²) cos(ξ − φ)`.
    pub fn phi(&self) -> f64 {
        self.omega.atan2(self.rho)
    }

    /// `sqrt(ρ² + ω²)`.
    pub fn r_norm(&self) -> f64 {
        self.rho.hypot(self.omega)
    }

    /// Constant of the fixed-point ladder, `C = exp((2θ − π)/(2ω))`.
    pub fn ladder_constant(&self) -> f64 {
        ((2.0 * self.theta - PI) / (2.0 * self.omega)).exp()
    }

    /// Seed `x_k = C exp(−πk/ω)` of the `k`-th fixed point of `T1`.
    pub fn ladder_seed(&self, k: i64) -> f64 {
        self.ladder_seed_ln(k).exp()
    }

    pub fn ladder_seed_ln(&self, k: i64) -> f64 {
        (2.0 * self.theta - PI) / (2.0 * self.omega) - PI * k as f64 / self.omega
    }

    /// Checks shape and range constraints.
    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: &str| Err(MapError::InvalidParams(m.to_string()));
        if self.n < 4 {
            return bad("n must be at least 4");
        }
        if self.a_side.len() != self.n - 2 || self.theta_side.len() != self.n - 2 {
            return bad("a_side and theta_side need n - 2 entries");
        }
        if self.z_plus.len() != self.nz() || self.involution.len() != self.nz() {
            return bad("z_plus and involution need n - 3 entries");
        }
        if self.involution.iter().any(|&s| s != 1.0 && s != -1.0) {
            return bad("involution entries must be +1 or -1");
        }
        if !self.involution.iter().any(|&s| s == -1.0) {
            return bad("involution must flip at least one z coordinate");
        }
        if !(self.a > 0.0) {
            return bad("A must be positive");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.omega > 0.0) {
            return bad("omega must be positive");
        }
        if !(self.delta > 0.0) {
            return bad("section half-width must be positive");
        }
        if self.small_terms.amplitude < 0.0 || self.small_terms.eps0 <= 0.0 {
            return bad("small-term amplitude must be >= 0 and eps0 > 0");
        }
        let finite = [self.a, self.theta, self.mu, self.rho, self.omega, self.delta]
            .iter()
            .chain(&self.a_side)
            .chain(&self.theta_side)
            .chain(&self.z_plus)
            .all(|v| v.is_finite());
        if !finite {
            return bad("all coefficients must be finite");
        }
        Ok(())
    }
}

/// Which part of the section a point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// `x > 0`, domain of `T1`.
    Pi1,
    /// `x < 0`, domain of `T2`.
    Pi2,
    /// `x = 0`, the trace of the local stable manifold.
    Pi0,
}

impl Side {
    pub fn of(x: f64) -> Side {
        if x > 0.0 {
            Side::Pi1
        } else if x < 0.0 {
            Side::Pi2
        } else {
            Side::Pi0
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Side::Pi1 => 1.0,
            Side::Pi2 => -1.0,
            Side::Pi0 => 0.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Side::Pi1 => "pi1",
            Side::Pi2 => "pi2",
            Side::Pi0 => "pi0",
        }
    }
}

/// A point `(x, y, z)` on the cross-section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionPoint {
    pub x: f64,
    pub y: f64,
    pub z: Vec<f64>,
}

impl SectionPoint {
    pub fn new(x: f64, y: f64, z: Vec<f64>) -> Self {
        Self { x, y, z }
    }

    pub fn side(&self) -> Side {
        Side::of(self.x)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.iter().all(|v| v.is_finite())
    }

    /// Coordinates as one vector `(x, y, z_1, ..)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.z.len());
        v.push(self.x);
        v.push(self.y);
        v.extend_from_slice(&self.z);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { x: v[0], y: v[1], z: v[2..].to_vec() }
    }

    /// Euclidean distance to another point.
    pub fn distance(&self, other: &SectionPoint) -> f64 {
        self.to_vec().iter().zip(other.to_vec()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// The symmetry `R(x, y, z) = (−x, y, S z)`.
pub fn reflect(p: &SectionPoint, params: &ReturnMapParams) -> SectionPoint {
    SectionPoint { x: -p.x, y: p.y, z: p.z.iter().zip(&params.involution).map(|(z, s)| s * z).collect() }
}

/// Spiral phase coordinates of `x`: `ω ln(1/x) = 2πj + ξ − θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiCoordinate {
    pub j: i64,
    pub xi: f64,
}

fn check_point(p: &SectionPoint, params: &ReturnMapParams) -> Result<(), MapError> {
    if p.z.len() != params.nz() {
        return Err(MapError::Domain(format!("z has {} entries, expected {}", p.z.len(), params.nz())));
    }
    if !p.is_finite() {
        return Err(MapError::Domain("non-finite coordinates".into()));
    }
    Ok(())
}

/// `T1` on `x ≥ 0`; `T1(0, y, z) = (μ, 1, z⁺)`.
pub fn apply_t1(p: &SectionPoint, params: &ReturnMapParams) -> Result<SectionPoint, MapError> {
    check_point(p, params)?;
    if p.x < 0.0 {
        return Err(MapError::Domain(format!("T1 needs x >= 0, got {}", p.x)));
    }
    if p.x == 0.0 {
        return Ok(SectionPoint::new(params.mu, 1.0, params.z_plus.clone()));
    }
    let x = p.x;
    let wl = params.omega * (-x.ln());
    let lead = p.y * x.powf(params.rho);
    let g = |k: usize| params.small_terms.eval(k, x, p.y, &p.z, params.rho).value;
    let xb = params.mu + params.a * lead * (wl + params.theta).cos() + g(0);
    let yb = 1.0 + params.a_side[0] * lead * (wl + params.theta_side[0]).cos() + g(1);
    let zb: Vec<f64> = (0..params.nz())
        .map(|m| params.z_plus[m] + params.a_side[m + 1] * lead * (wl + params.theta_side[m + 1]).cos() + g(m + 2))
        .collect();
    let out = SectionPoint::new(xb, yb, zb);
    if !out.is_finite() {
        return Err(MapError::Overflow { x });
    }
    Ok(out)
}

/// `T2 = R ∘ T1 ∘ R` on `x ≤ 0`; `T2(0, y, z) = (−μ, 1, S z⁺)`.
pub fn apply_t2(p: &SectionPoint, params: &ReturnMapParams) -> Result<SectionPoint, MapError> {
    if p.x > 0.0 {
        return Err(MapError::Domain(format!("T2 needs x <= 0, got {}", p.x)));
    }
    check_point(p, params)?;
    let image = apply_t1(&reflect(p, params), params)?;
    Ok(reflect(&image, params))
}

/// The map `T` on the whole section: `T1` for `x ≥ 0`, `T2` for `x < 0`.
pub fn apply_t(p: &SectionPoint, params: &ReturnMapParams) -> Result<SectionPoint, MapError> {
    if p.x < 0.0 {
        apply_t2(p, params)
    } else {
        apply_t1(p, params)
    }
}

/// Analytic Jacobian of `T1` at `x > 0`, rows and columns ordered `(x, y, z..)`.
pub fn jacobian_t1(p: &SectionPoint, params: &ReturnMapParams) -> Result<DMatrix<f64>, MapError> {
    check_point(p, params)?;
    if !(p.x > 0.0) {
        return Err(MapError::Domain(format!("Jacobian of T1 needs x > 0, got {}", p.x)));
    }
    let x = p.x;
    let y = p.y;
    let d = params.dim();
    let wl = params.omega * (-x.ln());
    let xr = x.powf(params.rho);
    let xr1 = xr / x;
    let mut j = DMatrix::zeros(d, d);
    for row in 0..d {
        let (amp, th) =
            if row == 0 { (params.a, params.theta) } else { (params.a_side[row - 1], params.theta_side[row - 1]) };
        let (s, c) = (wl + th).sin_cos();
        let g = params.small_terms.eval(row, x, y, &p.z, params.rho);
        j[(row, 0)] = amp * y * xr1 * (params.rho * c + params.omega * s) + g.dx;
        j[(row, 1)] = amp * xr * c + g.dy;
        for m in 0..params.nz() {
            j[(row, 2 + m)] = g.dz[m];
        }
    }
    Ok(j)
}

/// Jacobian of `T2` at `x < 0`, obtained as `DR · DT1(Rp) · DR`.
pub fn jacobian_t2(p: &SectionPoint, params: &ReturnMapParams) -> Result<DMatrix<f64>, MapError> {
    if !(p.x < 0.0) {
        return Err(MapError::Domain(format!("Jacobian of T2 needs x < 0, got {}", p.x)));
    }
    let j1 = jacobian_t1(&reflect(p, params), params)?;
    Ok(conjugate_by_reflection(&j1, params))
}

/// Jacobian of `T` at a point off `Π₀`.
pub fn jacobian_t(p: &SectionPoint, params: &ReturnMapParams) -> Result<DMatrix<f64>, MapError> {
    if p.x < 0.0 {
        jacobian_t2(p, params)
    } else {
        jacobian_t1(p, params)
    }
}

/// `DR · M · DR` with `DR = diag(−1, 1, S)`.
pub(crate) fn conjugate_by_reflection(m: &DMatrix<f64>, params: &ReturnMapParams) -> DMatrix<f64> {
    let d = params.dim();
    let sign = |i: usize| match i {
        0 => -1.0,
        1 => 1.0,
        _ => params.involution[i - 2],
    };
    DMatrix::from_fn(d, d, |r, c| sign(r) * m[(r, c)] * sign(c))
}

/// Splits `ω ln(1/x) + θ` into full turns `j` and a remainder `ξ ∈ [0, 2π)`.
pub fn xi_of_x(x: f64, params: &ReturnMapParams) -> Result<XiCoordinate, MapError> {
    if !(x > 0.0 && x < 1.0) {
        return Err(MapError::Domain(format!("xi coordinate needs 0 < x < 1, got {x}")));
    }
    let v = params.omega * (-x.ln()) + params.theta;
    if v < 0.0 {
        return Err(MapError::Domain("phase ω ln(1/x) + θ is negative".into()));
    }
    let mut j = (v / TAU).floor();
    let mut xi = v - j * TAU;
    // Within a few ulps of a full turn the remainder is rounding noise.
    if xi >= TAU - 8.0 * f64::EPSILON * v.max(1.0) {
        j += 1.0;
        xi = 0.0;
    }
    if xi < 0.0 {
        xi = 0.0;
    }
    Ok(XiCoordinate { j: j as i64, xi })
}

/// Inverse of [`xi_of_x`].
pub fn x_of_xi(c: XiCoordinate, params: &ReturnMapParams) -> f64 {
    (-(TAU * c.j as f64 + c.xi - params.theta) / params.omega).exp()
}

/// `A · A_1 · sin(θ_1 − θ)`; a value near zero means the maps are degenerate.
pub fn check_nondegeneracy(params: &ReturnMapParams) -> f64 {
    params.a * params.a_side[0] * (params.theta_side[0] - params.theta).sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_params() -> ReturnMapParams {
        ReturnMapParams { z_plus: vec![0.0], a_side: vec![0.5, 0.3], ..Default::default() }
    }

    #[test]
    fn t1_at_pi0_returns_m_plus() {
        let p = ReturnMapParams { mu: 0.01, ..example_params() };
        let img = apply_t1(&SectionPoint::new(0.0, 0.7, vec![0.0]), &p).unwrap();
        assert_eq!(img, SectionPoint::new(0.01, 1.0, vec![0.0]));
    }

    #[test]
    fn t1_hand_value() {
        let p = example_params();
        let x = (-TAU).exp();
        let img = apply_t1(&SectionPoint::new(x, 1.0, vec![0.0]), &p).unwrap();
        assert!((img.x - (-FRAC_PI_2).exp()).abs() < 1e-12);
        assert!((img.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t2_hand_value_and_pi0() {
        let p = ReturnMapParams { mu: 0.02, ..example_params() };
        let img = apply_t2(&SectionPoint::new(0.0, 0.3, vec![0.5]), &p).unwrap();
        assert_eq!(img, SectionPoint::new(-0.02, 1.0, vec![-0.0]));
        let p0 = example_params();
        let img = apply_t2(&SectionPoint::new(-(-TAU).exp(), 1.0, vec![0.0]), &p0).unwrap();
        assert!((img.x + (-FRAC_PI_2).exp()).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let p = example_params();
        assert!(apply_t1(&SectionPoint::new(-1e-3, 1.0, vec![0.0]), &p).is_err());
        assert!(apply_t2(&SectionPoint::new(1e-3, 1.0, vec![0.0]), &p).is_err());
        assert!(jacobian_t1(&SectionPoint::new(0.0, 1.0, vec![0.0]), &p).is_err());
        assert!(xi_of_x(1.5, &p).is_err());
        assert!(xi_of_x(0.0, &p).is_err());
    }

    #[test]
    fn jacobian_corner_entry() {
        let p = example_params();
        let x = (-TAU).exp();
        let j = jacobian_t1(&SectionPoint::new(x, 1.0, vec![0.0]), &p).unwrap();
        let expected = 0.25 * x.powf(-0.75);
        assert!((j[(0, 0)] - expected).abs() < 1e-9 * expected);
        assert!((j[(0, 0)] - 27.83).abs() < 0.01);
        assert_eq!(j[(0, 2)], 0.0);
        assert_eq!(j[(1, 2)], 0.0);
        assert_eq!(j[(2, 2)], 0.0);
    }

    #[test]
    fn xi_examples() {
        let p = example_params();
        assert_eq!(xi_of_x((-TAU).exp(), &p).unwrap(), XiCoordinate { j: 1, xi: 0.0 });
        let c = xi_of_x((-TAU - FRAC_PI_2).exp(), &p).unwrap();
        assert_eq!(c.j, 1);
        assert!((c.xi - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn nondegeneracy_values() {
        let p = example_params();
        assert!((check_nondegeneracy(&p) - 0.5).abs() < 1e-15);
        let flat = ReturnMapParams { theta_side: vec![0.0, 1.0], ..example_params() };
        assert_eq!(check_nondegeneracy(&flat), 0.0);
        let q = ReturnMapParams {
            a: 2.0,
            a_side: vec![1.0, 0.3],
            theta: 0.3,
            theta_side: vec![1.0, 1.0],
            ..example_params()
        };
        assert!((check_nondegeneracy(&q) - 1.28844).abs() < 1e-5);
    }

    #[test]
    fn validation_rejects_trivial_involution() {
        let p = ReturnMapParams { involution: vec![1.0], ..Default::default() };
        assert!(p.validate().is_err());
        assert!(ReturnMapParams::default().validate().is_ok());
    }

    #[test]
    fn bump_scaling_ratio_decreases() {
        let m = SmallTermModel::scaled_bump(1.0);
        let rho = 0.25;
        let mut prev = f64::INFINITY;
        for k in 2..=10 {
            let x = 10f64.powi(-k);
            let g = m.eval(0, x, 1.0, &[0.0], rho);
            let ratio = g.value.abs() / x.powf(rho);
            assert!(ratio < prev);
            prev = ratio;
        }
    }
}
