//! Phase-anchored coordinates for points close to `Π₀`.
//!
//! Near a fixed or periodic point the spiral phase `ξ = ω ln(1/|x|) + θ (mod 2π)`
//! must sit extremely close to particular angles (a quarter turn, or a quarter
//! turn shifted by `φ`). Storing `x` itself loses those digits, so a point keeps
//! an integer turn count `j`, an [`Anchor`] angle and a small offset `η`; cosines
//! of the form `cos ξ` or `cos(ξ − φ)` are then exact to relative precision.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::return_map::{conjugate_by_reflection, MapError, ReturnMapParams, SectionPoint, Side, XiCoordinate};

/// Reference angle of a phase point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    /// `q π/2`.
    Quarter(u8),
    /// `q π/2 + φ`.
    Fold(u8),
}

impl Anchor {
    pub fn angle(self, phi: f64) -> f64 {
        match self {
            Anchor::Quarter(q) => q as f64 * FRAC_PI_2,
            Anchor::Fold(q) => q as f64 * FRAC_PI_2 + phi,
        }
    }
}

/// Rotates `(cos a, sin a)` by `q` quarter turns.
fn rot(q: u8, c: f64, s: f64) -> (f64, f64) {
    match q % 4 {
        0 => (c, s),
        1 => (-s, c),
        2 => (-c, -s),
        _ => (s, -c),
    }
}

/// A section point in anchored phase coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub side: Side,
    pub j: i64,
    pub anchor: Anchor,
    pub eta: f64,
    pub y: f64,
    pub z: Vec<f64>,
}

impl PhasePoint {
    /// `ω ln(1/|x|) = 2πj + anchor + η − θ`.
    pub fn s(&self, p: &ReturnMapParams) -> f64 {
        TAU * self.j as f64 + self.anchor.angle(p.phi()) + self.eta - p.theta
    }

    pub fn ln_abs_x(&self, p: &ReturnMapParams) -> f64 {
        -self.s(p) / p.omega
    }

    pub fn abs_x(&self, p: &ReturnMapParams) -> f64 {
        self.ln_abs_x(p).exp()
    }

    pub fn x(&self, p: &ReturnMapParams) -> f64 {
        self.side.sign() * self.abs_x(p)
    }

    /// `(cos ξ, sin ξ)`.
    pub fn cos_sin_xi(&self, p: &ReturnMapParams) -> (f64, f64) {
        let (s, c) = self.eta.sin_cos();
        match self.anchor {
            Anchor::Quarter(q) => rot(q, c, s),
            Anchor::Fold(q) => {
                let r = p.r_norm();
                rot(q, (p.rho * c - p.omega * s) / r, (p.omega * c + p.rho * s) / r)
            }
        }
    }

    /// `(cos(ξ − φ), sin(ξ − φ))`.
    pub fn cos_sin_xi_minus_phi(&self, p: &ReturnMapParams) -> (f64, f64) {
        match self.anchor {
            Anchor::Fold(q) => {
                let (s, c) = self.eta.sin_cos();
                rot(q, c, s)
            }
            Anchor::Quarter(_) => {
                let (c, s) = self.cos_sin_xi(p);
                let r = p.r_norm();
                let (cp, sp) = (p.rho / r, p.omega / r);
                (c * cp + s * sp, s * cp - c * sp)
            }
        }
    }

    /// `(cos(ξ + δ), sin(ξ + δ))`.
    pub fn cos_sin_shifted(&self, p: &ReturnMapParams, delta: f64) -> (f64, f64) {
        let (c, s) = self.cos_sin_xi(p);
        let (sd, cd) = delta.sin_cos();
        (c * cd - s * sd, s * cd + c * sd)
    }

    /// The phase `ξ` reduced to `[0, 2π)`.
    pub fn xi(&self, p: &ReturnMapParams) -> f64 {
        (self.anchor.angle(p.phi()) + self.eta).rem_euclid(TAU)
    }

    pub fn xi_coordinate(&self, p: &ReturnMapParams) -> XiCoordinate {
        let total = self.anchor.angle(p.phi()) + self.eta;
        let turns = (total / TAU).floor();
        XiCoordinate { j: self.j + turns as i64, xi: (total - turns * TAU).max(0.0) }
    }

    pub fn to_section(&self, p: &ReturnMapParams) -> SectionPoint {
        SectionPoint::new(self.x(p), self.y, self.z.clone())
    }

    /// Picks the nearest anchor among the quarter turns and `φ + π/2`, `φ + 3π/2`.
    pub fn from_section(pt: &SectionPoint, p: &ReturnMapParams) -> Result<PhasePoint, MapError> {
        let side = pt.side();
        if side == Side::Pi0 {
            return Err(MapError::Domain("phase coordinates need x != 0".into()));
        }
        let total = p.omega * (-pt.x.abs().ln()) + p.theta;
        let phi = p.phi();
        let candidates = [
            Anchor::Quarter(0),
            Anchor::Quarter(1),
            Anchor::Quarter(2),
            Anchor::Quarter(3),
            Anchor::Fold(1),
            Anchor::Fold(3),
        ];
        let mut best: Option<(f64, i64, Anchor)> = None;
        for a in candidates {
            let ang = a.angle(phi);
            let j = ((total - ang) / TAU).round();
            let eta = total - ang - j * TAU;
            if best.is_none_or(|(e, _, _)| eta.abs() < e.abs()) {
                best = Some((eta, j as i64, a));
            }
        }
        let (eta, j, anchor) = best.expect("candidate list is not empty");
        Ok(PhasePoint { side, j, anchor, eta, y: pt.y, z: pt.z.clone() })
    }

    /// `z` as seen by the `T1` form of the map (`S z` on `Π₂`).
    pub(crate) fn z_eff(&self, p: &ReturnMapParams) -> Vec<f64> {
        match self.side {
            Side::Pi2 => self.z.iter().zip(&p.involution).map(|(z, s)| s * z).collect(),
            _ => self.z.clone(),
        }
    }
}

/// One application of the map evaluated from anchored coordinates, with partial
/// derivatives in the source variables `(η, y, z..)`.
#[derive(Debug, Clone)]
pub(crate) struct StepEval {
    /// `x̄` in `T1` form: `μ + A y |x|^ρ (cos ξ + γ)`; the signed image is `side · w`.
    pub w: f64,
    /// `A y |x|^ρ`.
    pub lead: f64,
    /// `cos ξ + γ` with `γ = g_1 / lead`.
    pub cg: f64,
    /// `ln |w|`, computed without cancellation when `μ = 0`.
    pub ln_abs_w: f64,
    /// Cancellation factor `(|μ| + |lead · cg|) / |w|`.
    pub cancellation: f64,
    pub w_grad: Vec<f64>,
    pub lead_grad: Vec<f64>,
    /// Remaining image components `(ȳ, z̄..)` after the reflection.
    pub rest: Vec<f64>,
    pub rest_grad: Vec<Vec<f64>>,
}

pub(crate) fn eval_step(src: &PhasePoint, p: &ReturnMapParams) -> StepEval {
    let nz = p.nz();
    let nv = 2 + nz;
    let ax = src.abs_x(p);
    let ln_x = src.ln_abs_x(p);
    let xr = (p.rho * ln_x).exp();
    let y = src.y;
    let z_eff = src.z_eff(p);
    let flip: Vec<f64> = match src.side {
        Side::Pi2 => p.involution.clone(),
        _ => vec![1.0; nz],
    };
    let (c, s) = src.cos_sin_xi(p);
    let dx_deta = -ax / p.omega;

    let g0 = p.small_terms.eval(0, ax, y, &z_eff, p.rho);
    let lead = p.a * y * xr;
    let cg = c + g0.value / lead;
    let w = p.mu + lead * cg;
    let ln_abs_w = if p.mu == 0.0 { (p.a * y).ln() + p.rho * ln_x + cg.abs().ln() } else { w.abs().ln() };
    let cancellation = if w == 0.0 { f64::INFINITY } else { (p.mu.abs() + (lead * cg).abs()) / w.abs() };

    let mut w_grad = vec![0.0; nv];
    w_grad[0] = lead * (-p.rho / p.omega * c - s) + g0.dx * dx_deta;
    w_grad[1] = p.a * xr * c + g0.dy;
    for m in 0..nz {
        w_grad[2 + m] = g0.dz[m] * flip[m];
    }
    let mut lead_grad = vec![0.0; nv];
    lead_grad[0] = -p.rho / p.omega * lead;
    lead_grad[1] = p.a * xr;

    let mut rest = Vec::with_capacity(1 + nz);
    let mut rest_grad = Vec::with_capacity(1 + nz);
    for comp in 1..=1 + nz {
        let amp = p.a_side[comp - 1];
        let (cs, ss) = src.cos_sin_shifted(p, p.theta_side[comp - 1] - p.theta);
        let g = p.small_terms.eval(comp, ax, y, &z_eff, p.rho);
        let base = if comp == 1 { 1.0 } else { p.z_plus[comp - 2] };
        let out_sign = if comp == 1 { 1.0 } else { flip[comp - 2] };
        let val = base + amp * y * xr * cs + g.value;
        let mut grad = vec![0.0; nv];
        grad[0] = amp * y * xr * (-p.rho / p.omega * cs - ss) + g.dx * dx_deta;
        grad[1] = amp * xr * cs + g.dy;
        for m in 0..nz {
            grad[2 + m] = g.dz[m] * flip[m];
        }
        rest.push(out_sign * val);
        rest_grad.push(grad.into_iter().map(|v| out_sign * v).collect());
    }
    StepEval { w, lead, cg, ln_abs_w, cancellation, w_grad, lead_grad, rest, rest_grad }
}

/// Jacobian of `T` in `(x, y, z)` coordinates at an anchored point; the `(0, 0)`
/// entry uses the exact `cos(ξ − φ)`.
pub fn jacobian_at_phase(pt: &PhasePoint, p: &ReturnMapParams) -> DMatrix<f64> {
    let d = p.dim();
    let ax = pt.abs_x(p);
    let ln_x = pt.ln_abs_x(p);
    let xr = (p.rho * ln_x).exp();
    let xr1 = (((p.rho - 1.0) * ln_x).exp()).max(f64::MIN_POSITIVE);
    let y = pt.y;
    let z_eff = pt.z_eff(p);
    let mut j = DMatrix::zeros(d, d);
    for row in 0..d {
        let g = p.small_terms.eval(row, ax, y, &z_eff, p.rho);
        if row == 0 {
            let (c, _) = pt.cos_sin_xi(p);
            let (cphi, _) = pt.cos_sin_xi_minus_phi(p);
            j[(0, 0)] = p.a * y * xr1 * p.r_norm() * cphi + g.dx;
            j[(0, 1)] = p.a * xr * c + g.dy;
        } else {
            let amp = p.a_side[row - 1];
            let (c, s) = pt.cos_sin_shifted(p, p.theta_side[row - 1] - p.theta);
            j[(row, 0)] = amp * y * xr1 * (p.rho * c + p.omega * s) + g.dx;
            j[(row, 1)] = amp * xr * c + g.dy;
        }
        for m in 0..p.nz() {
            j[(row, 2 + m)] = g.dz[m];
        }
    }
    match pt.side {
        Side::Pi2 => conjugate_by_reflection(&j, p),
        _ => j,
    }
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}
