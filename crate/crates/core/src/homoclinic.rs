//! Bifurcation equations of the symmetric loop pair: double-round loop values of
//! `μ`, the `W^u(P) ∩ W^ss(M⁻)` system, index-2 period-2 pairs, the survival
//! threshold of the ladder and the expansion walk near `Π₀`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifolds::{quasi_transversality, wss_of_m_minus, LeafModel, ManifoldError};
use crate::orbit_tools::{
    c_star, find_periodic_orbit, fixed_point_for, leading_pair, orbit_equations, orbit_multipliers, OrbitError,
    OrbitRecord,
};
use crate::phase::{eval_step, Anchor, PhasePoint};
use crate::return_map::{apply_t, jacobian_t1, MapError, ReturnMapParams, SectionPoint, Side};
use crate::roots::{illinois, newton_bisect, RootError};

/// Loop roots must send `M⁻` to within this multiple of `|μ|^ρ` of `Π₀`.
pub const LOOP_RESIDUAL_FACTOR: f64 = 1e-10;
/// Heteroclinic residuals must fall below this multiple of `max(|μ|, t^ρ)`.
pub const HETERO_RESIDUAL_FACTOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomoclinicError {
    #[error("no sign change near the seed: {0}")]
    NoBracket(String),
    #[error("no root on the bracket: {0}")]
    NoRoot(String),
    #[error("inconsistent branch: {0}")]
    InconsistentBranch(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("expansion stalled after {rounds} rounds")]
    Stall { rounds: usize, maxima: Vec<f64> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Root(#[from] RootError),
}

/// A value of `μ` at which `Γ⁻` closes after two rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRoot {
    pub j0: i64,
    pub m: u8,
    pub mu: f64,
    /// `|x|` of the image of `M⁻`.
    pub residual: f64,
    pub sign: f64,
    /// Leading-order value `±exp((−2πj₀ − π/2 − mπ + θ)/ω)`.
    pub seed: f64,
    /// Phase offset of `|μ|` from the seed.
    pub eta: f64,
    /// `|μ/seed − 1|`.
    pub relative_gap: f64,
}

fn loop_point(params: &ReturnMapParams, j0: i64, m: u8, sign: f64, eta: f64) -> PhasePoint {
    let z = if sign > 0.0 {
        params.z_plus.clone()
    } else {
        params.z_plus.iter().zip(&params.involution).map(|(z, s)| z * s).collect()
    };
    PhasePoint { side: Side::Pi1, j: j0, anchor: Anchor::Quarter(1 + 2 * m), eta, y: 1.0, z }
}

/// Solves `T(M⁻) ∈ Π₀` for `μ` near the leading-order seed.
pub fn solve_double_round_mu(params: &ReturnMapParams, j0: i64, m: u8, sign: f64) -> Result<LoopRoot, HomoclinicError> {
    if m > 1 {
        return Err(HomoclinicError::InvalidInput(format!("m must be 0 or 1, got {m}")));
    }
    if sign != 1.0 && sign != -1.0 {
        return Err(HomoclinicError::InvalidInput(format!("sign must be +1 or -1, got {sign}")));
    }
    let seed_ln = -(TAU * j0 as f64 + FRAC_PI_2 + m as f64 * PI - params.theta) / params.omega;
    if !(seed_ln.exp() < params.delta) || seed_ln < (1e-300f64).ln() {
        return Err(HomoclinicError::InvalidInput(format!("j0 = {j0} puts the seed outside (1e-300, delta)")));
    }
    let f = |eta: f64| {
        let pp = loop_point(params, j0, m, sign, eta);
        let abs_mu = pp.abs_x(params);
        let q = params.with_mu(sign * abs_mu);
        let st = eval_step(&pp, &q);
        let head = ((1.0 - params.rho) * pp.ln_abs_x(params)).exp();
        let val = sign * head + params.a * st.cg;
        let d = -sign * (1.0 - params.rho) / params.omega * head
            + params.a * (st.w_grad[0] - st.cg * st.lead_grad[0]) / st.lead;
        (val, d)
    };
    let half = params.omega.abs() * 1.5f64.ln();
    let root = newton_bisect(f, -half, half, 1e-15, 200).map_err(|e| match e {
        RootError::NoBracket { .. } => HomoclinicError::NoBracket(format!("j0 = {j0}, m = {m}, sign = {sign}")),
        other => other.into(),
    })?;
    let eta = root.x;
    let pp = loop_point(params, j0, m, sign, eta);
    let mu = sign * pp.abs_x(params);
    let q = params.with_mu(mu);
    let img = apply_t(&crate::manifolds::m_minus(&q), &q)?;
    let seed = sign * seed_ln.exp();
    Ok(LoopRoot {
        j0,
        m,
        mu,
        residual: img.x.abs(),
        sign,
        seed,
        eta,
        relative_gap: (-eta / params.omega).exp_m1().abs(),
    })
}

impl LoopRoot {
    pub fn residual_ok(&self, rho: f64) -> bool {
        self.residual < LOOP_RESIDUAL_FACTOR * self.mu.abs().powf(rho)
    }
}

/// Constants of the survival sandwich `C₁|μ|^{1/ρ} < x_{k*} < C₂|μ|^{1/(2ρ)}`.
///
/// A ladder point can only close while `A y x^ρ ≥ |μ|`, which puts the edge of
/// survival at `C₁ = A^{-1/ρ}`; the default assumes `A = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SurvivalConstants {
    fn default() -> Self {
        SurvivalConstants { c1: 1.0, c2: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalThreshold {
    pub k_star: i64,
    pub x_kstar: f64,
    pub ln_lower: f64,
    pub ln_upper: f64,
    pub sandwich_ok: bool,
}

/// First ladder index whose seed lies inside the section.
pub fn first_ladder_index(params: &ReturnMapParams) -> i64 {
    let mut k = ((params.ladder_constant().ln() - params.delta.ln()) * params.omega / PI).floor() as i64;
    while params.ladder_seed(k) >= params.delta {
        k += 1;
    }
    while params.ladder_seed(k - 1) < params.delta {
        k -= 1;
    }
    k
}

/// Largest `k` with `x_k > C₁|μ|^{1/ρ}`, worked out in logarithms.
pub fn survival_threshold(
    params: &ReturnMapParams,
    mu: f64,
    consts: SurvivalConstants,
) -> Result<SurvivalThreshold, HomoclinicError> {
    if mu == 0.0 || !mu.is_finite() {
        return Err(HomoclinicError::InvalidInput("survival threshold needs mu != 0".into()));
    }
    let ln_mu = mu.abs().ln();
    let ln_lower = consts.c1.ln() + ln_mu / params.rho;
    let ln_upper = consts.c2.ln() + ln_mu / (2.0 * params.rho);
    let bound = params.omega * (params.ladder_constant().ln() - ln_lower) / PI;
    let mut k_star = bound.ceil() as i64 - 1;
    while params.ladder_seed_ln(k_star + 1) > ln_lower {
        k_star += 1;
    }
    while params.ladder_seed_ln(k_star) <= ln_lower {
        k_star -= 1;
    }
    let k_min = first_ladder_index(params);
    if k_star < k_min {
        k_star = k_min - 1;
    }
    let ln_x = params.ladder_seed_ln(k_star);
    Ok(SurvivalThreshold {
        k_star,
        x_kstar: ln_x.exp(),
        ln_lower,
        ln_upper,
        sandwich_ok: ln_lower < ln_x && ln_x < ln_upper,
    })
}

/// Tunables of the heteroclinic solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeteroOptions {
    /// Ladder index of the index-1 point `P`.
    pub p_k: i64,
    /// Relative slack for small terms in the `ρ` bracket.
    pub slack: f64,
}

impl Default for HeteroOptions {
    fn default() -> Self {
        HeteroOptions { p_k: 2, slack: 0.1 }
    }
}

/// Solution of `W^u(P) ∩ W^ss(M⁻)` in `(t, ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroSolution {
    pub t: f64,
    pub rho_star: f64,
    pub k: i64,
    /// Half-turn count `q = 2k + parity` of the spiral phase.
    pub q: i64,
    pub mu: f64,
    /// `(x, y)` mismatch between spiral and leaf.
    pub residuals: [f64; 2],
    pub bracket: (f64, f64),
    pub u: f64,
    pub v: f64,
    pub loop_root: LoopRoot,
    pub fixed_point: OrbitRecord,
    pub leaf: LeafModel,
    pub point: SectionPoint,
    /// `∂/∂t` of the spiral at the intersection.
    pub spiral_tangent: Vec<f64>,
}

impl HeteroSolution {
    pub fn residual_scale(&self, rho: f64) -> f64 {
        self.mu.abs().max(self.t.powf(rho))
    }

    pub fn residuals_ok(&self) -> bool {
        let tol = HETERO_RESIDUAL_FACTOR * self.residual_scale(self.rho_star);
        self.residuals.iter().all(|r| r.abs() < tol)
    }
}

struct HeteroEval {
    params: ReturnMapParams,
    loop_root: LoopRoot,
    fixed_point: OrbitRecord,
    leaf: LeafModel,
    ln_t: f64,
    spiral: SpiralOffsets,
    /// `t^ρ` required by the x-equation.
    rr: f64,
}

impl HeteroEval {
    fn g(&self) -> f64 {
        (self.params.rho * self.ln_t - self.rr.ln()) / (self.params.omega * self.ln_t)
    }

    fn residuals(&self) -> [f64; 2] {
        self.spiral.mismatch(&self.leaf, &self.params)
    }

    fn point(&self) -> SectionPoint {
        let z = self.params.z_plus.iter().zip(&self.spiral.dz).map(|(a, b)| a + b).collect();
        SectionPoint::new(self.spiral.x, 1.0 + self.spiral.dy, z)
    }
}

/// Image of `(t, y_p, z_p)` under `T1`, with `y` and `z` stored as offsets
/// from `(1, z⁺)` so that the phase survives when `t^ρ` is tiny.
struct SpiralOffsets {
    x: f64,
    dy: f64,
    dz: Vec<f64>,
}

impl SpiralOffsets {
    fn at(p: &ReturnMapParams, fp: &SectionPoint, ln_t: f64) -> SpiralOffsets {
        let t = ln_t.exp();
        let lead = fp.y * (p.rho * ln_t).exp();
        let wl = -p.omega * ln_t;
        let g = |k: usize| p.small_terms.eval(k, t, fp.y, &fp.z, p.rho).value;
        SpiralOffsets {
            x: p.mu + p.a * lead * (wl + p.theta).cos() + g(0),
            dy: p.a_side[0] * lead * (wl + p.theta_side[0]).cos() + g(1),
            dz: (0..p.nz()).map(|m| p.a_side[m + 1] * lead * (wl + p.theta_side[m + 1]).cos() + g(m + 2)).collect(),
        }
    }

    /// `Σ a·(z − z_leaf)` for one slope row of the leaf.
    fn leaf_offset(&self, slopes: &[f64], leaf: &LeafModel, p: &ReturnMapParams) -> f64 {
        slopes
            .iter()
            .zip(self.dz.iter().zip(p.z_plus.iter().zip(&leaf.base.z)))
            .map(|(a, (dz, (zp, z0)))| a * ((zp - z0) + dz))
            .sum()
    }

    fn mismatch(&self, leaf: &LeafModel, p: &ReturnMapParams) -> [f64; 2] {
        let x_leaf = leaf.base.x + self.leaf_offset(&leaf.a1, leaf, p);
        let dy_leaf = (leaf.base.y - 1.0) + self.leaf_offset(&leaf.a2, leaf, p);
        [self.x - x_leaf, self.dy - dy_leaf]
    }
}

/// Parity of the half-turn count for which the x-equation has the right sign.
pub fn hetero_parity(params: &ReturnMapParams, mu_sign: f64) -> i64 {
    let s = (params.theta_side[0] - params.theta).sin();
    if -mu_sign * s > 0.0 {
        0
    } else {
        1
    }
}

fn hetero_eval(
    params: &ReturnMapParams,
    lr: &LoopRoot,
    q: i64,
    opts: &HeteroOptions,
    rho: f64,
) -> Result<HeteroEval, HomoclinicError> {
    let pr = params.with_rho(rho);
    let lr = solve_double_round_mu(&pr, lr.j0, lr.m, lr.sign)?;
    let pm = pr.with_mu(lr.mu);
    let fp = fixed_point_for(&pm, opts.p_k)?;
    let leaf = wss_of_m_minus(&pm)?;
    let base = fp.points[0].clone();
    let ln_t0 = -(FRAC_PI_2 + q as f64 * PI - pm.theta_side[0]) / pm.omega;
    if ln_t0 >= base.x.ln() {
        return Err(HomoclinicError::InconsistentBranch(format!(
            "t = {:e} is not below x_p = {:e}",
            ln_t0.exp(),
            base.x
        )));
    }
    let e2 = |u: f64| SpiralOffsets::at(&pm, &base, u).mismatch(&leaf, &pm)[1];
    let half = FRAC_PI_2 / (2.0 * pm.omega.abs());
    let ln_t = illinois(e2, ln_t0 - half, ln_t0 + half, 1e-16, 400)?.x;
    if ln_t >= base.x.ln() {
        return Err(HomoclinicError::InconsistentBranch(format!(
            "t = {:e} is not below x_p = {:e}",
            ln_t.exp(),
            base.x
        )));
    }
    let spiral = SpiralOffsets::at(&pm, &base, ln_t);
    let g0 = pm.small_terms.eval(0, ln_t.exp(), base.y, &base.z, pm.rho).value;
    let cos_t = (pm.omega * -ln_t + pm.theta).cos();
    let rr = -(2.0 * pm.mu + g0 - spiral.leaf_offset(&leaf.a1, &leaf, &pm)) / (pm.a * base.y * cos_t);
    if !(rr > 0.0) {
        return Err(HomoclinicError::InconsistentBranch(format!("spiral amplitude has the wrong sign at q = {q}")));
    }
    Ok(HeteroEval { params: pm, loop_root: lr, fixed_point: fp, leaf, ln_t, spiral, rr })
}

/// `ρ`-bracket from the extreme singular values of the phase matrix.
fn hetero_bracket(params: &ReturnMapParams, mu: f64, y_p: f64, ln_t: f64, slack: f64) -> (f64, f64) {
    let m = DMatrix::from_row_slice(
        2,
        2,
        &[
            params.a * params.theta.cos(),
            -params.a * params.theta.sin(),
            params.a_side[0] * params.theta_side[0].cos(),
            -params.a_side[0] * params.theta_side[0].sin(),
        ],
    );
    let sv = m.singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    let margin = 1.1;
    let hi_tr = 2.0 * mu.abs() * margin / (smin * y_p * (1.0 - slack));
    let lo_tr = 2.0 * mu.abs() / (margin * smax * y_p * (1.0 + slack));
    let r1 = (hi_tr.ln() / ln_t).clamp(0.01, 0.99);
    let r2 = (lo_tr.ln() / ln_t).clamp(0.01, 0.99);
    (r1.min(r2), r1.max(r2))
}

/// Solves the spiral/leaf intersection for `(t, ρ)` at winding `k`.
pub fn solve_hetero_wu_wss(
    params: &ReturnMapParams,
    lr: &LoopRoot,
    k: i64,
    opts: &HeteroOptions,
) -> Result<HeteroSolution, HomoclinicError> {
    let q = 2 * k + hetero_parity(params, lr.sign);
    let start = hetero_eval(params, lr, q, opts, params.rho)?;
    let bracket = hetero_bracket(params, start.loop_root.mu, start.fixed_point.points[0].y, start.ln_t, opts.slack);
    let g = |rho: f64| hetero_eval(params, lr, q, opts, rho).map(|e| e.g()).unwrap_or(f64::NAN);
    let root = illinois(g, bracket.0, bracket.1, 1e-15, 300).map_err(|e| match e {
        RootError::NoBracket { flo, fhi, .. } => HomoclinicError::NoRoot(format!(
            "G keeps its sign on [{:.6}, {:.6}] (G = {flo:e}, {fhi:e})",
            bracket.0, bracket.1
        )),
        RootError::NonFinite { at } => HomoclinicError::NoRoot(format!("G undefined at rho = {at}")),
        other => other.into(),
    })?;
    let ev = hetero_eval(params, lr, q, opts, root.x)?;
    let t = ev.ln_t.exp();
    let point = ev.point();
    let spiral_tangent =
        jacobian_t1(&SectionPoint::new(t, ev.fixed_point.points[0].y, ev.fixed_point.points[0].z.clone()), &ev.params)?
            .column(0)
            .iter()
            .copied()
            .collect();
    Ok(HeteroSolution {
        t,
        rho_star: root.x,
        k,
        q,
        mu: ev.params.mu,
        residuals: ev.residuals(),
        bracket,
        u: 2.0 * ev.params.mu,
        v: ev.spiral.dy,
        loop_root: ev.loop_root.clone(),
        spiral_tangent,
        fixed_point: ev.fixed_point,
        leaf: ev.leaf,
        point,
    })
}

/// Splitting functional `ν`: signed x-offset between the spiral and the
/// `W^ss(M⁻)` leaf at the spiral parameter where their y-components agree.
/// It vanishes exactly at an intersection.
pub fn splitting_nu(
    params: &ReturnMapParams,
    lr: &LoopRoot,
    k: i64,
    opts: &HeteroOptions,
) -> Result<f64, HomoclinicError> {
    let q = 2 * k + hetero_parity(params, lr.sign);
    let ev = hetero_eval(params, lr, q, opts, params.rho)?;
    Ok(ev.residuals()[0])
}

/// Tunables of the index-2 pair solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Index2Options {
    pub c_target: f64,
    pub max_rho_shift: f64,
}

impl Default for Index2Options {
    fn default() -> Self {
        Index2Options { c_target: 0.0, max_rho_shift: 0.05 }
    }
}

/// A period-2 orbit on `Π₁` whose two leading multipliers both leave the unit circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index2Pair {
    pub xi1: f64,
    pub xi2: f64,
    pub j1: i64,
    pub j2: i64,
    pub k2: i64,
    pub eta1: f64,
    pub eta2: f64,
    pub rho: f64,
    pub c: f64,
    /// Step-1 equations, step-2 equations, boundary coefficient.
    pub residuals: [f64; 3],
    pub seeds: Vec<PhasePoint>,
    /// Value reached by the branch fixed-point iteration before the joint solve.
    pub rho_hat: f64,
}

impl Index2Pair {
    /// Map parameters at which the pair is an exact orbit.
    pub fn params(&self, base: &ReturnMapParams) -> ReturnMapParams {
        base.with_rho(self.rho).with_mu(0.0)
    }

    pub fn seed_points(&self, base: &ReturnMapParams) -> Vec<SectionPoint> {
        let p = self.params(base);
        self.seeds.iter().map(|s| s.to_section(&p)).collect()
    }
}

fn xi2_anchor(k2: i64) -> Anchor {
    if k2.rem_euclid(2) == 0 {
        Anchor::Quarter(1)
    } else {
        Anchor::Quarter(3)
    }
}

/// Branch fixed point `ρ̂ = (2πj₂ + ξ₂ − θ + ω ln(A cos ξ₁)) / (2πj₁ + ξ₁ − θ)`
/// with `ξ₁ = 3π/2 + φ(ρ̂)` and `ξ₂ = π/2 + k₂π`.
pub fn index2_rho_hat(params: &ReturnMapParams, j1: i64, j2: i64, k2: i64) -> f64 {
    let xi2 = FRAC_PI_2 + k2.rem_euclid(2) as f64 * PI;
    let mut rho = params.rho;
    for _ in 0..100 {
        let phi = params.omega.atan2(rho);
        let xi1 = 1.5 * PI + phi;
        let next = (TAU * j2 as f64 + xi2 - params.theta + params.omega * (params.a * phi.sin()).ln())
            / (TAU * j1 as f64 + xi1 - params.theta);
        let done = (next - rho).abs() < 1e-15;
        rho = next;
        if done {
            break;
        }
    }
    rho
}

/// `j₂` whose branch value `ρ̂` is closest to `params.rho`.
pub fn nearest_j2(params: &ReturnMapParams, j1: i64, k2: i64) -> i64 {
    let phi = params.phi();
    let xi1 = 1.5 * PI + phi;
    let xi2 = FRAC_PI_2 + k2.rem_euclid(2) as f64 * PI;
    let v = (params.rho * (TAU * j1 as f64 + xi1 - params.theta) - xi2 + params.theta
        - params.omega * (params.a * phi.sin()).ln())
        / TAU;
    v.round() as i64
}

struct PairLayout {
    j1: i64,
    j2: i64,
    k2: i64,
    rho_hat: f64,
    s1: f64,
    sign2: f64,
    nz: usize,
}

impl PairLayout {
    fn unpack(&self, base: &ReturnMapParams, u: &DVector<f64>) -> (ReturnMapParams, Vec<PhasePoint>) {
        let nz = self.nz;
        let rho = self.rho_hat + 1e-3 * u[2 * (2 + nz)];
        let p = base.with_rho(rho).with_mu(0.0);
        let p1 = PhasePoint {
            side: Side::Pi1,
            j: self.j1,
            anchor: Anchor::Fold(3),
            eta: self.s1 * u[0],
            y: u[1],
            z: (0..nz).map(|m| u[2 + m]).collect(),
        };
        let o = 2 + nz;
        let p2 = PhasePoint {
            side: Side::Pi1,
            j: self.j2,
            anchor: xi2_anchor(self.k2),
            eta: self.sign2 * u[o].exp(),
            y: u[o + 1],
            z: (0..nz).map(|m| u[o + 2 + m]).collect(),
        };
        (p, vec![p1, p2])
    }

    fn residual(&self, base: &ReturnMapParams, u: &DVector<f64>, c_target: f64) -> Option<DVector<f64>> {
        let (p, pts) = self.unpack(base, u);
        if !(p.rho > 0.0 && p.rho < 1.0) {
            return None;
        }
        let eq = orbit_equations(&pts, &p)?;
        let (l1, l2) = leading_pair(&orbit_multipliers(&pts, &p));
        let c = c_star((l1 + l2).re, (l1 * l2).re).ok()?;
        let mut r = DVector::zeros(eq.len() + 1);
        r.rows_mut(0, eq.len()).copy_from(&eq);
        r[eq.len()] = c - c_target;
        r.iter().all(|v| v.is_finite()).then_some(r)
    }
}

fn solve_pair_branch(
    params: &ReturnMapParams,
    j1: i64,
    j2: i64,
    k2: i64,
    opts: &Index2Options,
) -> Result<Index2Pair, HomoclinicError> {
    let nz = params.nz();
    let rho_hat = index2_rho_hat(params, j1, j2, k2);
    if !(rho_hat > 0.0 && rho_hat < 1.0) {
        return Err(HomoclinicError::OutOfRange(format!("branch value rho = {rho_hat} for (j1, j2) = ({j1}, {j2})")));
    }
    let p0 = params.with_rho(rho_hat).with_mu(0.0);
    let probe =
        |j: i64, anchor: Anchor| PhasePoint { side: Side::Pi1, j, anchor, eta: 0.0, y: 1.0, z: p0.z_plus.clone() };
    let q1 = probe(j1, Anchor::Fold(3));
    let q2 = probe(j2, xi2_anchor(k2));
    let (ln_x1, ln_x2) = (q1.ln_abs_x(&p0), q2.ln_abs_x(&p0));
    let c12 = p0.omega * p0.a * p0.a_side[0] * (p0.theta_side[0] - p0.theta).sin();
    let cos2 = q2.cos_sin_xi_minus_phi(&p0).0.abs();
    let s1 = (c12 * c12 * (p0.rho * (ln_x1 + ln_x2)).exp() / (p0.a * p0.a * p0.r_norm().powi(2) * cos2)).min(1e-2);
    let layout = PairLayout { j1, j2, k2, rho_hat, s1, sign2: if k2.rem_euclid(2) == 0 { -1.0 } else { 1.0 }, nz };

    let n = 2 * (2 + nz) + 1;
    let mut u = DVector::zeros(n);
    u[1] = 1.0;
    u[2 + nz + 1] = 1.0;
    for m in 0..nz {
        u[2 + m] = p0.z_plus[m];
        u[2 + nz + 2 + m] = p0.z_plus[m];
    }
    u[2 + nz] = ln_x1 - p0.a.ln() - p0.rho * ln_x2;
    let steps: Vec<f64> = (0..n)
        .map(|i| {
            let local = i % (2 + nz);
            if i == n - 1 {
                1e-5
            } else if local == 0 {
                1e-6
            } else {
                1e-7
            }
        })
        .collect();
    let bad = |what: &str| HomoclinicError::OutOfRange(format!("index-2 solve for (j1, j2) = ({j1}, {j2}): {what}"));
    let mut r = layout.residual(params, &u, opts.c_target).ok_or_else(|| bad("seed outside the domain"))?;
    for _ in 0..40 {
        if r.amax() < 1e-13 {
            break;
        }
        let mut jac = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[c] += steps[c];
            dn[c] -= steps[c];
            let (fu, fd) =
                match (layout.residual(params, &up, opts.c_target), layout.residual(params, &dn, opts.c_target)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(bad("difference stencil left the domain")),
                };
            jac.set_column(c, &((fu - fd) / (2.0 * steps[c])));
        }
        let delta = jac.lu().solve(&r).ok_or_else(|| bad("singular Jacobian"))?;
        let mut lambda = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let trial = &u - lambda * &delta;
            if let Some(rt) = layout.residual(params, &trial, opts.c_target) {
                if rt.amax() < r.amax() || rt.amax() < 1e-13 {
                    next = Some((trial, rt));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match next {
            Some((t, rt)) => {
                u = t;
                r = rt;
            }
            None => break,
        }
    }
    let (p, pts) = layout.unpack(params, &u);
    let eq_tol = 1e-11;
    let v = 2 + nz;
    let step1 = r.rows(0, v).amax();
    let step2 = r.rows(v, v).amax();
    let c_res = r[n - 1].abs();
    if !(step1 < eq_tol && step2 < eq_tol && c_res < 1e-9) {
        return Err(bad(&format!("joint solve stalled (residuals {step1:e}, {step2:e}, {c_res:e})")));
    }
    let c = opts.c_target + r[n - 1];
    if (p.rho - params.rho).abs() > opts.max_rho_shift {
        return Err(HomoclinicError::OutOfRange(format!(
            "pair needs rho = {:.9}, more than {} away from {}",
            p.rho, opts.max_rho_shift, params.rho
        )));
    }
    if !(c > -1.0 && c < 1.0) {
        return Err(HomoclinicError::OutOfRange(format!("closing c = {c} outside (-1, 1)")));
    }
    Ok(Index2Pair {
        xi1: pts[0].xi(&p),
        xi2: pts[1].xi(&p),
        j1,
        j2,
        k2: k2.rem_euclid(2),
        eta1: pts[0].eta,
        eta2: pts[1].eta,
        rho: p.rho,
        c,
        residuals: [step1, step2, c_res],
        seeds: pts,
        rho_hat,
    })
}

/// Index-2 period-2 pair at turn counts `(j1, j2)` with `c = 0`; both `ξ₂`
/// branches are tried and the one closest to `params.rho` is kept.
pub fn solve_index2_pair(params: &ReturnMapParams, j1: i64, j2: i64) -> Result<Index2Pair, HomoclinicError> {
    solve_index2_pair_with(params, j1, j2, &Index2Options::default())
}

pub fn solve_index2_pair_with(
    params: &ReturnMapParams,
    j1: i64,
    j2: i64,
    opts: &Index2Options,
) -> Result<Index2Pair, HomoclinicError> {
    if j1 < 1 || j2 < 1 {
        return Err(HomoclinicError::InvalidInput(format!("turn counts must be positive, got ({j1}, {j2})")));
    }
    let mut best: Option<Index2Pair> = None;
    let mut last_err = None;
    for k2 in 0..2 {
        match solve_pair_branch(params, j1, j2, k2, opts) {
            Ok(pair) => {
                let better = best.as_ref().is_none_or(|b| (pair.rho - params.rho).abs() < (b.rho - params.rho).abs());
                if better {
                    best = Some(pair);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one branch was tried"))
}

/// Values of `ρ` carrying an index-2 pair for `j1` in a range, each `j1` using
/// the `j2` nearest to `params.rho` on both `ξ₂` branches. Sorted ascending.
pub fn index2_rho_values(
    params: &ReturnMapParams,
    j1_range: std::ops::RangeInclusive<i64>,
    max_rho_shift: f64,
) -> Vec<f64> {
    let opts = Index2Options { c_target: 0.0, max_rho_shift };
    let mut out = Vec::new();
    for j1 in j1_range {
        for k2 in 0..2 {
            let j2 = nearest_j2(params, j1, k2);
            for dj in -1..=1 {
                if let Ok(p) = solve_pair_branch(params, j1, j2 + dj, k2, &opts) {
                    out.push(p.rho);
                }
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite rho"));
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    out
}

/// Largest gap between consecutive admissible `ρ` values inside `[lo, hi]`,
/// counting the interval ends.
pub fn max_rho_gap(values: &[f64], lo: f64, hi: f64) -> f64 {
    let mut pts: Vec<f64> = values.iter().copied().filter(|r| *r >= lo && *r <= hi).collect();
    pts.insert(0, lo);
    pts.push(hi);
    pts.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Outcome of the expansion walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkResult {
    pub rounds: usize,
    /// Largest x reached after each round, starting with the initial curve.
    pub maxima: Vec<f64>,
    pub target: f64,
}

impl WalkResult {
    pub fn doubled_every_round(&self) -> bool {
        self.maxima.windows(2).all(|w| w[1] > 2.0 * w[0])
    }
}

fn polyline_at(curve: &[SectionPoint], s: f64) -> SectionPoint {
    let n = curve.len() - 1;
    let pos = s.clamp(0.0, 1.0) * n as f64;
    let i = (pos.floor() as usize).min(n - 1);
    let f = pos - i as f64;
    let (a, b) = (&curve[i], &curve[i + 1]);
    let lerp = |u: f64, v: f64| u + f * (v - u);
    SectionPoint::new(lerp(a.x, b.x), lerp(a.y, b.y), a.z.iter().zip(&b.z).map(|(u, v)| lerp(*u, *v)).collect())
}

fn iterate_t2(p: &SectionPoint, params: &ReturnMapParams, times: usize) -> Option<SectionPoint> {
    let mut q = p.clone();
    for _ in 0..2 * times {
        q = apply_t(&q, params).ok()?;
        if !q.is_finite() || q.x.abs() > params.delta {
            return None;
        }
    }
    Some(q)
}

/// Repeatedly maps a curve from `Π₀` under `T²`, tracking its largest x, until
/// it reaches `C₂|μ|^{1/(2ρ)}`. Each round keeps only the part of the curve
/// between `Π₀` and the previous maximizer.
pub fn expansion_escape_walk(
    params: &ReturnMapParams,
    lr: &LoopRoot,
    curve: &[SectionPoint],
    consts: SurvivalConstants,
) -> Result<WalkResult, HomoclinicError> {
    if curve.len() < 2 {
        return Err(HomoclinicError::InvalidInput("curve needs at least two points".into()));
    }
    if curve[0].x != 0.0 {
        return Err(HomoclinicError::InvalidInput("curve must start on Pi0".into()));
    }
    let p = params.with_mu(lr.mu);
    let target = consts.c2 * ((lr.mu.abs().ln()) / (2.0 * p.rho)).exp();
    let start_max = curve.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
    let mut maxima = vec![start_max];
    if start_max >= target {
        return Ok(WalkResult { rounds: 0, maxima, target });
    }
    let mut s_r = 1.0;
    let mut prev = start_max;
    let mut misses = 0;
    let max_rounds = 64;
    for r in 0..max_rounds {
        let mut best = (f64::NEG_INFINITY, s_r);
        let geometric = 1200;
        let uniform = 800;
        let samples = (0..geometric)
            .map(|i| s_r * (-(i as f64) * 90.0 / geometric as f64 * std::f64::consts::LN_10).exp())
            .chain((1..=uniform).map(|i| s_r * i as f64 / uniform as f64));
        for s in samples {
            if let Some(img) = iterate_t2(&polyline_at(curve, s), &p, r + 1) {
                if img.x > best.0 {
                    best = (img.x, s);
                }
            }
        }
        maxima.push(best.0);
        if best.0 >= target {
            return Ok(WalkResult { rounds: r + 1, maxima, target });
        }
        if best.0 > 2.0 * prev {
            misses = 0;
        } else {
            misses += 1;
            if misses >= 3 {
                return Err(HomoclinicError::Stall { rounds: r + 1, maxima });
            }
        }
        prev = best.0.max(prev);
        s_r = best.1;
    }
    Err(HomoclinicError::Stall { rounds: max_rounds, maxima })
}

/// Settings of one `(j0, k)` pipeline attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub m: u8,
    pub sign: f64,
    pub hetero: HeteroOptions,
    pub j1_min: i64,
    pub j1_max: i64,
    pub max_rho_shift: f64,
    pub walk_points: usize,
    pub survival: SurvivalConstants,
    pub qt_threshold: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            m: 0,
            sign: 1.0,
            hetero: HeteroOptions::default(),
            j1_min: 20,
            j1_max: 40,
            max_rho_shift: 0.05,
            walk_points: 65,
            survival: SurvivalConstants::default(),
            qt_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    NoBracket,
    NoRoot,
    OutOfRange,
}

/// Serializable digest of a [`HeteroSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroSummary {
    pub t: f64,
    pub rho_star: f64,
    pub q: i64,
    pub mu: f64,
    pub residuals: [f64; 2],
    pub residuals_ok: bool,
    pub bracket: (f64, f64),
    pub u: f64,
    pub v: f64,
}

impl From<&HeteroSolution> for HeteroSummary {
    fn from(h: &HeteroSolution) -> Self {
        HeteroSummary {
            t: h.t,
            rho_star: h.rho_star,
            q: h.q,
            mu: h.mu,
            residuals: h.residuals,
            residuals_ok: h.residuals_ok(),
            bracket: h.bracket,
            u: h.u,
            v: h.v,
        }
    }
}

/// Index-2 orbit found at the heteroclinic `ρ*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub j1: i64,
    pub j2: i64,
    pub rho: f64,
    pub c: f64,
    pub x: Vec<f64>,
    pub index: usize,
    pub period: usize,
    pub residual: f64,
}

/// One record of the heteroclinic search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub j0: i64,
    pub k: i64,
    pub status: CellStatus,
    pub reason: Option<String>,
    pub loop_root: Option<LoopRoot>,
    pub loop_residual_ok: bool,
    pub hetero: Option<HeteroSummary>,
    pub is_qt: bool,
    pub min_singular: Option<f64>,
    pub pair: Option<PairSummary>,
    pub walk: Option<WalkResult>,
    pub walk_doubling: bool,
}

impl PipelineRecord {
    fn new(j0: i64, k: i64) -> Self {
        PipelineRecord {
            j0,
            k,
            status: CellStatus::Ok,
            reason: None,
            loop_root: None,
            loop_residual_ok: false,
            hetero: None,
            is_qt: false,
            min_singular: None,
            pair: None,
            walk: None,
            walk_doubling: false,
        }
    }

    fn fail(mut self, status: CellStatus, reason: impl Into<String>) -> Self {
        self.status = status;
        self.reason = Some(reason.into());
        self
    }

    /// All four checks of the pipeline hold.
    pub fn is_success(&self) -> bool {
        self.status == CellStatus::Ok
            && self.loop_residual_ok
            && self.is_qt
            && self.pair.as_ref().is_some_and(|p| p.index == 2 && p.period == 2)
            && self.walk_doubling
    }
}

fn status_of(e: &HomoclinicError) -> CellStatus {
    match e {
        HomoclinicError::NoBracket(_) => CellStatus::NoBracket,
        HomoclinicError::OutOfRange(_) | HomoclinicError::InvalidInput(_) => CellStatus::OutOfRange,
        _ => CellStatus::NoRoot,
    }
}

/// First index-2 period-2 orbit over the `j1` range at the given `ρ`.
pub fn index2_orbit_near(
    params: &ReturnMapParams,
    j1_min: i64,
    j1_max: i64,
    max_rho_shift: f64,
) -> Result<(Index2Pair, OrbitRecord), HomoclinicError> {
    let opts = Index2Options { c_target: 0.0, max_rho_shift };
    let mut last = HomoclinicError::OutOfRange(format!("empty j1 range {j1_min}..={j1_max}"));
    for j1 in j1_min..=j1_max {
        for k2 in 0..2 {
            let j2 = nearest_j2(params, j1, k2);
            let pair = match solve_pair_branch(params, j1, j2, k2, &opts) {
                Ok(p) => p,
                Err(e) => {
                    last = e;
                    continue;
                }
            };
            match find_periodic_orbit(&pair.params(params), &pair.seeds) {
                Ok(orbit) if orbit.index == 2 && orbit.period() == 2 => return Ok((pair, orbit)),
                Ok(orbit) => {
                    last = HomoclinicError::OutOfRange(format!("pair at j1 = {j1} refined to index {}", orbit.index))
                }
                Err(e) => last = e.into(),
            }
        }
    }
    Err(last)
}

/// Straight segment at `(y, z) = (1, z⁺)` from `Π₀` to `x_end`.
pub fn walk_segment(params: &ReturnMapParams, x_end: f64, points: usize) -> Vec<SectionPoint> {
    let n = points.max(2);
    (0..n).map(|i| SectionPoint::new(x_end * i as f64 / (n - 1) as f64, 1.0, params.z_plus.clone())).collect()
}

/// Runs loop root, heteroclinic solve, quasi-transversality, the index-2
/// orbit at `ρ*` and the expansion walk for one `(j0, k)`.
pub fn pipeline_cell(params: &ReturnMapParams, j0: i64, k: i64, opts: &PipelineOptions) -> PipelineRecord {
    let rec = PipelineRecord::new(j0, k);
    let lr = match solve_double_round_mu(params, j0, opts.m, opts.sign) {
        Ok(lr) => lr,
        Err(e) => return rec.fail(status_of(&e), format!("loop root: {e}")),
    };
    let mut rec = PipelineRecord { loop_residual_ok: lr.residual_ok(params.rho), loop_root: Some(lr.clone()), ..rec };
    let h = match solve_hetero_wu_wss(params, &lr, k, &opts.hetero) {
        Ok(h) => h,
        Err(e) => return rec.fail(status_of(&e), format!("heteroclinic solve: {e}")),
    };
    rec.hetero = Some(HeteroSummary::from(&h));
    rec.loop_residual_ok = h.loop_root.residual_ok(h.rho_star);
    rec.loop_root = Some(h.loop_root.clone());
    if !h.residuals_ok() {
        return rec.fail(CellStatus::NoRoot, format!("heteroclinic residuals {:?} above tolerance", h.residuals));
    }
    if !(h.rho_star < 0.5) {
        return rec.fail(CellStatus::OutOfRange, format!("rho* = {:.6} is not below 1/2", h.rho_star));
    }
    let spiral = DMatrix::from_column_slice(h.spiral_tangent.len(), 1, &h.spiral_tangent);
    match quasi_transversality(&spiral, &h.leaf.tangent()) {
        Ok(qt) => {
            rec.min_singular = Some(qt.min_singular);
            rec.is_qt = qt.is_qt && qt.min_singular > opts.qt_threshold;
        }
        Err(e) => return rec.fail(CellStatus::NoRoot, format!("tangent check: {e}")),
    }
    if !rec.is_qt {
        return rec.fail(CellStatus::NoRoot, "spiral and leaf are not quasi-transverse");
    }
    let at_star = params.with_rho(h.rho_star);
    let (pair, orbit) = match index2_orbit_near(&at_star, opts.j1_min, opts.j1_max, opts.max_rho_shift) {
        Ok(v) => v,
        Err(e) => return rec.fail(status_of(&e), format!("index-2 orbit: {e}")),
    };
    let orbit_x: Vec<f64> = orbit.points.iter().map(|p| p.x).collect();
    rec.pair = Some(PairSummary {
        j1: pair.j1,
        j2: pair.j2,
        rho: pair.rho,
        c: pair.c,
        x: orbit_x.clone(),
        index: orbit.index,
        period: orbit.period(),
        residual: orbit.residual,
    });
    let target = opts.survival.c2 * (h.mu.abs().ln() / (2.0 * h.rho_star)).exp();
    let x_init = orbit_x.iter().fold(0.0f64, |a, b| a.max(b.abs())).min(0.25 * target);
    let curve = walk_segment(&at_star, x_init, opts.walk_points);
    match expansion_escape_walk(&at_star, &h.loop_root, &curve, opts.survival) {
        Ok(w) => {
            rec.walk_doubling = w.doubled_every_round();
            rec.walk = Some(w);
        }
        Err(e) => return rec.fail(CellStatus::NoRoot, format!("expansion walk: {e}")),
    }
    if !rec.walk_doubling {
        return rec.fail(CellStatus::NoRoot, "expansion walk reached the band without doubling every round");
    }
    rec
}
