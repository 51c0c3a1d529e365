//! Periodic orbits of the return map, their multipliers and index.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phase::{eval_step, jacobian_at_phase, Anchor, PhasePoint, StepEval};
use crate::return_map::{apply_t, MapError, ReturnMapParams, SectionPoint, Side};

/// Newton iteration cap for orbit solves.
pub const MAX_NEWTON_ITERATIONS: usize = 50;
/// Largest number of step halvings per Newton iteration.
pub const MAX_HALVINGS: usize = 20;
/// Residual an orbit must reach to be accepted.
pub const ORBIT_TOLERANCE: f64 = 1e-10;
/// Newton decrement below which iteration stops.
pub const DECREMENT_STOP: f64 = 1e-12;
/// Band around the unit circle treated as undecidable.
pub const MARGINAL_TOLERANCE: f64 = 1e-9;
/// Above this cancellation factor the logarithmic x-equation is abandoned.
const CANCELLATION_LIMIT: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitError {
    #[error("Newton did not converge for {context} (residual {residual:e})")]
    NoConvergence { context: String, residual: f64 },
    #[error("orbit point {index} changed side during the solve")]
    SignFlip { index: usize },
    #[error("multiplier modulus {modulus} is within the marginal band of 1")]
    Marginal { modulus: f64 },
    #[error("invalid seed: {0}")]
    InvalidSeed(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("division guard: lambda1 * lambda2 = -1")]
    DivisionGuard,
    #[error(transparent)]
    Map(#[from] MapError),
}

/// A converged periodic orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitRecord {
    pub points: Vec<SectionPoint>,
    /// Anchored coordinates of the same points, carrying the full phase precision.
    pub phase_points: Vec<PhasePoint>,
    pub multipliers: Vec<Complex<f64>>,
    pub index: usize,
    pub residual: f64,
    pub branch: Vec<Side>,
    pub iterations: usize,
}

impl OrbitRecord {
    pub fn period(&self) -> usize {
        self.points.len()
    }
}

/// Data entering the index-2 criterion for an orbit on `Π₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexCriterionInputs {
    pub xi: Vec<f64>,
    pub j: Vec<i64>,
    pub phi: f64,
    pub c: f64,
    pub psi: f64,
}

impl IndexCriterionInputs {
    /// Collects `ξ_i`, `j_i`, `φ`, the boundary coefficient `c*` of the two
    /// leading multipliers, and `ψ = Π cos(ξ_i − φ) / c`.
    pub fn from_orbit(orbit: &OrbitRecord, params: &ReturnMapParams) -> Result<Self, OrbitError> {
        let mut xi = Vec::new();
        let mut j = Vec::new();
        let mut prod = 1.0;
        for pp in &orbit.phase_points {
            let c = pp.xi_coordinate(params);
            xi.push(c.xi);
            j.push(c.j);
            prod *= pp.cos_sin_xi_minus_phi(params).0;
        }
        let (l1, l2) = leading_pair(&orbit.multipliers);
        let c = c_star((l1 + l2).re, (l1 * l2).re)?;
        let psi = if c != 0.0 { prod / c } else { f64::NAN };
        Ok(IndexCriterionInputs { xi, j, phi: params.phi(), c, psi })
    }
}

/// Outcome of a ladder scan of fixed points of `T1`.
#[derive(Debug, Clone, Default)]
pub struct FixedPointScan {
    pub found: Vec<(i64, OrbitRecord)>,
    pub failed: Vec<(i64, OrbitError)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum XForm {
    Log,
    Linear,
}

fn choose_form(st: &StepEval, sigma: f64) -> XForm {
    if st.w * sigma > 0.0 && st.cancellation <= CANCELLATION_LIMIT {
        XForm::Log
    } else {
        XForm::Linear
    }
}

fn point_ok(pp: &PhasePoint, p: &ReturnMapParams) -> bool {
    let s = pp.s(p);
    s.is_finite() && s > 0.0 && pp.y.is_finite() && pp.y > 0.0 && pp.z.iter().all(|v| v.is_finite())
}

/// Residual vector (and optionally its Jacobian) of the closed-orbit system.
/// Returns `None` when the current point set is outside the domain of the
/// chosen equation forms.
fn system(
    pts: &[PhasePoint],
    p: &ReturnMapParams,
    forms: &[XForm],
    with_jacobian: bool,
) -> Option<(DVector<f64>, Option<DMatrix<f64>>)> {
    let k = pts.len();
    let v = p.dim();
    let n = k * v;
    let mut f = DVector::zeros(n);
    let mut jac = if with_jacobian { Some(DMatrix::zeros(n, n)) } else { None };
    if pts.iter().any(|q| !point_ok(q, p)) {
        return None;
    }
    for i in 0..k {
        let nxt = (i + 1) % k;
        let src = &pts[i];
        let dst = &pts[nxt];
        let st = eval_step(src, p);
        if !st.w.is_finite() {
            return None;
        }
        let sigma = src.side.sign() * dst.side.sign();
        let row = i * v;
        let (cs, cd) = (i * v, nxt * v);
        match forms[i] {
            XForm::Log => {
                if st.w * sigma <= 0.0 || !st.ln_abs_w.is_finite() {
                    return None;
                }
                f[row] = dst.s(p) + p.omega * st.ln_abs_w;
                if let Some(j) = jac.as_mut() {
                    for c in 0..v {
                        j[(row, cs + c)] += p.omega * st.w_grad[c] / st.w;
                    }
                    j[(row, cd)] += 1.0;
                }
            }
            XForm::Linear => {
                let ax_dst = dst.abs_x(p);
                let num = st.w - sigma * ax_dst;
                f[row] = num / st.lead;
                if let Some(j) = jac.as_mut() {
                    for c in 0..v {
                        j[(row, cs + c)] += st.w_grad[c] / st.lead - num * st.lead_grad[c] / (st.lead * st.lead);
                    }
                    j[(row, cd)] += sigma * ax_dst / (p.omega * st.lead);
                }
            }
        }
        for m in 0..v - 1 {
            let target = if m == 0 { dst.y } else { dst.z[m - 1] };
            f[row + 1 + m] = st.rest[m] - target;
            if let Some(j) = jac.as_mut() {
                for c in 0..v {
                    j[(row + 1 + m, cs + c)] += st.rest_grad[m][c];
                }
                j[(row + 1 + m, cd + 1 + m)] -= 1.0;
            }
        }
    }
    Some((f, jac))
}

/// Closed-orbit residuals with the x-equation form picked at the given points.
pub(crate) fn orbit_equations(pts: &[PhasePoint], p: &ReturnMapParams) -> Option<DVector<f64>> {
    let k = pts.len();
    if (0..k).any(|i| !point_ok(&pts[i], p)) {
        return None;
    }
    let forms: Vec<XForm> = (0..k)
        .map(|i| {
            let sigma = pts[i].side.sign() * pts[(i + 1) % k].side.sign();
            choose_form(&eval_step(&pts[i], p), sigma)
        })
        .collect();
    system(pts, p, &forms, false).map(|(f, _)| f)
}

fn step_points(pts: &[PhasePoint], delta: &DVector<f64>, lambda: f64, v: usize) -> Vec<PhasePoint> {
    pts.iter()
        .enumerate()
        .map(|(i, pp)| {
            let mut q = pp.clone();
            let o = i * v;
            q.eta -= lambda * delta[o];
            q.y -= lambda * delta[o + 1];
            for m in 0..q.z.len() {
                q.z[m] -= lambda * delta[o + 2 + m];
            }
            q
        })
        .collect()
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// Rounding floor of `w = μ + lead · cg`, including the phase error of
/// `ω ln(1/x)`.
fn w_noise(st: &StepEval, src: &PhasePoint, p: &ReturnMapParams) -> f64 {
    1e3 * f64::EPSILON * st.lead.abs() * (1.0 + src.s(p)) + 4.0 * f64::EPSILON * p.mu.abs()
}

/// Mismatch between the generic map evaluation and the next orbit point; the
/// x-part is converted to a phase displacement of either endpoint, whichever
/// is smaller.
fn backward_check(pts: &[PhasePoint], p: &ReturnMapParams) -> Result<f64, MapError> {
    let k = pts.len();
    let mut worst = 0.0f64;
    for i in 0..k {
        let dst = &pts[(i + 1) % k];
        let img = apply_t(&pts[i].to_section(p), p)?;
        let st = eval_step(&pts[i], p);
        // Plain coordinates lose the phase once |T(x)| drops to the rounding
        // level of ω ln(1/x) times the amplitude; use the anchored value there.
        let x_img = if st.w.abs() > w_noise(&st, &pts[i], p) { img.x } else { pts[i].side.sign() * st.w };
        let sens = st.w_grad[0].abs().max(dst.abs_x(p) / p.omega.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((x_img - dst.x(p)).abs() / sens);
        worst = worst.max((img.y - dst.y).abs());
        for (a, b) in img.z.iter().zip(&dst.z) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Newton solve of the closed-orbit equations from anchored seeds.
pub fn find_periodic_orbit(params: &ReturnMapParams, seeds: &[PhasePoint]) -> Result<OrbitRecord, OrbitError> {
    let k = seeds.len();
    if k == 0 {
        return Err(OrbitError::InvalidSeed("empty seed".into()));
    }
    let nz = params.nz();
    for (i, s) in seeds.iter().enumerate() {
        if s.side == Side::Pi0 || s.z.len() != nz {
            return Err(OrbitError::InvalidSeed(format!("seed point {i} is malformed")));
        }
        if !point_ok(s, params) {
            return Err(OrbitError::InvalidSeed(format!("seed point {i} is outside the domain")));
        }
    }
    let v = params.dim();
    let mut pts = seeds.to_vec();
    let mut decrement = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..MAX_NEWTON_ITERATIONS {
        iterations = it;
        let forms: Vec<XForm> = (0..k)
            .map(|i| {
                let sigma = pts[i].side.sign() * pts[(i + 1) % k].side.sign();
                choose_form(&eval_step(&pts[i], params), sigma)
            })
            .collect();
        let (f, jac) = system(&pts, params, &forms, true)
            .ok_or_else(|| OrbitError::InvalidSeed("iterate left the domain".into()))?;
        let lu = jac.expect("jacobian requested").lu();
        let delta = lu
            .solve(&f)
            .ok_or_else(|| OrbitError::NoConvergence { context: "singular Jacobian".into(), residual: inf_norm(&f) })?;
        decrement = inf_norm(&delta);
        if !decrement.is_finite() {
            break;
        }
        if decrement < DECREMENT_STOP {
            break;
        }
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = step_points(&pts, &delta, lambda, v);
            if let Some((ft, _)) = system(&trial, params, &forms, false) {
                if let Some(dt) = lu.solve(&ft) {
                    if inf_norm(&dt) < (1.0 - 0.5 * lambda) * decrement {
                        accepted = Some(trial);
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        pts = match accepted {
            Some(t) => t,
            None => {
                let t = step_points(&pts, &delta, lambda, v);
                if (0..k).any(|i| !point_ok(&t[i], params)) {
                    return Err(OrbitError::NoConvergence { context: "damping exhausted".into(), residual: decrement });
                }
                t
            }
        };
        iterations = it + 1;
    }
    for i in 0..k {
        let st = eval_step(&pts[i], params);
        let sigma = pts[i].side.sign() * pts[(i + 1) % k].side.sign();
        // Below the rounding floor the sign of the image is not resolved; the
        // anchored destination then carries the orbit.
        if st.w * sigma <= 0.0 && st.w.abs() > w_noise(&st, &pts[i], params) {
            return Err(OrbitError::SignFlip { index: (i + 1) % k });
        }
    }
    let residual = decrement.max(backward_check(&pts, params)?);
    if !(residual < ORBIT_TOLERANCE) {
        return Err(OrbitError::NoConvergence { context: format!("period-{k} orbit"), residual });
    }
    let multipliers = orbit_multipliers(&pts, params);
    let index = classify_index(&multipliers)?;
    Ok(OrbitRecord {
        points: pts.iter().map(|q| q.to_section(params)).collect(),
        branch: pts.iter().map(|q| q.side).collect(),
        phase_points: pts,
        multipliers,
        index,
        residual,
        iterations,
    })
}

/// Section-coordinate entry point: seeds are converted to anchored form first.
pub fn find_periodic_orbit_from_section(
    params: &ReturnMapParams,
    period: usize,
    seed: &[SectionPoint],
    branch: &[Side],
) -> Result<OrbitRecord, OrbitError> {
    if period == 0 || seed.len() != period || branch.len() != period {
        return Err(OrbitError::InvalidSeed("seed and branch lengths must equal the period".into()));
    }
    let mut pps = Vec::with_capacity(period);
    for (i, (s, b)) in seed.iter().zip(branch).enumerate() {
        if s.side() != *b || *b == Side::Pi0 {
            return Err(OrbitError::InvalidSeed(format!("seed point {i} does not lie on {}", b.label())));
        }
        pps.push(PhasePoint::from_section(s, params)?);
    }
    find_periodic_orbit(params, &pps)
}

/// Anchored seed for the `k`-th ladder fixed point of `T1`.
pub fn ladder_seed_point(params: &ReturnMapParams, k: i64) -> PhasePoint {
    let even = k.rem_euclid(2) == 0;
    let anchor = if even { Anchor::Quarter(1) } else { Anchor::Quarter(3) };
    let j = k.div_euclid(2);
    let ln_x = params.ladder_seed_ln(k);
    let c0 = ((ln_x.exp() - params.mu) / (params.a * (params.rho * ln_x).exp())).clamp(-0.99, 0.99);
    let eta = if even { -c0.asin() } else { c0.asin() };
    PhasePoint { side: Side::Pi1, j, anchor, eta, y: 1.0, z: params.z_plus.clone() }
}

/// Newton fixed points of `T1` near `C exp(−πk/ω)` for `k_min ..= k_max`.
///
/// Only index-1 points that stayed on their ladder branch are kept; the rest
/// are reported in `failed`.
pub fn find_fixed_points_t1(params: &ReturnMapParams, k_min: i64, k_max: i64) -> Result<FixedPointScan, OrbitError> {
    params.validate()?;
    if k_min > k_max {
        return Err(OrbitError::InvalidRange(format!("k_min {k_min} > k_max {k_max}")));
    }
    let first = params.ladder_seed(k_min);
    if first >= params.delta {
        return Err(OrbitError::InvalidRange(format!("seed {first:e} for k = {k_min} is outside the section")));
    }
    if params.ladder_seed_ln(k_max) < (1e-300f64).ln() {
        return Err(OrbitError::InvalidRange(format!("seed for k = {k_max} underflows")));
    }
    let mut scan = FixedPointScan::default();
    for k in k_min..=k_max {
        match fixed_point_for(params, k) {
            Ok(rec) => scan.found.push((k, rec)),
            Err(e) => scan.failed.push((k, e)),
        }
    }
    Ok(scan)
}

/// Solves and vets the single ladder fixed point with index `k`.
pub fn fixed_point_for(params: &ReturnMapParams, k: i64) -> Result<OrbitRecord, OrbitError> {
    let seed = ladder_seed_point(params, k);
    let rec = find_periodic_orbit(params, std::slice::from_ref(&seed))?;
    let pp = &rec.phase_points[0];
    if pp.eta.abs() >= std::f64::consts::FRAC_PI_2 || pp.anchor != seed.anchor {
        return Err(OrbitError::NoConvergence { context: format!("k = {k} left its branch"), residual: rec.residual });
    }
    if rec.index != 1 {
        return Err(OrbitError::NoConvergence {
            context: format!("k = {k} has index {}", rec.index),
            residual: rec.residual,
        });
    }
    Ok(rec)
}

/// Product of the step Jacobians along an orbit, normalized step by step.
/// Returns the normalized product and the natural log of the removed scale.
fn scaled_product(pts: &[PhasePoint], p: &ReturnMapParams, block: Option<usize>) -> (DMatrix<f64>, f64) {
    let d = block.unwrap_or(p.dim());
    let mut prod = DMatrix::<f64>::identity(d, d);
    let mut ln_scale = 0.0;
    for pp in pts {
        let j = jacobian_at_phase(pp, p);
        let j = j.view((0, 0), (d, d)).into_owned();
        let m = j.amax();
        let jn = if m > 0.0 && m.is_finite() { j / m } else { j };
        if m > 0.0 && m.is_finite() {
            ln_scale += m.ln();
        }
        prod = jn * prod;
        let pm = prod.amax();
        if pm > 0.0 && pm.is_finite() {
            prod /= pm;
            ln_scale += pm.ln();
        }
    }
    (prod, ln_scale)
}

/// Roots of `λ² − tr λ + det` without cancellation; the scale is applied afterwards.
fn quadratic_pair(tr: f64, det: f64, ln_scale: f64) -> [Complex<f64>; 2] {
    let s = tr.abs().max(det.abs().sqrt());
    if s == 0.0 {
        return [Complex::new(0.0, 0.0); 2];
    }
    let (t, d) = (tr / s, det / (s * s));
    let disc = t * t - 4.0 * d;
    let factor = (ln_scale + s.ln()).exp();
    if disc >= 0.0 {
        let sign = if t >= 0.0 { 1.0 } else { -1.0 };
        let l1 = 0.5 * (t + sign * disc.sqrt());
        let l2 = if l1 != 0.0 { d / l1 } else { 0.0 };
        [Complex::new(l1 * factor, 0.0), Complex::new(l2 * factor, 0.0)]
    } else {
        let re = 0.5 * t * factor;
        let im = 0.5 * (-disc).sqrt() * factor;
        [Complex::new(re, im), Complex::new(re, -im)]
    }
}

/// Multipliers of an orbit given in anchored coordinates, sorted by decreasing modulus.
pub fn orbit_multipliers(pts: &[PhasePoint], p: &ReturnMapParams) -> Vec<Complex<f64>> {
    let mut out = if p.small_terms.is_zero() {
        let (b, ln_s) = scaled_product(pts, p, Some(2));
        let tr = b[(0, 0)] + b[(1, 1)];
        let det = b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)];
        let mut v = quadratic_pair(tr, det, ln_s).to_vec();
        v.extend(std::iter::repeat_n(Complex::new(0.0, 0.0), p.nz()));
        v
    } else {
        let (m, ln_s) = scaled_product(pts, p, None);
        let f = ln_s.exp();
        multipliers_of_matrix(&m).into_iter().map(|l| l * f).collect()
    };
    sort_by_modulus(&mut out);
    out
}

/// Eigenvalues of a square matrix, sorted by decreasing modulus.
pub fn multipliers_of_matrix(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut v: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    sort_by_modulus(&mut v);
    v
}

fn sort_by_modulus(v: &mut [Complex<f64>]) {
    v.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(std::cmp::Ordering::Equal));
}

/// Number of multipliers outside the unit circle.
pub fn classify_index(multipliers: &[Complex<f64>]) -> Result<usize, OrbitError> {
    let mut count = 0;
    for l in multipliers {
        let r = l.norm();
        if (r - 1.0).abs() < MARGINAL_TOLERANCE {
            return Err(OrbitError::Marginal { modulus: r });
        }
        if r > 1.0 {
            count += 1;
        }
    }
    Ok(count)
}

/// `λ₁ + λ₂ − c (λ₁λ₂ + 1)`.
pub fn index2_boundary_residual(lambda_sum: f64, lambda_prod: f64, c: f64) -> f64 {
    lambda_sum - c * (lambda_prod + 1.0)
}

/// The coefficient `c* = (λ₁ + λ₂) / (λ₁λ₂ + 1)` that zeroes the boundary residual.
pub fn c_star(lambda_sum: f64, lambda_prod: f64) -> Result<f64, OrbitError> {
    let den = lambda_prod + 1.0;
    if den.abs() <= f64::EPSILON * (1.0 + lambda_prod.abs()) {
        return Err(OrbitError::DivisionGuard);
    }
    Ok(lambda_sum / den)
}

/// Index-2 test for a real pair through `c*`: both multipliers are outside the
/// unit circle iff `λ₁λ₂ > 1` and `c* ∈ (−1, 1)`.
pub fn pair_is_index2(lambda_sum: f64, lambda_prod: f64) -> bool {
    lambda_prod > 1.0 && c_star(lambda_sum, lambda_prod).is_ok_and(|c| c.abs() < 1.0)
}

/// The two largest-modulus entries.
pub fn leading_pair(multipliers: &[Complex<f64>]) -> (Complex<f64>, Complex<f64>) {
    let mut v = multipliers.to_vec();
    sort_by_modulus(&mut v);
    let zero = Complex::new(0.0, 0.0);
    (v.first().copied().unwrap_or(zero), v.get(1).copied().unwrap_or(zero))
}

/// Trace of the orbit's Jacobian product next to the leading-order prediction
/// `A^k (ρ²+ω²)^{k/2} Π x_i^{ρ−1} Π cos(ξ_i − φ)`.
pub fn trace_formula_check(orbit: &OrbitRecord, params: &ReturnMapParams) -> Result<(f64, f64), OrbitError> {
    if orbit.branch.iter().any(|s| *s != Side::Pi1) {
        return Err(OrbitError::InvalidSeed("trace formula needs all points on Pi1".into()));
    }
    let (m, ln_s) = scaled_product(&orbit.phase_points, params, None);
    let computed = m.trace() * ln_s.exp();
    let mut ln_pred = 0.0;
    let mut sign = 1.0;
    for pp in &orbit.phase_points {
        let c = pp.cos_sin_xi_minus_phi(params).0;
        ln_pred += params.a.ln() + params.r_norm().ln() + (params.rho - 1.0) * pp.ln_abs_x(params) + c.abs().ln();
        sign *= c.signum();
    }
    Ok((computed, sign * ln_pred.exp()))
}
