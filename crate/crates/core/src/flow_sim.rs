//! The four-dimensional symmetric Lorenz-type example flow: vector field,
//! spectrum at the origin, an adaptive Dormand–Prince integrator with dense
//! output and section events, separatrix tracking and the splitting `μ̂`.

use std::io::Write;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roots::illinois;

pub type State = [f64; 4];

/// `f = c (z² + u²) · bump(‖s‖ / r0)`; without `r0` the term is a plain quadratic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FSpec {
    pub c: f64,
    pub r0: Option<f64>,
}

impl FSpec {
    pub fn zero() -> Self {
        FSpec { c: 0.0, r0: None }
    }

    pub fn eval(&self, s: &State) -> f64 {
        if self.c == 0.0 {
            return 0.0;
        }
        let q = s[2] * s[2] + s[3] * s[3];
        match self.r0 {
            None => self.c * q,
            Some(r0) => {
                let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2] + s[3] * s[3]).sqrt();
                self.c * q * bump(n / r0)
            }
        }
    }
}

/// Smooth cutoff equal to 1 on `[0, 1]` and 0 beyond 2.
pub fn bump(s: f64) -> f64 {
    let psi = |a: f64| if a > 0.0 { (-1.0 / a).exp() } else { 0.0 };
    let (a, b) = (psi(2.0 - s), psi(s - 1.0));
    a / (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleParams {
    pub sigma: f64,
    pub b: f64,
    pub r: f64,
    pub eps: f64,
    pub f: FSpec,
}

impl Default for ExampleParams {
    fn default() -> Self {
        ExampleParams { sigma: 10.0, b: 8.0 / 3.0, r: 28.0, eps: 0.1, f: FSpec::zero() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("origin is not a saddle-focus: {0}")]
    NotSaddleFocus(String),
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepFailure { t: f64, h: f64 },
    #[error("step budget of {steps} exhausted at t = {t}")]
    StepBudget { t: f64, steps: usize },
    #[error("no section crossing before t = {t_max}")]
    NoReturn { t_max: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// `R(x, y, z, u) = (−x, −y, z, u)`.
pub fn reflect_state(s: &State) -> State {
    [-s[0], -s[1], s[2], s[3]]
}

pub fn vector_field(s: &State, p: &ExampleParams) -> State {
    let [x, y, z, u] = *s;
    [p.sigma * (y - x), x * (p.r - z) - y, -p.b * z + x * y + p.eps * u, -(p.b + p.f.eval(s)) * u - p.eps * z]
}

/// Eigenvalue data at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumParams {
    pub gamma: f64,
    pub lambda: f64,
    pub omega: f64,
    pub strong: Vec<Complex<f64>>,
    pub rho: f64,
    /// All four eigenvalues: `γ`, the strong ones, then `−λ ± iω`.
    pub eigenvalues: Vec<Complex<f64>>,
    pub eigenvectors: Vec<[Complex<f64>; 4]>,
    pub c2: bool,
    pub c3: bool,
}

impl SpectrumParams {
    /// Unit unstable eigenvector with positive x-component.
    pub fn unstable_vector(&self) -> State {
        let v = self.eigenvectors[0];
        [v[0].re, v[1].re, v[2].re, v[3].re]
    }
}

/// Linearization at the origin. The `(x, y)` block gives `γ` and the strong
/// rate from `λ² + (σ+1)λ + σ(1−r) = 0`; the `(z, u)` block gives `−b ± iε`.
pub fn linearize_origin(p: &ExampleParams) -> Result<SpectrumParams, FlowError> {
    if p.eps == 0.0 {
        return Err(FlowError::NotSaddleFocus("eps = 0 makes the weak pair real".into()));
    }
    let lin = p.sigma + 1.0;
    let det = p.sigma * (1.0 - p.r);
    let disc = lin * lin - 4.0 * det;
    if !(disc > 0.0) {
        return Err(FlowError::NotSaddleFocus("(x, y) block has no real eigenvalues".into()));
    }
    // Cancellation-free roots of the quadratic.
    let q = -0.5 * (lin + lin.signum() * disc.sqrt());
    let (e1, e2) = (q, det / q);
    let (gamma, strong) = if e1 > e2 { (e1, e2) } else { (e2, e1) };
    if !(gamma > 0.0 && strong < 0.0) {
        return Err(FlowError::NotSaddleFocus(format!("(x, y) block eigenvalues {gamma}, {strong} are not a saddle")));
    }
    let lambda = p.b;
    let omega = p.eps.abs();
    if !(lambda > 0.0) {
        return Err(FlowError::NotSaddleFocus(format!("weak pair has real part {}", -lambda)));
    }
    let c2 = strong < -lambda && -lambda < 0.0 && 0.0 < gamma;
    let rho = lambda / gamma;
    let xy_vec = |l: f64| {
        let (a, b) = (p.sigma, l + p.sigma);
        let n = a.hypot(b);
        [Complex::new(a / n, 0.0), Complex::new(b / n, 0.0), Complex::new(0.0, 0.0), Complex::new(0.0, 0.0)]
    };
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let weak = |s: f64| {
        [
            Complex::new(0.0, 0.0),
            Complex::new(0.0, 0.0),
            Complex::new(h, 0.0),
            Complex::new(0.0, s * h * p.eps.signum()),
        ]
    };
    let sp = SpectrumParams {
        gamma,
        lambda,
        omega,
        strong: vec![Complex::new(strong, 0.0)],
        rho,
        eigenvalues: vec![
            Complex::new(gamma, 0.0),
            Complex::new(strong, 0.0),
            Complex::new(-lambda, omega),
            Complex::new(-lambda, -omega),
        ],
        eigenvectors: vec![xy_vec(gamma), xy_vec(strong), weak(1.0), weak(-1.0)],
        c2,
        c3: rho < 0.5,
    };
    if !c2 {
        return Err(FlowError::NotSaddleFocus(format!(
            "ordering Re(alpha) < -lambda < 0 < gamma fails ({strong}, {}, {gamma})",
            -lambda
        )));
    }
    Ok(sp)
}

/// Jacobian of the field at the origin.
pub fn jacobian_at_origin(p: &ExampleParams) -> [[f64; 4]; 4] {
    [[-p.sigma, p.sigma, 0.0, 0.0], [p.r, -1.0, 0.0, 0.0], [0.0, 0.0, -p.b, p.eps], [0.0, 0.0, -p.eps, -p.b]]
}

/// `max ‖J v − λ v‖` over the returned eigenpairs.
pub fn linearization_residual(p: &ExampleParams, sp: &SpectrumParams) -> f64 {
    let j = jacobian_at_origin(p);
    let mut worst = 0.0f64;
    for (l, v) in sp.eigenvalues.iter().zip(&sp.eigenvectors) {
        for (r, row) in j.iter().enumerate() {
            let jv: Complex<f64> = row.iter().zip(v).map(|(a, b)| *b * *a).sum();
            worst = worst.max((jv - l * v[r]).norm());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossing {
    Up,
    Down,
    Both,
}

/// Hyperplane `n · s = offset`, crossed in the given direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub normal: State,
    pub offset: f64,
    pub crossing: Crossing,
}

impl Section {
    pub fn z_level(level: f64, crossing: Crossing) -> Self {
        Section { normal: [0.0, 0.0, 1.0, 0.0], offset: level, crossing }
    }

    pub fn value(&self, s: &State) -> f64 {
        dot(&self.normal, s) - self.offset
    }

    fn accepts(&self, before: f64, after: f64) -> bool {
        let up = before < 0.0 && after >= 0.0;
        let down = before > 0.0 && after <= 0.0;
        match self.crossing {
            Crossing::Up => up,
            Crossing::Down => down,
            Crossing::Both => up || down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub section: usize,
    pub state: State,
}

/// Dense-output polynomial of one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    coeffs: [State; 5],
}

impl DenseStep {
    pub fn eval(&self, t: f64) -> State {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let c = &self.coeffs;
        std::array::from_fn(|i| c[0][i] + th * (c[1][i] + th1 * (c[2][i] + th * (c[3][i] + th1 * c[4][i]))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub events: Vec<Event>,
    pub dense: Vec<DenseStep>,
    /// Largest local error estimate (max-norm) over accepted steps.
    pub dense_error_bound: f64,
}

impl TrajectorySegment {
    pub fn last(&self) -> &State {
        self.states.last().expect("segment has a start state")
    }

    /// Dense-output value at `t` inside the integrated span.
    pub fn at(&self, t: f64) -> Option<State> {
        let (a, b) = (self.times[0], *self.times.last()?);
        if t < a.min(b) || t > a.max(b) {
            return None;
        }
        let i = self.dense.partition_point(|d| {
            let end = d.t0 + d.h;
            if d.h > 0.0 {
                end < t
            } else {
                end > t
            }
        });
        self.dense.get(i.min(self.dense.len().saturating_sub(1))).map(|d| d.eval(t)).or(Some(self.states[0]))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "z", "u"])?;
        for (t, s) in self.times.iter().zip(&self.states) {
            w.write_record([t, &s[0], &s[1], &s[2], &s[3]].map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_events_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub max_steps: usize,
    /// Disables step-size control when set.
    pub fixed_step: Option<f64>,
    /// Stop at the first event of this section.
    pub stop_at_section: Option<usize>,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-10,
            atol: 1e-12,
            h_min: 1e-14,
            max_steps: 2_000_000,
            fixed_step: None,
            stop_at_section: None,
        }
    }
}

/// Event states satisfy the section equation to this level.
pub const EVENT_TOLERANCE: f64 = 1e-10;

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

fn dot(a: &State, b: &State) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn combo(y: &State, h: f64, w: &[f64], k: &[State]) -> State {
    std::array::from_fn(|i| y[i] + h * w.iter().zip(k).map(|(c, kk)| c * kk[i]).sum::<f64>())
}

struct Step {
    y1: State,
    k7: State,
    err: f64,
    err_abs: f64,
    dense: DenseStep,
}

fn dopri_step(p: &ExampleParams, t: f64, y: &State, k1: &State, h: f64, opts: &IntegratorOptions) -> Step {
    let mut k = [[0.0; 4]; 7];
    k[0] = *k1;
    for s in 1..7 {
        let ys = combo(y, h, &A[s][..s], &k[..s]);
        k[s] = vector_field(&ys, p);
    }
    let y1 = combo(y, h, &A[6][..6], &k[..6]);
    let mut err = 0.0;
    let mut err_abs = 0.0f64;
    for i in 0..4 {
        let e = h * E.iter().zip(&k).map(|(c, kk)| c * kk[i]).sum::<f64>();
        let sk = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
        err += (e / sk) * (e / sk);
        err_abs = err_abs.max(e.abs());
    }
    let err = (err / 4.0).sqrt();
    let ydiff: State = std::array::from_fn(|i| y1[i] - y[i]);
    let bspl: State = std::array::from_fn(|i| h * k[0][i] - ydiff[i]);
    let c4: State = std::array::from_fn(|i| ydiff[i] - h * k[6][i] - bspl[i]);
    let c5: State = std::array::from_fn(|i| h * D.iter().zip(&k).map(|(c, kk)| c * kk[i]).sum::<f64>());
    Step { y1, k7: k[6], err, err_abs, dense: DenseStep { t0: t, h, coeffs: [*y, ydiff, bspl, c4, c5] } }
}

fn initial_step(p: &ExampleParams, y: &State, f: &State, span: f64, opts: &IntegratorOptions) -> f64 {
    let sk: State = std::array::from_fn(|i| opts.atol + opts.rtol * y[i].abs());
    let norm = |v: &State| (v.iter().zip(&sk).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / 4.0).sqrt();
    let (d0, d1) = (norm(y), norm(f));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = combo(y, h0, &[1.0], &[*f]);
    let f1 = vector_field(&y1, p);
    let d2 = norm(&std::array::from_fn(|i| f1[i] - f[i])) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1).min(span.abs())
}

/// Adaptive Dormand–Prince 5(4) integration from `t_span.0` to `t_span.1`
/// (either direction), recording crossings of the given sections.
pub fn integrate(
    start: &State,
    t_span: (f64, f64),
    p: &ExampleParams,
    sections: &[Section],
    opts: &IntegratorOptions,
) -> Result<TrajectorySegment, FlowError> {
    if !start.iter().all(|v| v.is_finite()) {
        return Err(FlowError::InvalidInput("start state is not finite".into()));
    }
    let (t0, t1) = t_span;
    let span = t1 - t0;
    if !(span.abs() > 0.0) || !span.is_finite() {
        return Err(FlowError::InvalidInput(format!("empty or non-finite time span ({t0}, {t1})")));
    }
    let dir = span.signum();
    let mut seg = TrajectorySegment {
        times: vec![t0],
        states: vec![*start],
        events: Vec::new(),
        dense: Vec::new(),
        dense_error_bound: 0.0,
    };
    let mut t = t0;
    let mut y = *start;
    let mut k1 = vector_field(&y, p);
    let mut h = match opts.fixed_step {
        Some(h) => h.abs(),
        None => initial_step(p, &y, &k1, span, opts),
    };
    let mut steps = 0;
    let mut rejected_last = false;
    while (t1 - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            return Err(FlowError::StepBudget { t, steps });
        }
        steps += 1;
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        let hs = dir * h.min(remaining);
        let st = dopri_step(p, t, &y, &k1, hs, opts);
        if opts.fixed_step.is_none() && st.err > 1.0 {
            let fac = (0.9 * st.err.powf(-0.2)).clamp(0.2, 1.0);
            h *= if rejected_last { fac.min(0.5) } else { fac };
            rejected_last = true;
            if h < opts.h_min {
                return Err(FlowError::StepFailure { t, h });
            }
            continue;
        }
        rejected_last = false;
        let t_new = if last { t1 } else { t + hs };
        seg.dense_error_bound = seg.dense_error_bound.max(st.err_abs);
        for (si, sec) in sections.iter().enumerate() {
            let (g0, g1) = (sec.value(&y), sec.value(&st.y1));
            if sec.accepts(g0, g1) {
                let g = |tt: f64| sec.value(&st.dense.eval(tt));
                let root = illinois(g, t, t_new, 1e-15, 200)
                    .map_err(|_| FlowError::InvalidInput("event polish failed".into()))?;
                let mut te = root.x;
                let mut se = st.dense.eval(te);
                if sec.value(&se).abs() > EVENT_TOLERANCE {
                    // Final Newton correction along the field.
                    let f = vector_field(&se, p);
                    let rate = dot(&sec.normal, &f);
                    if rate != 0.0 {
                        te -= sec.value(&se) / rate;
                        se = st.dense.eval(te);
                    }
                }
                seg.events.push(Event { time: te, section: si, state: se });
                if opts.stop_at_section == Some(si) {
                    seg.dense.push(st.dense);
                    seg.times.push(te);
                    seg.states.push(se);
                    return Ok(seg);
                }
            }
        }
        seg.dense.push(st.dense);
        t = t_new;
        y = st.y1;
        k1 = st.k7;
        seg.times.push(t);
        seg.states.push(y);
        if opts.fixed_step.is_none() {
            let fac = if st.err == 0.0 { 10.0 } else { (0.9 * st.err.powf(-0.2)).clamp(0.2, 10.0) };
            h *= fac;
        }
    }
    Ok(seg)
}

/// Separatrix offset from the origin along the unstable eigenvector.
pub const SEPARATRIX_OFFSET: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatrixRun {
    pub side: f64,
    pub start: State,
    pub crossing: Event,
    pub segment: TrajectorySegment,
}

/// Integrates the branch `side = ±1` of `W^u(O)` from `side·h·v_u` to its first
/// crossing of `section`, giving up at `t_max`.
pub fn track_separatrix(
    p: &ExampleParams,
    side: f64,
    section: &Section,
    h: f64,
    t_max: f64,
    opts: &IntegratorOptions,
) -> Result<SeparatrixRun, FlowError> {
    if side != 1.0 && side != -1.0 {
        return Err(FlowError::InvalidInput(format!("side must be +1 or -1, got {side}")));
    }
    let sp = linearize_origin(p)?;
    let v = sp.unstable_vector();
    let start: State = std::array::from_fn(|i| side * h * v[i]);
    let o = IntegratorOptions { stop_at_section: Some(0), ..*opts };
    let segment = integrate(&start, (0.0, t_max), p, std::slice::from_ref(section), &o)?;
    let crossing = segment.events.first().cloned().ok_or(FlowError::NoReturn { t_max })?;
    Ok(SeparatrixRun { side, start, crossing, segment })
}

/// Default section for `μ̂`: the plane `z = 4`, crossed downward on the way back
/// toward the origin along its stable manifold.
pub fn splitting_section() -> Section {
    Section::z_level(4.0, Crossing::Down)
}

/// Left eigenvector of `γ`, normalized so that it pairs to 1 with `v_u`.
/// It vanishes on the stable eigenspace, so `w_u · s` is the coordinate
/// transverse to `W^s_loc(O)` to first order.
pub fn unstable_left_vector(p: &ExampleParams, sp: &SpectrumParams) -> State {
    // Left eigenvector of [[−σ, σ], [r, −1]] for γ: (γ + 1, σ) up to scale.
    let w = [sp.gamma + 1.0, p.sigma, 0.0, 0.0];
    let v = sp.unstable_vector();
    let s = dot(&w, &v);
    w.map(|c| c / s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splitting {
    pub mu_hat: f64,
    pub run: SeparatrixRun,
}

/// Signed transverse coordinate of the first return of the `side` separatrix
/// to `section`.
pub fn measure_splitting(
    p: &ExampleParams,
    side: f64,
    section: &Section,
    t_max: f64,
    opts: &IntegratorOptions,
) -> Result<Splitting, FlowError> {
    let sp = linearize_origin(p)?;
    let run = track_separatrix(p, side, section, SEPARATRIX_OFFSET, t_max, opts)?;
    let w = unstable_left_vector(p, &sp);
    Ok(Splitting { mu_hat: dot(&w, &run.crossing.state), run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &State, b: &State) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn field_examples() {
        let p = ExampleParams::default();
        assert_eq!(vector_field(&[0.0; 4], &p), [0.0; 4]);
        let v = vector_field(&[1.0, 1.0, 0.0, 0.0], &p);
        assert_eq!(v, [0.0, 27.0, 1.0, 0.0]);
    }

    #[test]
    fn spectrum_at_standard_parameters() {
        let p = ExampleParams::default();
        let s = linearize_origin(&p).unwrap();
        // Oracle: the two real roots from the textbook formula.
        let (lin, det) = (p.sigma + 1.0, p.sigma * (1.0 - p.r));
        let disc: f64 = lin * lin - 4.0 * det;
        assert!((s.gamma - (-lin + disc.sqrt()) / 2.0).abs() < 1e-12);
        assert!((s.gamma - 11.827723).abs() < 1e-6);
        assert!((s.strong[0].re + 22.827723).abs() < 1e-6);
        assert!((s.rho - 0.225459).abs() < 1e-6);
        assert!(s.c2 && s.c3);
        assert!(linearization_residual(&p, &s) < 1e-10);
    }

    #[test]
    fn spectrum_rejections() {
        let p = ExampleParams { eps: 0.0, ..ExampleParams::default() };
        assert!(matches!(linearize_origin(&p), Err(FlowError::NotSaddleFocus(_))));
        let p = ExampleParams { r: 2.0, ..ExampleParams::default() };
        let s = linearize_origin(&p).unwrap();
        assert!(!s.c3);
    }

    #[test]
    fn bump_profile() {
        assert_eq!(bump(0.5), 1.0);
        assert_eq!(bump(1.0), 1.0);
        assert_eq!(bump(2.5), 0.0);
        assert!(bump(1.5) > 0.0 && bump(1.5) < 1.0);
        let f = FSpec { c: 0.3, r0: Some(5.0) };
        assert_eq!(f.eval(&[0.0; 4]), 0.0);
    }

    #[test]
    fn equilibrium_stays_put() {
        let p = ExampleParams::default();
        let seg = integrate(
            &[0.0; 4],
            (0.0, 5.0),
            &p,
            &[Section::z_level(1.0, Crossing::Both)],
            &IntegratorOptions::default(),
        )
        .unwrap();
        assert!(seg.states.iter().all(|s| *s == [0.0; 4]));
        assert!(seg.events.is_empty());
    }

    #[test]
    fn forward_backward_returns_to_start() {
        let p = ExampleParams::default();
        let s0 = [1.0, 2.0, 20.0, 0.5];
        let fwd = integrate(&s0, (0.0, 0.1), &p, &[], &IntegratorOptions::default()).unwrap();
        let back = integrate(fwd.last(), (0.1, 0.0), &p, &[], &IntegratorOptions::default()).unwrap();
        assert!(close(back.last(), &s0) < 1e-8, "{:?}", back.last());
    }

    #[test]
    fn linear_part_matches_exact_solution() {
        // Near the origin with tiny data the flow is linear; compare with the
        // exact weak-pair rotation in (z, u).
        let p = ExampleParams::default();
        let s0 = [0.0, 0.0, 1e-3, 0.0];
        let t = 2.0;
        let seg = integrate(&s0, (0.0, t), &p, &[], &IntegratorOptions::default()).unwrap();
        let decay = 1e-3 * (-p.b * t).exp();
        let exact = [0.0, 0.0, decay * (p.eps * t).cos(), -decay * (p.eps * t).sin()];
        assert!(close(seg.last(), &exact) < 1e-12);
    }

    #[test]
    fn fixed_step_order_is_at_least_four() {
        let p = ExampleParams::default();
        let s0 = [0.0, 0.0, 1.0, 0.0];
        let t = 1.0;
        let decay = (-p.b * t).exp();
        let exact = [0.0, 0.0, decay * (p.eps * t).cos(), -decay * (p.eps * t).sin()];
        let err = |h: f64| {
            let o = IntegratorOptions { fixed_step: Some(h), ..IntegratorOptions::default() };
            close(integrate(&s0, (0.0, t), &p, &[], &o).unwrap().last(), &exact)
        };
        let (e1, e2) = (err(0.1), err(0.05));
        assert!((e1 / e2).log2() >= 4.0, "{e1} {e2}");
    }

    #[test]
    fn events_lie_on_section() {
        let p = ExampleParams::default();
        let sec = Section::z_level(p.r - 1.0, Crossing::Both);
        let seg = integrate(&[1.0, 1.0, 1.0, 0.0], (0.0, 20.0), &p, &[sec], &IntegratorOptions::default()).unwrap();
        assert!(seg.events.len() > 4, "{}", seg.events.len());
        for e in &seg.events {
            assert!(sec.value(&e.state).abs() < EVENT_TOLERANCE);
        }
        let mid = 0.5 * (seg.times[10] + seg.times[11]);
        assert!(seg.at(mid).is_some());
    }

    #[test]
    fn separatrices_are_mirror_images() {
        let p = ExampleParams::default();
        let sec = Section::z_level(p.r - 1.0, Crossing::Both);
        let o = IntegratorOptions::default();
        let up = track_separatrix(&p, 1.0, &sec, SEPARATRIX_OFFSET, 50.0, &o).unwrap();
        let down = track_separatrix(&p, -1.0, &sec, SEPARATRIX_OFFSET, 50.0, &o).unwrap();
        assert!(close(&reflect_state(&up.crossing.state), &down.crossing.state) < 1e-6);
        let half = track_separatrix(&p, 1.0, &sec, 0.5 * SEPARATRIX_OFFSET, 50.0, &o).unwrap();
        assert!(close(&half.crossing.state, &up.crossing.state) < 1e-5);
    }

    #[test]
    fn classic_lorenz_separatrix_reaches_section() {
        let p = ExampleParams { eps: 0.0, ..ExampleParams::default() };
        // The uncoupled system has a real weak pair, so start from the
        // unstable direction directly.
        let v: State = [10.0, 10.0 + 11.827723451163457, 0.0, 0.0];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let start = v.map(|c| c / n * SEPARATRIX_OFFSET);
        let seg = integrate(
            &start,
            (0.0, 30.0),
            &p,
            &[Section::z_level(27.0, Crossing::Both)],
            &IntegratorOptions::default(),
        )
        .unwrap();
        assert!(!seg.events.is_empty());
    }

    #[test]
    fn splitting_changes_sign_across_a_loop() {
        let o = IntegratorOptions::default();
        let sec = splitting_section();
        let at = |r: f64| {
            let p = ExampleParams { r, ..ExampleParams::default() };
            measure_splitting(&p, 1.0, &sec, 100.0, &o).unwrap().mu_hat
        };
        let (lo, hi) = (at(13.5), at(14.5));
        assert!(lo * hi < 0.0, "{lo} {hi}");
        let p = ExampleParams { r: 13.5, ..ExampleParams::default() };
        let minus = measure_splitting(&p, -1.0, &sec, 100.0, &o).unwrap().mu_hat;
        assert!((lo + minus).abs() < 1e-6);
        let near = at(13.5 + 1e-6);
        assert!((near - lo).abs() < 1e-3 * lo.abs().max(1e-9));
    }

    proptest! {
        #[test]
        fn field_is_equivariant(x in -30.0f64..30.0, y in -30.0f64..30.0, z in -10.0f64..50.0, u in -5.0f64..5.0, c in -1.0f64..1.0) {
            for f in [FSpec::zero(), FSpec { c, r0: None }, FSpec { c, r0: Some(3.0) }] {
                let p = ExampleParams { f, ..ExampleParams::default() };
                let s = [x, y, z, u];
                prop_assert_eq!(vector_field(&reflect_state(&s), &p), reflect_state(&vector_field(&s, &p)));
            }
        }

        #[test]
        fn reflected_trajectory_is_exact_mirror(x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.0f64..30.0, u in -1.0f64..1.0) {
            let p = ExampleParams { f: FSpec { c: 0.2, r0: None }, ..ExampleParams::default() };
            let s = [x, y, z, u];
            let o = IntegratorOptions::default();
            let a = integrate(&s, (0.0, 1.0), &p, &[], &o).unwrap();
            let b = integrate(&reflect_state(&s), (0.0, 1.0), &p, &[], &o).unwrap();
            prop_assert!(close(&reflect_state(a.last()), b.last()) < 1e-8);
        }
    }
}
