//! Bracketed scalar root finders.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootError {
    #[error("no sign change on [{lo}, {hi}] (f = {flo}, {fhi})")]
    NoBracket { lo: f64, hi: f64, flo: f64, fhi: f64 },
    #[error("non-finite function value at {at}")]
    NonFinite { at: f64 },
    #[error("no convergence after {iterations} iterations (width {width})")]
    NoConvergence { iterations: usize, width: f64 },
}

/// Result of a bracketed solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub f: f64,
    pub iterations: usize,
}

/// Safeguarded Newton iteration inside a sign-change bracket; falls back to
/// bisection whenever the Newton step leaves the bracket or stalls.
pub fn newton_bisect<F>(mut f: F, lo: f64, hi: f64, xtol: f64, max_iter: usize) -> Result<Root, RootError>
where
    F: FnMut(f64) -> (f64, f64),
{
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let (fa, _) = f(a);
    let (fb, _) = f(b);
    for (x, v) in [(a, fa), (b, fb)] {
        if !v.is_finite() {
            return Err(RootError::NonFinite { at: x });
        }
        if v == 0.0 {
            return Ok(Root { x, f: 0.0, iterations: 0 });
        }
    }
    if fa.signum() == fb.signum() {
        return Err(RootError::NoBracket { lo: a, hi: b, flo: fa, fhi: fb });
    }
    let neg_at_a = fa < 0.0;
    let mut x = 0.5 * (a + b);
    let mut last_width = b - a;
    for it in 1..=max_iter {
        let (fx, dfx) = f(x);
        if !fx.is_finite() {
            return Err(RootError::NonFinite { at: x });
        }
        if fx == 0.0 {
            return Ok(Root { x, f: fx, iterations: it });
        }
        if (fx < 0.0) == neg_at_a {
            a = x;
        } else {
            b = x;
        }
        let newton = x - fx / dfx;
        let step_ok = dfx != 0.0 && newton.is_finite() && newton > a && newton < b;
        let width = b - a;
        let next = if step_ok && (width < 0.75 * last_width || (newton - x).abs() < 0.25 * width) {
            newton
        } else {
            0.5 * (a + b)
        };
        last_width = width;
        if (next - x).abs() <= xtol * (1.0 + x.abs())
            || width <= xtol * (1.0 + x.abs())
            || width <= 4.0 * f64::EPSILON * x.abs()
        {
            let (fn_, _) = f(next);
            return Ok(Root { x: next, f: fn_, iterations: it });
        }
        x = next;
    }
    Err(RootError::NoConvergence { iterations: max_iter, width: b - a })
}

/// Derivative-free Illinois (modified regula falsi) solve.
pub fn illinois<F>(mut f: F, lo: f64, hi: f64, xtol: f64, max_iter: usize) -> Result<Root, RootError>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    for (x, v) in [(a, fa), (b, fb)] {
        if !v.is_finite() {
            return Err(RootError::NonFinite { at: x });
        }
        if v == 0.0 {
            return Ok(Root { x, f: 0.0, iterations: 0 });
        }
    }
    if fa.signum() == fb.signum() {
        return Err(RootError::NoBracket { lo: a, hi: b, flo: fa, fhi: fb });
    }
    let mut side = 0i8;
    for it in 1..=max_iter {
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !c.is_finite() || c <= a.min(b) || c >= a.max(b) {
            c = 0.5 * (a + b);
        }
        let fc = f(c);
        if !fc.is_finite() {
            return Err(RootError::NonFinite { at: c });
        }
        if fc == 0.0 || (b - a).abs() <= xtol * (1.0 + c.abs()) || (b - a).abs() <= 4.0 * f64::EPSILON * c.abs() {
            return Ok(Root { x: c, f: fc, iterations: it });
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Err(RootError::NoConvergence { iterations: max_iter, width: (b - a).abs() })
}

/// Sub-intervals of a uniform grid on `[lo, hi]` across which `f` changes sign.
pub fn scan_brackets<F>(mut f: F, lo: f64, hi: f64, cells: usize) -> Vec<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    let cells = cells.max(1);
    let h = (hi - lo) / cells as f64;
    let mut out = Vec::new();
    let mut x0 = lo;
    let mut f0 = f(x0);
    for i in 1..=cells {
        let x1 = if i == cells { hi } else { lo + h * i as f64 };
        let f1 = f(x1);
        if f0.is_finite() && f1.is_finite() && (f0 == 0.0 || f0.signum() != f1.signum()) {
            out.push((x0, x1));
        }
        x0 = x1;
        f0 = f1;
    }
    out
}
