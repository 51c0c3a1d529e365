//! Local invariant manifolds on the cross-section: the unstable spiral of a
//! fixed point, strong-stable leaves, stable surfaces of ladder points, and a
//! transversality test for tangent spaces.

use std::io::Write;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phase::eval_step;
use crate::return_map::{apply_t, apply_t1, jacobian_t, MapError, ReturnMapParams, SectionPoint};
use crate::roots::{illinois, newton_bisect, scan_brackets, RootError};

/// Cone constant bounding `|(Δx, Δy)| ≤ K |Δz|` along a leaf.
pub const CONE_CONSTANT: f64 = 1.0;
/// Stabilization tolerance for leaf coefficients.
pub const LEAF_TOLERANCE: f64 = 1e-10;
/// Smallest singular value separating transverse from tangent spans.
pub const QT_THRESHOLD: f64 = 1e-8;
/// Forward orbit length used when pulling a leaf back.
const LEAF_DEPTH: usize = 8;
const LEAF_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("cone condition violated: |(a1, a2)| = {norm} exceeds {bound}")]
    ConeViolation { norm: f64, bound: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("leaf coefficients did not settle (last change {change:e})")]
    NoConvergence { change: f64 },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Root(#[from] RootError),
}

/// `W^u_loc(P)` as the `T1`-image of the vertical segment `{0 < x < x_p}` through `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiralCurve {
    pub base: SectionPoint,
    pub params: ReturnMapParams,
}

impl SpiralCurve {
    pub fn new(base: SectionPoint, params: ReturnMapParams) -> Result<Self, MapError> {
        if !(base.x > 0.0) {
            return Err(MapError::Domain("spiral base must lie on Pi1".into()));
        }
        Ok(SpiralCurve { base, params })
    }

    fn seg(&self, t: f64) -> SectionPoint {
        SectionPoint::new(t, self.base.y, self.base.z.clone())
    }

    /// Tangent of the spiral with respect to `t`.
    pub fn tangent(&self, t: f64) -> Result<Vec<f64>, MapError> {
        check_param(t, self.base.x)?;
        let j = jacobian_t(&self.seg(t), &self.params)?;
        Ok(j.column(0).iter().copied().collect())
    }

    /// Parameters `ln t` in `[ln_lo, ln_hi]` where the spiral crosses `x = μ`,
    /// each paired with the crossing direction in `ln t` (+1 upward).
    pub fn mu_crossings(&self, ln_lo: f64, ln_hi: f64) -> Result<Vec<(f64, f64)>, ManifoldError> {
        let mu = self.params.mu;
        let g = |u: f64| {
            apply_t1(&self.seg(u.exp()), &self.params)
                .map(|p| (p.x - mu) / (self.params.rho * u).exp())
                .unwrap_or(f64::NAN)
        };
        let cells = (((ln_hi - ln_lo) * self.params.omega.abs() / 0.2).ceil() as usize).max(8);
        let mut out = Vec::new();
        for (a, b) in scan_brackets(g, ln_lo, ln_hi, cells) {
            let r = illinois(g, a, b, 1e-15, 300)?;
            let dir = if g(b) > g(a) { 1.0 } else { -1.0 };
            out.push((r.x, dir));
        }
        Ok(out)
    }

    /// `(t, point)` samples log-uniform in `t` between `t_min` and `x_p`.
    pub fn sample(&self, t_min: f64, count: usize) -> Result<Vec<(f64, SectionPoint)>, MapError> {
        let (a, b) = (t_min.ln(), self.base.x.ln());
        let count = count.max(2);
        (0..count)
            .map(|i| {
                let u = a + (b - a) * i as f64 / count as f64;
                let t = u.exp();
                eval_unstable_spiral(self, t).map(|p| (t, p))
            })
            .collect()
    }
}

fn check_param(t: f64, x_p: f64) -> Result<(), MapError> {
    if !(t > 0.0 && t < x_p) {
        return Err(MapError::Domain(format!("spiral parameter {t} outside (0, {x_p})")));
    }
    Ok(())
}

/// Point of the spiral at parameter `t ∈ (0, x_p)`.
pub fn eval_unstable_spiral(s: &SpiralCurve, t: f64) -> Result<SectionPoint, MapError> {
    check_param(t, s.base.x)?;
    apply_t1(&s.seg(t), &s.params)
}

/// Strong-stable leaf `(x, y) = (x₀ + a₁·(z − z₀), y₀ + a₂·(z − z₀))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafModel {
    pub base: SectionPoint,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

impl LeafModel {
    pub fn point_at(&self, z: &[f64]) -> SectionPoint {
        let dz: Vec<f64> = z.iter().zip(&self.base.z).map(|(a, b)| a - b).collect();
        let dot = |c: &[f64]| c.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>();
        SectionPoint::new(self.base.x + dot(&self.a1), self.base.y + dot(&self.a2), z.to_vec())
    }

    /// Distance in the `(x, y)` plane from `p` to the leaf point with the same `z`.
    pub fn transverse_distance(&self, p: &SectionPoint) -> f64 {
        let q = self.point_at(&p.z);
        (p.x - q.x).hypot(p.y - q.y)
    }

    /// Tangent columns `(a1_m, a2_m, e_m)`.
    pub fn tangent(&self) -> DMatrix<f64> {
        let nz = self.base.z.len();
        DMatrix::from_fn(2 + nz, nz, |r, c| match r {
            0 => self.a1[c],
            1 => self.a2[c],
            _ => (r - 2 == c) as u8 as f64,
        })
    }

    /// Operator norm of the `2 × (n−3)` slope block.
    pub fn slope_norm(&self) -> f64 {
        let nz = self.base.z.len();
        let m = DMatrix::from_fn(2, nz, |r, c| if r == 0 { self.a1[c] } else { self.a2[c] });
        m.singular_values().iter().fold(0.0f64, |a, b| a.max(*b))
    }

    /// `(z, point)` samples along the leaf, `z` moving along the first z-axis.
    pub fn sample(&self, half_width: f64, count: usize) -> Vec<(f64, SectionPoint)> {
        let count = count.max(2);
        (0..count)
            .map(|i| {
                let mut z = self.base.z.clone();
                let off = -half_width + 2.0 * half_width * i as f64 / (count - 1) as f64;
                if let Some(z0) = z.first_mut() {
                    *z0 += off;
                }
                (off, self.point_at(&z))
            })
            .collect()
    }
}

/// Slopes `α` at a point whose image leaf has slopes `a`, from
/// `DT · [α; I] = [a; I] · B`.
fn pull_back_slopes(jac: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let nz = jac.ncols() - 2;
    let p = jac.view((0, 0), (2, 2)).into_owned();
    let q = jac.view((0, 2), (2, nz)).into_owned();
    let r = jac.view((2, 0), (nz, 2)).into_owned();
    let s = jac.view((2, 2), (nz, nz)).into_owned();
    let lhs = &p - a * &r;
    let lhs = Matrix2::new(lhs[(0, 0)], lhs[(0, 1)], lhs[(1, 0)], lhs[(1, 1)]);
    let inv = lhs.try_inverse()?;
    let inv = DMatrix::from_row_slice(2, 2, &[inv[(0, 0)], inv[(0, 1)], inv[(1, 0)], inv[(1, 1)]]);
    Some(inv * (a * s - q))
}

fn leaf_from_slopes(base: &SectionPoint, a: &DMatrix<f64>) -> LeafModel {
    LeafModel { base: base.clone(), a1: a.row(0).iter().copied().collect(), a2: a.row(1).iter().copied().collect() }
}

/// Strong-stable leaf through `base` by backward graph transform along its
/// forward orbit.
pub fn build_leaf(base: &SectionPoint, params: &ReturnMapParams) -> Result<LeafModel, ManifoldError> {
    let nz = params.nz();
    if base.z.len() != nz {
        return Err(ManifoldError::DimensionMismatch(format!("base has {} z-entries, expected {nz}", base.z.len())));
    }
    if base.x == 0.0 {
        return Err(MapError::Domain("leaf base must have x != 0".into()).into());
    }
    if params.small_terms.is_zero() {
        return Ok(LeafModel { base: base.clone(), a1: vec![0.0; nz], a2: vec![0.0; nz] });
    }
    let mut chain = vec![base.clone()];
    while chain.len() < LEAF_DEPTH {
        let next = apply_t(chain.last().expect("chain is not empty"), params)?;
        if next.x == 0.0 || next.x.abs() > params.delta || !next.is_finite() {
            break;
        }
        chain.push(next);
    }
    let jacs: Vec<DMatrix<f64>> = chain.iter().map(|p| jacobian_t(p, params)).collect::<Result<_, _>>()?;
    let singular = || ManifoldError::NoConvergence { change: f64::INFINITY };
    let last = jacs.last().expect("chain is not empty");
    let mut a = DMatrix::zeros(2, nz);
    let mut change = f64::INFINITY;
    for _ in 0..LEAF_MAX_SWEEPS {
        let next = pull_back_slopes(last, &a).ok_or_else(singular)?;
        change = (&next - &a).amax();
        a = next;
        check_cone(base, &a)?;
        if change < LEAF_TOLERANCE {
            break;
        }
    }
    if !(change < LEAF_TOLERANCE) {
        return Err(ManifoldError::NoConvergence { change });
    }
    for jac in jacs.iter().rev().skip(1) {
        a = pull_back_slopes(jac, &a).ok_or_else(singular)?;
        check_cone(base, &a)?;
    }
    Ok(leaf_from_slopes(base, &a))
}

fn check_cone(base: &SectionPoint, a: &DMatrix<f64>) -> Result<(), ManifoldError> {
    let norm = leaf_from_slopes(base, a).slope_norm();
    if !(norm <= CONE_CONSTANT) {
        return Err(ManifoldError::ConeViolation { norm, bound: CONE_CONSTANT });
    }
    Ok(())
}

/// The point `M⁻ = (−μ, 1, S z⁺)`.
pub fn m_minus(params: &ReturnMapParams) -> SectionPoint {
    let z = params.z_plus.iter().zip(&params.involution).map(|(z, s)| z * s).collect();
    SectionPoint::new(-params.mu, 1.0, z)
}

/// Strong-stable leaf through `M⁻`.
pub fn wss_of_m_minus(params: &ReturnMapParams) -> Result<LeafModel, ManifoldError> {
    if params.mu == 0.0 {
        return Err(MapError::Domain("M- lies on Pi0 when mu = 0".into()).into());
    }
    build_leaf(&m_minus(params), params)
}

/// Smallest singular value of the stacked, column-normalized tangent spans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QtResult {
    pub is_qt: bool,
    pub min_singular: f64,
}

pub fn quasi_transversality(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<QtResult, ManifoldError> {
    if a.nrows() != b.nrows() {
        return Err(ManifoldError::DimensionMismatch(format!("{} rows vs {} rows", a.nrows(), b.nrows())));
    }
    let rows = a.nrows();
    let cols = a.ncols() + b.ncols();
    if cols == 0 {
        return Err(ManifoldError::DimensionMismatch("no tangent columns".into()));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (k, col) in a.column_iter().chain(b.column_iter()).enumerate() {
        let n = col.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(ManifoldError::DimensionMismatch(format!("tangent column {k} is degenerate")));
        }
        m.set_column(k, &(col / n));
    }
    let min_singular =
        if cols > rows { 0.0 } else { m.singular_values().iter().fold(f64::INFINITY, |acc, s| acc.min(*s)) };
    Ok(QtResult { is_qt: cols <= rows && min_singular > QT_THRESHOLD, min_singular })
}

/// Level set `x ≈ C e^{−πk/ω}` carrying `W^s(P⁺_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableSurface {
    pub k: i64,
    pub level: f64,
    pub thickness: f64,
}

/// Estimates the stable surface of the `k`-th ladder point from the `T1`-preimage
/// of the slab `{x = level}` over a `(y, z)` grid around `(1, z⁺)`.
pub fn stable_surface_of_pk(params: &ReturnMapParams, k: i64) -> Result<StableSurface, ManifoldError> {
    let level = params.ladder_seed(k);
    let seed = crate::orbit_tools::ladder_seed_point(params, k);
    let mut thickness = 0.0f64;
    let grid = [-0.1, -0.05, 0.0, 0.05, 0.1];
    for dy in grid {
        for dz in grid {
            let mut pp = seed.clone();
            pp.y = 1.0 + dy;
            pp.z = params.z_plus.iter().map(|z| z + dz).collect();
            let f = |eta: f64| {
                let mut q = pp.clone();
                q.eta = eta;
                let st = eval_step(&q, params);
                let val = (st.w - level) / st.lead;
                let d = st.w_grad[0] / st.lead - (st.w - level) * st.lead_grad[0] / (st.lead * st.lead);
                (val, d)
            };
            let root = newton_bisect(f, -1.2, 1.2, 1e-15, 200)?;
            let mut q = pp.clone();
            q.eta = root.x;
            thickness = thickness.max((q.abs_x(params) - level).abs());
        }
    }
    Ok(StableSurface { k, level, thickness })
}

/// Writes `(parameter, x, y, z..)` rows as CSV.
pub fn write_polyline_csv<W: Write>(out: W, rows: &[(f64, SectionPoint)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if let Some((_, first)) = rows.first() {
        let mut header = vec!["param".to_string(), "x".into(), "y".into()];
        header.extend((0..first.z.len()).map(|i| format!("z{i}")));
        w.write_record(&header)?;
    }
    for (s, p) in rows {
        let mut rec = vec![format!("{s:e}"), format!("{:e}", p.x), format!("{:e}", p.y)];
        rec.extend(p.z.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::return_map::SmallTermModel;
    use std::f64::consts::PI;

    fn base() -> ReturnMapParams {
        ReturnMapParams::default()
    }

    fn bump(amp: f64) -> ReturnMapParams {
        let mut p = base();
        p.small_terms = SmallTermModel::scaled_bump(amp);
        p
    }

    #[test]
    fn zero_model_leaf_is_vertical() {
        let p = base().with_mu(1e-6);
        let leaf = wss_of_m_minus(&p).unwrap();
        assert_eq!(leaf.a1, vec![0.0]);
        assert_eq!(leaf.a2, vec![0.0]);
        assert_eq!(leaf.base, m_minus(&p));
        assert_eq!(leaf.base.x, -1e-6);
    }

    #[test]
    fn bump_leaf_slope_is_small_in_x() {
        let p = bump(1.0);
        let ratio = |x0: f64| build_leaf(&SectionPoint::new(x0, 1.0, vec![0.02]), &p).unwrap().a1[0].abs() / x0;
        assert!(ratio(1e-8) < 1e-2 * ratio(1e-2));
        // Along the ladder the phase is frozen, so the decay is monotone.
        let mut prev = f64::INFINITY;
        for k in 2..=12 {
            let fp = crate::orbit_tools::fixed_point_for(&p, k).unwrap();
            let leaf = build_leaf(&fp.points[0], &p).unwrap();
            let r = leaf.a1[0].abs() / fp.points[0].x;
            assert!(r < prev, "k = {k}: {r} vs {prev}");
            prev = r;
        }
    }

    #[test]
    fn leaf_is_invariant() {
        let p = bump(0.5);
        let b = SectionPoint::new(2e-4, 1.01, vec![0.03]);
        let leaf = build_leaf(&b, &p).unwrap();
        let img_leaf = build_leaf(&apply_t(&b, &p).unwrap(), &p).unwrap();
        for dz in [-1e-3, 1e-3] {
            let q = leaf.point_at(&[0.03 + dz]);
            let img = apply_t(&q, &p).unwrap();
            assert!(img_leaf.transverse_distance(&img) < 1e-8);
        }
    }

    #[test]
    fn cone_violation_for_large_slopes() {
        let mut p = bump(1.0);
        p.delta = 0.9;
        let r = build_leaf(&SectionPoint::new(0.9, 1.0, vec![0.0]), &p.with_rho(0.9));
        assert!(matches!(r, Err(ManifoldError::ConeViolation { .. })), "{r:?}");
    }

    #[test]
    fn qt_examples() {
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        let r = quasi_transversality(&a, &b).unwrap();
        assert!(r.is_qt);
        assert!((r.min_singular - 1.0).abs() < 1e-14);
        let c = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let r = quasi_transversality(&c, &c).unwrap();
        assert!(!r.is_qt);
        assert!(r.min_singular < 1e-12);
        let r2 = quasi_transversality(&b, &a).unwrap();
        assert_eq!(r2.is_qt, quasi_transversality(&a, &b).unwrap().is_qt);
        assert!(quasi_transversality(&a, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn spiral_limit_and_consistency() {
        let p = base().with_mu(1e-8).with_rho(0.9);
        let s = SpiralCurve::new(SectionPoint::new(1e-3, 1.0, vec![0.02]), p.clone()).unwrap();
        let lim = eval_unstable_spiral(&s, 1e-15).unwrap();
        assert!((lim.x - 1e-8).abs() < 1e-10 && (lim.y - 1.0).abs() < 1e-10);
        let p = base().with_mu(1e-8);
        let s = SpiralCurve::new(SectionPoint::new(1e-3, 1.0, vec![0.02]), p.clone()).unwrap();
        let lim = eval_unstable_spiral(&s, 1e-50).unwrap();
        assert!((lim.x - 1e-8).abs() < 1e-10 && (lim.z[0] - 0.02).abs() < 1e-10);
        let t = 3e-5;
        let direct = apply_t1(&SectionPoint::new(t, 1.0, vec![0.02]), &p).unwrap();
        assert_eq!(eval_unstable_spiral(&s, t).unwrap(), direct);
        assert!(eval_unstable_spiral(&s, 2e-3).is_err());
    }

    #[test]
    fn spiral_envelope_scaling() {
        let p = base();
        let s = SpiralCurve::new(SectionPoint::new(1e-3, 1.0, vec![0.02]), p.clone()).unwrap();
        let t1 = 1e-6;
        let t2 = t1 * (-2.0 * PI / p.omega).exp();
        let a = eval_unstable_spiral(&s, t1).unwrap().x - p.mu;
        let b = eval_unstable_spiral(&s, t2).unwrap().x - p.mu;
        assert!((b / a - (-2.0 * PI * p.rho / p.omega).exp()).abs() < 1e-9);
    }

    #[test]
    fn spiral_winding_spacing() {
        let p = base().with_mu(1e-9);
        let s = SpiralCurve::new(SectionPoint::new(1e-3, 1.0, vec![0.02]), p.clone()).unwrap();
        let cr = s.mu_crossings(-60.0, -10.0).unwrap();
        assert!(cr.len() > 10);
        for w in cr.windows(3) {
            assert!(((w[2].0 - w[0].0).abs() - 2.0 * PI / p.omega).abs() < 1e-6);
            assert_eq!(w[0].1, w[2].1);
        }
    }

    #[test]
    fn stable_surface_levels() {
        let p = base();
        let s5 = stable_surface_of_pk(&p, 5).unwrap();
        assert!((s5.level - 3.13e-8).abs() < 0.01e-8);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 4..12 {
            let s = stable_surface_of_pk(&p, k).unwrap();
            assert!(s.level < prev.0);
            assert!(s.thickness / s.level < prev.1);
            prev = (s.level, s.thickness / s.level);
        }
    }

    #[test]
    fn polyline_export() {
        let leaf = LeafModel { base: SectionPoint::new(0.1, 1.0, vec![0.0]), a1: vec![0.5], a2: vec![0.0] };
        let mut buf = Vec::new();
        write_polyline_csv(&mut buf, &leaf.sample(0.1, 3)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("param,x,y,z0"));
    }
}
