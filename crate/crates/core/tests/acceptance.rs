//! Acceptance suite. Prints one `criterion N: PASS/FAIL` line per check and
//! exits non-zero if any check fails.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use nalgebra::{Complex, DMatrix, Matrix3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use shilnikov_lab::cli_report::{cmd_hetero_search, CommonArgs, ExitKind, GridArgs};
use shilnikov_lab::flow_sim::{
    linearize_origin, reflect_state, track_separatrix, vector_field, Crossing, ExampleParams, FSpec, IntegratorOptions,
    Section, SEPARATRIX_OFFSET,
};
use shilnikov_lab::homoclinic::{solve_double_round_mu, survival_threshold, PipelineRecord, SurvivalConstants};
use shilnikov_lab::manifolds::build_leaf;
use shilnikov_lab::orbit_tools::{
    classify_index, find_fixed_points_t1, find_periodic_orbit, fixed_point_for, multipliers_of_matrix, pair_is_index2,
    trace_formula_check, IndexCriterionInputs,
};
use shilnikov_lab::phase::wrap_angle;
use shilnikov_lab::return_map::{
    apply_t, apply_t1, apply_t2, jacobian_t1, jacobian_t2, reflect, ReturnMapParams, SectionPoint, Side, SmallTermModel,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_1() -> Check {
    let p = ReturnMapParams::default();
    let start = Instant::now();
    let scan = find_fixed_points_t1(&p, 10, 25).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    ensure(scan.failed.is_empty(), || format!("failures: {:?}", scan.failed))?;
    ensure(scan.found.len() == 16, || format!("{} fixed points", scan.found.len()))?;
    let target = (-PI).exp();
    let mut worst: f64 = 0.0;
    for w in scan.found.windows(2) {
        let ratio = w[1].1.points[0].x / w[0].1.points[0].x;
        worst = worst.max((ratio / target - 1.0).abs());
    }
    ensure(worst < 5e-3, || format!("worst ratio deviation {worst:.3e}"))?;
    ensure(scan.found.iter().all(|(_, r)| r.index == 1), || "index other than 1".into())?;
    ensure(elapsed < 1.0, || format!("runtime {elapsed:.3} s"))?;
    Ok(format!("worst ratio deviation {worst:.2e}, {elapsed:.3} s"))
}

/// Random well-conditioned change of basis.
fn random_basis(rng: &mut StdRng) -> Matrix3<f64> {
    loop {
        let v = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let sv = v.singular_values();
        if sv.min() > 0.0 && sv.max() / sv.min() < 50.0 {
            return v;
        }
    }
}

/// Modulus drawn at least `1e-3` away from 1, on a log scale in `[0.05, 20]`.
fn random_modulus(rng: &mut StdRng) -> f64 {
    loop {
        let m: f64 = rng.random_range((0.05f64).ln()..(20.0f64).ln()).exp();
        if (m - 1.0).abs() >= 1e-3 {
            return m;
        }
    }
}

fn criterion_2() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let (mut agree, mut pair_cases) = (0usize, 0usize);
    for trial in 0..10_000 {
        let complex = rng.random_bool(0.3);
        let mut block = Matrix3::<f64>::zeros();
        let mut eig: Vec<Complex<f64>> = Vec::new();
        if complex {
            let r = random_modulus(&mut rng);
            let th: f64 = rng.random_range(0.1..PI - 0.1);
            block[(0, 0)] = r * th.cos();
            block[(0, 1)] = -r * th.sin();
            block[(1, 0)] = r * th.sin();
            block[(1, 1)] = r * th.cos();
            eig.push(Complex::from_polar(r, th));
            eig.push(Complex::from_polar(r, -th));
        } else {
            for i in 0..2 {
                let l = random_modulus(&mut rng) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                block[(i, i)] = l;
                eig.push(Complex::new(l, 0.0));
            }
        }
        let l3 = random_modulus(&mut rng) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        block[(2, 2)] = l3;
        eig.push(Complex::new(l3, 0.0));

        let v = random_basis(&mut rng);
        let m = v * block * v.try_inverse().ok_or("singular basis")?;
        let direct = eig.iter().filter(|z| z.norm() > 1.0).count();
        let mults = multipliers_of_matrix(&DMatrix::from_iterator(3, 3, m.iter().copied()));
        let idx = classify_index(&mults).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(idx == direct, || format!("trial {trial}: classify {idx} vs direct {direct} for {eig:?}"))?;
        agree += 1;

        if !complex {
            let (l1, l2) = (eig[0].re, eig[1].re);
            if l1 * l2 > 1.0 {
                pair_cases += 1;
                let both_out = l1.abs() > 1.0 && l2.abs() > 1.0;
                ensure(pair_is_index2(l1 + l2, l1 * l2) == both_out, || {
                    format!("trial {trial}: c* test disagrees for ({l1}, {l2})")
                })?;
            }
        }
    }
    Ok(format!("{agree}/10000 agree, {pair_cases} real-pair c* cases agree"))
}

fn criterion_3() -> Check {
    let p = ReturnMapParams::default();
    let mut prev = f64::INFINITY;
    let mut used = Vec::new();
    for k in 8..=20 {
        let rec = fixed_point_for(&p, k).map_err(|e| format!("k = {k}: {e}"))?;
        let inp = IndexCriterionInputs::from_orbit(&rec, &p).map_err(|e| e.to_string())?;
        let xi = inp.xi[0];
        let gap = wrap_angle(xi - inp.phi - FRAC_PI_2).abs().min(wrap_angle(xi - inp.phi + FRAC_PI_2).abs());
        if gap < 0.3 {
            continue;
        }
        let (computed, leading) = trace_formula_check(&rec, &p).map_err(|e| e.to_string())?;
        let err = ((computed - leading) / leading).abs();
        ensure(err < prev, || format!("k = {k}: error {err:.3e} did not decrease from {prev:.3e}"))?;
        if rec.points[0].x < 1e-6 {
            ensure(err < 0.1, || format!("k = {k}: error {err:.3e} at x = {:.2e}", rec.points[0].x))?;
        }
        prev = err;
        used.push(k);
    }
    ensure(used.len() >= 2, || format!("only {} orbits satisfy the phase condition", used.len()))?;
    Ok(format!("{} orbits, final relative error {prev:.2e}", used.len()))
}

fn criterion_4() -> Check {
    let p = ReturnMapParams::default();
    let mut prev = f64::INFINITY;
    let mut slowest: f64 = 0.0;
    for j0 in 3..=10 {
        let start = Instant::now();
        let r = solve_double_round_mu(&p, j0, 0, 1.0).map_err(|e| format!("j0 = {j0}: {e}"))?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let rel = r.relative_gap;
        if j0 >= 8 {
            ensure(rel < 0.05, || format!("j0 = {j0}: relative gap {rel:.3e}"))?;
        }
        ensure(rel < prev, || format!("j0 = {j0}: gap {rel:.3e} not below {prev:.3e}"))?;
        prev = rel;
    }
    ensure(slowest < 1.0, || format!("slowest root {slowest:.3} s"))?;
    Ok(format!("gap at j0 = 10 is {prev:.2e}, slowest root {slowest:.4} s"))
}

fn criterion_5() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("lab.ini");
    std::fs::write(&config, "").map_err(|e| e.to_string())?;
    let args = CommonArgs { config, out: dir.path().join("out"), jobs: None, seed: None };
    let start = Instant::now();
    let outcome = cmd_hetero_search(&args, GridArgs::default());
    let elapsed = start.elapsed().as_secs_f64();
    ensure(outcome.exit == ExitKind::Ok, || format!("exit {:?}: {}", outcome.exit, outcome.summary))?;
    let text = std::fs::read_to_string(args.out.join("hetero.jsonl")).map_err(|e| e.to_string())?;
    let rho = ReturnMapParams::default().rho;
    let mut witnesses = Vec::new();
    for line in text.lines() {
        let r: PipelineRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let Some(lr) = &r.loop_root else { continue };
        let residual_ok = lr.residual < 1e-10 * lr.mu.abs().powf(rho);
        let index2 = r.pair.as_ref().is_some_and(|p| p.index == 2 && p.period == 2);
        let qt = r.is_qt && r.min_singular.is_some_and(|s| s > 1e-3);
        let walk =
            r.walk.as_ref().is_some_and(|w| w.doubled_every_round() && w.maxima.last().is_some_and(|m| *m >= w.target));
        if residual_ok && index2 && qt && walk {
            witnesses.push((r.j0, r.k));
        }
    }
    ensure(!witnesses.is_empty(), || "no grid point passes all four checks".into())?;
    ensure(elapsed < 60.0, || format!("grid took {elapsed:.1} s"))?;
    Ok(format!("witnesses {witnesses:?}, {elapsed:.2} s"))
}

fn criterion_6() -> Check {
    let p = ExampleParams::default();
    let s = linearize_origin(&p).map_err(|e| e.to_string())?;
    let lin = p.sigma + 1.0;
    let disc = (lin * lin + 4.0 * p.sigma * (p.r - 1.0)).sqrt();
    let oracle = [
        Complex::new(0.5 * (-lin + disc), 0.0),
        Complex::new(0.5 * (-lin - disc), 0.0),
        Complex::new(-p.b, p.eps),
        Complex::new(-p.b, -p.eps),
    ];
    let listed = [
        Complex::new(11.827723, 0.0),
        Complex::new(-22.827723, 0.0),
        Complex::new(-2.666667, 0.1),
        Complex::new(-2.666667, -0.1),
    ];
    for (o, l) in oracle.iter().zip(&listed) {
        ensure((o - l).norm() < 1e-6, || format!("oracle {o} vs listed {l}"))?;
        let hit = s.eigenvalues.iter().map(|e| (e - o).norm()).fold(f64::INFINITY, f64::min);
        ensure(hit < 1e-6, || format!("no computed eigenvalue within 1e-6 of {o}"))?;
    }
    ensure((s.rho - 0.225459).abs() < 1e-6, || format!("rho = {}", s.rho))?;
    ensure(s.rho < 0.5 && s.c3, || "C3 fails".into())?;
    let strong_ok = -22.827723 < -s.lambda;
    ensure(s.c2 && strong_ok && -s.lambda < 0.0 && s.gamma > 0.0, || "C2 ordering fails".into())?;
    Ok(format!("rho = {:.7}", s.rho))
}

fn criterion_7() -> Check {
    // Flow equivariance with a polynomial symmetric f.
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..2000 {
        let c = rng.random_range(-1.0..1.0);
        let p = ExampleParams { f: FSpec { c, r0: None }, ..ExampleParams::default() };
        let s = [
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(-10.0..50.0),
            rng.random_range(-5.0..5.0),
        ];
        let lhs = vector_field(&reflect_state(&s), &p);
        let rhs = reflect_state(&vector_field(&s, &p));
        ensure(lhs == rhs, || format!("equivariance residual at {s:?}"))?;
    }

    // T2 = R T1 R under the Zero model, for maps and Jacobians.
    let mp = ReturnMapParams::default().with_mu(1e-7);
    for i in 0..500 {
        let x = -(10f64).powf(-rng.random_range(2.0..12.0));
        let q = SectionPoint::new(x, rng.random_range(0.95..1.05), vec![rng.random_range(-0.05..0.05)]);
        let direct = apply_t2(&q, &mp).map_err(|e| e.to_string())?;
        let conj = reflect(&apply_t1(&reflect(&q, &mp), &mp).map_err(|e| e.to_string())?, &mp);
        ensure(direct == conj, || format!("sample {i}: T2 {direct:?} vs R T1 R {conj:?}"))?;
        ensure(apply_t(&q, &mp).map_err(|e| e.to_string())? == direct, || "apply_t does not dispatch to T2".into())?;
        let j2 = jacobian_t2(&q, &mp).map_err(|e| e.to_string())?;
        let j1 = jacobian_t1(&reflect(&q, &mp), &mp).map_err(|e| e.to_string())?;
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            mp.dim(),
            [-1.0, 1.0].into_iter().chain(mp.involution.iter().copied()),
        ));
        ensure(j2 == &s * j1 * &s, || format!("sample {i}: Jacobian conjugacy fails"))?;
    }
    // Independent Newton solve of the mirror fixed point.
    let p0 = ReturnMapParams::default();
    let rec = fixed_point_for(&p0, 8).map_err(|e| e.to_string())?;
    let mut seed = rec.phase_points[0].clone();
    seed.side = Side::Pi2;
    seed.z = seed.z.iter().zip(&p0.involution).map(|(z, s)| z * s).collect();
    let mirror = find_periodic_orbit(&p0, &[seed]).map_err(|e| e.to_string())?;
    let gap = reflect(&rec.points[0], &p0).distance(&mirror.points[0]);
    ensure(gap < 1e-12 * rec.points[0].x.abs(), || format!("mirror fixed point off by {gap:e}"))?;

    // Separatrix first returns.
    let fp = ExampleParams::default();
    let sec = Section::z_level(fp.r - 1.0, Crossing::Both);
    let o = IntegratorOptions::default();
    let up = track_separatrix(&fp, 1.0, &sec, SEPARATRIX_OFFSET, 50.0, &o).map_err(|e| e.to_string())?;
    let down = track_separatrix(&fp, -1.0, &sec, SEPARATRIX_OFFSET, 50.0, &o).map_err(|e| e.to_string())?;
    let m = reflect_state(&up.crossing.state);
    let d = (0..4).map(|i| (m[i] - down.crossing.state[i]).powi(2)).sum::<f64>().sqrt();
    ensure(d < 1e-6, || format!("separatrix returns differ by {d:e}"))?;
    Ok(format!("separatrix mirror gap {d:.2e}"))
}

fn criterion_8() -> Check {
    // The phase shift puts the first ladder point at x = 0.01.
    let p = ReturnMapParams {
        small_terms: SmallTermModel::scaled_bump(1.0),
        theta: (0.01f64).ln() + 1.5 * PI,
        ..ReturnMapParams::default()
    };
    ensure((p.ladder_seed(1) / 0.01 - 1.0).abs() < 1e-12, || format!("ladder seed {:e}", p.ladder_seed(1)))?;
    let base = fixed_point_for(&p, 1).map_err(|e| e.to_string())?.points[0].clone();
    let x0 = base.x;
    ensure((x0 / 0.01 - 1.0).abs() < 0.05, || format!("x0 = {x0:e}"))?;
    let leaf = build_leaf(&base, &p).map_err(|e| e.to_string())?;
    let mut q = leaf.point_at(&[base.z[0] + 1e-5]);
    let mut d = q.distance(&base);
    let mut ratios = Vec::new();
    for i in 0..5 {
        let img = apply_t(&q, &p).map_err(|e| format!("iterate {i}: {e}"))?;
        let off = leaf.transverse_distance(&img);
        ensure(off < 1e-8 + 1e-3 * img.distance(&base), || format!("iterate {i} left the leaf by {off:e}"))?;
        // Project back so rounding cannot drift the pair off the leaf.
        q = leaf.point_at(&img.z);
        let nd = q.distance(&base);
        if nd == 0.0 {
            break;
        }
        let r = nd / d;
        ensure(r < 0.5, || format!("iterate {i}: ratio {r:.3}"))?;
        ratios.push(r);
        d = nd;
    }
    ensure(!ratios.is_empty(), || "no iterates".into())?;
    let mean_ln = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
    let exponent = mean_ln / x0.ln();
    ensure(exponent > p.rho, || format!("fitted exponent {exponent:.3} not above rho = {}", p.rho))?;
    Ok(format!("ratios {ratios:.3?}, fitted exponent {exponent:.3}"))
}

fn criterion_9() -> Check {
    let p = ReturnMapParams::default();
    let consts = SurvivalConstants::default();
    let mut summary = Vec::new();
    for mu in [1e-6, 1e-9, 1e-12] {
        let pm = p.with_mu(mu);
        let th = survival_threshold(&pm, mu, consts).map_err(|e| e.to_string())?;
        let lower = consts.c1 * mu.powf(1.0 / p.rho);
        let upper = consts.c2 * mu.powf(1.0 / (2.0 * p.rho));
        ensure(lower < th.x_kstar && th.x_kstar < upper, || {
            format!("mu = {mu:e}: x_k* = {:e} outside ({lower:e}, {upper:e})", th.x_kstar)
        })?;
        let scan = find_fixed_points_t1(&pm, 3, th.k_star + 4).map_err(|e| e.to_string())?;
        let ks: Vec<i64> = scan.found.iter().map(|(k, _)| *k).collect();
        let max_k = ks.iter().copied().max().ok_or("no survivors")?;
        ensure((max_k - th.k_star).abs() <= 1, || format!("mu = {mu:e}: survivors up to {max_k}, k* = {}", th.k_star))?;
        ensure((3..th.k_star).all(|k| ks.contains(&k)), || format!("mu = {mu:e}: gap below k*: {ks:?}"))?;
        summary.push(format!("mu {mu:e}: k* {} max survivor {max_k}", th.k_star));
    }
    Ok(summary.join("; "))
}

fn main() {
    let checks: [(u32, fn() -> Check); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = 0;
    for (n, f) in checks {
        match f() {
            Ok(detail) => println!("criterion {n}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL ({why})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
