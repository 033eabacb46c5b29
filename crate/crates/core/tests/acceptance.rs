//! Acceptance run: one line per criterion. Exits nonzero when a criterion fails,
//! except the twist determinant check, which is known not to hold as stated
//! (see README).

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use kamtori::birkhoff::{
    bbm_normal_form, cubic_divisor, cubic_divisor_product, gpc_constants, gpc_det_formula, gpc_model_twist, resonant_quartic_bbm,
    NormalFormOptions, NormalFormPackage,
};
use kamtori::homology::{
    kron_identities_check, solve_first_mode, solve_second_mode, sylvester_factors, sylvester_integral, sylvester_kron,
    sylvester_picard_k0, ExponentProfile, SecondSign, SolverOptions, Strategy as SolveStrategy,
};
use kamtori::kam::{run_kam, ComposedTransform, ExcisionSetup, KamOptions, KamRun, KamState, LieMapMethod};
use kamtori::melnikov::{scale_scan, IdentityTangent, ParameterBox};
use kamtori::model::{bbm_cubic_table, bbm_model, bbm_normal_frequency, gpc_lambda, period_of, FrequencyModel};
use kamtori::norms::{op_norm, random_complex_matrix, LatticeOperator};
use kamtori::scalar::cre;
use kamtori::verify::{norm_conservation, torus_residual, TorusEmbedding};
use kamtori::{Cx, HamiltonianPoly, Monomial};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type C = Cx<f64>;
type Poly = HamiltonianPoly<f64>;

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn emit(lines: &mut Vec<Line>, id: &'static str, passed: bool, detail: String) {
    let _ = writeln!(std::io::stderr().lock(), "criterion {id:<3} {} {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { id, passed, detail });
}

fn tau() -> f64 {
    1.0 + (-1.0f64).exp()
}

fn hermitian(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<C> {
    let a = random_complex_matrix(rng, n, n, 1.0);
    (&a + a.adjoint()) * cre(0.5)
}

fn spectral(a: &DMatrix<C>) -> f64 {
    a.clone().singular_values().max()
}

/// Hermitian `B` rescaled so that `||Lambda^{-1} B|| = target`.
fn scaled_b(rng: &mut ChaCha8Rng, lam: &[f64], target: f64) -> DMatrix<C> {
    let b = hermitian(rng, lam.len());
    let inv = DMatrix::from_fn(lam.len(), lam.len(), |i, j| if i == j { cre(1.0 / lam[i]) } else { cre(0.0) });
    let ratio = spectral(&(&inv * &b));
    b * cre(target / ratio)
}

fn lambda_inv_b(lam: &[f64], b: &DMatrix<C>) -> f64 {
    let inv = DMatrix::from_fn(lam.len(), lam.len(), |i, j| if i == j { cre(1.0 / lam[i]) } else { cre(0.0) });
    spectral(&(&inv * b))
}

fn rel(a: &DMatrix<C>, b: &DMatrix<C>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn criterion_1(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t = tau();
    let (mut worst_rel, mut worst_res, mut done, mut skipped) = (0.0f64, 0.0f64, 0usize, 0usize);
    while done < 200 {
        let n = rng.random_range(8..=30usize);
        let lam: Vec<f64> = (1..=n as i64).map(|j| bbm_normal_frequency(j, t).unwrap()).collect();
        let weights: Vec<f64> = (1..=n).map(|j| j as f64).collect();
        let target = rng.random_range(1e-4..0.1);
        let b = scaled_b(&mut rng, &lam, target);
        let b2 = scaled_b(&mut rng, &lam, target);
        let omega = [rng.random_range(0.3..0.6), rng.random_range(0.2..0.4)];
        let k: Vec<i32> = loop {
            let k = vec![rng.random_range(-16..=16), rng.random_range(-16..=16)];
            if k.iter().map(|c: &i32| c.abs()).sum::<i32>() <= 16 {
                break k;
            }
        };
        let kw: f64 = k.iter().zip(&omega).map(|(&c, w)| c as f64 * w).sum();
        let structured = SolverOptions { threshold: (n / 2) as f64, ..SolverOptions::default() };
        let dense = SolverOptions { strategy: SolveStrategy::Dense, ..SolverOptions::default() };
        let r = DVector::from_fn(n, |_, _| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let first = solve_first_mode(&k, -kw, &lam, &b, &weights, &r, &structured).and_then(|s| Ok((s, solve_first_mode(&k, -kw, &lam, &b, &weights, &r, &dense)?)));
        let sign = [SecondSign::Plus, SecondSign::Minus, SecondSign::Difference][rng.random_range(0..3)];
        let rm = random_complex_matrix(&mut rng, n, n, 1.0);
        let second = solve_second_mode(&k, kw, sign, &lam, &b, &b2, &weights, &rm, &structured)
            .and_then(|s| Ok((s, solve_second_mode(&k, kw, sign, &lam, &b, &b2, &weights, &rm, &dense)?)));
        let (Ok(((fs, ts), (fd, td))), Ok(((ss, us), (sd, ud)))) = (first, second) else {
            // below the divisor floor for both strategies: not an instance
            skipped += 1;
            continue;
        };
        worst_rel = worst_rel.max((&fs - &fd).norm() / fd.norm()).max(rel(&ss, &sd));
        worst_res = worst_res.max(ts.residual).max(td.residual).max(us.residual).max(ud.residual);
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = worst_rel <= 1e-7 && worst_res <= 1e-8 && secs <= 300.0;
    emit(lines, "1", passed, format!("{done} instances ({skipped} resonant draws skipped): max rel diff {worst_rel:.2e}, max residual {worst_res:.2e}, {secs:.1}s"));
}

fn criterion_2(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let t = tau();
    let (mut worst_pair, mut worst_ratio, mut done) = (0.0f64, 0.0f64, 0usize);
    while done < 100 {
        let n = rng.random_range(6..=16usize);
        let lam: Vec<f64> = (1..=n as i64).map(|j| bbm_normal_frequency(j, t).unwrap()).collect();
        let target = rng.random_range(1e-3..0.1);
        let b = scaled_b(&mut rng, &lam, target);
        let b2 = scaled_b(&mut rng, &lam, target);
        let r = random_complex_matrix(&mut rng, n, n, 1.0);
        let (m, nn) = sylvester_factors(0.0, SecondSign::Plus, &lam, &b, &b2);
        let (Ok((xi, _)), Ok((xp, rep)), Some(xk)) =
            (sylvester_integral(&m, &nn, &r, 1e-13), sylvester_picard_k0(&lam, &b, &b2, &r, 1e-15), sylvester_kron(&m, &nn, &r, &[]))
        else {
            continue;
        };
        worst_pair = worst_pair.max(rel(&xi, &xk)).max(rel(&xp, &xk)).max(rel(&xi, &xp));
        let contraction = lambda_inv_b(&lam, &b).max(lambda_inv_b(&lam, &b2));
        worst_ratio = worst_ratio.max(rep.max_ratio() / contraction);
        done += 1;
    }
    let passed = worst_pair <= 1e-9 && worst_ratio <= 2.2;
    emit(lines, "2", passed, format!("{done} instances: max pairwise rel diff {worst_pair:.2e}, max Picard ratio / ||Lambda^-1 B|| {worst_ratio:.3}"));
}

fn criterion_3(lines: &mut Vec<Line>) {
    let t = tau();
    let radius = 24usize;
    let mut identity = 0.0f64;
    for j in -(radius as i32)..=radius as i32 {
        for k in -(radius as i32)..=radius as i32 {
            let l = -j - k;
            if j == 0 || k == 0 || l == 0 || l.abs() > radius as i32 {
                continue;
            }
            let a = cubic_divisor(j, k, l, t).unwrap();
            let b = cubic_divisor_product(j, k, l, t).unwrap();
            identity = identity.max((a - b).abs());
        }
    }
    let model = bbm_model(radius, t, &[1, 2], 1e-4).unwrap();
    let cubic = bbm_cubic_table(radius, t, period_of(t)).unwrap();
    let pkg = bbm_normal_form(&model, &cubic, &NormalFormOptions::default()).unwrap();
    let period = period_of(t);
    let mut diag = 0.0f64;
    for &(a, _, c) in pkg.resonant_table.iter().filter(|e| e.0 == e.1) {
        let k = model.lattice.sites[a][0] as i64;
        let expect = resonant_quartic_bbm(k, k, t, period);
        diag = diag.max((c - expect).abs() / expect.abs());
    }
    let passed = pkg.cubic_cancellation <= 1e-11 && identity <= 1e-13 && diag <= 1e-12;
    emit(lines, "3", passed, format!("radius {radius}: cancellation {:.2e}, divisor identity {identity:.2e}, diagonal quartic rel {diag:.2e}", pkg.cubic_cancellation));
}

fn criterion_4(lines: &mut Vec<Line>) {
    let mut constants = 0.0f64;
    for d in 1..=3u32 {
        let (a, b) = gpc_constants(d);
        let ea = (3.0f64 / 8.0).powi(d as i32);
        constants = constants.max((a - ea).abs()).max((b - ((5.0f64 / 8.0).powi(d as i32) - ea)).abs());
    }
    emit(lines, "4a", constants <= 1e-15, format!("constants a, b for d = 1, 2, 3: max error {constants:.1e}"));
    let tau = [1.0 + (-1.0f64).exp()];
    let mut detail = Vec::new();
    let mut passed = true;
    for n in [2usize, 3] {
        let l = 10 * n as i32;
        let lambdas: Vec<f64> = (1..=n as i32).map(|i| gpc_lambda(&[l + i], &tau)).collect();
        let det = gpc_model_twist(1, &lambdas).determinant();
        let stated = gpc_det_formula(1, n);
        let (a, b) = gpc_constants(1);
        let exact = (a - b).powi(n as i32 - 1) * (a + (n as f64 - 1.0) * b);
        let err = (det - stated).abs() / stated.abs();
        passed &= err <= 0.05;
        detail.push(format!("N={n}: det {det:.5} vs stated {stated:.5} ({:.0}% off; (a-b)^(N-1)(a+(N-1)b) = {exact:.5})", 100.0 * err));
    }
    emit(lines, "4b", passed, detail.join("; "));
}

struct DefaultRun {
    model: FrequencyModel,
    pkg: NormalFormPackage,
    state0: KamState,
    run: KamRun,
    profile: ExponentProfile,
    seconds: f64,
}

fn default_run() -> DefaultRun {
    let start = Instant::now();
    let t = tau();
    let eps0 = 1e-4;
    let model = bbm_model(16, t, &[1, 2], eps0).unwrap();
    let cubic = bbm_cubic_table(16, t, period_of(t)).unwrap();
    let pkg = bbm_normal_form(&model, &cubic, &NormalFormOptions { eps0, ..NormalFormOptions::default() }).unwrap();
    let fr = &pkg.frequencies;
    let state0 = KamState::from_hamiltonian(&pkg.reduced, fr.normal_base.clone(), fr.normal_weights.clone(), fr.limit_point).unwrap();
    let opts = KamOptions { kappa: fr.kappa, ..KamOptions::default() };
    let profile = ExponentProfile::desk(model.dim_d, fr.kappa, 2, 0.03);
    let excision = ExcisionSetup {
        map: fr.clone(),
        bx: ParameterBox::halton(fr.param_box.lower.clone(), fr.param_box.upper.clone(), 10_000),
        profile: profile.clone(),
        second_sites: (0..state0.n_sites()).collect(),
    };
    let run = run_kam(state0.clone(), &opts, Some(excision)).unwrap();
    DefaultRun { model, pkg, state0, run, profile, seconds: start.elapsed().as_secs_f64() }
}

fn criteria_5_to_8(lines: &mut Vec<Line>) {
    let eps0 = 1e-4;
    let d = default_run();
    let run = &d.run;
    let ratios = run.log_ratios();
    let superlinear = !ratios.is_empty() && ratios.iter().all(|r| *r >= 1.3);
    let passed = superlinear && run.omega_shift <= 10.0 * eps0 && run.b_shift <= 10.0 * eps0 && d.seconds <= 900.0;
    emit(
        lines,
        "5",
        passed,
        format!(
            "ledger {:?}, log ratios {ratios:?}, |dw| {:.2e}, |dB| {:.2e}, {:.0}s",
            run.ledger.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>(),
            run.omega_shift,
            run.b_shift,
            d.seconds
        ),
    );

    let transform = ComposedTransform { generators: run.generators.clone(), method: LieMapMethod::Flow { steps: 8 } };
    let n_sites = d.state0.n_sites();
    let h0 = d.state0.hamiltonian();
    let residual = TorusEmbedding::from_transform(run.omega.clone(), n_sites, &transform, 16)
        .and_then(|emb| torus_residual(&emb, &h0, &d.state0.weights, 1.0, 16));
    match residual {
        Ok(res) => emit(lines, "6", res <= 10.0 * run.epsilon_final, format!("residual {res:.2e} vs 10 eps_final = {:.2e}", 10.0 * run.epsilon_final)),
        Err(e) => emit(lines, "6", false, e.to_string()),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z0: Vec<C> = (0..n_sites).map(|_| C::new(0.05 * rng.random_range(-1.0..1.0), 0.05 * rng.random_range(-1.0..1.0))).collect();
    let drift = norm_conservation(&run.b, &d.state0.lam, &z0, &d.state0.weights, 1.0, 1e3, 1e-2);
    emit(lines, "7", drift <= 1e-9, format!("relative h_1 drift {drift:.2e} over t = 1e3"));

    let fr = &d.pkg.frequencies;
    let scales = [8, 16, 32, 64];
    let hw = 0.25;
    let fbox = ParameterBox::halton(fr.tangent_base.iter().map(|w| w - hw).collect(), fr.tangent_base.iter().map(|w| w + hw).collect(), 10_000);
    let tangent = |k: f64| d.profile.tangent_threshold(k);
    let melnikov = |k: f64| d.profile.melnikov_threshold(k);
    let trend = scale_scan(&fbox, &IdentityTangent { normal: fr.normal_base.clone() }, &fr.normal_weights, &scales, tangent, melnikov, None);
    let pbox = ParameterBox::halton(fr.param_box.lower.clone(), fr.param_box.upper.clone(), 10_000);
    let survival = scale_scan(&pbox, fr, &fr.normal_weights, &scales, tangent, melnikov, None);
    let n = d.model.tangent_sites.len() as f64;
    let fractions: Vec<String> = trend.rows.iter().map(|r| format!("{:.4}", r.first_fraction())).collect();
    emit(
        lines,
        "8",
        trend.first_slope <= -(n - 0.5) && survival.min_alive_fraction >= 0.9,
        format!(
            "first-Melnikov fractions {fractions:?}, slope {:.2}; surviving fraction {:.4} (iteration {:?})",
            trend.first_slope, survival.min_alive_fraction, run.alive_fraction
        ),
    );
}

// ---------------------------------------------------------------------------
// structural invariants

fn monomial_strategy() -> impl Strategy<Value = (Monomial, C)> {
    (prop::collection::vec(-2i32..=2, 2), prop::collection::vec(0u8..=1, 2), prop::collection::vec(0u16..3, 0..=2), prop::collection::vec(0u16..3, 0..=2), -1.0f64..1.0, -1.0f64..1.0)
        .prop_map(|(k, y, z, zb, re, im)| (Monomial::one(2).with_k(&k).with_y(&y).with_z(&z).with_zb(&zb), C::new(re, im)))
}

fn poly_strategy() -> impl Strategy<Value = Poly> {
    prop::collection::vec(monomial_strategy(), 1..=4).prop_map(|terms| {
        let mut p = Poly::new(2, 3);
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    })
}

fn scale_of(ps: &[&Poly]) -> f64 {
    ps.iter().map(|p| p.weighted_norm(0.0, 1.0)).product::<f64>().max(1.0)
}

fn check(cond: bool, msg: String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg))
    }
}

fn matrix_strategy() -> impl Strategy<Value = (DMatrix<C>, DMatrix<C>, Vec<f64>)> {
    (2usize..=8, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_complex_matrix(&mut rng, n, n, 1.0);
        let b = random_complex_matrix(&mut rng, n, n, 1.0);
        let w: Vec<f64> = (1..=n).map(|j| j as f64).collect();
        (a, b, w)
    })
}

fn run_property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn criterion_9(lines: &mut Vec<Line>) {
    let mut failures = Vec::new();
    let mut record = |r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(e);
        }
    };
    record(run_property("antisymmetry", (poly_strategy(), poly_strategy()), |(f, g)| {
        let d = f.bracket(&g).add(&g.bracket(&f)).max_abs_coeff();
        check(d <= 1e-12 * scale_of(&[&f, &g]), format!("{{f,g}} + {{g,f}} = {d:e}"))
    }));
    record(run_property("jacobi", (poly_strategy(), poly_strategy(), poly_strategy()), |(f, g, h)| {
        let j = f.bracket(&g.bracket(&h)).add(&g.bracket(&h.bracket(&f))).add(&h.bracket(&f.bracket(&g)));
        let d = j.max_abs_coeff();
        check(d <= 1e-11 * scale_of(&[&f, &g, &h]), format!("Jacobi defect {d:e}"))
    }));
    record(run_property("leibniz", (poly_strategy(), poly_strategy(), poly_strategy()), |(f, g, h)| {
        let lhs = f.bracket(&g.mul(&h));
        let rhs = f.bracket(&g).mul(&h).add(&g.mul(&f.bracket(&h)));
        let d = lhs.distance(&rhs);
        check(d <= 1e-11 * scale_of(&[&f, &g, &h]), format!("Leibniz defect {d:e}"))
    }));
    record(run_property("polynomial majorant", (poly_strategy(), poly_strategy(), 0.0f64..1.0, 0.1f64..2.0), |(f, g, s, r)| {
        let lhs = f.mul(&g).weighted_norm(s, r);
        let rhs = f.weighted_norm(s, r) * g.weighted_norm(s, r);
        check(lhs <= rhs * (1.0 + 1e-12), format!("{lhs} > {rhs}"))
    }));
    record(run_property("operator majorant", (matrix_strategy(), 0.0f64..2.0), |((a, b, w), p)| {
        let maj = |m: &DMatrix<C>| m.map(|v| cre(v.norm()));
        let n = |m: &DMatrix<C>| op_norm(m, &w, &w, p, p);
        let prod = n(&maj(&(&a * &b)));
        let sum = n(&maj(&(&a + &b)));
        let (na, nb) = (n(&maj(&a)), n(&maj(&b)));
        check(prod <= na * nb * (1.0 + 1e-12) && sum <= (na + nb) * (1.0 + 1e-12), format!("product {prod} vs {}, sum {sum} vs {}", na * nb, na + nb))
    }));
    record(run_property("block monotonicity", (matrix_strategy(), 0.0f64..2.0, 0.0f64..1.0), |((a, _, w), p, kappa)| {
        let mark = w[w.len() / 2];
        let op = LatticeOperator::new(a, w).with_marks(vec![mark]);
        let full = op.op_norm(p, p + kappa);
        for i in 0..2 {
            for j in 0..2 {
                let blk = op.block_op_norm(i, j, p, p + kappa);
                check(blk <= full * (1.0 + 1e-12), format!("block ({i},{j}) {blk} > {full}"))?;
            }
        }
        Ok(())
    }));
    record(run_property("hermitian l2 vs h_p", (matrix_strategy(), 0.01f64..3.0), |((a, _, w), p)| {
        let h = (&a + a.adjoint()) * cre(0.5);
        let l2 = spectral(&h);
        let hp = op_norm(&h, &w, &w, p, p);
        check(l2 <= hp * (1.0 + 1e-12), format!("{l2} > {hp}"))
    }));
    record(run_property("kronecker identities", (2usize..=5, any::<u64>()), |(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = kron_identities_check(&mut rng, n).max_error();
        check(e <= 1e-10, format!("identity error {e:e}"))
    }));
    let passed = failures.is_empty();
    let detail = if passed { "8 properties x 1000 cases".to_string() } else { failures.join("; ") };
    emit(lines, "9", passed, detail);
}

/// Known not to hold as stated; reported but not fatal.
const UNATTAINABLE: &[&str] = &["4b"];

fn main() -> ExitCode {
    let mut lines = Vec::new();
    criterion_1(&mut lines);
    criterion_2(&mut lines);
    criterion_3(&mut lines);
    criterion_4(&mut lines);
    criteria_5_to_8(&mut lines);
    criterion_9(&mut lines);
    let fatal: Vec<&Line> = lines.iter().filter(|l| !l.passed && !UNATTAINABLE.contains(&l.id)).collect();
    let passed = lines.iter().filter(|l| l.passed).count();
    let _ = writeln!(std::io::stderr().lock(), "acceptance: {passed}/{} criteria pass", lines.len());
    for l in lines.iter().filter(|l| !l.passed && UNATTAINABLE.contains(&l.id)) {
        let _ = writeln!(std::io::stderr().lock(), "  criterion {} fails as documented: {}", l.id, l.detail);
    }
    if fatal.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
