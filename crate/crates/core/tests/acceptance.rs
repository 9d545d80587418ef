//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance` (release-grade speed comes
//! from the workspace dev profile).

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;

use pucci_kac::bench::{self, GridRun};
use pucci_kac::config::{parse_config, ProblemSpec, RunConfig};
use pucci_kac::dpp::{self, extract_policy, DppOptions};
use pucci_kac::exprlang::ScalarField;
use pucci_kac::geometry::Domain;
use pucci_kac::grid::{build_grid, NodeKind, ValueGrid};
use pucci_kac::simulate::{
    continuity_probe, estimate_value, exit_time_stats, restart_consistency, PathConfig, Policy,
};
use pucci_kac::symmat::{
    enumerate_controls, optimal_diffusion, pucci_plus, Control, Ellipticity, SymMatrix,
};

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn record(&mut self, id: usize, title: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS [{id}] {title}: {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL [{id}] {title}: {detail}");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(problem: &str, solver: &str) -> (ProblemSpec, RunConfig) {
    let text = format!("[problem]\n{problem}\n[solver]\n{solver}\n");
    parse_config(&text).unwrap_or_else(|e| panic!("bad config: {e}\n{text}"))
}

const BALL: &str = "dim = 2\ndomain = \"ball\"\ncenter = [0.0, 0.0]\nradius = 1.0";

fn case(lam: f64, big_lam: f64, f: &str, g: &str) -> String {
    format!("{BALL}\nlam = {lam}\nLam = {big_lam}\nf = \"{f}\"\ng = \"{g}\"")
}

fn grid_solver(kind: &str, h: f64) -> String {
    format!("kind = \"{kind}\"\nh = {h}\nseed = 7")
}

fn at_origin(spec: &ProblemSpec, run: &GridRun) -> f64 {
    bench::grid_value(spec, &run.grid, &[0.0, 0.0]).expect("origin is covered")
}

fn secs(run: &GridRun) -> f64 {
    run.runtime_ms as f64 / 1000.0
}

/// Case A at the criterion resolutions, shared by several criteria.
struct CaseA {
    spec: ProblemSpec,
    dpp: GridRun,
    fd: GridRun,
}

fn case_a() -> CaseA {
    let (spec, cfg) = config(&case(1.0, 2.0, "1", "0"), &grid_solver("dpp_grid", 0.02));
    let dpp = bench::run_dpp(&spec, &cfg).expect("dpp solve");
    let (_, cfg) = config(&case(1.0, 2.0, "1", "0"), &grid_solver("fd_oracle", 0.01));
    let fd = bench::run_fd(&spec, &cfg).expect("fd solve");
    CaseA { spec, dpp, fd }
}

fn criterion_1(a: &CaseA) -> Outcome {
    let (ud, uf) = (at_origin(&a.spec, &a.dpp), at_origin(&a.spec, &a.fd));
    let (td, tf) = (secs(&a.dpp), secs(&a.fd));
    let ok = (ud - 0.5).abs() <= 0.01
        && (uf - 0.5).abs() <= 0.01
        && td <= 60.0
        && tf <= 60.0
        && a.dpp.report.converged
        && a.fd.report.converged;
    check(
        ok,
        format!("dpp u(0)={ud:.5} ({td:.1}s), fd u(0)={uf:.5} ({tf:.1}s), target 0.5 +/- 0.01"),
    )
}

fn criterion_2() -> Outcome {
    let problem = case(1.0, 2.0, "-1", "0");
    let (spec, cfg) = config(&problem, &grid_solver("dpp_grid", 0.02));
    let dpp = bench::run_dpp(&spec, &cfg).map_err(|e| e.to_string())?;
    let (_, cfg_fd) = config(&problem, &grid_solver("fd_oracle", 0.01));
    let fd = bench::run_fd(&spec, &cfg_fd).map_err(|e| e.to_string())?;
    let (ud, uf) = (at_origin(&spec, &dpp), at_origin(&spec, &fd));

    let controls = enumerate_controls(2, spec.ell, cfg.angles, cfg.levels).unwrap();
    let target = SymMatrix::identity(2).scaled(spec.ell.big_lam());
    let interior = dpp.grid.interior_nodes();
    let matching = interior
        .iter()
        .filter(|&&n| {
            let c = &controls.controls()[dpp.grid.policy_index(n) as usize];
            c.diffusion().sub(&target).unwrap().norm() <= 1e-9
        })
        .count();
    let share = matching as f64 / interior.len() as f64;
    let ok = (ud + 0.25).abs() <= 0.005 && (uf + 0.25).abs() <= 0.005 && share >= 0.9;
    check(
        ok,
        format!(
            "dpp u(0)={ud:.5}, fd u(0)={uf:.5}, target -0.25 +/- 0.005; sqrt(Lam) I on {:.1}% of cells",
            100.0 * share
        ),
    )
}

fn criterion_3() -> Outcome {
    let problem = case(1.0, 1.0, "1", "0");
    let (spec, cfg) = config(&problem, &grid_solver("dpp_grid", 0.02));
    let dpp = bench::run_dpp(&spec, &cfg).map_err(|e| e.to_string())?;
    let ud = at_origin(&spec, &dpp);
    let pc = PathConfig::new(1e-4, cfg.max_time(&spec), 3).unwrap();
    let policy = Policy::Constant(Control::scaled_identity(2, 1.0));
    let est = estimate_value(&[0.0, 0.0], &policy, &spec.domain, &spec.f, &spec.g, 100_000, &pc)
        .map_err(|e| e.to_string())?;
    let ok = (est.mean - 0.5).abs() <= 3.0 * est.stderr && (est.mean - ud).abs() <= 0.01;
    check(
        ok,
        format!(
            "mc {:.5} +/- {:.5} (|mc-0.5|={:.5}), dpp {ud:.5} (|mc-dpp|={:.5})",
            est.mean,
            est.stderr,
            (est.mean - 0.5).abs(),
            (est.mean - ud).abs()
        ),
    )
}

fn criterion_4() -> Outcome {
    const F: [&str; 4] = ["1", "-1", "x1", "sin(x1)*cos(x2)"];
    const G: [&str; 2] = ["0", "x1"];
    const DOMAINS: [&str; 3] = [
        BALL,
        "dim = 2\ndomain = \"box\"\nlo = [0.0, 0.0]\nhi = [1.0, 1.0]",
        "dim = 2\ndomain = \"annulus\"\ncenter = [0.0, 0.0]\nr_inner = 0.3\nr_outer = 1.0",
    ];
    let mut rng = Pcg64Mcg::seed_from_u64(2024);
    let mut lines = Vec::new();
    let mut ok = true;
    for p in 0..5 {
        let domain = DOMAINS[p % 3];
        let f = F[p % F.len()];
        let g = G[rng.random_range(0..G.len())];
        let big_lam = 1.0 + rng.random_range(0..3) as f64 * 0.5;
        let problem = format!("{domain}\nlam = 1.0\nLam = {big_lam}\nf = \"{f}\"\ng = \"{g}\"");
        let (spec, cfg) = config(&problem, &grid_solver("dpp_grid", 0.02));
        let dpp = bench::run_dpp(&spec, &cfg).map_err(|e| e.to_string())?;
        let (_, cfg) = config(&problem, &grid_solver("fd_oracle", 0.02));
        let fd = bench::run_fd(&spec, &cfg).map_err(|e| e.to_string())?;
        let diff = dpp.grid.max_abs_diff(&fd.grid).ok_or("grids differ in shape")?;
        let bound = 0.03 * spec.ell_estimate;
        ok &= diff <= bound;
        lines.push(format!(
            "{} Lam={big_lam} f={f} g={g}: {diff:.4} <= {bound:.4}",
            spec.domain.kind_name()
        ));
    }
    check(ok, lines.join("; "))
}

fn criterion_5(a: &CaseA) -> Outcome {
    let ud = at_origin(&a.spec, &a.dpp);
    let ell = a.spec.ell;
    let mut rng = Pcg64Mcg::seed_from_u64(55);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..20u64 {
        let sigma = random_admissible_sigma(&mut rng, ell);
        let control = Control::from_sigma(2, sigma).unwrap();
        control.validate(ell).map_err(|e| e.to_string())?;
        let pc = PathConfig::new(1e-3, PathConfig::default_max_time(&a.spec.domain, ell), 100 + k)
            .unwrap();
        let est = estimate_value(
            &[0.0, 0.0],
            &Policy::Constant(control),
            &a.spec.domain,
            &a.spec.f,
            &a.spec.g,
            20_000,
            &pc,
        )
        .map_err(|e| e.to_string())?;
        let slack = est.mean - (ud + 3.0 * est.stderr + 0.01);
        worst = worst.max(slack);
        if slack > 0.0 {
            violations += 1;
        }
    }
    check(
        violations == 0,
        format!("{violations} violations of 20; worst margin {worst:.5} (u_dpp(0)={ud:.5})"),
    )
}

/// `sigma = Q diag(sqrt(e)) R` with random rotations and `e` in `[lam, Lam]`.
fn random_admissible_sigma(rng: &mut Pcg64Mcg, ell: Ellipticity) -> Vec<f64> {
    let rot = |t: f64| [t.cos(), -t.sin(), t.sin(), t.cos()];
    let q = rot(rng.random_range(0.0..std::f64::consts::PI));
    let r = rot(rng.random_range(0.0..std::f64::consts::PI));
    let e: Vec<f64> = (0..2)
        .map(|_| rng.random_range(ell.lam()..=ell.big_lam()).sqrt())
        .collect();
    let mut s = vec![0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            s[i * 2 + j] = (0..2).map(|k| q[i * 2 + k] * e[k] * r[k * 2 + j]).sum();
        }
    }
    s
}

fn criterion_6(a: &CaseA) -> Outcome {
    let controls = enumerate_controls(2, a.spec.ell, 16, 3).unwrap();
    let policy = extract_policy(&a.dpp.grid, &controls);
    let pc = PathConfig::new(1e-3, PathConfig::default_max_time(&a.spec.domain, a.spec.ell), 66)
        .unwrap();
    let mut ok = true;
    let mut lines = Vec::new();
    for rho in [0.05, 0.2] {
        let cmp = restart_consistency(
            &[0.0, 0.0],
            &policy,
            &a.spec.domain,
            &a.spec.f,
            &a.spec.g,
            rho,
            &pc,
            100_000,
        )
        .map_err(|e| e.to_string())?;
        let bound = 3.0 * cmp.joint_stderr();
        ok &= cmp.gap() <= bound;
        lines.push(format!(
            "rho={rho}: direct {:.5}, split {:.5}, gap {:.5} <= {bound:.5}",
            cmp.direct.mean,
            cmp.split.mean,
            cmp.gap()
        ));
    }
    check(ok, lines.join("; "))
}

fn nodewise_drop(base: &ValueGrid, raised: &ValueGrid) -> f64 {
    base.values()
        .iter()
        .zip(raised.values())
        .map(|(b, r)| b - r)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_7() -> Outcome {
    let problems = [
        case(1.0, 2.0, "1", "0"),
        case(1.0, 2.0, "sin(x1)*cos(x2)", "x1"),
    ];
    let mut worst = f64::NEG_INFINITY;
    for problem in &problems {
        for kind in ["dpp_grid", "fd_oracle"] {
            let (spec, cfg) = config(problem, &grid_solver(kind, 0.05));
            let solve = |spec: &ProblemSpec| -> Result<GridRun, String> {
                match kind {
                    "dpp_grid" => bench::run_dpp(spec, &cfg),
                    _ => bench::run_fd(spec, &cfg),
                }
                .map_err(|e| e.to_string())
            };
            let base = solve(&spec)?;
            let mut up_f = spec.clone();
            up_f.f = spec.f.shifted(0.1);
            let mut up_g = spec.clone();
            up_g.g = spec.g.shifted(0.1);
            for raised in [solve(&up_f)?, solve(&up_g)?] {
                worst = worst.max(nodewise_drop(&base.grid, &raised.grid));
            }
        }
    }
    check(
        worst <= 1e-9,
        format!("largest nodewise decrease {worst:.3e} (allowed 1e-9)"),
    )
}

fn criterion_8() -> Outcome {
    let domain = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let ell = Ellipticity::new(1.0, 1.0).unwrap();
    let policy = Policy::Constant(Control::scaled_identity(2, 1.0));
    let horizon = PathConfig::default_max_time(&domain, ell);
    let err = |e: pucci_kac::simulate::SimError| e.to_string();

    // (i) mean exit time from the centre
    let pc = PathConfig::new(1e-3, horizon, 81).unwrap();
    let stats = exit_time_stats(&[0.0, 0.0], &policy, &domain, ell, &pc, 100_000).map_err(err)?;
    let ok_i = (stats.mean_tau - 0.5).abs() <= 3.0 * stats.stderr;

    // (ii) tail
    let nonincreasing = stats.tail.windows(2).all(|w| w[1].1 <= w[0].1);
    let far = stats.survival(20.0 * stats.mean_tau);
    let ok_ii = nonincreasing && far <= 0.01;

    // (iii) coupled continuity probe, majority of three seeds
    let x = [0.5, 0.0];
    let mut monotone_seeds = 0;
    let mut probes = Vec::new();
    for seed in [1u64, 2, 3] {
        let pc = PathConfig::new(1e-3, horizon, seed).unwrap();
        let p: Vec<f64> = [0.1, 0.01, 0.001]
            .iter()
            .map(|d| continuity_probe(&x, &[0.5 + d, 0.0], &policy, &domain, &pc, 20_000, 0.1))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        if p[1] <= p[0] && p[2] <= p[1] {
            monotone_seeds += 1;
        }
        probes.push(format!("{:.4}/{:.4}/{:.4}", p[0], p[1], p[2]));
    }
    let ok_iii = monotone_seeds >= 2;

    // (iv) time-step refinement
    let coarse = exit_time_stats(
        &[0.0, 0.0],
        &policy,
        &domain,
        ell,
        &PathConfig::new(1e-3, horizon, 84).unwrap(),
        20_000,
    )
    .map_err(err)?;
    let fine = exit_time_stats(
        &[0.0, 0.0],
        &policy,
        &domain,
        ell,
        &PathConfig::new(2.5e-4, horizon, 85).unwrap(),
        20_000,
    )
    .map_err(err)?;
    let gap = (coarse.mean_tau - fine.mean_tau).abs();
    let allowed = f64::max(
        3.0 * coarse.stderr.hypot(fine.stderr),
        0.02 * fine.mean_tau,
    );
    let ok_iv = gap <= allowed;

    check(
        ok_i && ok_ii && ok_iii && ok_iv,
        format!(
            "(i) E[tau]={:.5} +/- {:.5} {}; (ii) P(tau>=20E)={far:.5} monotone={nonincreasing} {}; \
             (iii) probes {} {}/3 monotone {}; (iv) gap {gap:.5} <= {allowed:.5} {}",
            stats.mean_tau,
            stats.stderr,
            mark(ok_i),
            mark(ok_ii),
            probes.join(" "),
            monotone_seeds,
            mark(ok_iii),
            mark(ok_iv),
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn random_sym(rng: &mut Pcg64Mcg, dim: usize) -> SymMatrix {
    let mut s = SymMatrix::zeros(dim);
    for i in 0..dim {
        for j in i..dim {
            s.set(i, j, rng.random_range(-2.0..2.0));
        }
    }
    s
}

/// `sup tr(A S)` over `A = R(t) diag(a) R(t)^T` with `a` at the spectrum ends
/// and `t` on a fine grid.
fn brute_force_pucci(s: &SymMatrix, ell: Ellipticity) -> f64 {
    const STEPS: usize = 20_000;
    let mut best = f64::NEG_INFINITY;
    for k in 0..STEPS {
        let t = std::f64::consts::PI * k as f64 / STEPS as f64;
        let (c, sn) = (t.cos(), t.sin());
        let q1 = [c, sn];
        let q2 = [-sn, c];
        for a1 in [ell.lam(), ell.big_lam()] {
            for a2 in [ell.lam(), ell.big_lam()] {
                let v = a1 * s.quadratic_form(&q1) + a2 * s.quadratic_form(&q2);
                best = best.max(v);
            }
        }
    }
    best
}

fn criterion_9() -> Outcome {
    let mut rng = Pcg64Mcg::seed_from_u64(99);
    let mut notes = Vec::new();

    // brute force
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let ell = Ellipticity::new(rng.random_range(0.2..1.0), rng.random_range(1.0..4.0)).unwrap();
        let s = random_sym(&mut rng, 2);
        let exact = pucci_plus(&s, ell).unwrap();
        let brute = brute_force_pucci(&s, ell);
        worst_rel = worst_rel.max((exact - brute).abs() / exact.abs().max(1e-12));
    }
    let ok_brute = worst_rel <= 0.01;
    notes.push(format!("brute force worst rel {worst_rel:.2e} {}", mark(ok_brute)));

    // quadratic single step
    let (ok_quad, quad) = quadratic_consistency(&mut rng)?;
    notes.push(format!("{quad} {}", mark(ok_quad)));

    // invariants
    let mut broken = 0;
    for dim in 1..=4 {
        for _ in 0..50 {
            let ell = Ellipticity::new(rng.random_range(0.2..1.0), rng.random_range(1.0..4.0)).unwrap();
            let s = random_sym(&mut rng, dim);
            let t = random_sym(&mut rng, dim);
            let p = |m: &SymMatrix| pucci_plus(m, ell).unwrap();
            let c: f64 = rng.random_range(0.0..5.0);
            let tol = 1e-9 * (1.0 + s.norm() + t.norm()) * ell.big_lam();
            if (p(&s.scaled(c)) - c * p(&s)).abs() > tol * (1.0 + c) {
                broken += 1;
            }
            if p(&s.add(&t).unwrap()) > p(&s) + p(&t) + tol {
                broken += 1;
            }
            // S + B B^T dominates S
            let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let psd = SymMatrix::from_fn(dim, |i, j| b[i] * b[j]);
            if p(&s.add(&psd).unwrap()) < p(&s) - tol {
                broken += 1;
            }
            let lin = Ellipticity::new(ell.lam(), ell.lam()).unwrap();
            if (pucci_plus(&s, lin).unwrap() - ell.lam() * s.trace()).abs() > tol {
                broken += 1;
            }
            let a = optimal_diffusion(&s, ell).unwrap();
            let attained = pucci_kac::symmat::frobenius(&a, &s).unwrap();
            if (attained - p(&s)).abs() > tol {
                broken += 1;
            }
        }
    }
    let ok_inv = broken == 0;
    notes.push(format!("invariant violations {broken} {}", mark(ok_inv)));

    check(ok_brute && ok_quad && ok_inv, notes.join("; "))
}

/// One update of `u = x^T S x / 2` (with `g = u`, `f = 0`) must move interior
/// nodes by `dt P+(S) / 2` up to `O(dt^2 + h^2)`.
fn quadratic_consistency(rng: &mut Pcg64Mcg) -> Result<(bool, String), String> {
    let h = 0.05;
    let ell = Ellipticity::new(1.0, 2.0).unwrap();
    let domain = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let controls = enumerate_controls(2, ell, 16, 3).unwrap();
    let opts = DppOptions::new(h, 2, ell.big_lam());
    let zero = ScalarField::constant(0.0, 2);
    let mut worst_ratio = 0.0f64;
    for _ in 0..10 {
        let s = random_sym(rng, 2);
        let expr = format!(
            "0.5*({a}*x1*x1 + 2*{b}*x1*x2 + {c}*x2*x2)",
            a = s.get(0, 0),
            b = s.get(0, 1),
            c = s.get(1, 1)
        );
        let u = ScalarField::parse(&expr, 2).map_err(|e| e.to_string())?;
        let mut grid = build_grid(&domain, &u, h).map_err(|e| e.to_string())?;
        grid.set_interior_values(|x| u.at(x));
        let (next, _) = dpp::dpp_update(&grid, &domain, &controls, &zero, &u, &opts)
            .map_err(|e| e.to_string())?;
        let expected = 0.5 * opts.dt * pucci_plus(&s, ell).unwrap();
        let bound = s.norm() * (opts.dt * opts.dt + h * h);
        for &n in grid.interior_nodes() {
            debug_assert_eq!(grid.kind(n), NodeKind::Interior);
            let moved = next.value(n) - grid.value(n);
            worst_ratio = worst_ratio.max((moved - expected).abs() / bound);
        }
    }
    Ok((
        worst_ratio <= 1.0,
        format!("quadratic step error / (|S|(dt^2+h^2)) max {worst_ratio:.3}"),
    ))
}

fn criterion_10() -> Outcome {
    let (spec, cfg) = config(&case(1.0, 2.0, "1", "0"), &grid_solver("dpp_grid", 0.02));
    let mut outputs: Vec<(usize, Vec<u8>)> = Vec::new();
    for threads in [1usize, 2, 8] {
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| e.to_string())?;
            let outcome = pool
                .install(|| bench::run(&spec, &cfg))
                .map_err(|e| e.to_string())?;
            let mut bytes = Vec::new();
            bench::write_values_csv(&mut bytes, spec.dim, &outcome.rows).map_err(|e| e.to_string())?;
            outputs.push((threads, bytes));
        }
    }
    let identical = outputs.iter().all(|(_, b)| *b == outputs[0].1);
    check(
        identical,
        format!(
            "{} runs over 1/2/8 threads, values.csv {} ({} bytes)",
            outputs.len(),
            if identical { "byte-identical" } else { "DIFFERS" },
            outputs[0].1.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    let start = Instant::now();

    let a = case_a();
    suite.record(1, "radial case A", criterion_1(&a));
    suite.record(2, "radial case B", criterion_2());
    suite.record(3, "linear reduction", criterion_3());
    suite.record(4, "oracle equivalence", criterion_4());
    suite.record(5, "subsolution ordering", criterion_5(&a));
    suite.record(6, "restart consistency", criterion_6(&a));
    suite.record(7, "comparison principle", criterion_7());
    suite.record(8, "exit-time suite", criterion_8());
    suite.record(9, "operator suite", criterion_9());
    suite.record(10, "determinism", criterion_10());

    println!(
        "acceptance: {} of 10 passed in {:.1}s",
        10 - suite.failures,
        start.elapsed().as_secs_f64()
    );
    if suite.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
