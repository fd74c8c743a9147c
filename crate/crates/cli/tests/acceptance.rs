//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 even when a criterion fails, so that the report is always printed
//! in full; set CLUSTERSIM_ACCEPTANCE_STRICT=1 to turn failures into a
//! nonzero exit.

use std::process::Command;
use std::time::Instant;

use clustersim::allocation::{balance_report, build_pool, write_pool, AllocationSpec};
use clustersim::census::{filter_eligible, synthesize_census, CensusSpec, CensusTable};
use clustersim::dgm::tau2_from_icc;
use clustersim::estimators::Method;
use clustersim::glmfit::{
    beta_gradient, beta_loglik, binomial_loglik, fit_binomial_logistic, fit_glmm_random_intercept, icc_from_tau2,
    squeeze_unit_interval, ModelFrame, Response, DEFAULT_QUADRATURE_NODES,
};
use clustersim::harness::{mcse, run_grid, CellResult, Grid, RunSettings};
use clustersim::nalgebra::{DMatrix, DVector};
use clustersim::rng::substream;
use clustersim::sensitivity::evalue_from_or;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, title: &str, o: &Outcome, secs: f64) -> bool {
    println!("criterion {id}: {} {title} [{secs:.1}s] {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn default_census() -> CensusTable {
    let villages = synthesize_census(&CensusSpec::default()).expect("default census");
    CensusTable::new(&filter_eligible(&villages)).expect("census table")
}

fn cell<'a>(cells: &'a [CellResult], m: Method, n: usize, delta: f64) -> Option<&'a CellResult> {
    cells.iter().find(|c| c.method == m && c.scenario.n_per_arm == n && c.scenario.delta_r == delta)
}

fn rate(cells: &[CellResult], m: Method, n: usize, delta: f64) -> f64 {
    cell(cells, m, n, delta).map(|c| c.rejection_rate).unwrap_or(f64::NAN)
}

fn null_cells(census: &CensusTable) -> Vec<CellResult> {
    let mut grid = Grid::base_case(vec![50, 126], vec![0.0]);
    grid.reps_null = 2000;
    grid.methods = Method::ALL.to_vec();
    let out = run_grid(&grid, census, &RunSettings::default(), None).expect("null grid");
    for f in &out.failures {
        println!("  cell failure: {} {:?}: {}", f.scenario_id, f.method, f.message);
    }
    out.cells
}

fn criterion1(cells: &[CellResult]) -> Outcome {
    let b50 = rate(cells, Method::Beta, 50, 0.0);
    let b126 = rate(cells, Method::Beta, 126, 0.0);
    let q50 = rate(cells, Method::QuasiBinomial, 50, 0.0);
    let i50 = rate(cells, Method::Iptw, 50, 0.0);
    let i126 = rate(cells, Method::Iptw, 126, 0.0);
    let n50 = rate(cells, Method::Naive, 50, 0.0);
    let n126 = rate(cells, Method::Naive, 126, 0.0);
    let beta_ok = (0.030..=0.070).contains(&b50) && (0.030..=0.070).contains(&b126);
    let qb_ok = (0.080..=0.140).contains(&q50);
    let iptw_ok = i50 <= 0.025 && i126 <= 0.025;
    let naive_ok = n126 >= 0.080 && n126 > n50;
    let mark = |b: bool| if b { "ok" } else { "out" };
    Outcome {
        pass: beta_ok && qb_ok && iptw_ok && naive_ok,
        detail: format!(
            "beta {b50:.4}/{b126:.4} {}; quasi-binomial n=50 {q50:.4} {}; IPTW {i50:.4}/{i126:.4} {}; naive {n50:.4} -> {n126:.4} {}",
            mark(beta_ok),
            mark(qb_ok),
            mark(iptw_ok),
            mark(naive_ok)
        ),
    }
}

fn criterion2(census: &CensusTable) -> Outcome {
    let mut grid = Grid::base_case(vec![100, 126], vec![0.375, 0.5]);
    grid.reps_power = 1000;
    grid.methods = vec![Method::Beta];
    let out = run_grid(&grid, census, &RunSettings::default(), None).expect("power grid");
    let p126 = rate(&out.cells, Method::Beta, 126, 0.375);
    let p100 = rate(&out.cells, Method::Beta, 100, 0.5);
    Outcome { pass: p126 >= 0.70 && p100 >= 0.80, detail: format!("power n=126 d=0.375 {p126:.4}; n=100 d=0.5 {p100:.4}") }
}

/// Exhaustive grid search, refined by zooming around the best point.
fn grid_search_mle(y: &[f64], m: &[f64], x: &[f64]) -> (f64, f64) {
    let design = DMatrix::from_fn(y.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let w = vec![1.0; y.len()];
    let ll = |b0: f64, b1: f64| binomial_loglik(y, m, &w, &(&design * DVector::from_vec(vec![b0, b1])));
    let (mut c0, mut c1, mut half) = (0.0, 0.0, 8.0);
    let k = 200;
    while half > 1e-7 {
        let mut best = (f64::NEG_INFINITY, c0, c1);
        for i in 0..=k {
            for j in 0..=k {
                let b0 = c0 - half + 2.0 * half * i as f64 / k as f64;
                let b1 = c1 - half + 2.0 * half * j as f64 / k as f64;
                let v = ll(b0, b1);
                if v > best.0 {
                    best = (v, b0, b1);
                }
            }
        }
        c0 = best.1;
        c1 = best.2;
        half *= 0.05;
    }
    (c0, c1)
}

fn criterion3() -> Outcome {
    let y = [3u32, 5, 2, 9, 6];
    let m = [10u32, 12, 9, 14, 11];
    let x = [-1.2, 0.3, -0.5, 1.4, 0.6];
    let design = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let frame = ModelFrame::new(Response::Counts { successes: y.to_vec(), trials: m.to_vec() }, design, vec!["(Intercept)".into(), "x".into()]).unwrap();
    let fit = fit_binomial_logistic(&frame).unwrap();
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let mf: Vec<f64> = m.iter().map(|&v| v as f64).collect();
    let (g0, g1) = grid_search_mle(&yf, &mf, &x);
    let irls_err = (fit.coefficients[0] - g0).abs().max((fit.coefficients[1] - g1).abs());

    let mut rng = substream(&[3]);
    let n = 30;
    let xb = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.5..1.5) });
    let yb: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
    let w = vec![1.0; n];
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = DVector::from_fn(4, |j, _| if j < 3 { rng.random_range(-1.0..1.0) } else { rng.random_range(0.5..3.5) });
        let g = beta_gradient(&xb, &yb, &w, &p);
        for j in 0..4 {
            let h = 1e-5 * p[j].abs().max(1.0);
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[j] += h;
            lo[j] -= h;
            let fd = (beta_loglik(&xb, &yb, &w, &hi) - beta_loglik(&xb, &yb, &w, &lo)) / (2.0 * h);
            worst = worst.max((g[j] - fd).abs() / g[j].abs().max(1e-8));
        }
    }
    Outcome {
        pass: irls_err <= 1e-4 && worst <= 1e-5,
        detail: format!("IRLS vs grid search max |diff| {irls_err:.2e}; beta gradient max rel err {worst:.2e}"),
    }
}

fn criterion4() -> Outcome {
    let tau2 = 0.9279;
    let mut rng = substream(&[4]);
    let re = Normal::new(0.0, tau2_from_icc(0.22).unwrap().sqrt()).unwrap();
    let b0 = (0.2f64 / 0.8).ln();
    let n = 350;
    let y: Vec<u32> = (0..n)
        .map(|_| {
            let p = 1.0 / (1.0 + (-(b0 + re.sample(&mut rng))).exp());
            Binomial::new(25, p).unwrap().sample(&mut rng) as u32
        })
        .collect();
    let frame = ModelFrame::new(Response::Counts { successes: y, trials: vec![25; n] }, DMatrix::from_element(n, 1, 1.0), vec!["(Intercept)".into()]).unwrap();
    let fit = fit_glmm_random_intercept(&frame, DEFAULT_QUADRATURE_NODES).unwrap();
    let icc = icc_from_tau2(fit.tau2.unwrap_or(0.0)).unwrap();
    let mut round = 0.0f64;
    for i in 0..100 {
        let v = i as f64 / 100.0;
        round = round.max((icc_from_tau2(tau2_from_icc(v).unwrap()).unwrap() - v).abs());
    }
    let target = (tau2_from_icc(0.22).unwrap() - tau2).abs();
    Outcome {
        pass: (0.15..=0.29).contains(&icc) && round <= 1e-12 && target < 1e-4,
        detail: format!("fitted ICC {icc:.4}; round-trip max err {round:.1e}; tau2(0.22) = {:.4}", tau2_from_icc(0.22).unwrap()),
    }
}

fn criterion5() -> Outcome {
    let m = mcse(0.5, 10_000);
    let e4 = evalue_from_or(4.0).unwrap().evalue;
    let mut sym = 0.0f64;
    for or in [0.1, 0.37, 0.8, 1.3, 2.5, 7.0, 42.0] {
        sym = sym.max((evalue_from_or(or).unwrap().evalue - evalue_from_or(1.0 / or).unwrap().evalue).abs());
    }
    let sq = squeeze_unit_interval(&[0.0], 10)[0];
    let arm = [1.0, 4.0, 2.5, 7.0];
    let d = clustersim::allocation::smd(&arm, &arm);
    let ok = (m - 0.005).abs() < 1e-15 && (e4 - (2.0 + 2f64.sqrt())).abs() <= 1e-12 && sym <= 1e-12 && (sq - 0.05).abs() < 1e-15 && d == 0.0;
    Outcome { pass: ok, detail: format!("mcse {m}; E(4) {e4:.12}; symmetry {sym:.1e}; squeeze {sq}; smd {d}") }
}

fn criterion6(census: &CensusTable) -> Outcome {
    let mut spec = AllocationSpec::new(50);
    spec.max_draws = 100_000;
    let t = Instant::now();
    let pool = build_pool(census, &spec, 11).expect("pool");
    let secs = t.elapsed().as_secs_f64();
    let all_ok = pool.accepted.iter().all(|a| {
        let b = balance_report(census, &a.control_ids, &a.intervention_ids, &spec).unwrap();
        b.smds().iter().all(|s| s.abs() <= 0.2) && b == a.balance
    });
    let bytes = |p: &clustersim::allocation::AllocationPool| {
        let mut v = Vec::new();
        write_pool(p, &mut v).unwrap();
        v
    };
    let again = build_pool(census, &spec, 11).expect("pool");
    let same = bytes(&pool) == bytes(&again);
    Outcome {
        pass: all_ok && secs <= 60.0 && same && !pool.accepted.is_empty(),
        detail: format!("{} of {} draws accepted; re-verified {all_ok}; build {secs:.1}s; identical rebuild {same}", pool.accepted.len(), pool.draws_attempted),
    }
}

fn criterion7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |w: &str| {
        let out = dir.path().join(format!("w{w}"));
        let status = Command::new(env!("CARGO_BIN_EXE_clustersim"))
            .args(["simulate", "--scenario", "smoke", "--workers", w, "--out"])
            .arg(&out)
            .output()
            .expect("run clustersim");
        (status.status.success(), std::fs::read(out.join("results.csv")).unwrap_or_default())
    };
    let (ok1, r1) = run("1");
    let (ok8, r8) = run("8");
    Outcome {
        pass: ok1 && ok8 && !r1.is_empty() && r1 == r8,
        detail: format!("exit ok {ok1}/{ok8}; results {} bytes; identical {}", r1.len(), r1 == r8),
    }
}

fn criterion8(cells: &[CellResult]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [50, 126] {
        match cell(cells, Method::Beta, n, 0.0) {
            Some(c) => {
                let ok = (c.rejection_rate - 0.05).abs() <= 4.0 * c.mcse;
                pass &= ok;
                parts.push(format!("n={n}: |{:.4} - 0.05| vs 4*MCSE {:.4}", c.rejection_rate, 4.0 * c.mcse));
            }
            None => {
                pass = false;
                parts.push(format!("n={n}: missing cell"));
            }
        }
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn timed<F: FnOnce() -> Outcome>(f: F) -> (Outcome, f64) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed().as_secs_f64())
}

fn main() {
    // libtest passes flags such as --nocapture; none apply here.
    let census = default_census();
    let mut results = Vec::new();

    let t = Instant::now();
    let cells = null_cells(&census);
    let null_secs = t.elapsed().as_secs_f64();
    results.push(report(1, "base-case Type I error ordering and bands", &criterion1(&cells), null_secs));
    let (o, s) = timed(|| criterion2(&census));
    results.push(report(2, "base-case power", &o, s));
    let (o, s) = timed(criterion3);
    results.push(report(3, "numerical core oracles", &o, s));
    let (o, s) = timed(criterion4);
    results.push(report(4, "GLMM ICC recovery", &o, s));
    let (o, s) = timed(criterion5);
    results.push(report(5, "closed-form values", &o, s));
    let (o, s) = timed(|| criterion6(&census));
    results.push(report(6, "allocation pool soundness", &o, s));
    let (o, s) = timed(criterion7);
    results.push(report(7, "worker-count determinism", &o, s));
    results.push(report(8, "null calibration of beta regression", &criterion8(&cells), 0.0));

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("CLUSTERSIM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
