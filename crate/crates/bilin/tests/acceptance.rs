//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 4 and 6 are known to fail on the Ćuk data (see README, "Known limitations"); they are
//! still evaluated in full and reported as FAIL. The process exits nonzero when any other
//! criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bilin::consistency::{random_upsilon_with, ConsistencySet};
use bilin::experiment::{collect, generate_input, generate_noise, CollectOptions, Dataset};
use bilin::matutil::{spectral_norm, SymMatrix};
use bilin::model::{mu_matrix, nu_bar, BilinearSystem, Domain};
use bilin::pipeline::{
    cuk_xbar, lambda_grid, linspace, run_experiment, ExperimentConfig, CUK_UBAR, SIGMA_ITERS,
    SIGMA_RANGE,
};
use bilin::synthesis::{
    line_search_known, line_search_thm1, line_search_thm3, solve_lemma3, ControllerDesign,
    LineSearchResult, Objective, ProgramId, SynthesisOptions,
};
use bilin::verify::{
    check_certificate, check_reach_and_stay, lemma2_witness, recheck_design, RECHECK_TOL,
};

const KNOWN_FAILURES: [usize; 2] = [4, 6];
const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Accepted SDP solutions collected by criteria 4–6 for criterion 9.
#[derive(Default)]
struct Accepted {
    grid_residuals: Vec<f64>,
    designs: Vec<(ConsistencySet, ControllerDesign)>,
}

impl Accepted {
    fn add(&mut self, cs: &ConsistencySet, res: &LineSearchResult) {
        self.grid_residuals.extend(
            res.report
                .iter()
                .filter(|g| g.feasible)
                .map(|g| g.max_residual),
        );
        if let Some(d) = &res.best {
            self.designs.push((cs.clone(), d.clone()));
        }
    }
}

fn cuk_dataset(seed: u64) -> Dataset {
    run_experiment(&BilinearSystem::cuk(), &ExperimentConfig::cuk(seed))
        .expect("experiment")
        .0
}

fn true_z(sys: &BilinearSystem) -> DMatrix<f64> {
    sys.stacked().transpose()
}

fn criterion1() -> Outcome {
    let sys = BilinearSystem::cuk();
    let z = true_z(&sys);
    let (mut member, mut rejected) = (0, 0);
    for seed in 0..20u64 {
        let cfg = ExperimentConfig::cuk(100 + seed);
        let ds = run_experiment(&sys, &cfg).expect("experiment").0;
        let cs = ConsistencySet::build(&ds).expect("consistency set");
        member += cs.membership(&z).unwrap() as usize;
        // same noise realization as run_experiment, added nine more times to X1
        let e0 = generate_noise(&ds.noise_bound, cfg.t, cfg.seed.wrapping_add(1)).e0;
        let bad = Dataset::from_parts(
            &ds.x1 + e0 * 9.0,
            ds.x0.clone(),
            ds.u0.clone(),
            ds.noise_bound.clone(),
        )
        .unwrap();
        rejected += match ConsistencySet::build(&bad) {
            Ok(cs) => !cs.membership(&z).unwrap(),
            Err(_) => true,
        } as usize;
    }
    outcome(
        member == 20 && rejected == 20,
        format!(
            "true parameters in C for {member}/20 datasets, rejected after E0 x10 in {rejected}/20"
        ),
    )
}

fn criterion2() -> Outcome {
    let (mut agree, mut total, mut inside_ok, mut inside, mut norm_ok) = (0, 0, 0, 0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20u64 {
        let cs = ConsistencySet::build(&cuk_dataset(200 + seed)).expect("consistency set");
        let zbar = cs.norm_bound();
        for _ in 0..500 {
            let rho = 2.0 * rng.gen::<f64>();
            let g = DMatrix::from_fn(cs.rows(), cs.n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ups = &g * (rho / spectral_norm(&g));
            let z = &cs.zeta + cs.asqrt_inv.as_matrix() * &ups * cs.qsqrt.as_matrix();
            let f2 = cs.membership(&z).unwrap();
            let f1 = cs.membership_form1(&z).unwrap();
            total += 1;
            agree += (f1 == f2) as usize;
            if rho <= 1.0 {
                inside += 1;
                inside_ok += f2 as usize;
                norm_ok += (spectral_norm(&z) <= zbar) as usize;
            }
        }
    }
    outcome(
        agree == total && inside_ok == inside && norm_ok == inside,
        format!("form 1/2 agree {agree}/{total}; |U|<=1 members {inside_ok}/{inside}; norms within bound {norm_ok}/{inside}"),
    )
}

fn criterion3() -> Outcome {
    let sys = BilinearSystem::cuk();
    let mut cfg = ExperimentConfig::cuk(SEED);
    cfg.noise_bound = 0.0;
    let ds = run_experiment(&sys, &cfg).expect("experiment").0;
    let cs = ConsistencySet::build(&ds).expect("consistency set");
    let err = (cs.zeta.transpose() - sys.stacked()).norm();
    outcome(
        err <= 1e-8 && cs.q_is_zero(),
        format!(
            "|zeta^T - [A B C d]|_F = {err:.3e}, Q = 0: {}",
            cs.q_is_zero()
        ),
    )
}

fn criterion4(acc: &mut Accepted) -> Outcome {
    let sys = BilinearSystem::cuk();
    let cs = ConsistencySet::build(&cuk_dataset(SEED)).expect("consistency set");
    let xbar = cuk_xbar();
    let ubar = DVector::from_element(1, CUK_UBAR);
    let lambdas = lambda_grid(0.0, 5.0, 50).unwrap();
    let res = line_search_thm1(
        &cs,
        &xbar,
        &ubar,
        &lambdas,
        Objective::Volume,
        &SynthesisOptions::default(),
    )
    .unwrap();
    acc.add(&cs, &res);
    let feasible: Vec<f64> = res
        .report
        .iter()
        .filter(|g| g.feasible)
        .map(|g| g.lambda)
        .collect();
    let Some(d) = &res.best else {
        return outcome(false, "no feasible lambda on 50@(0,5]".into());
    };
    let cert = check_certificate(&cs, d, 1000, SEED).unwrap();
    let (sim, _) = check_reach_and_stay(&sys, d, 10, 50.0, SEED).unwrap();
    let jac = sys.field_jacobian(&xbar, &ubar, Some(&d.k));
    let slowest = jac
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_err = sim.final_errors.iter().cloned().fold(0.0, f64::max);
    outcome(
        !feasible.is_empty() && cert.certificate_ok() && sim.trajectories_ok(),
        format!(
            "feasible lambdas {}/50 (selected {:.2}); certificate violations {}/1000; within {:.3} of xbar at t=50: {}/10 \
             (max error {:.3}, slowest closed-loop eigenvalue {:.5}, left B_P {})",
            feasible.len(),
            d.lambda,
            cert.violations.len(),
            sim.conv_tol,
            sim.trajectories_converged,
            max_err,
            slowest,
            sim.trajectories_left_basin
        ),
    )
}

fn criterion5() -> Outcome {
    let cs = ConsistencySet::build(&cuk_dataset(SEED)).expect("consistency set");
    let xbar = cuk_xbar();
    let l3 = solve_lemma3(&cs, &xbar, SIGMA_RANGE, SIGMA_ITERS).unwrap();
    let nu = nu_bar(&l3.ubar, &xbar);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..500 {
        let ups = random_upsilon_with(&mut rng, cs.upsilon_dims(), i % 4 == 0);
        let z = cs.sample(&ups).unwrap();
        worst = worst.max((z.transpose() * &nu).norm_squared());
    }
    let du = (l3.ubar[0] - 0.52748).abs();
    outcome(
        l3.gamma <= 1e-3 && du <= 1e-2 && worst <= l3.gamma * (1.0 + 1e-6),
        format!(
            "gamma = {:.4e}, ubar = {:.6}, max sampled |Z^T nu|^2 = {:.4e}",
            l3.gamma, l3.ubar[0], worst
        ),
    )
}

fn thm3_run(
    cs: &ConsistencySet,
    lambdas: &[f64],
    ss: &[f64],
) -> (bilin::synthesis::Lemma3Result, LineSearchResult) {
    let xbar = cuk_xbar();
    let l3 = solve_lemma3(cs, &xbar, SIGMA_RANGE, SIGMA_ITERS).unwrap();
    let res = line_search_thm3(
        cs,
        &xbar,
        &l3,
        0.1,
        1e-3,
        lambdas,
        ss,
        Objective::Volume,
        &SynthesisOptions::default(),
    )
    .unwrap();
    (l3, res)
}

fn thm3_checks(cs: &ConsistencySet, d: &ControllerDesign) -> (usize, usize, usize) {
    let cert = check_certificate(cs, d, 1000, SEED).unwrap();
    let (sim, _) = check_reach_and_stay(&BilinearSystem::cuk(), d, 10, 50.0, SEED).unwrap();
    (
        cert.violations.len(),
        sim.trajectories_converged,
        sim.trajectories_left_basin,
    )
}

fn criterion6(acc: &mut Accepted) -> Outcome {
    let cs = ConsistencySet::build(&cuk_dataset(SEED)).expect("consistency set");
    let lambdas = linspace(0.6, 1.5, 10);
    let ss = linspace(-0.05, -1e-3 / 0.1, 20);
    let (l3, res) = thm3_run(&cs, &lambdas, &ss);
    acc.add(&cs, &res);
    let nf = res.report.iter().filter(|g| g.feasible).count();
    let mut detail = format!(
        "T=50: gamma = {:.3e}, feasible (lambda, s) {nf}/200",
        l3.gamma
    );
    let mut pass = false;
    if let Some(d) = &res.best {
        let (viol, reached, _) = thm3_checks(&cs, d);
        pass = viol == 0 && reached == 10;
        detail += &format!("; certificate violations {viol}/1000; reach-and-stay {reached}/10");
    }
    // same experiment with T = 200 samples, lambda = 1 only
    let mut cfg = ExperimentConfig::cuk(SEED);
    cfg.t = 200;
    let cs200 =
        ConsistencySet::build(&run_experiment(&BilinearSystem::cuk(), &cfg).unwrap().0).unwrap();
    let (l3b, res200) = thm3_run(&cs200, &[1.0], &ss);
    acc.add(&cs200, &res200);
    let nf200 = res200.report.iter().filter(|g| g.feasible).count();
    detail += &format!(
        " | T=200 diagnostic: gamma = {:.3e}, feasible at lambda=1 {nf200}/20",
        l3b.gamma
    );
    if let Some(d) = &res200.best {
        let (viol, reached, left) = thm3_checks(&cs200, d);
        detail += &format!(", s = {:.4}, certificate violations {viol}/1000, reach-and-stay {reached}/10, left B_P {left}", d.s);
    }
    outcome(pass, detail)
}

fn criterion7() -> Outcome {
    let cs = ConsistencySet::build(&cuk_dataset(SEED)).expect("consistency set");
    let xbar = cuk_xbar();
    let l3 = solve_lemma3(&cs, &xbar, SIGMA_RANGE, SIGMA_ITERS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut candidates = vec![l3.ubar.clone()];
    candidates.extend((0..10).map(|_| DVector::from_element(1, rng.gen_range(-1.0..2.0))));
    let thr = 1e-12 * cs.zeta.norm();
    let mut ok = 0;
    let mut min_res = f64::INFINITY;
    for u in &candidates {
        let w = lemma2_witness(&cs, &xbar, u).unwrap();
        let r = w.residual.norm();
        min_res = min_res.min(r);
        ok += (r > thr && cs.membership(&w.z).unwrap()) as usize;
    }
    outcome(
        ok == candidates.len(),
        format!(
            "nonzero residual with member Z for {ok}/{} ubar values (min |residual| {min_res:.3e})",
            candidates.len()
        ),
    )
}

fn scalar_sys(a: f64, b: f64, c: f64, d: f64, domain: Domain) -> BilinearSystem {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    BilinearSystem::new(m(a), m(b), m(c), DVector::from_element(1, d), domain).unwrap()
}

fn scalar_data(sys: &BilinearSystem, bound: f64, x0: f64, seed: u64) -> ConsistencySet {
    let b = SymMatrix::from_diagonal(&[bound]);
    let t = 20;
    let u = generate_input(1, t, (-1.0, 1.0), seed).unwrap();
    let nz = generate_noise(&b, t, seed + 1);
    let (ds, _) = collect(
        sys,
        &u,
        &nz,
        &b,
        &DVector::from_element(1, x0),
        CollectOptions::default(),
    )
    .unwrap();
    ConsistencySet::build(&ds).unwrap()
}

/// Dense check of the robust annulus decrease for a scalar Theorem-3 design:
/// 2 x̃ P⁻¹ (Zᵀ μ(K, ỹ) x̃ + ξ̄) ≤ −ε for Z ∈ 𝒞, ỹ ∈ B_P, x̃ in the annulus, |ξ̄| ≤ √γ.
fn dense_attractivity(cs: &ConsistencySet, d: &ControllerDesign) -> (bool, f64) {
    let p = d.p.as_matrix()[(0, 0)];
    let r = p.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..300 {
        let z = cs
            .sample(&random_upsilon_with(
                &mut rng,
                cs.upsilon_dims(),
                i % 2 == 0,
            ))
            .unwrap();
        for yi in 0..=20 {
            let y = DVector::from_element(1, -r + 2.0 * r * yi as f64 / 20.0);
            for xi in 0..=20 {
                let mag = (d.eta * p).sqrt() + (r - (d.eta * p).sqrt()) * xi as f64 / 20.0;
                for sign in [-1.0, 1.0] {
                    let x = DVector::from_element(1, sign * mag);
                    let f = (z.transpose() * mu_matrix(&d.k, &d.xbar, &d.ubar, &y) * &x)[0];
                    for xi_bar in [-d.gamma.sqrt(), d.gamma.sqrt()] {
                        worst = worst.max(2.0 * x[0] / p * (f + xi_bar));
                    }
                }
            }
        }
    }
    (worst <= -d.eps * (1.0 - 1e-6), worst)
}

fn criterion8() -> Outcome {
    let opts = SynthesisOptions::default();
    let zero = DVector::zeros(1);
    let lambdas = lambda_grid(0.0, 5.0, 10).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;

    let ct = scalar_sys(1.0, 1.0, 0.1, 0.0, Domain::ContinuousTime);
    let cs = scalar_data(&ct, 0.0, 0.5, 1);
    let r = line_search_known(
        &cs,
        &zero,
        &zero,
        &lambdas,
        Objective::Volume,
        ProgramId::Thm1CT,
        &opts,
    )
    .unwrap();
    match &r.best {
        Some(d) => {
            let cl = 1.0 + d.k[(0, 0)];
            pass &= cl < 0.0;
            notes.push(format!("CT a+bK = {cl:.4}"));
        }
        None => {
            pass = false;
            notes.push("CT infeasible".into());
        }
    }

    for (a, b, c) in [(0.5, 0.0, 0.0), (1.2, 1.0, 0.1)] {
        let dt = scalar_sys(a, b, c, 0.0, Domain::DiscreteTime);
        let cs = scalar_data(&dt, 0.0, 0.5, 2);
        let r = line_search_known(
            &cs,
            &zero,
            &zero,
            &lambdas,
            Objective::Volume,
            ProgramId::Thm2DT,
            &opts,
        )
        .unwrap();
        match &r.best {
            Some(d) => {
                let cl = a + b * d.k[(0, 0)];
                pass &= cl.abs() < 1.0;
                notes.push(format!("DT a={a}: |a+bK| = {:.4}", cl.abs()));
            }
            None => {
                pass = false;
                notes.push(format!("DT a={a} infeasible"));
            }
        }
    }

    // Theorem 3 on ẋ = −x + u + 0.5ux + 2 around x̄ = 1, with a small noise bound so that Q ≠ 0
    let sys = scalar_sys(-1.0, 1.0, 0.5, 2.0, Domain::ContinuousTime);
    let cs = scalar_data(&sys, 1e-6, 1.1, 3);
    let xbar = DVector::from_element(1, 1.0);
    let l3 = solve_lemma3(&cs, &xbar, SIGMA_RANGE, SIGMA_ITERS).unwrap();
    let ss = linspace(-2.0, -1e-3 / 0.1, 10);
    let r = line_search_thm3(
        &cs,
        &xbar,
        &l3,
        0.1,
        1e-3,
        &[0.5, 1.0, 2.0],
        &ss,
        Objective::Volume,
        &opts,
    )
    .unwrap();
    match &r.best {
        Some(d) => {
            let (ok, worst) = dense_attractivity(&cs, d);
            pass &= ok;
            notes.push(format!(
                "Thm3 feasible, dense worst rate {worst:.3e} vs -eps"
            ));
        }
        None => notes.push("Thm3 infeasible (soundness holds vacuously)".into()),
    }
    outcome(pass, notes.join("; "))
}

fn criterion9(acc: &Accepted) -> Outcome {
    let worst_grid = acc
        .grid_residuals
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let grid_ok = acc.grid_residuals.iter().all(|&r| r <= RECHECK_TOL);
    let mut design_ok = 0;
    let mut worst_design = f64::NEG_INFINITY;
    for (cs, d) in &acc.designs {
        let (ok, w) = recheck_design(cs, d, &SynthesisOptions::default()).unwrap();
        design_ok += ok as usize;
        worst_design = worst_design.max(w);
    }
    outcome(
        grid_ok && design_ok == acc.designs.len() && !acc.grid_residuals.is_empty(),
        format!(
            "{} accepted solutions, worst normalized lambda_max {worst_grid:.2e}; {design_ok}/{} selected designs re-substituted from (K, P), worst {worst_design:.2e}",
            acc.grid_residuals.len(),
            acc.designs.len()
        ),
    )
}

fn main() {
    let mut acc = Accepted::default();
    let mut unexpected = Vec::new();
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{tag}] {name}: {} ({:.1} s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass && !KNOWN_FAILURES.contains(&id) {
            unexpected.push(id);
        }
    };
    report(1, "membership vs noise bound", &mut criterion1);
    report(2, "set-form equivalence", &mut criterion2);
    report(3, "noise-free identification", &mut criterion3);
    report(4, "Theorem 1 on Cuk", &mut || criterion4(&mut acc));
    report(5, "Lemma 3 on Cuk", &mut criterion5);
    report(6, "Theorem 3 on Cuk", &mut || criterion6(&mut acc));
    report(7, "Lemma 2 witness", &mut criterion7);
    report(8, "scalar oracles", &mut criterion8);
    report(9, "certificate re-verification", &mut || criterion9(&acc));
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
