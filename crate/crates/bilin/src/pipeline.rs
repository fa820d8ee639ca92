//! End-to-end plumbing: experiment configuration, grids, file I/O and the Ćuk reproduction run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::consistency::ConsistencySet;
use crate::error::{Error, Result};
use crate::experiment::{
    check_rank, collect, generate_input, generate_noise, CollectOptions, Dataset, RankCheck,
    RANK_TOL,
};
use crate::matutil::SymMatrix;
use crate::model::{BilinearSystem, Trajectory};
use crate::synthesis::{
    line_search_thm1, line_search_thm3, solve_lemma3, ControllerDesign, GridPoint, Lemma3Result,
    LineSearchResult, Objective, SynthesisOptions,
};
use crate::verify::{
    check_certificate, check_reach_and_stay, lemma2_witness, VerificationReport, DEFAULT_HORIZON_CT,
};

/// Equilibrium input of the Ćuk setpoint.
pub const CUK_UBAR: f64 = 0.527480;
pub const SIGMA_RANGE: (f64, f64) = (1e-8, 1e8);
pub const SIGMA_ITERS: usize = 40;

/// Open-loop data-collection settings.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(rename = "T")]
    pub t: usize,
    /// ΞΞᵀ = noise_bound·I.
    pub noise_bound: f64,
    pub period: f64,
    pub u_range: (f64, f64),
    #[serde(with = "crate::serde_mat::vector")]
    pub x0: DVector<f64>,
}

impl ExperimentConfig {
    /// T = 50, ΞΞᵀ = 1e-4·I, Δ = 0.1, u uniform on [−20, 20], x0 = 1.1·x̄.
    pub fn cuk(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            t: 50,
            noise_bound: 1e-4,
            period: 0.1,
            u_range: (-20.0, 20.0),
            x0: cuk_xbar() * 1.1,
        }
    }
}

/// The state matching ū = 0.527480 exactly; it rounds to (2.23, 58.76, 2.00, 2.00, 30.00).
pub fn cuk_xbar() -> DVector<f64> {
    BilinearSystem::cuk()
        .equilibrium_state(&DVector::from_element(1, CUK_UBAR))
        .expect("Ćuk equilibrium is unique")
}

/// Run the experiment; the input uses `seed`, the noise `seed + 1`.
pub fn run_experiment(
    sys: &BilinearSystem,
    cfg: &ExperimentConfig,
) -> Result<(Dataset, Trajectory, RankCheck)> {
    let n = sys.n();
    let bound = SymMatrix::symmetrize(DMatrix::identity(n, n) * cfg.noise_bound);
    let u = generate_input(sys.m(), cfg.t, cfg.u_range, cfg.seed)?;
    let noise = generate_noise(&bound, cfg.t, cfg.seed.wrapping_add(1));
    let (ds, traj) = collect(
        sys,
        &u,
        &noise,
        &bound,
        &cfg.x0,
        CollectOptions {
            period: cfg.period,
            ..Default::default()
        },
    )?;
    let rank = check_rank(&ds, RANK_TOL);
    Ok((ds, traj, rank))
}

/// `count` points on [lo, hi]; when lo ≤ 0 < hi the grid is (lo, hi] with spacing (hi − lo)/count,
/// since λ = 0 is excluded by the programs.
pub fn lambda_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 || !(hi > 0.0) || lo > hi {
        return Err(Error::BadParam(format!(
            "bad lambda grid {lo}:{hi}:{count}"
        )));
    }
    if lo <= 0.0 {
        let h = (hi - lo) / count as f64;
        return Ok((1..=count).map(|i| lo + h * i as f64).collect());
    }
    Ok(linspace(lo, hi, count))
}

pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

/// Parse "lo:hi:count".
pub fn parse_grid(spec: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::BadParam(format!("grid must be lo:hi:count, got {spec}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo = parts[0].trim().parse().map_err(|_| bad())?;
    let hi = parts[1].trim().parse().map_err(|_| bad())?;
    let count = parts[2].trim().parse().map_err(|_| bad())?;
    Ok((lo, hi, count))
}

/// Parse "a,b,c" into a vector.
pub fn parse_vector(spec: &str) -> Result<DVector<f64>> {
    let v: std::result::Result<Vec<f64>, _> =
        spec.split(',').map(|s| s.trim().parse::<f64>()).collect();
    v.map(DVector::from_vec)
        .map_err(|_| Error::BadParam(format!("not a comma-separated list of numbers: {spec}")))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// The per-grid-point report as CSV (lambda, s, feasible, volume, diameter).
pub fn write_grid_csv(path: &Path, points: &[GridPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "s", "feasible", "volume", "diameter"])?;
    for p in points {
        w.write_record([
            p.lambda.to_string(),
            p.s.to_string(),
            p.feasible.to_string(),
            p.volume.to_string(),
            p.diameter.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, tr: &Trajectory) -> Result<()> {
    tr.write_csv(File::create(path)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignSummary {
    pub feasible_points: usize,
    pub grid_points: usize,
    pub lambda: f64,
    pub s: f64,
    pub volume: f64,
    pub diameter: f64,
    pub certificate_violations: usize,
    pub worst_decrease: f64,
    pub trajectories_converged: usize,
    pub trajectories_total: usize,
    pub max_final_error: f64,
}

impl DesignSummary {
    fn new(
        res: &LineSearchResult,
        d: &ControllerDesign,
        cert: &VerificationReport,
        sim: &VerificationReport,
    ) -> Self {
        DesignSummary {
            feasible_points: res.report.iter().filter(|g| g.feasible).count(),
            grid_points: res.report.len(),
            lambda: d.lambda,
            s: d.s,
            volume: d.volume,
            diameter: d.diameter,
            certificate_violations: cert.violations.len(),
            worst_decrease: cert.worst_decrease,
            trajectories_converged: sim.trajectories_converged,
            trajectories_total: sim.trajectories_total,
            max_final_error: sim.final_errors.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma3Summary {
    pub gamma: f64,
    pub ubar: f64,
    pub sigma: f64,
    pub witness_residual_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproductionSummary {
    pub experiment: ExperimentConfig,
    #[serde(with = "crate::serde_mat::vector")]
    pub xbar: DVector<f64>,
    pub sigma_min_w0: f64,
    pub norm_bound: f64,
    pub thm1: Option<DesignSummary>,
    pub lemma3: Lemma3Summary,
    pub thm3: Option<DesignSummary>,
}

/// Grids, objective and verification sizes of the reproduction.
#[derive(Debug, Clone)]
pub struct ReproductionConfig {
    pub experiment: ExperimentConfig,
    pub lambdas_thm1: Vec<f64>,
    pub lambdas_thm3: Vec<f64>,
    pub ss: Vec<f64>,
    pub eta: f64,
    pub eps: f64,
    pub objective: Objective,
    pub samples: usize,
    pub trials: usize,
    pub horizon: f64,
    pub options: SynthesisOptions,
}

impl ReproductionConfig {
    pub fn cuk(seed: u64) -> Self {
        let (eta, eps) = (0.1, 1e-3);
        ReproductionConfig {
            experiment: ExperimentConfig::cuk(seed),
            lambdas_thm1: lambda_grid(0.0, 5.0, 50).expect("static grid"),
            lambdas_thm3: linspace(0.6, 1.5, 10),
            ss: linspace(-0.05, -eps / eta, 20),
            eta,
            eps,
            objective: Objective::Volume,
            samples: 1000,
            trials: 10,
            horizon: DEFAULT_HORIZON_CT,
            options: SynthesisOptions::default(),
        }
    }
}

/// Everything produced by [`reproduce_cuk`].
#[derive(Debug, Clone)]
pub struct Reproduction {
    pub summary: ReproductionSummary,
    pub dataset: Dataset,
    pub data_trajectory: Trajectory,
    pub cs: ConsistencySet,
    pub thm1: LineSearchResult,
    pub thm1_trajectories: Vec<Trajectory>,
    pub lemma3: Lemma3Result,
    pub thm3: LineSearchResult,
    pub thm3_trajectories: Vec<Trajectory>,
}

/// collect → Theorem 1 (ū known) → Lemma 3 → Theorem 3 → verification of both designs.
pub fn reproduce_cuk(cfg: &ReproductionConfig) -> Result<Reproduction> {
    let sys = BilinearSystem::cuk();
    let xbar = cuk_xbar();
    let ubar = DVector::from_element(1, CUK_UBAR);
    let seed = cfg.experiment.seed;
    let (dataset, data_trajectory, rank) = run_experiment(&sys, &cfg.experiment)?;
    let cs = ConsistencySet::build(&dataset)?;
    log::info!(
        "sigma_min(W0) = {:.3e}, norm bound {:.3e}",
        rank.sigma_min,
        cs.norm_bound()
    );

    let thm1 = line_search_thm1(
        &cs,
        &xbar,
        &ubar,
        &cfg.lambdas_thm1,
        cfg.objective,
        &cfg.options,
    )?;
    let mut thm1_trajectories = Vec::new();
    let thm1_summary = match &thm1.best {
        Some(d) => {
            let cert = check_certificate(&cs, d, cfg.samples, seed.wrapping_add(2))?;
            let (sim, trajs) =
                check_reach_and_stay(&sys, d, cfg.trials, cfg.horizon, seed.wrapping_add(3))?;
            thm1_trajectories = trajs;
            Some(DesignSummary::new(&thm1, d, &cert, &sim))
        }
        None => None,
    };

    let lemma3 = solve_lemma3(&cs, &xbar, SIGMA_RANGE, SIGMA_ITERS)?;
    let witness = lemma2_witness(&cs, &xbar, &lemma3.ubar)?;
    log::info!(
        "lemma 3: gamma = {:.4e}, ubar = {:.6}",
        lemma3.gamma,
        lemma3.ubar[0]
    );

    let thm3 = line_search_thm3(
        &cs,
        &xbar,
        &lemma3,
        cfg.eta,
        cfg.eps,
        &cfg.lambdas_thm3,
        &cfg.ss,
        cfg.objective,
        &cfg.options,
    )?;
    let mut thm3_trajectories = Vec::new();
    let thm3_summary = match &thm3.best {
        Some(d) => {
            let cert = check_certificate(&cs, d, cfg.samples, seed.wrapping_add(4))?;
            let (sim, trajs) =
                check_reach_and_stay(&sys, d, cfg.trials, cfg.horizon, seed.wrapping_add(5))?;
            thm3_trajectories = trajs;
            Some(DesignSummary::new(&thm3, d, &cert, &sim))
        }
        None => None,
    };

    let summary = ReproductionSummary {
        experiment: cfg.experiment.clone(),
        xbar,
        sigma_min_w0: rank.sigma_min,
        norm_bound: cs.norm_bound(),
        thm1: thm1_summary,
        lemma3: Lemma3Summary {
            gamma: lemma3.gamma,
            ubar: lemma3.ubar[0],
            sigma: lemma3.sigma,
            witness_residual_norm: witness.residual.norm(),
        },
        thm3: thm3_summary,
    };
    Ok(Reproduction {
        summary,
        dataset,
        data_trajectory,
        cs,
        thm1,
        thm1_trajectories,
        lemma3,
        thm3,
        thm3_trajectories,
    })
}

/// Write the dataset, designs, figure CSVs and summary of a reproduction into `dir`.
pub fn write_reproduction(dir: &Path, rep: &Reproduction) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("dataset.json"), &rep.dataset)?;
    write_trajectory_csv(&dir.join("fig2_data.csv"), &rep.data_trajectory)?;
    write_grid_csv(&dir.join("fig3_thm1_lambda_search.csv"), &rep.thm1.report)?;
    if let Some(d) = &rep.thm1.best {
        write_json(&dir.join("controller_thm1.json"), d)?;
    }
    if let Some(tr) = rep.thm1_trajectories.first() {
        write_trajectory_csv(&dir.join("fig4_thm1_closed_loop.csv"), tr)?;
    }
    write_json(&dir.join("lemma3.json"), &rep.lemma3)?;
    write_grid_csv(&dir.join("fig5_thm3_grid.csv"), &rep.thm3.report)?;
    if let Some(d) = &rep.thm3.best {
        write_json(&dir.join("controller_thm3.json"), d)?;
    }
    if let Some(tr) = rep.thm3_trajectories.first() {
        write_trajectory_csv(&dir.join("fig6_thm3_closed_loop.csv"), tr)?;
    }
    write_json(&dir.join("summary.json"), &rep.summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_grid_excludes_zero() {
        let g = lambda_grid(0.0, 5.0, 50).unwrap();
        assert_eq!(g.len(), 50);
        assert!((g[0] - 0.1).abs() < 1e-12 && (g[49] - 5.0).abs() < 1e-12);
        assert_eq!(lambda_grid(0.6, 1.5, 10).unwrap(), linspace(0.6, 1.5, 10));
        assert!(lambda_grid(-1.0, -0.5, 3).is_err());
    }

    #[test]
    fn s_grid_ends_at_bound() {
        let g = linspace(-0.05, -0.01, 20);
        assert_eq!(g.len(), 20);
        assert_eq!(g[19], -0.01);
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_grid("0:5:50").unwrap(), (0.0, 5.0, 50));
        assert!(parse_grid("0:5").is_err());
        assert_eq!(
            parse_vector("1, 2.5,3").unwrap(),
            DVector::from_vec(vec![1.0, 2.5, 3.0])
        );
        assert!(parse_vector("1,x").is_err());
    }

    #[test]
    fn cuk_xbar_is_an_equilibrium() {
        let sys = BilinearSystem::cuk();
        let r = sys
            .eval_dynamics(&cuk_xbar(), &DVector::from_element(1, CUK_UBAR))
            .unwrap();
        assert!(r.amax() < 1e-9);
    }
}
