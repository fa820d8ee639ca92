use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use bilin::consistency::ConsistencySet;
use bilin::experiment::{
    check_rank, collect, generate_input, generate_noise, CollectOptions, Dataset, RANK_TOL,
};
use bilin::matutil::SymMatrix;
use bilin::model::{BilinearSystem, Domain};
use bilin::pipeline::{
    cuk_xbar, lambda_grid, linspace, parse_grid, parse_vector, read_json, reproduce_cuk,
    write_grid_csv, write_json, write_reproduction, write_trajectory_csv, ReproductionConfig,
    CUK_UBAR, SIGMA_ITERS, SIGMA_RANGE,
};
use bilin::synthesis::{
    line_search_known, line_search_thm3, solve_lemma3, ControllerDesign, Objective, ProgramId,
    SynthesisOptions,
};
use bilin::verify::{
    check_certificate, check_reach_and_stay, DEFAULT_HORIZON_CT, DEFAULT_HORIZON_DT,
};
use bilin::Error;

const EXIT_DATA: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_VIOLATION: u8 = 5;

#[derive(Parser)]
#[command(
    name = "bilin",
    version,
    about = "Data-driven setpoint control of bilinear systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an open-loop experiment and write the dataset.
    Collect(CollectArgs),
    /// Design a controller from a dataset.
    Synthesize(SynthArgs),
    /// Check a controller by sampling and closed-loop simulation.
    Verify(VerifyArgs),
    /// Collect, synthesize both designs and verify them on the Ćuk converter.
    ReproduceCuk(ReproduceArgs),
}

#[derive(Args, Clone)]
struct PlantArgs {
    /// Built-in plant.
    #[arg(long, value_parser = ["cuk"])]
    preset: Option<String>,
    /// Plant JSON file (overrides --preset).
    #[arg(long)]
    model: Option<PathBuf>,
}

impl PlantArgs {
    fn load(&self) -> Result<Option<BilinearSystem>, Error> {
        if let Some(p) = &self.model {
            return read_json(p).map(Some);
        }
        Ok(self.preset.as_deref().and_then(BilinearSystem::preset))
    }

    fn is_cuk(&self) -> bool {
        self.model.is_none() && self.preset.as_deref() == Some("cuk")
    }
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    plant: PlantArgs,
    #[arg(long = "T", default_value_t = 50)]
    t: usize,
    /// Scalar s for ΞΞᵀ = s·I, or a JSON file holding the matrix as rows.
    #[arg(long, default_value = "1e-4")]
    noise_bound: String,
    /// Sampling period (continuous time).
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Input range lo:hi; defaults to -20:20 for the Ćuk preset and 0:1 otherwise.
    #[arg(long, allow_hyphen_values = true)]
    u_range: Option<String>,
    /// Initial state; defaults to 1.1·x̄.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    xbar: Option<String>,
    #[arg(long, env = "BILIN_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    KnownUbarCt,
    KnownUbarDt,
    UnknownUbarCt,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "known-ubar-ct")]
    mode: Mode,
    /// Supplies the Ćuk x̄ and ū when they are not given.
    #[command(flatten)]
    plant: PlantArgs,
    #[arg(long, allow_hyphen_values = true)]
    xbar: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    ubar: Option<String>,
    /// lo:hi:count; a grid starting at 0 skips λ = 0.
    #[arg(long, allow_hyphen_values = true)]
    lambda_grid: Option<String>,
    /// lo:hi:count; defaults to -0.05:-eps/eta:20.
    #[arg(long, allow_hyphen_values = true)]
    s_grid: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value = "volume")]
    objective: Objective,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    controller: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Plant used for simulation; without it only the sampled certificate is checked.
    #[command(flatten)]
    plant: PlantArgs,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, env = "BILIN_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, env = "BILIN_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    noise_bound: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    u_range: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lambda_grid: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    s_grid: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Failure carrying its exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::RankDeficient(_)
            | Error::InconsistentNoise(_)
            | Error::QZero
            | Error::DimMismatch(_)
            | Error::NotPsd(_) => EXIT_DATA,
            Error::AllInfeasible => EXIT_INFEASIBLE,
            Error::Io(_) | Error::Parse(_) => EXIT_IO,
            _ => 1,
        };
        Fail(code, e.to_string())
    }
}

type CmdResult = Result<(), Fail>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Collect(a) => cmd_collect(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Verify(a) => cmd_verify(a),
        Command::ReproduceCuk(a) => cmd_reproduce(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), Error> {
    let v = parse_vector(&s.replace(':', ","))?;
    if v.len() != 2 {
        return Err(Error::BadParam(format!("range must be lo:hi, got {s}")));
    }
    Ok((v[0], v[1]))
}

fn noise_bound(spec: &str, n: usize) -> Result<SymMatrix, Error> {
    if let Ok(s) = spec.parse::<f64>() {
        return Ok(SymMatrix::symmetrize(DMatrix::identity(n, n) * s));
    }
    let rows: Vec<Vec<f64>> = read_json(Path::new(spec))?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimMismatch(format!("noise bound must be {n}x{n}")));
    }
    SymMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]), 1e-9)
}

fn ensure_dir(p: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn cmd_collect(a: CollectArgs) -> CmdResult {
    let sys = a
        .plant
        .load()?
        .or_else(|| a.plant.model.is_none().then(BilinearSystem::cuk))
        .expect("plant");
    let is_cuk = a.plant.model.is_none();
    let n = sys.n();
    let xbar = match &a.xbar {
        Some(s) => Some(parse_vector(s)?),
        None if is_cuk => Some(cuk_xbar()),
        None => None,
    };
    let x0 = match (&a.x0, &xbar) {
        (Some(s), _) => parse_vector(s)?,
        (None, Some(xb)) => xb * 1.1,
        (None, None) => DVector::zeros(n),
    };
    let range = match &a.u_range {
        Some(s) => parse_range(s)?,
        None if is_cuk => (-20.0, 20.0),
        None => (0.0, 1.0),
    };
    let bound = noise_bound(&a.noise_bound, n)?;
    let u = generate_input(sys.m(), a.t, range, a.seed)?;
    let noise = generate_noise(&bound, a.t, a.seed.wrapping_add(1));
    let (ds, traj) = collect(
        &sys,
        &u,
        &noise,
        &bound,
        &x0,
        CollectOptions {
            period: a.dt,
            ..Default::default()
        },
    )?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("dataset.json"), &ds)?;
    write_trajectory_csv(&a.out.join("collect_trajectory.csv"), &traj)?;
    let rank = check_rank(&ds, RANK_TOL);
    println!(
        "sigma_min(W0) = {:.6e}, sigma_max(W0) = {:.6e}",
        rank.sigma_min, rank.sigma_max
    );
    if !rank.full_row_rank {
        println!("rank: deficient");
        return Err(Fail(
            EXIT_DATA,
            "W0 does not have full row rank; collect more samples".into(),
        ));
    }
    println!("rank: full row rank");
    Ok(())
}

fn grid_from(
    spec: &Option<String>,
    default: (f64, f64, usize),
    lambda: bool,
) -> Result<Vec<f64>, Error> {
    let (lo, hi, count) = match spec {
        Some(s) => parse_grid(s)?,
        None => default,
    };
    if lambda {
        lambda_grid(lo, hi, count)
    } else {
        Ok(linspace(lo, hi, count))
    }
}

fn cmd_synthesize(a: SynthArgs) -> CmdResult {
    let ds: Dataset = read_json(&a.dataset)?;
    ds.validate()?;
    let cs = ConsistencySet::build(&ds)?;
    let xbar = match &a.xbar {
        Some(s) => parse_vector(s)?,
        None if a.plant.is_cuk() => cuk_xbar(),
        None => return Err(Fail(1, "--xbar is required without --preset cuk".into())),
    };
    let opts = SynthesisOptions::default();
    ensure_dir(&a.out)?;
    let res = match a.mode {
        Mode::KnownUbarCt | Mode::KnownUbarDt => {
            let ubar = match &a.ubar {
                Some(s) => parse_vector(s)?,
                None if a.plant.is_cuk() => DVector::from_element(1, CUK_UBAR),
                None => return Err(Fail(1, "--ubar is required in known-ubar modes".into())),
            };
            let lambdas = grid_from(&a.lambda_grid, (0.0, 5.0, 50), true)?;
            let program = if matches!(a.mode, Mode::KnownUbarCt) {
                ProgramId::Thm1CT
            } else {
                ProgramId::Thm2DT
            };
            line_search_known(&cs, &xbar, &ubar, &lambdas, a.objective, program, &opts)?
        }
        Mode::UnknownUbarCt => {
            let l3 = solve_lemma3(&cs, &xbar, SIGMA_RANGE, SIGMA_ITERS)?;
            println!("gamma = {:.6e}", l3.gamma);
            println!("ubar = {}", fmt_vec(&l3.ubar));
            write_json(&a.out.join("lemma3.json"), &l3)?;
            let lambdas = grid_from(&a.lambda_grid, (0.6, 1.5, 10), true)?;
            let ss = grid_from(&a.s_grid, (-0.05, -a.eps / a.eta, 20), false)?;
            line_search_thm3(
                &cs,
                &xbar,
                &l3,
                a.eta,
                a.eps,
                &lambdas,
                &ss,
                a.objective,
                &opts,
            )?
        }
    };
    write_grid_csv(&a.out.join("grid.csv"), &res.report)?;
    let feasible = res.report.iter().filter(|g| g.feasible).count();
    println!("feasible grid points: {feasible}/{}", res.report.len());
    let Some(d) = res.best else {
        return Err(Error::AllInfeasible.into());
    };
    write_json(&a.out.join("controller.json"), &d)?;
    println!("selected lambda = {}, s = {}", d.lambda, d.s);
    println!("K = {}", fmt_vec(&d.k.transpose().column(0).into_owned()));
    println!("volume = {:.6e}, diameter = {:.6e}", d.volume, d.diameter);
    Ok(())
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter()
        .map(|x| format!("{x:.6}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let d: ControllerDesign = read_json(&a.controller)?;
    let ds: Dataset = read_json(&a.dataset)?;
    ds.validate()?;
    let cs = ConsistencySet::build(&ds)?;
    let mut report = check_certificate(&cs, &d, a.samples, a.seed)?;
    ensure_dir(&a.out)?;
    if let Some(sys) = a.plant.load()? {
        let horizon = a.horizon.unwrap_or(if sys.domain == Domain::DiscreteTime {
            DEFAULT_HORIZON_DT
        } else {
            DEFAULT_HORIZON_CT
        });
        let (sim, trajs) =
            check_reach_and_stay(&sys, &d, a.trials, horizon, a.seed.wrapping_add(1))?;
        for (i, tr) in trajs.iter().enumerate() {
            write_trajectory_csv(&a.out.join(format!("verify_trajectory_{i}.csv")), tr)?;
        }
        report.trajectories_converged = sim.trajectories_converged;
        report.trajectories_total = sim.trajectories_total;
        report.trajectories_left_basin = sim.trajectories_left_basin;
        report.final_errors = sim.final_errors;
        report.conv_tol = sim.conv_tol;
    }
    write_json(&a.out.join("verification.json"), &report)?;
    println!(
        "certificate: {} violations over {} samples, worst rate {:.6e}",
        report.violations.len(),
        a.samples,
        report.worst_decrease
    );
    println!("({})", report.scope);
    if report.trajectories_total > 0 {
        println!(
            "trajectories: {}/{} reached the target, {} left B_P",
            report.trajectories_converged,
            report.trajectories_total,
            report.trajectories_left_basin
        );
    }
    if !report.no_violations() {
        return Err(Fail(EXIT_VIOLATION, "verification found violations".into()));
    }
    Ok(())
}

fn cmd_reproduce(a: ReproduceArgs) -> CmdResult {
    let mut cfg = ReproductionConfig::cuk(a.seed);
    if let Some(t) = a.t {
        cfg.experiment.t = t;
    }
    if let Some(b) = a.noise_bound {
        cfg.experiment.noise_bound = b;
    }
    if let Some(dt) = a.dt {
        cfg.experiment.period = dt;
    }
    if let Some(r) = &a.u_range {
        cfg.experiment.u_range = parse_range(r)?;
    }
    if let Some(e) = a.eta {
        cfg.eta = e;
    }
    if let Some(e) = a.eps {
        cfg.eps = e;
    }
    if a.lambda_grid.is_some() {
        cfg.lambdas_thm1 = grid_from(&a.lambda_grid, (0.0, 5.0, 50), true)?;
    }
    cfg.ss = grid_from(&a.s_grid, (-0.05, -cfg.eps / cfg.eta, 20), false)?;
    if let Some(o) = a.objective {
        cfg.objective = o;
    }
    if let Some(s) = a.samples {
        cfg.samples = s;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    let rep = reproduce_cuk(&cfg)?;
    write_reproduction(&a.out, &rep)?;
    let s = &rep.summary;
    println!("{}", serde_json::to_string_pretty(s).map_err(Error::from)?);
    let violations = [&s.thm1, &s.thm3]
        .iter()
        .filter_map(|d| d.as_ref())
        .any(|d| d.certificate_violations > 0);
    if s.thm1.is_none() || s.thm3.is_none() {
        return Err(Fail(
            EXIT_INFEASIBLE,
            "a design program had no feasible grid point".into(),
        ));
    }
    if violations {
        return Err(Fail(
            EXIT_VIOLATION,
            "sampled certificate violations".into(),
        ));
    }
    Ok(())
}
