//! A-posteriori checks of synthesized controllers: sampled Lyapunov certificates,
//! closed-loop simulation and the impossibility witness for exact regulation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::consistency::{random_upsilon_with, ConsistencySet};
use crate::error::{Error, Result};
use crate::matutil::{eigh, sqrtm_psd};
use crate::model::{
    mu_matrix, nu_bar, BilinearSystem, Domain, Input, Integrator, SimOptions, Trajectory,
};
use crate::serde_mat;
use crate::synthesis::{
    build_thm1_ct, build_thm2_dt, build_thm3_ct, max_residual, ControllerDesign, ProgramId,
    SynthesisOptions,
};

/// Fraction of Υ draws placed on the boundary ‖Υ‖ = 1.
pub const BOUNDARY_FRACTION: f64 = 0.25;
pub const CONV_TOL_REL: f64 = 1e-3;
pub const DEFAULT_HORIZON_CT: f64 = 50.0;
pub const DEFAULT_HORIZON_DT: f64 = 500.0;
/// Re-substitution tolerance: λmax(F(x)) ≤ RECHECK_TOL·(1 + ‖F(x)‖).
pub const RECHECK_TOL: f64 = 1e-7;
/// Slack on V ≤ 1 along simulated trajectories started on ∂B_P.
const BASIN_TOL: f64 = 1e-6;
/// Above this value of h·ρ(J) the closed loop is simulated with the Rosenbrock scheme.
const RK4_STABLE: f64 = 2.0;

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub sample: usize,
    pub upsilon_norm: f64,
    #[serde(with = "serde_mat::vector")]
    pub x_tilde: DVector<f64>,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerificationReport {
    pub n_dynamics_samples: usize,
    pub n_state_samples: usize,
    /// Largest (least negative) Lyapunov rate found; for Theorem 3 this is compared to −ε.
    pub worst_decrease: f64,
    pub violations: Vec<Violation>,
    pub trajectories_converged: usize,
    pub trajectories_total: usize,
    /// Runs whose V(x̃) rose above 1, i.e. left B_P, or that diverged.
    pub trajectories_left_basin: usize,
    pub final_errors: Vec<f64>,
    pub conv_tol: f64,
    pub scope: &'static str,
}

/// Sampling can refute a certificate but never prove it.
pub const SCOPE: &str = "sampled necessary-condition check; passing does not prove the certificate";

impl VerificationReport {
    pub fn certificate_ok(&self) -> bool {
        self.n_dynamics_samples > 0 && self.violations.is_empty()
    }

    /// No sampled certificate violation and no trajectory left B_P.
    pub fn no_violations(&self) -> bool {
        self.violations.is_empty() && self.trajectories_left_basin == 0
    }

    pub fn trajectories_ok(&self) -> bool {
        self.trajectories_total > 0 && self.trajectories_converged == self.trajectories_total
    }
}

/// x̃ = P^{1/2} w with ‖w‖ uniform-in-volume on the shell r_lo ≤ ‖w‖ ≤ 1.
fn sample_state<R: Rng>(
    rng: &mut R,
    psqrt: &DMatrix<f64>,
    r_lo: f64,
    on_boundary: bool,
) -> DVector<f64> {
    let n = psqrt.nrows();
    let mut g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    while g.norm() == 0.0 {
        g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    }
    let r = if on_boundary {
        1.0
    } else {
        let lo = r_lo.powi(n as i32);
        (lo + (1.0 - lo) * rng.gen::<f64>())
            .powf(1.0 / n as f64)
            .max(f64::MIN_POSITIVE)
    };
    psqrt * (g.normalize() * r)
}

/// Lyapunov rate of V(x̃) = x̃ᵀP⁻¹x̃ for the member Z at x̃.
///
/// CT: 2 x̃ᵀP⁻¹ Zᵀμ(K, x̃) x̃, plus the worst case 2√γ ‖P⁻¹x̃‖ over ξ̄ ∈ B_γ for Theorem 3.
/// DT: V(x̃⁺) − V(x̃) with x̃⁺ = Zᵀμ(K, x̃) x̃.
pub fn lyapunov_rate(
    design: &ControllerDesign,
    pinv: &DMatrix<f64>,
    z: &DMatrix<f64>,
    xt: &DVector<f64>,
) -> f64 {
    let mu = mu_matrix(&design.k, &design.xbar, &design.ubar, xt);
    let f = z.transpose() * (mu * xt);
    let px = pinv * xt;
    match design.program_id {
        ProgramId::Thm1CT => 2.0 * px.dot(&f),
        ProgramId::Thm3CT => 2.0 * px.dot(&f) + 2.0 * design.gamma.max(0.0).sqrt() * px.norm(),
        ProgramId::Thm2DT => f.dot(&(pinv * &f)) - xt.dot(&px),
    }
}

/// Sampled check of the design's decrease condition over `samples` pairs (Z, x̃).
///
/// Theorems 1/2 require a negative rate on B_P∖{0}; Theorem 3 requires rate ≤ −ε(1 − 1e-6)
/// on the annulus B_P∖B_ηP.
pub fn check_certificate(
    cs: &ConsistencySet,
    design: &ControllerDesign,
    samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if design.xbar.len() != cs.n || design.ubar.len() != cs.m {
        return Err(Error::DimMismatch("design vs consistency set".into()));
    }
    let psqrt = sqrtm_psd(&design.p)?.into_matrix();
    let pinv = design
        .p
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPsd(design.p.min_eigenvalue()))?
        .inverse();
    let (r_lo, limit) = match design.program_id {
        ProgramId::Thm3CT => (design.eta.sqrt(), -design.eps * (1.0 - 1e-6)),
        _ => (0.0, 0.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport {
        worst_decrease: f64::NEG_INFINITY,
        scope: SCOPE,
        ..Default::default()
    };
    for i in 0..samples {
        let boundary = (i as f64) < BOUNDARY_FRACTION * samples as f64;
        let ups = random_upsilon_with(&mut rng, cs.upsilon_dims(), boundary);
        let z = cs.sample(&ups)?;
        // every fourth state on ∂B_P, where the certificate is tightest
        let xt = sample_state(&mut rng, &psqrt, r_lo, i % 4 == 0);
        let rate = lyapunov_rate(design, &pinv, &z, &xt);
        report.worst_decrease = report.worst_decrease.max(rate);
        let bad = if design.program_id == ProgramId::Thm3CT {
            rate > limit
        } else {
            !(rate < 0.0)
        };
        if bad {
            report.violations.push(Violation {
                sample: i,
                upsilon_norm: crate::matutil::spectral_norm(&ups),
                x_tilde: xt,
                rate,
            });
        }
    }
    report.n_dynamics_samples = samples;
    report.n_state_samples = samples;
    Ok(report)
}

/// Outcome of one closed-loop run.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub ok: bool,
    pub left: bool,
    pub final_error: f64,
    pub trajectory: Trajectory,
}

/// Closed-loop simulation of the true plant from `trials` states on ∂B_P.
///
/// Theorems 1/2: the final state is within conv_tol = 1e-3·(1 + |x̄|) of x̄.
/// Theorem 3: the trajectory enters B_ηP before the horizon and stays there.
/// `final_errors` holds |x(end) − x̄| for every trial.
pub fn check_reach_and_stay(
    sys: &BilinearSystem,
    design: &ControllerDesign,
    trials: usize,
    horizon: f64,
    seed: u64,
) -> Result<(VerificationReport, Vec<Trajectory>)> {
    if sys.n() != design.xbar.len() || sys.m() != design.ubar.len() {
        return Err(Error::DimMismatch("design vs plant".into()));
    }
    let expect = if design.program_id == ProgramId::Thm2DT {
        Domain::DiscreteTime
    } else {
        Domain::ContinuousTime
    };
    if sys.domain != expect {
        return Err(Error::BadParam(
            "plant domain does not match the design".into(),
        ));
    }
    let psqrt = sqrtm_psd(&design.p)?.into_matrix();
    let ell = crate::matutil::Ellipsoid::new(design.xbar.clone(), design.p.clone(), 1.0)?;
    let conv_tol = CONV_TOL_REL * (1.0 + design.xbar.norm());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let law = Input::Law(design.law());
    let mut opts = SimOptions {
        stride: if sys.domain == Domain::DiscreteTime {
            1
        } else {
            10
        },
        ..Default::default()
    };
    if sys.domain == Domain::ContinuousTime
        && opts.step * closed_loop_spectral_radius(sys, design) > RK4_STABLE
    {
        opts.integrator = Integrator::Rosenbrock2;
    }
    let mut report = VerificationReport {
        conv_tol,
        trajectories_total: trials,
        scope: SCOPE,
        ..Default::default()
    };
    let mut trajs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x0 = &design.xbar + sample_state(&mut rng, &psqrt, 1.0, true);
        let out = match sys.simulate(&law, &x0, horizon, opts) {
            Ok(tr) => {
                let last = tr.last().expect("non-empty trajectory");
                let err = (last - &design.xbar).norm();
                let ok = match design.program_id {
                    ProgramId::Thm3CT => reaches_and_stays(&tr, &ell, design.eta),
                    _ => err <= conv_tol,
                };
                let left = tr.x.iter().any(|x| ell.value(x) > 1.0 + BASIN_TOL);
                TrialOutcome {
                    ok,
                    left,
                    final_error: err,
                    trajectory: tr,
                }
            }
            Err(Error::NonFinite(_)) => TrialOutcome {
                ok: false,
                left: true,
                final_error: f64::INFINITY,
                trajectory: Trajectory::default(),
            },
            Err(e) => return Err(e),
        };
        report.trajectories_converged += out.ok as usize;
        report.trajectories_left_basin += out.left as usize;
        report.final_errors.push(out.final_error);
        trajs.push(out.trajectory);
    }
    Ok((report, trajs))
}

/// Largest |λ| of the closed-loop Jacobian at x̄.
fn closed_loop_spectral_radius(sys: &BilinearSystem, design: &ControllerDesign) -> f64 {
    let j = sys.field_jacobian(&design.xbar, &design.ubar, Some(&design.k));
    j.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Enters {V ≤ η} at some recorded time and never leaves it afterwards.
fn reaches_and_stays(tr: &Trajectory, ell: &crate::matutil::Ellipsoid, eta: f64) -> bool {
    let level = eta * (1.0 + 1e-9);
    match tr.x.iter().position(|x| ell.value(x) <= level) {
        Some(k) => tr.x[k..].iter().all(|x| ell.value(x) <= level),
        None => false,
    }
}

/// A member of 𝒞 whose offset Zᵀν̄(ū, x̄) is nonzero.
#[derive(Debug, Clone, Serialize)]
pub struct Lemma2Witness {
    #[serde(rename = "Z", with = "serde_mat::matrix")]
    pub z: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub residual: DVector<f64>,
}

/// Build Z = ζ + 𝐀^{-1/2}Υ𝐐^{1/2} with Υᵀ = ±T e₁ e_iᵀ, where T e₁ is the top eigenvector of 𝐐^{1/2}
/// and i indexes the largest entry of z̄ = 𝐀^{-1/2}ν̄. Then Zᵀν̄ = ζᵀν̄ ± λ₁ z̄_i T e₁, and one of the
/// two signs is nonzero.
pub fn lemma2_witness(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
) -> Result<Lemma2Witness> {
    if xbar.len() != cs.n || ubar.len() != cs.m {
        return Err(Error::DimMismatch("setpoint vs consistency set".into()));
    }
    if cs.q_is_zero() {
        return Err(Error::QZero);
    }
    let nu = nu_bar(ubar, xbar);
    let zbar = cs.asqrt_inv.as_matrix() * &nu;
    let i = zbar.iamax();
    let (w, v) = eigh(cs.qsqrt.as_matrix());
    let top = v.column(w.imax()).into_owned();
    let mut best: Option<Lemma2Witness> = None;
    for sign in [1.0, -1.0] {
        let mut ups = DMatrix::zeros(cs.rows(), cs.n);
        ups.row_mut(i).copy_from(&(top.transpose() * sign));
        let z = cs.sample(&ups)?;
        let residual = z.transpose() * &nu;
        if best
            .as_ref()
            .is_none_or(|b| residual.norm() > b.residual.norm())
        {
            best = Some(Lemma2Witness { z, residual });
        }
    }
    Ok(best.expect("two candidates"))
}

/// Rebuild the design's program and substitute (P, Y = K P, Λ, τγ) from the design itself,
/// independently of the solver's iterate. Returns the worst λmax/(1 + ‖block‖) and whether it
/// is within RECHECK_TOL.
pub fn recheck_design(
    cs: &ConsistencySet,
    design: &ControllerDesign,
    opts: &SynthesisOptions,
) -> Result<(bool, f64)> {
    let prob = match design.program_id {
        ProgramId::Thm1CT => build_thm1_ct(cs, &design.xbar, &design.ubar, design.lambda, opts)?,
        ProgramId::Thm2DT => build_thm2_dt(cs, &design.xbar, &design.ubar, design.lambda, opts)?,
        ProgramId::Thm3CT => build_thm3_ct(
            cs,
            &design.xbar,
            &design.ubar,
            design.gamma,
            design.eta,
            design.eps,
            design.lambda,
            design.s,
            opts,
        )?,
    };
    let lay = &prob.sdp.layout;
    let mut x = DVector::zeros(lay.len());
    let p = design.p.as_matrix();
    lay.set_matrix(&mut x, prob.vars.p, p);
    lay.set_matrix(&mut x, prob.vars.y, &(&design.k * p));
    lay.set_value(&mut x, prob.vars.big_lambda, design.big_lambda);
    if let Some(t) = prob.vars.tau_gamma {
        lay.set_value(&mut x, t, design.tau_gamma);
    }
    let worst = max_residual(&prob.sdp, &x);
    Ok((worst <= RECHECK_TOL, worst))
}
