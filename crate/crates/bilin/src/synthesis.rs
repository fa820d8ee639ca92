//! Controller synthesis programs and the line searches over their scalar multipliers.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{worst_case_norm, ConsistencySet};
use crate::error::{Error, Result};
use crate::matutil::{
    ellipsoid_diameter, ellipsoid_volume_proxy, kron_eye_vec, solve_spd, sym_from_lower, SymMatrix,
};
use crate::model::nu_bar;
use crate::sdp::{solve_sdp, LmiBlock, SdpProblem, SdpSolution, SdpStatus, VarId, VarLayout};
use crate::serde_mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgramId {
    Thm1CT,
    Thm2DT,
    Thm3CT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Volume,
    Diameter,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "volume" => Ok(Objective::Volume),
            "diameter" => Ok(Objective::Diameter),
            other => Err(Error::BadParam(format!("unknown objective {other}"))),
        }
    }
}

/// Numerical settings shared by the synthesis programs.
#[derive(Debug, Clone, Copy)]
pub struct SynthesisOptions {
    /// P ⪰ pmin·I encodes P ≻ 0.
    pub pmin: f64,
    /// Strict LMIs are imposed as ⪯ −strict_margin·I, relative to the problem scale.
    pub strict_margin: f64,
    /// Bound on trace(P); the programs are otherwise unbounded in the scale of P.
    pub trace_cap: f64,
    /// Bound on every other decision variable in absolute value.
    pub var_cap: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            pmin: 1e-6,
            strict_margin: 1e-8,
            trace_cap: 2e4,
            var_cap: 1e8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerDesign {
    pub program_id: ProgramId,
    #[serde(rename = "K", with = "serde_mat::matrix")]
    pub k: DMatrix<f64>,
    #[serde(rename = "P", with = "serde_mat::sym")]
    pub p: SymMatrix,
    #[serde(with = "serde_mat::vector")]
    pub xbar: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub ubar: DVector<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub eps: f64,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
    pub s: f64,
    pub tau_gamma: f64,
    pub tau_eta: f64,
    pub sigma: f64,
    pub objective: Objective,
    pub volume: f64,
    pub diameter: f64,
}

impl ControllerDesign {
    pub fn objective_value(&self) -> f64 {
        match self.objective {
            Objective::Volume => self.volume,
            Objective::Diameter => self.diameter,
        }
    }

    pub fn law(&self) -> crate::model::ControlLaw {
        crate::model::ControlLaw {
            k: self.k.clone(),
            xbar: self.xbar.clone(),
            ubar: self.ubar.clone(),
        }
    }
}

/// G(P, Y) = [P; Y; (I_m⊗x̄)Y + (ū⊗I_n)P; 0].
pub fn g_matrix(
    p: &DMatrix<f64>,
    y: &DMatrix<f64>,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
) -> DMatrix<f64> {
    let (n, m) = (xbar.len(), ubar.len());
    let mut g = DMatrix::zeros(n + m + m * n + 1, n);
    g.view_mut((0, 0), (n, n)).copy_from(p);
    g.view_mut((n, 0), (m, n)).copy_from(y);
    let bil = kron_eye_vec(m, xbar) * y + ubar.kronecker(p);
    g.view_mut((n + m, 0), (m * n, n)).copy_from(&bil);
    g
}

/// H(P) = [0; 0; I_m⊗P; 0].
pub fn h_matrix(p: &DMatrix<f64>, n: usize, m: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n + m + m * n + 1, m * n);
    h.view_mut((n + m, 0), (m * n, m * n))
        .copy_from(&DMatrix::<f64>::identity(m, m).kronecker(p));
    h
}

/// Variables of the Theorem-1/2/3 programs.
#[derive(Debug, Clone, Copy)]
pub struct DesignVars {
    pub p: VarId,
    pub y: VarId,
    pub big_lambda: VarId,
    pub tau_gamma: Option<VarId>,
}

/// An assembled program together with the handles needed to read its solution.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub sdp: SdpProblem,
    pub vars: DesignVars,
    pub lambda: f64,
    pub s: f64,
}

fn check_setpoint(cs: &ConsistencySet, xbar: &DVector<f64>, ubar: &DVector<f64>) -> Result<()> {
    if xbar.len() != cs.n || ubar.len() != cs.m {
        return Err(Error::DimMismatch("setpoint vs consistency set".into()));
    }
    Ok(())
}

fn scale_of(cs: &ConsistencySet) -> f64 {
    1.0 + cs.zeta.amax()
}

fn design_layout(n: usize, m: usize, with_tau: bool) -> (VarLayout, DesignVars) {
    let mut l = VarLayout::new();
    let p = l.sym("P", n);
    let y = l.full("Y", m, n);
    let big_lambda = l.scalar("Lambda");
    let tau_gamma = with_tau.then(|| l.scalar("tau_gamma"));
    (
        l,
        DesignVars {
            p,
            y,
            big_lambda,
            tau_gamma,
        },
    )
}

/// P ⪰ pmin·I, trace(P) ≤ trace_cap and |v| ≤ var_cap for the scalar and Y entries.
fn add_bounds(sdp: &mut SdpProblem, vars: &DesignVars, n: usize, opts: &SynthesisOptions) {
    let lay = sdp.layout.clone();
    let pmin = opts.pmin;
    sdp.push(LmiBlock::from_affine("P >= pmin I", lay.len(), move |x| {
        DMatrix::identity(n, n) * pmin - lay.matrix(x, vars.p)
    }));
    let lay = sdp.layout.clone();
    let cap = opts.trace_cap;
    sdp.push(LmiBlock::from_affine(
        "trace P <= cap",
        lay.len(),
        move |x| DMatrix::from_element(1, 1, lay.matrix(x, vars.p).trace() - cap),
    ));
    let y0 = sdp.layout.index(vars.y);
    let ylen = match sdp.layout.decl(vars.y).kind {
        crate::sdp::VarKind::Full(r, c) => r * c,
        _ => 0,
    };
    let mut bounded: Vec<usize> = (y0..y0 + ylen).collect();
    bounded.push(sdp.layout.index(vars.big_lambda));
    if let Some(t) = vars.tau_gamma {
        bounded.push(sdp.layout.index(t));
    }
    // one box LMI diag(v − cap, −v − cap) ⪯ 0 keeps the block count small
    let cap = opts.var_cap;
    let dim = 2 * bounded.len();
    let mut f0 = DMatrix::zeros(dim, dim);
    let mut coef = Vec::new();
    for (r, &i) in bounded.iter().enumerate() {
        f0[(2 * r, 2 * r)] = -cap;
        f0[(2 * r + 1, 2 * r + 1)] = -cap;
        let mut fi = DMatrix::zeros(dim, dim);
        fi[(2 * r, 2 * r)] = 1.0;
        fi[(2 * r + 1, 2 * r + 1)] = -1.0;
        coef.push((i, fi));
    }
    sdp.push(LmiBlock {
        name: "variable box".into(),
        f0,
        coef,
    });
}

/// Theorem 1 (continuous time, ū known).
pub fn build_thm1_ct(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    lambda: f64,
    opts: &SynthesisOptions,
) -> Result<DesignProblem> {
    check_setpoint(cs, xbar, ubar)?;
    if !(lambda > 0.0) {
        return Err(Error::BadParam(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let (n, m) = (cs.n, cs.m);
    let nn = cs.rows();
    let (layout, vars) = design_layout(n, m, false);
    let lay = layout.clone();
    let mut sdp = SdpProblem::new(layout);
    let (zeta, ai, qh) = (
        cs.zeta.clone(),
        cs.asqrt_inv.as_matrix().clone(),
        cs.qsqrt.as_matrix().clone(),
    );
    let (xb, ub) = (xbar.clone(), ubar.clone());
    let block = LmiBlock::from_affine("thm1", lay.len(), move |x| {
        let p = lay.matrix(x, vars.p);
        let y = lay.matrix(x, vars.y);
        let bl = lay.value(x, vars.big_lambda);
        let g = g_matrix(&p, &y, &xb, &ub);
        let h = h_matrix(&p, n, m);
        let gz = g.transpose() * &zeta;
        sym_from_lower(
            &[n, m * n, m, nn, n],
            &[
                vec![Some(&gz + gz.transpose())],
                vec![
                    Some(h.transpose() * &zeta),
                    Some(DMatrix::<f64>::identity(m, m).kronecker(&p) * -lambda),
                ],
                vec![
                    Some(&y * lambda),
                    None,
                    Some(DMatrix::identity(m, m) * -lambda),
                ],
                vec![
                    Some(&ai * &g),
                    Some(&ai * &h),
                    None,
                    Some(DMatrix::identity(nn, nn) * -bl),
                ],
                vec![
                    Some(&qh * bl),
                    None,
                    None,
                    None,
                    Some(DMatrix::identity(n, n) * -bl),
                ],
            ],
        )
    });
    sdp.push(block.with_margin(opts.strict_margin * scale_of(cs)));
    add_bounds(&mut sdp, &vars, n, opts);
    Ok(DesignProblem {
        sdp,
        vars,
        lambda,
        s: 0.0,
    })
}

/// Theorem 2 (discrete time, ū known).
pub fn build_thm2_dt(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    lambda: f64,
    opts: &SynthesisOptions,
) -> Result<DesignProblem> {
    check_setpoint(cs, xbar, ubar)?;
    if !(lambda > 0.0) {
        return Err(Error::BadParam(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let (n, m) = (cs.n, cs.m);
    let nn = cs.rows();
    let (layout, vars) = design_layout(n, m, false);
    let lay = layout.clone();
    let mut sdp = SdpProblem::new(layout);
    let (zeta, ai, qh) = (
        cs.zeta.clone(),
        cs.asqrt_inv.as_matrix().clone(),
        cs.qsqrt.as_matrix().clone(),
    );
    let (xb, ub) = (xbar.clone(), ubar.clone());
    let block = LmiBlock::from_affine("thm2", lay.len(), move |x| {
        let p = lay.matrix(x, vars.p);
        let y = lay.matrix(x, vars.y);
        let bl = lay.value(x, vars.big_lambda);
        let g = g_matrix(&p, &y, &xb, &ub);
        let h = h_matrix(&p, n, m);
        sym_from_lower(
            &[n, n, m * n, m, nn, n],
            &[
                vec![Some(-&p)],
                vec![Some(zeta.transpose() * &g), Some(-&p)],
                vec![
                    None,
                    Some(h.transpose() * &zeta),
                    Some(DMatrix::<f64>::identity(m, m).kronecker(&p) * -lambda),
                ],
                vec![
                    Some(&y * lambda),
                    None,
                    None,
                    Some(DMatrix::identity(m, m) * -lambda),
                ],
                vec![
                    Some(&ai * &g),
                    None,
                    Some(&ai * &h),
                    None,
                    Some(DMatrix::identity(nn, nn) * -bl),
                ],
                vec![
                    None,
                    Some(&qh * bl),
                    None,
                    None,
                    None,
                    Some(DMatrix::identity(n, n) * -bl),
                ],
            ],
        )
    });
    sdp.push(block.with_margin(opts.strict_margin * scale_of(cs)));
    add_bounds(&mut sdp, &vars, n, opts);
    Ok(DesignProblem {
        sdp,
        vars,
        lambda,
        s: 0.0,
    })
}

/// Theorem 3 (continuous time, ū from Lemma 3) at fixed (λ, s).
#[allow(clippy::too_many_arguments)]
pub fn build_thm3_ct(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    gamma: f64,
    eta: f64,
    eps: f64,
    lambda: f64,
    s: f64,
    opts: &SynthesisOptions,
) -> Result<DesignProblem> {
    check_setpoint(cs, xbar, ubar)?;
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::BadEta(eta));
    }
    if !(eps > 0.0) || !(gamma >= 0.0) || !(lambda > 0.0) {
        return Err(Error::BadParam(format!(
            "need eps > 0, gamma >= 0, lambda > 0 (got {eps}, {gamma}, {lambda})"
        )));
    }
    let bound = -eps / eta;
    if s > bound {
        return Err(Error::BadS { s, bound });
    }
    let (n, m) = (cs.n, cs.m);
    let nn = cs.rows();
    let (layout, vars) = design_layout(n, m, true);
    let tau = vars.tau_gamma.expect("tau_gamma declared");
    let lay = layout.clone();
    let mut sdp = SdpProblem::new(layout);
    let (zeta, ai, qh) = (
        cs.zeta.clone(),
        cs.asqrt_inv.as_matrix().clone(),
        cs.qsqrt.as_matrix().clone(),
    );
    let (xb, ub) = (xbar.clone(), ubar.clone());
    sdp.push(LmiBlock::from_affine("thm3", lay.len(), move |x| {
        let p = lay.matrix(x, vars.p);
        let y = lay.matrix(x, vars.y);
        let bl = lay.value(x, vars.big_lambda);
        let tg = lay.value(x, tau);
        let g = g_matrix(&p, &y, &xb, &ub);
        let h = h_matrix(&p, n, m);
        let gz = g.transpose() * &zeta;
        sym_from_lower(
            &[n, n, m * n, m, nn, n],
            &[
                vec![Some(&gz + gz.transpose() - &p * s)],
                vec![
                    Some(DMatrix::identity(n, n)),
                    Some(DMatrix::identity(n, n) * -tg),
                ],
                vec![
                    Some(h.transpose() * &zeta),
                    None,
                    Some(DMatrix::<f64>::identity(m, m).kronecker(&p) * -lambda),
                ],
                vec![
                    Some(&y * lambda),
                    None,
                    None,
                    Some(DMatrix::identity(m, m) * -lambda),
                ],
                vec![
                    Some(&ai * &g),
                    None,
                    Some(&ai * &h),
                    None,
                    Some(DMatrix::identity(nn, nn) * -bl),
                ],
                vec![
                    Some(&qh * bl),
                    None,
                    None,
                    None,
                    None,
                    Some(DMatrix::identity(n, n) * -bl),
                ],
            ],
        )
    }));
    let ti = sdp.layout.index(tau);
    // ε + s + τγ γ ≤ 0, ε + s η + τγ γ ≤ 0, τγ ≥ 0
    sdp.push(LmiBlock::scalar(
        "eps + s + tau_gamma gamma <= 0",
        eps + s,
        &[(ti, gamma)],
    ));
    sdp.push(LmiBlock::scalar(
        "eps + s eta + tau_gamma gamma <= 0",
        eps + s * eta,
        &[(ti, gamma)],
    ));
    sdp.push(LmiBlock::scalar("tau_gamma >= 0", 0.0, &[(ti, -1.0)]));
    add_bounds(&mut sdp, &vars, n, opts);
    Ok(DesignProblem {
        sdp,
        vars,
        lambda,
        s,
    })
}

/// Outcome of one grid point of a line search.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub s: f64,
    pub feasible: bool,
    pub volume: f64,
    pub diameter: f64,
    pub margin: f64,
    /// max over blocks of λmax(F(x))/(1 + ‖F(x)‖) at the returned point.
    pub max_residual: f64,
    pub status: SdpStatus,
}

#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub best: Option<ControllerDesign>,
    pub report: Vec<GridPoint>,
}

/// Common settings carried into a design.
#[derive(Debug, Clone, Copy)]
pub struct DesignMeta {
    pub program_id: ProgramId,
    pub gamma: f64,
    pub eta: f64,
    pub eps: f64,
    pub sigma: f64,
    pub objective: Objective,
}

/// Solve an assembled program and turn an accepted solution into a design.
pub fn solve_design(
    prob: &DesignProblem,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    meta: DesignMeta,
) -> Result<(Option<ControllerDesign>, SdpSolution)> {
    let sol = solve_sdp(&prob.sdp)?;
    let accepted =
        matches!(sol.status, SdpStatus::Feasible | SdpStatus::Optimal) && prob.sdp.verify(&sol.x);
    if !accepted {
        return Ok((None, sol));
    }
    let lay = &prob.sdp.layout;
    let p = lay.matrix(&sol.x, prob.vars.p);
    let y = lay.matrix(&sol.x, prob.vars.y);
    let psym = SymMatrix::symmetrize(p.clone());
    if psym.min_eigenvalue() <= 0.0 {
        return Ok((None, sol));
    }
    // K = Y P⁻¹ via Kᵀ = P⁻¹ Yᵀ
    let k = solve_spd(&p, &y.transpose())
        .ok_or_else(|| Error::SolverFailure("P is singular".into()))?
        .transpose();
    let tau_gamma = prob.vars.tau_gamma.map_or(0.0, |t| lay.value(&sol.x, t));
    let (eta, eps, gamma) = (meta.eta, meta.eps, meta.gamma);
    let tau_eta = if meta.program_id == ProgramId::Thm3CT {
        (eps + prob.s + tau_gamma * gamma) / (eta - 1.0)
    } else {
        0.0
    };
    if meta.program_id == ProgramId::Thm3CT && prob.s + tau_eta < 0.0 {
        log::warn!("s + tau_eta = {:.3e} < 0", prob.s + tau_eta);
    }
    let design = ControllerDesign {
        program_id: meta.program_id,
        k,
        volume: ellipsoid_volume_proxy(&psym)?,
        diameter: ellipsoid_diameter(&psym)?,
        p: psym,
        xbar: xbar.clone(),
        ubar: ubar.clone(),
        gamma,
        eta,
        eps,
        lambda: prob.lambda,
        big_lambda: lay.value(&sol.x, prob.vars.big_lambda),
        s: prob.s,
        tau_gamma,
        tau_eta,
        sigma: meta.sigma,
        objective: meta.objective,
    };
    Ok((Some(design), sol))
}

/// Largest normalized eigenvalue λmax(F_j(x))/(1 + ‖F_j(x)‖) over the blocks.
pub fn max_residual(sdp: &SdpProblem, x: &DVector<f64>) -> f64 {
    sdp.residuals(x)
        .iter()
        .map(|r| r.max_eig / (1.0 + r.norm))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn select(points: Vec<(GridPoint, Option<ControllerDesign>)>) -> LineSearchResult {
    let mut report = Vec::with_capacity(points.len());
    let mut best: Option<ControllerDesign> = None;
    for (gp, d) in points {
        report.push(gp);
        let Some(d) = d else { continue };
        let better = match &best {
            None => true,
            Some(b) => {
                let (vo, vb) = (d.objective_value(), b.objective_value());
                vo > vb
                    || (vo == vb && d.lambda < b.lambda)
                    || (vo == vb && d.lambda == b.lambda && d.s.abs() < b.s.abs())
            }
        };
        if better {
            best = Some(d);
        }
    }
    LineSearchResult { best, report }
}

fn grid_point(prob: &DesignProblem, d: &Option<ControllerDesign>, sol: &SdpSolution) -> GridPoint {
    let (lambda, s) = (prob.lambda, prob.s);
    GridPoint {
        lambda,
        s,
        feasible: d.is_some(),
        volume: d.as_ref().map_or(f64::NAN, |d| d.volume),
        diameter: d.as_ref().map_or(f64::NAN, |d| d.diameter),
        margin: sol.margin,
        max_residual: max_residual(&prob.sdp, &sol.x),
        status: sol.status,
    }
}

/// Theorem 1 (CT) or Theorem 2 (DT) over a λ grid.
pub fn line_search_known(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    lambdas: &[f64],
    objective: Objective,
    program: ProgramId,
    opts: &SynthesisOptions,
) -> Result<LineSearchResult> {
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::BadParam(
            "lambda grid must be non-empty and positive".into(),
        ));
    }
    let meta = DesignMeta {
        program_id: program,
        gamma: 0.0,
        eta: 1.0,
        eps: 0.0,
        sigma: 0.0,
        objective,
    };
    let points = lambdas
        .par_iter()
        .map(|&lambda| {
            let prob = match program {
                ProgramId::Thm1CT => build_thm1_ct(cs, xbar, ubar, lambda, opts)?,
                ProgramId::Thm2DT => build_thm2_dt(cs, xbar, ubar, lambda, opts)?,
                ProgramId::Thm3CT => return Err(Error::BadParam("use line_search_thm3".into())),
            };
            let (d, sol) = solve_design(&prob, xbar, ubar, meta)?;
            Ok((grid_point(&prob, &d, &sol), d))
        })
        .collect::<Result<Vec<_>>>()?;
    let res = select(points);
    if res.best.is_none() {
        log::info!("no feasible lambda on the grid");
    }
    Ok(res)
}

pub fn line_search_thm1(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    lambdas: &[f64],
    objective: Objective,
    opts: &SynthesisOptions,
) -> Result<LineSearchResult> {
    line_search_known(cs, xbar, ubar, lambdas, objective, ProgramId::Thm1CT, opts)
}

/// Theorem 3 over a (λ, s) grid.
#[allow(clippy::too_many_arguments)]
pub fn line_search_thm3(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    lemma3: &Lemma3Result,
    eta: f64,
    eps: f64,
    lambdas: &[f64],
    ss: &[f64],
    objective: Objective,
    opts: &SynthesisOptions,
) -> Result<LineSearchResult> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::BadEta(eta));
    }
    let bound = -eps / eta;
    if let Some(&s) = ss.iter().find(|&&s| s > bound * (1.0 - 1e-12)) {
        if s > bound {
            return Err(Error::BadS { s, bound });
        }
    }
    if lambdas.is_empty() || ss.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::BadParam(
            "grids must be non-empty with lambda > 0".into(),
        ));
    }
    let meta = DesignMeta {
        program_id: ProgramId::Thm3CT,
        gamma: lemma3.gamma,
        eta,
        eps,
        sigma: lemma3.sigma,
        objective,
    };
    let pairs: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| ss.iter().map(move |&s| (l, s)))
        .collect();
    let points = pairs
        .par_iter()
        .map(|&(lambda, s)| {
            let prob = build_thm3_ct(
                cs,
                xbar,
                &lemma3.ubar,
                lemma3.gamma,
                eta,
                eps,
                lambda,
                s,
                opts,
            )?;
            let (d, sol) = solve_design(&prob, xbar, &lemma3.ubar, meta)?;
            Ok((grid_point(&prob, &d, &sol), d))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select(points))
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma3Result {
    pub gamma: f64,
    /// Optimal value of the SDP at the selected σ.
    pub gamma_sdp: f64,
    /// Exact worst case max over 𝒞 of |Zᵀν̄(ū, x̄)|² at the returned ū.
    pub gamma_exact: f64,
    #[serde(with = "serde_mat::vector")]
    pub ubar: DVector<f64>,
    pub sigma: f64,
}

/// Lemma-3 program at fixed σ: minimize γ over (γ, ū). Returns None when infeasible.
pub fn build_lemma3(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    sigma: f64,
) -> Result<(SdpProblem, VarId, VarId)> {
    let (n, m) = (cs.n, cs.m);
    let nn = cs.rows();
    let mut l = VarLayout::new();
    let g = l.scalar("gamma");
    let u = l.full("ubar", m, 1);
    let lay = l.clone();
    let mut sdp = SdpProblem::new(l);
    sdp.objective[sdp.layout.index(g)] = 1.0;
    let (zeta, ai, qh, xb) = (
        cs.zeta.clone(),
        cs.asqrt_inv.as_matrix().clone(),
        cs.qsqrt.as_matrix().clone(),
        xbar.clone(),
    );
    sdp.push(LmiBlock::from_affine("lemma3", lay.len(), move |x| {
        let gamma = lay.value(x, g);
        let ub = lay.matrix(x, u).column(0).into_owned();
        let nu = nu_bar(&ub, &xb);
        sym_from_lower(
            &[n, 1, nn, n],
            &[
                vec![Some(DMatrix::identity(n, n) * -gamma)],
                vec![
                    Some(DMatrix::from_row_slice(
                        1,
                        n,
                        (zeta.transpose() * &nu).as_slice(),
                    )),
                    Some(DMatrix::from_element(1, 1, -1.0)),
                ],
                vec![
                    None,
                    Some(DMatrix::from_column_slice(nn, 1, (&ai * &nu).as_slice())),
                    Some(DMatrix::identity(nn, nn) * -sigma),
                ],
                vec![
                    Some(&qh * sigma),
                    None,
                    None,
                    Some(DMatrix::identity(n, n) * -sigma),
                ],
            ],
        )
    }));
    Ok((sdp, g, u))
}

/// Lemma 3 with golden-section search over log σ.
pub fn solve_lemma3(
    cs: &ConsistencySet,
    xbar: &DVector<f64>,
    sigma_range: (f64, f64),
    iters: usize,
) -> Result<Lemma3Result> {
    if cs.q_is_zero() {
        return Err(Error::QZero);
    }
    if xbar.len() != cs.n {
        return Err(Error::DimMismatch("xbar".into()));
    }
    let inner = |log_sigma: f64| -> Option<(f64, DVector<f64>)> {
        let sigma = log_sigma.exp();
        let (sdp, g, u) = build_lemma3(cs, xbar, sigma).ok()?;
        let sol = solve_sdp(&sdp).ok()?;
        if !matches!(sol.status, SdpStatus::Optimal | SdpStatus::Feasible) {
            return None;
        }
        Some((
            sdp.layout.value(&sol.x, g),
            sdp.layout.matrix(&sol.x, u).column(0).into_owned(),
        ))
    };
    let f = |ls: f64| inner(ls).map_or(f64::INFINITY, |(g, _)| g);
    let (mut a, mut b) = (sigma_range.0.ln(), sigma_range.1.ln());
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        // with an infinite side, move toward the finite one
        if fc < fd || (fc.is_finite() && !fd.is_finite()) {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let ls = if fc <= fd { c } else { d };
    let (gamma_sdp, ubar) = inner(ls).ok_or_else(|| {
        Error::SolverFailure("Lemma 3 program infeasible on the sigma range".into())
    })?;
    let (wc, _) = worst_case_norm(cs, &nu_bar(&ubar, xbar));
    let gamma_exact = wc * wc;
    Ok(Lemma3Result {
        gamma: gamma_sdp.max(gamma_exact),
        gamma_sdp,
        gamma_exact,
        ubar,
        sigma: ls.exp(),
    })
}
