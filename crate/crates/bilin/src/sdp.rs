//! Small dense semidefinite programs in LMI form.
//!
//! minimize cᵀx subject to F_j(x) = F_j0 + Σ_i x_i F_ji ⪯ 0 for every block j.
//!
//! The solver is a log-barrier Newton method. Iterates stay strictly feasible for
//! the LMIs: a max-margin phase finds a strictly feasible x first, and the
//! objective phase starts from it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matutil::max_eig;

pub const FEAS_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VarKind {
    Sym(usize),
    Full(usize, usize),
    Scalar,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarDecl {
    pub name: String,
    pub kind: VarKind,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Maps named matrix and scalar variables onto the flat decision vector.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VarLayout {
    pub vars: Vec<VarDecl>,
    len: usize,
}

impl VarLayout {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, kind: VarKind) -> VarId {
        let size = match kind {
            VarKind::Sym(n) => n * (n + 1) / 2,
            VarKind::Full(r, c) => r * c,
            VarKind::Scalar => 1,
        };
        self.vars.push(VarDecl {
            name: name.to_string(),
            kind,
            offset: self.len,
        });
        self.len += size;
        VarId(self.vars.len() - 1)
    }

    pub fn sym(&mut self, name: &str, n: usize) -> VarId {
        self.push(name, VarKind::Sym(n))
    }

    pub fn full(&mut self, name: &str, r: usize, c: usize) -> VarId {
        self.push(name, VarKind::Full(r, c))
    }

    pub fn scalar(&mut self, name: &str) -> VarId {
        self.push(name, VarKind::Scalar)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name).map(VarId)
    }

    pub fn decl(&self, id: VarId) -> &VarDecl {
        &self.vars[id.0]
    }

    /// Value of a matrix variable (symmetric or full) at x.
    pub fn matrix(&self, x: &DVector<f64>, id: VarId) -> DMatrix<f64> {
        let d = &self.vars[id.0];
        match d.kind {
            VarKind::Sym(n) => {
                let mut m = DMatrix::zeros(n, n);
                let mut k = d.offset;
                for j in 0..n {
                    for i in j..n {
                        m[(i, j)] = x[k];
                        m[(j, i)] = x[k];
                        k += 1;
                    }
                }
                m
            }
            VarKind::Full(r, c) => DMatrix::from_fn(r, c, |i, j| x[d.offset + j * r + i]),
            VarKind::Scalar => DMatrix::from_element(1, 1, x[d.offset]),
        }
    }

    pub fn value(&self, x: &DVector<f64>, id: VarId) -> f64 {
        x[self.vars[id.0].offset]
    }

    /// Flat index of a scalar variable.
    pub fn index(&self, id: VarId) -> usize {
        self.vars[id.0].offset
    }

    /// Write a matrix value into the flat vector (symmetric input is assumed symmetric).
    pub fn set_matrix(&self, x: &mut DVector<f64>, id: VarId, m: &DMatrix<f64>) {
        let d = &self.vars[id.0];
        match d.kind {
            VarKind::Sym(n) => {
                let mut k = d.offset;
                for j in 0..n {
                    for i in j..n {
                        x[k] = 0.5 * (m[(i, j)] + m[(j, i)]);
                        k += 1;
                    }
                }
            }
            VarKind::Full(r, c) => {
                for j in 0..c {
                    for i in 0..r {
                        x[d.offset + j * r + i] = m[(i, j)];
                    }
                }
            }
            VarKind::Scalar => x[d.offset] = m[(0, 0)],
        }
    }

    pub fn set_value(&self, x: &mut DVector<f64>, id: VarId, v: f64) {
        x[self.vars[id.0].offset] = v;
    }
}

/// One affine matrix inequality F0 + Σ x_i F_i ⪯ 0.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub name: String,
    pub f0: DMatrix<f64>,
    /// Nonzero coefficient matrices, keyed by flat variable index.
    pub coef: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    /// Extract the affine representation of `f` by evaluating it at 0 and at unit vectors.
    pub fn from_affine<F>(name: &str, nvars: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DMatrix<f64>,
    {
        let mut x = DVector::zeros(nvars);
        let f0 = sym(&f(&x));
        let mut coef = Vec::new();
        for i in 0..nvars {
            x[i] = 1.0;
            let fi = sym(&f(&x)) - &f0;
            x[i] = 0.0;
            if fi.amax() > 0.0 {
                coef.push((i, fi));
            }
        }
        LmiBlock {
            name: name.to_string(),
            f0,
            coef,
        }
    }

    /// Scalar inequality aᵀx + a0 ≤ 0.
    pub fn scalar(name: &str, a0: f64, a: &[(usize, f64)]) -> Self {
        LmiBlock {
            name: name.to_string(),
            f0: DMatrix::from_element(1, 1, a0),
            coef: a
                .iter()
                .filter(|(_, v)| *v != 0.0)
                .map(|&(i, v)| (i, DMatrix::from_element(1, 1, v)))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.f0.nrows()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.f0.clone();
        for (i, fi) in &self.coef {
            m += fi * x[*i];
        }
        m
    }

    /// Shift the constant term by `margin·I`, turning F ⪯ 0 into F ⪯ −margin·I.
    pub fn with_margin(mut self, margin: f64) -> Self {
        for i in 0..self.dim() {
            self.f0[(i, i)] += margin;
        }
        self
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub layout: VarLayout,
    /// Minimize cᵀx; all-zero means a pure feasibility problem.
    pub objective: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
}

impl SdpProblem {
    pub fn new(layout: VarLayout) -> Self {
        let k = layout.len();
        SdpProblem {
            layout,
            objective: DVector::zeros(k),
            blocks: Vec::new(),
        }
    }

    pub fn nvars(&self) -> usize {
        self.layout.len()
    }

    pub fn add<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&DVector<f64>) -> DMatrix<f64>,
    {
        let b = LmiBlock::from_affine(name, self.nvars(), f);
        self.blocks.push(b);
    }

    pub fn push(&mut self, block: LmiBlock) {
        self.blocks.push(block);
    }

    /// Largest eigenvalue of every block at x, paired with the block norm.
    pub fn residuals(&self, x: &DVector<f64>) -> Vec<BlockResidual> {
        self.blocks
            .iter()
            .map(|b| {
                let m = b.eval(x);
                BlockResidual {
                    name: b.name.clone(),
                    max_eig: max_eig(&m),
                    norm: m.norm(),
                }
            })
            .collect()
    }

    /// Every block satisfies λmax ≤ FEAS_TOL·(1 + ‖block‖).
    pub fn verify(&self, x: &DVector<f64>) -> bool {
        self.residuals(x)
            .iter()
            .all(|r| r.max_eig <= FEAS_TOL * (1.0 + r.norm))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockResidual {
    pub name: String,
    pub max_eig: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SdpStatus {
    Optimal,
    Feasible,
    Infeasible,
    Numerical,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    /// Largest common margin t with F_j(x) ⪯ −t·I found by the feasibility phase.
    pub margin: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Upper cap on the feasibility margin, keeping the max-margin phase bounded.
    pub margin_cap: f64,
    /// Stop the feasibility phase as soon as this margin is reached (only when an
    /// objective follows).
    pub margin_target: f64,
    /// Radius of the ball ‖x‖ ≤ radius added to every solve; keeps the barrier bounded.
    pub radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 600,
            tol: 1e-8,
            margin_cap: 1.0,
            margin_target: 1e-6,
            radius: 1e8,
        }
    }
}

pub fn solve_sdp(p: &SdpProblem) -> Result<SdpSolution> {
    solve_sdp_with(p, SolverOptions::default())
}

pub fn solve_sdp_with(p: &SdpProblem, opts: SolverOptions) -> Result<SdpSolution> {
    let k = p.nvars();
    let feasibility_only = p.objective.iter().all(|&c| c == 0.0);

    // Phase 1: maximize t subject to F_j(x) + t I ⪯ 0 and t ≤ margin_cap.
    let ball = ball_block(k, k, opts.radius);
    let mut blocks: Vec<LmiBlock> = p
        .blocks
        .iter()
        .chain(std::iter::once(&ball))
        .map(|b| {
            let mut b = b.clone();
            b.coef.push((k, DMatrix::identity(b.dim(), b.dim())));
            b
        })
        .collect();
    blocks.push(LmiBlock::scalar(
        "margin cap",
        -opts.margin_cap,
        &[(k, 1.0)],
    ));
    let mut c1 = DVector::zeros(k + 1);
    c1[k] = -1.0;
    let worst = p
        .blocks
        .iter()
        .map(|b| max_eig(&b.f0))
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = 1.0 + worst.max(0.0);
    let mut y0 = DVector::zeros(k + 1);
    y0[k] = -scale;
    let stop = if feasibility_only {
        None
    } else {
        Some((k, opts.margin_target))
    };
    let ph1 = ipm(&blocks, &c1, y0, opts, stop, Some(FEAS_TOL * scale))?;
    let t = ph1.y[k];
    let x1 = ph1.y.rows(0, k).into_owned();
    let margin_ok = t >= -FEAS_TOL * scale;
    if !margin_ok {
        return Ok(SdpSolution {
            status: if ph1.converged {
                SdpStatus::Infeasible
            } else {
                SdpStatus::Numerical
            },
            objective: p.objective.dot(&x1),
            x: x1,
            margin: t,
            iterations: ph1.iterations,
        });
    }
    if feasibility_only {
        return Ok(SdpSolution {
            status: SdpStatus::Feasible,
            x: x1,
            objective: 0.0,
            margin: t,
            iterations: ph1.iterations,
        });
    }
    if t <= 0.0 {
        // feasible only up to tolerance: no interior to start the objective phase from
        return Ok(SdpSolution {
            status: SdpStatus::Feasible,
            objective: p.objective.dot(&x1),
            x: x1,
            margin: t,
            iterations: ph1.iterations,
        });
    }

    // Phase 2: minimize cᵀx from the strictly feasible x1.
    let mut blocks2 = p.blocks.clone();
    blocks2.push(ball_block(k, k, opts.radius));
    let ph2 = ipm(&blocks2, &p.objective, x1.clone(), opts, None, None)?;
    let status = if ph2.converged {
        SdpStatus::Optimal
    } else {
        SdpStatus::Numerical
    };
    Ok(SdpSolution {
        status,
        objective: p.objective.dot(&ph2.y),
        x: ph2.y,
        margin: t,
        iterations: ph1.iterations + ph2.iterations,
    })
}

/// [r·I x; xᵀ r] ⪰ 0 written as an LMI block over the first `k` of `nvars` variables.
fn ball_block(k: usize, _nvars: usize, r: f64) -> LmiBlock {
    let mut f0 = DMatrix::zeros(k + 1, k + 1);
    f0.fill_diagonal(-r);
    let coef = (0..k)
        .map(|i| {
            let mut fi = DMatrix::zeros(k + 1, k + 1);
            fi[(i, k)] = -1.0;
            fi[(k, i)] = -1.0;
            (i, fi)
        })
        .collect();
    LmiBlock {
        name: "ball".into(),
        f0,
        coef,
    }
}

struct IpmResult {
    y: DVector<f64>,
    converged: bool,
    iterations: usize,
}

/// Log-barrier Newton method for min cᵀy s.t. S_j(y) = −F_j(y) ≻ 0.
///
/// Minimizes t·cᵀy − Σ log det S_j for an increasing t; at each center the
/// suboptimality is at most ν/t with ν = Σ dim S_j. `y0` must be strictly feasible.
fn ipm(
    blocks: &[LmiBlock],
    c: &DVector<f64>,
    y0: DVector<f64>,
    opts: SolverOptions,
    stop_at: Option<(usize, f64)>,
    give_up_above: Option<f64>,
) -> Result<IpmResult> {
    let k = c.len();
    let nu: f64 = blocks.iter().map(|b| b.dim() as f64).sum();
    let chol_all = |y: &DVector<f64>| -> Option<Vec<Cholesky<f64, Dyn>>> {
        blocks.iter().map(|bl| Cholesky::new(-bl.eval(y))).collect()
    };
    let barrier = |ch: &[Cholesky<f64, Dyn>]| -> f64 {
        ch.iter()
            .map(|c| -2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .sum()
    };
    let mut y = y0;
    let Some(mut ch) = chol_all(&y) else {
        return Err(Error::SolverFailure(
            "starting point is not strictly feasible".into(),
        ));
    };
    let cnorm = c.amax();
    // start where the objective and barrier gradients are comparable
    let mut t = if cnorm > 0.0 {
        (1.0 / cnorm).max(1e-8)
    } else {
        1.0
    };
    let mut iterations = 0;
    let mut converged = false;
    'outer: while iterations < opts.max_iter {
        // centering
        loop {
            if let Some((idx, target)) = stop_at {
                if y[idx] >= target {
                    converged = true;
                    break 'outer;
                }
            }
            if iterations >= opts.max_iter {
                break 'outer;
            }
            iterations += 1;
            let (g, h) = grad_hess(blocks, &ch, k);
            let g = g + c * t;
            let Some(dy) = newton_solve(&h, &g) else {
                break 'outer;
            };
            let dec2 = -g.dot(&dy);
            if !(dec2.is_finite()) || dec2 < 0.0 {
                break 'outer;
            }
            if dec2 < 1e-10 {
                break;
            }
            let f0 = t * c.dot(&y) + barrier(&ch);
            let mut alpha = if dec2.sqrt() > 0.5 {
                1.0 / (1.0 + dec2.sqrt())
            } else {
                1.0
            };
            let mut accepted = false;
            for _ in 0..60 {
                let yn = &y + &dy * alpha;
                if let Some(chn) = chol_all(&yn) {
                    let f1 = t * c.dot(&yn) + barrier(&chn);
                    if f1 <= f0 - 0.01 * alpha * dec2
                        || (dec2 < 1e-6 && f1 <= f0 + 1e-12 * f0.abs())
                    {
                        y = yn;
                        ch = chn;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                log::trace!("line search stalled at t = {t:.3e}, decrement {dec2:.3e}");
                if nu / t <= 1e-6 * (1.0 + c.dot(&y).abs()) {
                    converged = true;
                }
                break 'outer;
            }
            if dec2 < 1e-3 && alpha == 1.0 {
                // quadratic convergence region: one more step is enough
                continue;
            }
        }
        let obj = c.dot(&y);
        log::trace!("it {iterations} t {t:.3e} obj {obj:.9e} gap {:.3e}", nu / t);
        if let Some(bound) = give_up_above {
            // the optimum is at least obj − ν/t
            if obj - nu / t > bound {
                converged = true;
                break;
            }
        }
        if cnorm == 0.0 || nu / t <= opts.tol * (1.0 + obj.abs()) {
            converged = true;
            break;
        }
        t *= 16.0;
    }
    Ok(IpmResult {
        y,
        converged,
        iterations,
    })
}

/// Gradient tr(S⁻¹F_i) and Hessian tr(S⁻¹F_i S⁻¹F_l) of −Σ log det S_j.
fn grad_hess(
    blocks: &[LmiBlock],
    ch: &[Cholesky<f64, Dyn>],
    k: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut g = DVector::zeros(k);
    let mut h = DMatrix::zeros(k, k);
    for (bl, c) in blocks.iter().zip(ch) {
        let l = c.l();
        // L⁻¹ F_i L⁻ᵀ
        let scaled: Vec<(usize, DMatrix<f64>)> = bl
            .coef
            .iter()
            .map(|(i, fi)| {
                let a = l.solve_lower_triangular(fi).expect("nonsingular factor");
                let b = l
                    .solve_lower_triangular(&a.transpose())
                    .expect("nonsingular factor");
                (*i, b)
            })
            .collect();
        for (a, (i, fa)) in scaled.iter().enumerate() {
            g[*i] += fa.trace();
            for (j, fb) in &scaled[a..] {
                let v = fa.dot(fb);
                h[(*i, *j)] += v;
                if i != j {
                    h[(*j, *i)] += v;
                }
            }
        }
    }
    (g, h)
}

/// Newton direction −H⁻¹g with Jacobi scaling; falls back to a regularized solve.
fn newton_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let k = g.len();
    let d = DVector::from_fn(k, |i, _| {
        let v = h[(i, i)];
        if v > 0.0 {
            1.0 / v.sqrt()
        } else {
            1.0
        }
    });
    let hs = DMatrix::from_fn(k, k, |i, j| h[(i, j)] * d[i] * d[j]);
    let gs = g.component_mul(&d);
    let mut reg = 0.0;
    for _ in 0..8 {
        let m = &hs + DMatrix::identity(k, k) * reg;
        if let Some(c) = Cholesky::new(m) {
            let x = c.solve(&gs);
            if x.iter().all(|v| v.is_finite()) {
                return Some(-x.component_mul(&d));
            }
        }
        reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_lower_bound() {
        // minimize t s.t. 1 − t ≤ 0
        let mut l = VarLayout::new();
        let t = l.scalar("t");
        let mut p = SdpProblem::new(l);
        p.objective[0] = 1.0;
        p.add("t>=1", |x| DMatrix::from_element(1, 1, 1.0 - x[0]));
        let sol = solve_sdp(&p).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!(
            (p.layout.value(&sol.x, t) - 1.0).abs() < 1e-7,
            "{}",
            sol.x[0]
        );
    }

    fn lyapunov(a: DMatrix<f64>) -> (SdpProblem, VarId) {
        let mut l = VarLayout::new();
        let pid = l.sym("P", a.nrows());
        let lay = l.clone();
        let mut p = SdpProblem::new(l);
        let a2 = a.clone();
        let lay2 = lay.clone();
        p.push(
            LmiBlock::from_affine("decrease", lay.len(), move |x| {
                let pm = lay.matrix(x, pid);
                a2.transpose() * &pm + &pm * &a2
            })
            .with_margin(1e-6),
        );
        p.push(
            LmiBlock::from_affine("P>0", lay2.len(), move |x| -lay2.matrix(x, pid))
                .with_margin(1e-6),
        );
        let lay3 = p.layout.clone();
        p.push(LmiBlock::from_affine("P<I", lay3.len(), move |x| {
            lay3.matrix(x, pid) - DMatrix::identity(2, 2)
        }));
        (p, pid)
    }

    #[test]
    fn lyapunov_stable_and_unstable() {
        let (p, pid) = lyapunov(DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])));
        let sol = solve_sdp(&p).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        assert!(p.verify(&sol.x));
        let pm = p.layout.matrix(&sol.x, pid);
        assert!(crate::matutil::min_eig(&pm) > 0.0);

        let (p, _) = lyapunov(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0])));
        let sol = solve_sdp(&p).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn positive_definite_feasibility() {
        let mut l = VarLayout::new();
        let pid = l.sym("P", 2);
        let lay = l.clone();
        let mut p = SdpProblem::new(l);
        p.add("-P<0", move |x| -lay.matrix(x, pid));
        let sol = solve_sdp(&p).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        assert!(sol.margin > 0.0);
    }

    #[test]
    fn affine_extraction_round_trip() {
        let mut l = VarLayout::new();
        let pid = l.sym("P", 3);
        let yid = l.full("Y", 2, 3);
        let lay = l.clone();
        let f = move |x: &DVector<f64>| {
            let pm = lay.matrix(x, pid);
            let y = lay.matrix(x, yid);
            let mut m = DMatrix::zeros(5, 5);
            m.view_mut((0, 0), (3, 3))
                .copy_from(&(&pm * 2.0 - DMatrix::identity(3, 3)));
            m.view_mut((3, 0), (2, 3)).copy_from(&y);
            m.view_mut((0, 3), (3, 2)).copy_from(&y.transpose());
            m
        };
        let block = LmiBlock::from_affine("b", l.len(), &f);
        let x = DVector::from_fn(l.len(), |i, _| (i as f64 * 0.37).sin());
        assert!((block.eval(&x) - f(&x)).amax() < 1e-14);
        let mut x2 = DVector::zeros(l.len());
        l.set_matrix(&mut x2, pid, &l.matrix(&x, pid));
        l.set_matrix(&mut x2, yid, &l.matrix(&x, yid));
        assert_eq!(x, x2);
    }

    #[test]
    fn minimize_max_eigenvalue() {
        // minimize t s.t. diag(1, 3) + x·[[0,1],[1,0]] ⪯ t I → x = 0, t = 3
        let mut l = VarLayout::new();
        l.scalar("x");
        l.scalar("t");
        let mut p = SdpProblem::new(l);
        p.objective[1] = 1.0;
        p.add("eig", |v| {
            DMatrix::from_row_slice(2, 2, &[1.0 - v[1], v[0], v[0], 3.0 - v[1]])
        });
        let sol = solve_sdp(&p).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.x[1] - 3.0).abs() < 1e-6);
        assert!(sol.x[0].abs() < 1e-3);
    }
}
