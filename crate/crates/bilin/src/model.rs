//! Ground-truth bilinear plant, used for data generation and as a test oracle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matutil::{kron_eye_vec, kron_vec};
use crate::serde_mat;

pub const EQ_TOL: f64 = 1e-6;
pub const DIVERGENCE_BOUND: f64 = 1e9;
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    #[serde(alias = "dt", alias = "discrete")]
    DiscreteTime,
    #[serde(alias = "ct", alias = "continuous")]
    ContinuousTime,
}

/// x∘ = A x + B u + C (I_m ⊗ x) u + d, where x∘ is ẋ or x⁺.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemFile", into = "SystemFile")]
pub struct BilinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub domain: Domain,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
struct SystemFile {
    #[serde(rename = "n")]
    n: usize,
    #[serde(rename = "m")]
    m: usize,
    #[serde(rename = "domain")]
    domain: Domain,
    #[serde(with = "serde_mat::matrix")]
    a: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    b: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    c: DMatrix<f64>,
    #[serde(rename = "d", with = "serde_mat::vector")]
    d: DVector<f64>,
}

impl TryFrom<SystemFile> for BilinearSystem {
    type Error = Error;

    fn try_from(f: SystemFile) -> Result<Self> {
        // an n×0 matrix serializes as n empty rows, which reads back as n×0 only via the header
        let fix = |m: DMatrix<f64>, r: usize, c: usize| {
            if m.is_empty() {
                DMatrix::zeros(r, c)
            } else {
                m
            }
        };
        let sys = BilinearSystem {
            a: fix(f.a, f.n, f.n),
            b: fix(f.b, f.n, f.m),
            c: fix(f.c, f.n, f.n * f.m),
            d: f.d,
            domain: f.domain,
        };
        sys.validate()?;
        if sys.n() != f.n || sys.m() != f.m {
            return Err(Error::DimMismatch(
                "header n/m disagree with matrices".into(),
            ));
        }
        Ok(sys)
    }
}

impl From<BilinearSystem> for SystemFile {
    fn from(s: BilinearSystem) -> Self {
        SystemFile {
            n: s.n(),
            m: s.m(),
            domain: s.domain,
            a: s.a,
            b: s.b,
            c: s.c,
            d: s.d,
        }
    }
}

impl BilinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DVector<f64>,
        domain: Domain,
    ) -> Result<Self> {
        let s = BilinearSystem { a, b, c, d, domain };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let ok = self.a.ncols() == n
            && self.b.nrows() == n
            && self.c.nrows() == n
            && self.c.ncols() == m * n
            && self.d.len() == n;
        if ok {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!(
                "A {:?}, B {:?}, C {:?}, d {}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.len()
            )))
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// The stacked parameter matrix [A B C d], n×(n+m+mn+1).
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut z = DMatrix::zeros(n, n + m + m * n + 1);
        z.view_mut((0, 0), (n, n)).copy_from(&self.a);
        z.view_mut((0, n), (n, m)).copy_from(&self.b);
        z.view_mut((0, n + m), (n, m * n)).copy_from(&self.c);
        z.set_column(n + m + m * n, &self.d);
        z
    }

    /// Inverse of [`stacked`](Self::stacked).
    pub fn from_stacked(z: &DMatrix<f64>, m: usize, domain: Domain) -> Result<Self> {
        let n = z.nrows();
        if z.ncols() != n + m + m * n + 1 {
            return Err(Error::DimMismatch("stacked parameter width".into()));
        }
        Self::new(
            z.columns(0, n).into_owned(),
            z.columns(n, m).into_owned(),
            z.columns(n + m, m * n).into_owned(),
            z.column(n + m + m * n).into_owned(),
            domain,
        )
    }

    /// The averaged Ćuk converter model.
    pub fn cuk() -> Self {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(5, 5, &[
            -1.0, -1.0, 0.0, 0.0, 0.0,
            0.01, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, -0.5, 0.0, -1.0,
            0.0, 0.0, 0.0, -150.0, 10.0,
            0.0, 0.0, 0.1, -0.1, 0.0,
        ]);
        #[rustfmt::skip]
        let c = DMatrix::from_row_slice(5, 5, &[
            0.0, 1.0, 0.0, 0.0, 0.0,
            -0.01, 0.0, -0.01, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0,
        ]);
        BilinearSystem {
            a,
            b: DMatrix::zeros(5, 1),
            c,
            d: DVector::from_vec(vec![30.0, 0.0, 0.0, 0.0, 0.0]),
            domain: Domain::ContinuousTime,
        }
    }

    pub fn cuk_setpoint() -> Setpoint {
        Setpoint {
            xbar: DVector::from_vec(vec![2.23, 58.76, 2.00, 2.00, 30.00]),
            ubar: Some(DVector::from_element(1, 0.527480)),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cuk" => Some(Self::cuk()),
            _ => None,
        }
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n() || u.len() != self.m() {
            return Err(Error::DimMismatch(format!(
                "x has {} entries (want {}), u has {} (want {})",
                x.len(),
                self.n(),
                u.len(),
                self.m()
            )));
        }
        Ok(())
    }

    /// A x + B u + C (u ⊗ x) + d.
    pub fn eval_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        Ok(self.eval_unchecked(x, u))
    }

    fn eval_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c * kron_vec(u, x) + &self.d
    }

    pub fn closed_loop_field(&self, law: &ControlLaw, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = law.input(x);
        self.eval_dynamics(x, &u)
    }

    /// Split the closed-loop field into the part driven by x̃ and the constant offset.
    pub fn mu_nu_decompose(
        &self,
        law: &ControlLaw,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_dims(x, &law.ubar)?;
        let xt = x - &law.xbar;
        let z = self.stacked();
        let drive = &z * mu_matrix(&law.k, &law.xbar, &law.ubar, &xt) * &xt;
        let offset = &z * nu_bar(&law.ubar, &law.xbar);
        Ok((drive, offset))
    }

    /// Least-squares ū solving the equilibrium equation at x̄.
    pub fn equilibrium_input(&self, xbar: &DVector<f64>) -> Result<EquilibriumInput> {
        let (n, m) = (self.n(), self.m());
        if xbar.len() != n {
            return Err(Error::DimMismatch("xbar length".into()));
        }
        let coef = &self.b + &self.c * kron_eye_vec(m, xbar);
        let mut rhs = -(&self.a * xbar) - &self.d;
        if self.domain == Domain::DiscreteTime {
            rhs += xbar;
        }
        let svd = coef.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = 1e-12 * smax.max(1.0) * n.max(m) as f64;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        let ubar = svd
            .solve(&rhs, tol)
            .map_err(|e| Error::SolverFailure(e.to_string()))?;
        let residual = (&coef * &ubar - &rhs).norm();
        Ok(EquilibriumInput {
            ubar,
            residual,
            underdetermined: rank < m,
        })
    }

    /// State x̄ with (x̄, ū) an equilibrium, i.e. the solution of (A + Σ ū_j C_j) x̄ = −B ū − d
    /// in CT (A − I in DT), where C = [C_1 … C_m].
    pub fn equilibrium_state(&self, ubar: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, m) = (self.n(), self.m());
        if ubar.len() != m {
            return Err(Error::DimMismatch("ubar length".into()));
        }
        let mut a = self.a.clone();
        for j in 0..m {
            a += self.c.columns(j * n, n) * ubar[j];
        }
        if self.domain == Domain::DiscreteTime {
            a -= DMatrix::identity(n, n);
        }
        let rhs = -(&self.b * ubar) - &self.d;
        a.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::BadParam("equilibrium state is not unique for this input".into()))
    }

    /// Field used by the integrator, with an optional additive disturbance.
    fn field(&self, x: &DVector<f64>, u: &DVector<f64>, e: Option<&DVector<f64>>) -> DVector<f64> {
        let f = self.eval_unchecked(x, u);
        match e {
            Some(e) => f + e,
            None => f,
        }
    }

    /// One RK4 step of length h with the input held by `input`.
    pub fn rk4_step<F>(
        &self,
        x: &DVector<f64>,
        h: f64,
        input: F,
        e: Option<&DVector<f64>>,
    ) -> DVector<f64>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let k1 = self.field(x, &input(x), e);
        let x2 = x + &k1 * (h / 2.0);
        let k2 = self.field(&x2, &input(&x2), e);
        let x3 = x + &k2 * (h / 2.0);
        let k3 = self.field(&x3, &input(&x3), e);
        let x4 = x + &k3 * h;
        let k4 = self.field(&x4, &input(&x4), e);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Simulate the plant. For CT, `horizon` is a time; for DT, a step count.
    pub fn simulate(
        &self,
        input: &Input,
        x0: &DVector<f64>,
        horizon: f64,
        opts: SimOptions,
    ) -> Result<Trajectory> {
        if x0.len() != self.n() {
            return Err(Error::DimMismatch("x0 length".into()));
        }
        input.check(self)?;
        let mut traj = Trajectory::default();
        let mut x = x0.clone();
        let stride = opts.stride.max(1);
        match self.domain {
            Domain::DiscreteTime => {
                let steps = horizon.max(0.0).round() as usize;
                for k in 0..steps {
                    let u = input.at(k as f64, &x);
                    if k % stride == 0 {
                        traj.push(k as f64, &x, &u);
                    }
                    x = self.eval_unchecked(&x, &u);
                    guard(&x, (k + 1) as f64)?;
                }
                let u = input.at(steps as f64, &x);
                traj.push(steps as f64, &x, &u);
            }
            Domain::ContinuousTime => {
                let h = opts.step;
                if h <= 0.0 || !h.is_finite() {
                    return Err(Error::BadParam(format!("integration step {h}")));
                }
                let steps = (horizon.max(0.0) / h).round() as usize;
                for k in 0..steps {
                    let t = k as f64 * h;
                    if k % stride == 0 {
                        traj.push(t, &x, &input.at(t, &x));
                    }
                    x = match (input, opts.integrator) {
                        (Input::Law(law), Integrator::Rk4) => {
                            self.rk4_step(&x, h, |y| law.input(y), None)
                        }
                        (Input::Law(law), Integrator::Rosenbrock2) => {
                            self.ros2_step(&x, h, |y| law.input(y), Some(&law.k))?
                        }
                        (Input::Signal { .. }, method) => {
                            let u = input.at(t, &x);
                            match method {
                                Integrator::Rk4 => self.rk4_step(&x, h, |_| u.clone(), None),
                                Integrator::Rosenbrock2 => {
                                    self.ros2_step(&x, h, |_| u.clone(), None)?
                                }
                            }
                        }
                    };
                    guard(&x, t + h)?;
                }
                let t = steps as f64 * h;
                traj.push(t, &x, &input.at(t, &x));
            }
        }
        Ok(traj)
    }

    /// Jacobian of x ↦ A x + B u(x) + C (u(x) ⊗ x) + d, where u(x) = K x + const (K = 0 for open loop).
    pub fn field_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        k: Option<&DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let n = self.n();
        let mut j = self.a.clone();
        for (i, &ui) in u.iter().enumerate() {
            j += self.c.columns(i * n, n) * ui;
        }
        if let Some(k) = k {
            j += &self.b * k;
            for i in 0..self.m() {
                j += self.c.columns(i * n, n) * x * k.row(i);
            }
        }
        j
    }

    /// One step of the L-stable two-stage Rosenbrock method (γ = 1 + 1/√2).
    pub fn ros2_step<F>(
        &self,
        x: &DVector<f64>,
        h: f64,
        input: F,
        k: Option<&DMatrix<f64>>,
    ) -> Result<DVector<f64>>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let g = 1.0 + std::f64::consts::FRAC_1_SQRT_2;
        let n = self.n();
        let u = input(x);
        let w = DMatrix::identity(n, n) - self.field_jacobian(x, &u, k) * (g * h);
        let lu = w.lu();
        let f1 = self.eval_unchecked(x, &u);
        let k1 = lu.solve(&f1).ok_or(Error::NonFinite(h))?;
        let x2 = x + &k1 * h;
        let f2 = self.eval_unchecked(&x2, &input(&x2));
        let k2 = lu.solve(&(f2 - &k1 * 2.0)).ok_or(Error::NonFinite(h))?;
        Ok(x + (k1 * 1.5 + k2 * 0.5) * h)
    }
}

fn guard(x: &DVector<f64>, t: f64) -> Result<()> {
    if x.iter()
        .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND)
    {
        Ok(())
    } else {
        Err(Error::NonFinite(t))
    }
}

/// μ(K, x̃) = [I; K; (I_m⊗x̄)K + ū⊗I_n + (I_m⊗x̃)K; 0].
pub fn mu_matrix(
    k: &DMatrix<f64>,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    xt: &DVector<f64>,
) -> DMatrix<f64> {
    let (m, n) = k.shape();
    let mut mu = DMatrix::zeros(n + m + m * n + 1, n);
    mu.view_mut((0, 0), (n, n)).fill_with_identity();
    mu.view_mut((n, 0), (m, n)).copy_from(k);
    let bil = kron_eye_vec(m, xbar) * k
        + ubar.kronecker(&DMatrix::<f64>::identity(n, n))
        + kron_eye_vec(m, xt) * k;
    mu.view_mut((n + m, 0), (m * n, n)).copy_from(&bil);
    mu
}

/// ν̄(ū, x̄) = [x̄; ū; (I_m⊗x̄)ū; 1].
pub fn nu_bar(ubar: &DVector<f64>, xbar: &DVector<f64>) -> DVector<f64> {
    let (n, m) = (xbar.len(), ubar.len());
    let mut v = DVector::zeros(n + m + m * n + 1);
    v.rows_mut(0, n).copy_from(xbar);
    v.rows_mut(n, m).copy_from(ubar);
    v.rows_mut(n + m, m * n).copy_from(&kron_vec(ubar, xbar));
    v[n + m + m * n] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumInput {
    pub ubar: DVector<f64>,
    pub residual: f64,
    pub underdetermined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setpoint {
    #[serde(with = "serde_mat::vector")]
    pub xbar: DVector<f64>,
    #[serde(default)]
    pub ubar: Option<DVector<f64>>,
}

impl Setpoint {
    /// Checks ū (if any) against the equilibrium equation within EQ_TOL·(1+|x̄|).
    pub fn validate(&self, sys: &BilinearSystem) -> Result<f64> {
        let Some(ubar) = &self.ubar else {
            return Ok(0.0);
        };
        let mut r = sys.eval_dynamics(&self.xbar, ubar)?;
        if sys.domain == Domain::DiscreteTime {
            r -= &self.xbar;
        }
        let res = r.norm();
        if res > EQ_TOL * (1.0 + self.xbar.norm()) {
            return Err(Error::BadParam(format!(
                "setpoint residual {res:.3e} exceeds tolerance"
            )));
        }
        Ok(res)
    }
}

/// u(x) = K (x − x̄) + ū.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    pub k: DMatrix<f64>,
    pub xbar: DVector<f64>,
    pub ubar: DVector<f64>,
}

impl ControlLaw {
    pub fn new(k: DMatrix<f64>, xbar: DVector<f64>, ubar: DVector<f64>) -> Result<Self> {
        if k.nrows() != ubar.len() || k.ncols() != xbar.len() {
            return Err(Error::DimMismatch("K must be m×n".into()));
        }
        Ok(ControlLaw { k, xbar, ubar })
    }

    pub fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k * (x - &self.xbar) + &self.ubar
    }
}

/// Input source for simulation.
#[derive(Debug, Clone)]
pub enum Input {
    Law(ControlLaw),
    /// Zero-order hold of the columns of `u`, each held for `period` (one step in DT).
    Signal {
        u: DMatrix<f64>,
        period: f64,
    },
}

impl Input {
    fn check(&self, sys: &BilinearSystem) -> Result<()> {
        let m = match self {
            Input::Law(l) => {
                if l.xbar.len() != sys.n() {
                    return Err(Error::DimMismatch("law xbar".into()));
                }
                l.ubar.len()
            }
            Input::Signal { u, period } => {
                if *period <= 0.0 || u.ncols() == 0 {
                    return Err(Error::BadParam(
                        "empty signal or non-positive period".into(),
                    ));
                }
                u.nrows()
            }
        };
        if m != sys.m() {
            return Err(Error::DimMismatch("input width".into()));
        }
        Ok(())
    }

    fn at(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Input::Law(l) => l.input(x),
            Input::Signal { u, period } => {
                let idx = ((t / period + 1e-9).floor() as usize).min(u.ncols() - 1);
                u.column(idx).into_owned()
            }
        }
    }
}

/// Fixed-step integrator for continuous-time simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    #[default]
    Rk4,
    /// Linearly implicit, for stiff closed loops with large gains.
    Rosenbrock2,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub step: f64,
    /// Record every `stride`-th step (the final state is always recorded).
    pub stride: usize,
    pub integrator: Integrator,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            step: DEFAULT_STEP,
            stride: 1,
            integrator: Integrator::Rk4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Trajectory {
    fn push(&mut self, t: f64, x: &DVector<f64>, u: &DVector<f64>) {
        self.t.push(t);
        self.x.push(x.clone());
        self.u.push(u.clone());
    }

    pub fn last(&self) -> Option<&DVector<f64>> {
        self.x.last()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.x.first().map_or(0, |x| x.len());
        let m = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        wr.write_record(&header)?;
        for k in 0..self.t.len() {
            let mut rec = vec![self.t[k].to_string()];
            rec.extend(self.x[k].iter().map(|v| v.to_string()));
            rec.extend(self.u[k].iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, c: f64, d: f64, domain: Domain) -> BilinearSystem {
        BilinearSystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
            DVector::from_element(1, d),
            domain,
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn scalar_expansion() {
        let s = scalar(1.0, 2.0, 3.0, 4.0, Domain::ContinuousTime);
        assert_eq!(s.eval_dynamics(&v(&[5.0]), &v(&[6.0])).unwrap()[0], 111.0);
    }

    #[test]
    fn zero_system_is_zero() {
        let s = BilinearSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            Domain::ContinuousTime,
        )
        .unwrap();
        assert_eq!(
            s.eval_dynamics(&v(&[1.0, -3.0]), &v(&[2.0])).unwrap(),
            DVector::zeros(2)
        );
    }

    #[test]
    fn cuk_setpoint_residual() {
        let s = BilinearSystem::cuk();
        let sp = BilinearSystem::cuk_setpoint();
        let r = s
            .eval_dynamics(&sp.xbar, sp.ubar.as_ref().unwrap())
            .unwrap();
        assert!(r.norm() <= 1e-2, "{}", r.norm());
    }

    #[test]
    fn equilibrium_inputs() {
        let s = BilinearSystem::cuk();
        let eq = s
            .equilibrium_input(&BilinearSystem::cuk_setpoint().xbar)
            .unwrap();
        assert!((eq.ubar[0] - 0.527480).abs() < 1e-3, "{}", eq.ubar[0]);
        let s = scalar(-1.0, 1.0, 0.0, 0.0, Domain::ContinuousTime);
        assert!((s.equilibrium_input(&v(&[2.0])).unwrap().ubar[0] - 2.0).abs() < 1e-12);
        let s = scalar(0.3, 1.0, 0.5, 0.0, Domain::DiscreteTime);
        assert_eq!(s.equilibrium_input(&v(&[0.0])).unwrap().ubar[0], 0.0);
    }

    #[test]
    fn rank_deficient_equilibrium_is_flagged() {
        let s = BilinearSystem::cuk();
        let eq = s.equilibrium_input(&DVector::zeros(5)).unwrap();
        assert!(eq.underdetermined);
    }

    #[test]
    fn equilibrium_law_has_zero_field() {
        let s = scalar(-1.0, 1.0, 0.0, 0.0, Domain::ContinuousTime);
        let law = ControlLaw::new(DMatrix::from_element(1, 1, -0.7), v(&[2.0]), v(&[2.0])).unwrap();
        assert_eq!(s.closed_loop_field(&law, &v(&[2.0])).unwrap()[0], 0.0);
        let (drive, offset) = s.mu_nu_decompose(&law, &v(&[2.0])).unwrap();
        assert_eq!(drive[0], 0.0);
        assert_eq!(offset[0], 0.0);
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let s = scalar(-1.0, 0.0, 0.0, 0.0, Domain::ContinuousTime);
        let sig = Input::Signal {
            u: DMatrix::zeros(1, 1),
            period: 1.0,
        };
        let tr = s
            .simulate(&sig, &v(&[1.0]), 1.0, SimOptions::default())
            .unwrap();
        assert!((tr.last().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(*tr.t.last().unwrap(), 1.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let s = scalar(-1.0, 0.0, 0.0, 0.0, Domain::ContinuousTime);
        let sig = Input::Signal {
            u: DMatrix::zeros(1, 1),
            period: 1.0,
        };
        let err = |h: f64| {
            let tr = s
                .simulate(
                    &sig,
                    &v(&[1.0]),
                    1.0,
                    SimOptions {
                        step: h,
                        stride: 1000,
                        ..Default::default()
                    },
                )
                .unwrap();
            (tr.last().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.5, "{ratio}");
    }

    #[test]
    fn divergence_is_reported() {
        let s = scalar(2.0, 0.0, 0.0, 0.0, Domain::DiscreteTime);
        let sig = Input::Signal {
            u: DMatrix::zeros(1, 1),
            period: 1.0,
        };
        assert!(matches!(
            s.simulate(&sig, &v(&[1.0]), 100.0, SimOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dt_iteration_is_exact() {
        let s = scalar(0.5, 1.0, 0.0, 0.0, Domain::DiscreteTime);
        let sig = Input::Signal {
            u: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            period: 1.0,
        };
        let tr = s
            .simulate(&sig, &v(&[4.0]), 2.0, SimOptions::default())
            .unwrap();
        assert_eq!(
            tr.x.iter().map(|x| x[0]).collect::<Vec<_>>(),
            vec![4.0, 3.0, 1.5]
        );
    }

    #[test]
    fn json_round_trip() {
        let s = BilinearSystem::cuk();
        let txt = serde_json::to_string(&s).unwrap();
        let back: BilinearSystem = serde_json::from_str(&txt).unwrap();
        assert_eq!(s, back);
        assert!(txt.contains("\"n\":5"));
    }

    #[test]
    fn stacked_round_trip() {
        let s = BilinearSystem::cuk();
        let z = s.stacked();
        assert_eq!(z.ncols(), 12);
        assert_eq!(
            BilinearSystem::from_stacked(&z, 1, Domain::ContinuousTime).unwrap(),
            s
        );
    }

    #[test]
    fn cuk_equilibrium_state_rounds_to_quoted_setpoint() {
        let s = BilinearSystem::cuk();
        let x = s.equilibrium_state(&v(&[0.527480])).unwrap();
        let quoted = BilinearSystem::cuk_setpoint().xbar;
        assert!((x - quoted).amax() < 5e-3);
    }

    #[test]
    fn equilibrium_state_zeroes_the_field() {
        let s = scalar(-1.0, 1.0, 0.5, 0.2, Domain::ContinuousTime);
        let u = v(&[0.4]);
        let x = s.equilibrium_state(&u).unwrap();
        assert!(s.eval_dynamics(&x, &u).unwrap()[0].abs() < 1e-12);
        let d = scalar(0.5, 1.0, 0.0, 0.0, Domain::DiscreteTime);
        assert!((d.equilibrium_state(&v(&[1.0])).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ros2_is_second_order_and_stiffly_stable() {
        let s = scalar(-1.0, 0.0, 0.0, 0.0, Domain::ContinuousTime);
        let err = |h: f64| {
            let mut x = v(&[1.0]);
            for _ in 0..(1.0 / h).round() as usize {
                x = s.ros2_step(&x, h, |_| v(&[0.0]), None).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
        let stiff = scalar(-1e5, 0.0, 0.0, 0.0, Domain::ContinuousTime);
        let mut x = v(&[1.0]);
        for _ in 0..100 {
            x = stiff.ros2_step(&x, 1e-3, |_| v(&[0.0]), None).unwrap();
        }
        assert!(x[0].abs() < 1e-6);
    }

    #[test]
    fn closed_loop_jacobian_matches_finite_differences() {
        let s = BilinearSystem::cuk();
        let k = DMatrix::from_row_slice(1, 5, &[0.1, -0.2, 0.3, 0.05, -0.4]);
        let law =
            ControlLaw::new(k.clone(), BilinearSystem::cuk_setpoint().xbar, v(&[0.5])).unwrap();
        let x = v(&[2.0, 50.0, 1.0, 3.0, 20.0]);
        let j = s.field_jacobian(&x, &law.input(&x), Some(&k));
        for c in 0..5 {
            let mut e = DVector::zeros(5);
            e[c] = 1e-6;
            let fd = (s.closed_loop_field(&law, &(&x + &e)).unwrap()
                - s.closed_loop_field(&law, &(&x - &e)).unwrap())
                / 2e-6;
            assert!((fd - j.column(c)).amax() < 1e-6);
        }
    }
}
