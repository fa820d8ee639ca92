//! Open-loop data collection and the data matrices.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matutil::{is_psd, kron_vec, SymMatrix};
use crate::model::{BilinearSystem, Domain, Trajectory};
use crate::serde_mat;

pub const RANK_TOL: f64 = 1e-8;
pub const NOISE_MARGIN: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(with = "serde_mat::sym")]
    pub noise_bound: SymMatrix,
    #[serde(rename = "X1", with = "serde_mat::matrix")]
    pub x1: DMatrix<f64>,
    #[serde(rename = "X0", with = "serde_mat::matrix")]
    pub x0: DMatrix<f64>,
    #[serde(rename = "U0", with = "serde_mat::matrix")]
    pub u0: DMatrix<f64>,
    #[serde(rename = "S0", with = "serde_mat::matrix")]
    pub s0: DMatrix<f64>,
}

impl Dataset {
    /// Assemble a dataset from raw columns; S0 is rebuilt from X0 and U0.
    pub fn from_parts(
        x1: DMatrix<f64>,
        x0: DMatrix<f64>,
        u0: DMatrix<f64>,
        noise_bound: SymMatrix,
    ) -> Result<Self> {
        let t = x0.ncols();
        if x1.shape() != x0.shape() || u0.ncols() != t || noise_bound.dim() != x0.nrows() {
            return Err(Error::DimMismatch("dataset parts".into()));
        }
        let s0 = build_s0(&x0, &u0);
        Ok(Dataset {
            t,
            noise_bound,
            x1,
            x0,
            u0,
            s0,
        })
    }

    pub fn n(&self) -> usize {
        self.x0.nrows()
    }

    pub fn m(&self) -> usize {
        self.u0.nrows()
    }

    /// Checks shapes and that S0 matches the Kronecker rows of X0 and U0.
    pub fn validate(&self) -> Result<()> {
        let (n, m, t) = (self.n(), self.m(), self.t);
        let ok = self.x0.ncols() == t
            && self.x1.shape() == (n, t)
            && self.u0.ncols() == t
            && self.s0.shape() == (m * n, t)
            && self.noise_bound.dim() == n;
        if !ok {
            return Err(Error::DimMismatch("dataset matrices".into()));
        }
        if build_s0(&self.x0, &self.u0) != self.s0 {
            return Err(Error::Parse("S0 is not u ⊗ x column-wise".into()));
        }
        Ok(())
    }

    /// W0 = [X0; U0; S0; O0].
    pub fn w0(&self) -> DMatrix<f64> {
        let (n, m, t) = (self.n(), self.m(), self.t);
        let mut w = DMatrix::zeros(n + m + m * n + 1, t);
        w.view_mut((0, 0), (n, t)).copy_from(&self.x0);
        w.view_mut((n, 0), (m, t)).copy_from(&self.u0);
        w.view_mut((n + m, 0), (m * n, t)).copy_from(&self.s0);
        w.row_mut(n + m + m * n).fill(1.0);
        w
    }

    /// Same data with a different noise bound.
    pub fn with_noise_bound(&self, bound: SymMatrix) -> Self {
        Dataset {
            noise_bound: bound,
            ..self.clone()
        }
    }
}

pub fn build_s0(x0: &DMatrix<f64>, u0: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = x0.shape();
    let m = u0.nrows();
    let mut s = DMatrix::zeros(m * n, t);
    for i in 0..t {
        s.set_column(
            i,
            &kron_vec(&u0.column(i).into_owned(), &x0.column(i).into_owned()),
        );
    }
    s
}

/// I.i.d. uniform samples on [lo, hi] per channel.
pub fn generate_input(m: usize, t: usize, range: (f64, f64), seed: u64) -> Result<DMatrix<f64>> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || (lo == hi && lo != 0.0) {
        return Err(Error::BadRange(lo, hi));
    }
    if lo == hi {
        return Ok(DMatrix::zeros(m, t));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DMatrix::from_fn(m, t, |_, _| rng.gen_range(lo..hi)))
}

/// Injected process-noise samples e(t_i), stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub e0: DMatrix<f64>,
}

impl NoiseRealization {
    pub fn zeros(n: usize, t: usize) -> Self {
        NoiseRealization {
            e0: DMatrix::zeros(n, t),
        }
    }

    /// E0 E0ᵀ ⪯ ΞΞᵀ.
    pub fn is_member(&self, bound: &SymMatrix) -> bool {
        let gram = &self.e0 * self.e0.transpose();
        is_psd(&SymMatrix::symmetrize(bound.as_matrix() - gram), false)
    }
}

/// Each column uniform in the ball of radius 0.99·√(λmin(ΞΞᵀ)/T).
pub fn generate_noise(bound: &SymMatrix, t: usize, seed: u64) -> NoiseRealization {
    let n = bound.dim();
    let lmin = bound.min_eigenvalue().max(0.0);
    let r = NOISE_MARGIN * (lmin / t.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e0 = DMatrix::zeros(n, t);
    if r == 0.0 {
        return NoiseRealization { e0 };
    }
    for i in 0..t {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let radius = r * rng.gen::<f64>().powf(1.0 / n as f64);
        let nrm = g.norm();
        if nrm > 0.0 {
            e0.set_column(i, &(g * (radius / nrm)));
        }
    }
    NoiseRealization { e0 }
}

/// Column sampling period and integration step for continuous-time collection.
#[derive(Debug, Clone, Copy)]
pub struct CollectOptions {
    pub period: f64,
    pub step: f64,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions {
            period: 0.1,
            step: crate::model::DEFAULT_STEP,
        }
    }
}

/// Run the open-loop experiment and return the dataset plus the dense trajectory.
pub fn collect(
    sys: &BilinearSystem,
    input: &DMatrix<f64>,
    noise: &NoiseRealization,
    noise_bound: &SymMatrix,
    x0: &DVector<f64>,
    opts: CollectOptions,
) -> Result<(Dataset, Trajectory)> {
    let (n, m) = (sys.n(), sys.m());
    let t = input.ncols();
    if input.nrows() != m || noise.e0.shape() != (n, t) || x0.len() != n || noise_bound.dim() != n {
        return Err(Error::DimMismatch("collect inputs".into()));
    }
    let mut xs0 = DMatrix::zeros(n, t);
    let mut xs1 = DMatrix::zeros(n, t);
    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    let (steps, h) = match sys.domain {
        Domain::DiscreteTime => (1, 1.0),
        Domain::ContinuousTime => {
            if opts.period <= 0.0 || opts.step <= 0.0 {
                return Err(Error::BadParam(
                    "sampling period and step must be positive".into(),
                ));
            }
            let steps = (opts.period / opts.step).ceil().max(1.0) as usize;
            (steps, opts.period / steps as f64)
        }
    };
    let mut time = 0.0;
    for i in 0..t {
        let u = input.column(i).into_owned();
        let e = noise.e0.column(i).into_owned();
        xs0.set_column(i, &x);
        let xo = sys.eval_dynamics(&x, &u)? + &e;
        xs1.set_column(i, &xo);
        match sys.domain {
            Domain::DiscreteTime => {
                traj.t.push(time);
                traj.x.push(x.clone());
                traj.u.push(u.clone());
                x = xo;
                time += 1.0;
            }
            Domain::ContinuousTime => {
                for k in 0..steps {
                    if k % 10 == 0 {
                        traj.t.push(time);
                        traj.x.push(x.clone());
                        traj.u.push(u.clone());
                    }
                    x = sys.rk4_step(&x, h, |_| u.clone(), Some(&e));
                    time += h;
                }
            }
        }
        if !x
            .iter()
            .all(|v| v.is_finite() && v.abs() <= crate::model::DIVERGENCE_BOUND)
        {
            return Err(Error::NonFinite(time));
        }
    }
    let ds = Dataset::from_parts(xs1, xs0, input.clone(), noise_bound.clone())?;
    Ok((ds, traj))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCheck {
    pub full_row_rank: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Assumption-1 check: σmin(W0) > rank_tol·σmax(W0).
pub fn check_rank(ds: &Dataset, rank_tol: f64) -> RankCheck {
    let w = ds.w0();
    if w.ncols() < w.nrows() {
        return RankCheck {
            full_row_rank: false,
            sigma_min: 0.0,
            sigma_max: w.norm(),
        };
    }
    let sv = w.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    RankCheck {
        full_row_rank: smax > 0.0 && smin > rank_tol * smax,
        sigma_min: smin,
        sigma_max: smax,
    }
}
