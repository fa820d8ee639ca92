//! The set 𝒞 of parameter matrices [A B C d]ᵀ consistent with a dataset.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::{check_rank, Dataset, RANK_TOL};
use crate::matutil::{is_psd_tol, spectral_norm, sqrtm_psd, SymMatrix, PSD_TOL};
use crate::serde_mat;

/// 𝒞 = {Z : (Z − ζ)ᵀ 𝐀 (Z − ζ) ⪯ 𝐐}, with Z of size (n+m+mn+1)×n.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencySet {
    #[serde(rename = "Abold", with = "serde_mat::sym")]
    pub abold: SymMatrix,
    #[serde(skip)]
    pub bbold: DMatrix<f64>,
    #[serde(skip)]
    pub cbold: SymMatrix,
    #[serde(with = "serde_mat::matrix")]
    pub zeta: DMatrix<f64>,
    #[serde(rename = "Q", with = "serde_mat::sym")]
    pub q: SymMatrix,
    #[serde(skip)]
    pub asqrt_inv: SymMatrix,
    #[serde(skip)]
    pub qsqrt: SymMatrix,
    #[serde(skip)]
    pub a_min_eig: f64,
    #[serde(skip)]
    w0: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
}

impl ConsistencySet {
    pub fn build(ds: &Dataset) -> Result<Self> {
        ds.validate()?;
        let rank = check_rank(ds, RANK_TOL);
        if !rank.full_row_rank {
            return Err(Error::RankDeficient(rank.sigma_min));
        }
        let (n, m) = (ds.n(), ds.m());
        let w0 = ds.w0();
        let abold = SymMatrix::symmetrize(&w0 * w0.transpose());
        let bbold = -(&w0 * ds.x1.transpose());
        let cbold = SymMatrix::symmetrize(&ds.x1 * ds.x1.transpose() - ds.noise_bound.as_matrix());

        // W0 = U Σ Vᵀ gives 𝐀^{-1/2} = U Σ⁻¹ Uᵀ and ζ = U Σ⁻¹ Vᵀ X1ᵀ without forming 𝐀⁻¹.
        let svd = w0.clone().svd(true, true);
        let u = svd.u.as_ref().expect("svd u");
        let vt = svd.v_t.as_ref().expect("svd vt");
        let sinv = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
        let asqrt_inv = SymMatrix::symmetrize(u * &sinv * u.transpose());
        let zeta = u * &sinv * (vt * ds.x1.transpose());
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        let a_min_eig = smin * smin;
        if smax * smax / a_min_eig > 1e16 {
            log::warn!(
                "W0 W0ᵀ is ill-conditioned (cond = {:.2e})",
                smax * smax / a_min_eig
            );
        }

        // 𝐁ᵀ𝐀⁻¹𝐁 − 𝐂 = ΞΞᵀ − R Rᵀ, where R is the least-squares residual.
        let resid = &ds.x1 - zeta.transpose() * &w0;
        let q_raw = SymMatrix::symmetrize(ds.noise_bound.as_matrix() - &resid * resid.transpose());
        let (w, v) = q_raw.eigh();
        // roundoff level of R Rᵀ relative to the data, plus the relative PSD slack
        let resid_err = f64::EPSILON * (smax / smin) * ds.x1.norm();
        let tol = PSD_TOL * w.amax().max(ds.noise_bound.as_matrix().amax())
            + 64.0 * resid_err * resid_err;
        if w[0] < -tol {
            return Err(Error::InconsistentNoise(w[0]));
        }
        let w = w.map(|x| if x.abs() <= tol { 0.0 } else { x });
        let q = SymMatrix::symmetrize(&v * DMatrix::from_diagonal(&w) * v.transpose());
        let qsqrt = sqrtm_psd(&q)?;
        Ok(ConsistencySet {
            abold,
            bbold,
            cbold,
            zeta,
            q,
            asqrt_inv,
            qsqrt,
            a_min_eig,
            w0,
            n,
            m,
        })
    }

    /// Number of rows of Z, n + m + mn + 1.
    pub fn rows(&self) -> usize {
        self.n + self.m + self.m * self.n + 1
    }

    pub fn q_is_zero(&self) -> bool {
        self.q.as_matrix().amax() == 0.0
    }

    fn check_z(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.shape() != (self.rows(), self.n) {
            return Err(Error::DimMismatch(format!(
                "Z is {:?}, want {:?}",
                z.shape(),
                (self.rows(), self.n)
            )));
        }
        Ok(())
    }

    /// 𝐐 − (Z − ζ)ᵀ 𝐀 (Z − ζ).
    pub fn form2_matrix(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.w0.transpose() * (z - &self.zeta);
        self.q.as_matrix() - d.transpose() * d
    }

    /// [I Zᵀ] [𝐂 𝐁ᵀ; 𝐁 𝐀] [I; Z].
    pub fn form1_matrix(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let zb = z.transpose() * &self.bbold;
        self.cbold.as_matrix() + &zb + zb.transpose() + z.transpose() * self.abold.as_matrix() * z
    }

    pub fn membership(&self, z: &DMatrix<f64>) -> Result<bool> {
        self.check_z(z)?;
        Ok(is_psd_tol(&self.form2_matrix(z), false, PSD_TOL))
    }

    pub fn membership_form1(&self, z: &DMatrix<f64>) -> Result<bool> {
        self.check_z(z)?;
        Ok(is_psd_tol(&(-self.form1_matrix(z)), false, PSD_TOL))
    }

    /// Z = ζ + 𝐀^{-1/2} Υ 𝐐^{1/2}.
    pub fn sample(&self, upsilon: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if upsilon.shape() != (self.rows(), self.n) {
            return Err(Error::DimMismatch("upsilon shape".into()));
        }
        let nrm = spectral_norm(upsilon);
        if nrm > 1.0 + 1e-12 {
            return Err(Error::UpsilonTooLarge(nrm));
        }
        Ok(&self.zeta + self.asqrt_inv.as_matrix() * upsilon * self.qsqrt.as_matrix())
    }

    /// z̄ = ‖ζ‖ + λmin(𝐀)^{-1/2} ‖𝐐^{1/2}‖.
    pub fn norm_bound(&self) -> f64 {
        spectral_norm(&self.zeta) + spectral_norm(self.qsqrt.as_matrix()) / self.a_min_eig.sqrt()
    }

    pub fn upsilon_dims(&self) -> (usize, usize) {
        (self.rows(), self.n)
    }

    /// Transpose of a member as the stacked [A B C d].
    pub fn params(z: &DMatrix<f64>) -> DMatrix<f64> {
        z.transpose()
    }
}

/// Gaussian matrix rescaled to spectral norm 1 (boundary) or ρ ~ U[0,1].
pub fn random_upsilon(dims: (usize, usize), seed: u64, boundary: bool) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_upsilon_with(&mut rng, dims, boundary)
}

pub fn random_upsilon_with<R: Rng>(
    rng: &mut R,
    dims: (usize, usize),
    boundary: bool,
) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dims.0, dims.1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let rho = if boundary { 1.0 } else { rng.gen::<f64>() };
    let nrm = spectral_norm(&g);
    if nrm == 0.0 {
        return g;
    }
    g * (rho / nrm)
}

/// Worst case of |Zᵀ v| over Z ∈ 𝒞, i.e. max |ζᵀv + 𝐐^{1/2} Υᵀ 𝐀^{-1/2} v| over ‖Υ‖ ≤ 1.
///
/// Υᵀw ranges over the ball of radius |w|, so this is a trust-region problem in 𝐐's eigenbasis.
/// Returns the maximal norm and the maximizing value of Zᵀv.
pub fn worst_case_norm(cs: &ConsistencySet, v: &DVector<f64>) -> (f64, DVector<f64>) {
    let a = cs.zeta.transpose() * v;
    let rad = (cs.asqrt_inv.as_matrix() * v).norm();
    let (lam, vecs) = cs.q.eigh();
    let s = lam.map(|x| x.max(0.0).sqrt());
    let y = max_affine_ball(&a, &s, &vecs, rad);
    let worst = &a + &vecs * DMatrix::from_diagonal(&s) * vecs.transpose() * &y;
    (worst.norm(), worst)
}

/// Maximizer over |y| ≤ r of |a + S y| with S = V diag(s) Vᵀ, s ≥ 0.
fn max_affine_ball(a: &DVector<f64>, s: &DVector<f64>, v: &DMatrix<f64>, r: f64) -> DVector<f64> {
    let n = a.len();
    let smax = s.max();
    if r == 0.0 || smax == 0.0 {
        return DVector::zeros(n);
    }
    // Stationarity gives (μI − S²) y = S a with μ ≥ smax²; in the eigenbasis y = V c.
    let b = v.transpose() * a;
    let smax2 = smax * smax;
    let c_of = |mu: f64| {
        DVector::from_fn(n, |i, _| {
            if s[i] > 0.0 {
                s[i] * b[i] / (mu - s[i] * s[i])
            } else {
                0.0
            }
        })
    };
    let top: Vec<usize> = (0..n).filter(|&i| s[i] >= smax * (1.0 - 1e-12)).collect();
    let top_mass = top.iter().map(|&i| b[i] * b[i]).sum::<f64>().sqrt();
    let c = if top_mass <= 1e-14 * (1.0 + a.norm()) {
        // hard case: μ = smax², leftover radius goes into the top eigenspace
        let mut c = DVector::from_fn(n, |i, _| {
            if top.contains(&i) || s[i] == 0.0 {
                0.0
            } else {
                s[i] * b[i] / (smax2 - s[i] * s[i])
            }
        });
        let left = r * r - c.norm_squared();
        if left >= 0.0 {
            c[top[0]] = left.sqrt();
            c
        } else {
            secular(&c_of, smax2, r)
        }
    } else {
        secular(&c_of, smax2, r)
    };
    v * c
}

/// Solve |c(μ)| = r for μ > pole by bracketing and bisection; |c| decreases in μ.
fn secular<F: Fn(f64) -> DVector<f64>>(c_of: &F, pole: f64, r: f64) -> DVector<f64> {
    let mut lo = pole;
    let mut step = pole * 1e-3 + f64::MIN_POSITIVE;
    let mut hi = pole + step;
    while c_of(hi).norm() > r && hi.is_finite() {
        lo = hi;
        step *= 4.0;
        hi = pole + step;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if c_of(mid).norm() > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = c_of(hi);
    let nrm = c.norm();
    if nrm > 0.0 {
        c * (r / nrm)
    } else {
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(noise: f64) -> Dataset {
        // x∘ = −x + u + 0.5 u x + 1 with hand-picked samples
        let x0 = DMatrix::from_row_slice(1, 6, &[0.0, 1.0, -1.0, 2.0, 0.5, -0.3]);
        let u0 = DMatrix::from_row_slice(1, 6, &[1.0, -1.0, 0.5, 0.0, 2.0, -2.0]);
        let e = [0.01, -0.02, 0.0, 0.015, -0.01, 0.005];
        let x1 = DMatrix::from_fn(1, 6, |_, j| {
            let (x, u) = (x0[j], u0[j]);
            -x + u + 0.5 * u * x + 1.0 + noise * e[j]
        });
        let bound = SymMatrix::from_diagonal(&[if noise > 0.0 { 2e-3 } else { 0.0 }]);
        Dataset::from_parts(x1, x0, u0, bound).unwrap()
    }

    #[test]
    fn noise_free_identifies_exactly() {
        let cs = ConsistencySet::build(&toy(0.0)).unwrap();
        assert!(cs.q_is_zero());
        let expect = [-1.0, 1.0, 0.5, 1.0];
        for (z, e) in cs.zeta.iter().zip(expect) {
            assert!((z - e).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_norm_bound_by_hand() {
        let cs = ConsistencySet::build(&toy(1.0)).unwrap();
        let hand = cs.zeta.norm() + cs.q.as_matrix()[(0, 0)].sqrt() / cs.a_min_eig.sqrt();
        assert!((cs.norm_bound() - hand).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let ds = toy(1.0);
        let small = Dataset::from_parts(
            ds.x1.columns(0, 3).into_owned(),
            ds.x0.columns(0, 3).into_owned(),
            ds.u0.columns(0, 3).into_owned(),
            ds.noise_bound.clone(),
        )
        .unwrap();
        assert!(matches!(
            ConsistencySet::build(&small),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn center_and_truth_are_members() {
        let cs = ConsistencySet::build(&toy(1.0)).unwrap();
        assert!(cs.membership(&cs.zeta).unwrap());
        let truth = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, 0.5, 1.0]);
        assert!(cs.membership(&truth).unwrap());
        assert!(cs.membership_form1(&truth).unwrap());
    }

    #[test]
    fn inflated_boundary_point_is_outside() {
        let cs = ConsistencySet::build(&toy(1.0)).unwrap();
        let ups = DMatrix::from_column_slice(4, 1, &[1.5, 0.0, 0.0, 0.0]);
        let z = &cs.zeta + cs.asqrt_inv.as_matrix() * ups * cs.qsqrt.as_matrix();
        assert!(!cs.membership(&z).unwrap());
        assert!(matches!(
            cs.sample(&DMatrix::from_element(4, 1, 1.0)),
            Err(Error::UpsilonTooLarge(_))
        ));
    }

    #[test]
    fn worst_case_beats_samples() {
        let cs = ConsistencySet::build(&toy(1.0)).unwrap();
        let v = DVector::from_vec(vec![0.3, 0.7, 0.21, 1.0]);
        let (wc, _) = worst_case_norm(&cs, &v);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut best: f64 = 0.0;
        for _ in 0..2000 {
            let u = random_upsilon_with(&mut rng, cs.upsilon_dims(), true);
            best = best.max((cs.sample(&u).unwrap().transpose() * &v).norm());
        }
        assert!(best <= wc * (1.0 + 1e-9));
        assert!(best >= wc * 0.999);
    }
}
