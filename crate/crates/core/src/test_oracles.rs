//! Dense brute-force oracles used by unit tests. Everything here materializes
//! the full parameter-space objects that the implementation is careful never
//! to form, and stays independent of the structured code paths it checks.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::DesignSet;
use crate::discrepancy::{DiscrepancyParams, PriorFactor};
use crate::spaces::SpdOperator;

pub fn random_spd(n: usize, rng: &mut impl Rng) -> SpdOperator {
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    SpdOperator::new(&b * b.transpose() + DMatrix::identity(n, n) * 0.5).unwrap()
}

/// Prior at arbitrary (small) dimensions built from random well-conditioned
/// SPD operators.
pub fn test_prior(n_u: usize, n_z: usize, seed: u64) -> PriorFactor {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_u = Arc::new(random_spd(n_u, &mut rng));
    let m_z = Arc::new(random_spd(n_z, &mut rng));
    let w_u = random_spd(n_u, &mut rng);
    let w_z = Arc::new(random_spd(n_z, &mut rng));
    let z_tilde = DVector::from_fn(n_z, |_, _| rng.gen_range(-1.0..1.0));
    PriorFactor::new(&w_u, m_u, w_z, m_z, z_tilde).unwrap()
}

/// Row-major flattening [intercept; rows of slope].
pub fn flatten(theta: &DiscrepancyParams) -> DVector<f64> {
    let n_u = theta.dim_u();
    let n_z = theta.dim_z();
    let mut v = DVector::zeros(n_u * (n_z + 1));
    for i in 0..n_u {
        v[i] = theta.intercept[i];
        for q in 0..n_z {
            v[n_u + i * n_z + q] = theta.slope[(i, q)];
        }
    }
    v
}

pub fn unflatten(v: &DVector<f64>, n_u: usize, n_z: usize) -> DiscrepancyParams {
    let mut theta = DiscrepancyParams::zeros(n_u, n_z);
    for i in 0..n_u {
        theta.intercept[i] = v[i];
        for q in 0..n_z {
            theta.slope[(i, q)] = v[n_u + i * n_z + q];
        }
    }
    theta
}

/// Reconstruct `W_u` from the prior's generalized eigendecomposition.
pub fn dense_w_u(prior: &PriorFactor) -> DMatrix<f64> {
    prior.m_u().matrix()
        * prior.x()
        * DMatrix::from_diagonal(prior.lambda())
        * prior.x().transpose()
        * prior.m_u().matrix()
}

/// Dense assembly of the prior precision from its displayed block matrix.
pub fn dense_w_theta(prior: &PriorFactor) -> DMatrix<f64> {
    let n_u = prior.dim_u();
    let n_z = prior.dim_z();
    let w_u = dense_w_u(prior);
    let mzt = prior.m_ztilde();
    let n_t = n_u * (n_z + 1);
    let mut w = DMatrix::zeros(n_t, n_t);
    w.view_mut((0, 0), (n_u, n_u)).copy_from(&w_u);
    for i in 0..n_u {
        for j in 0..n_u {
            for q in 0..n_z {
                w[(i, n_u + j * n_z + q)] = w_u[(i, j)] * mzt[q];
                w[(n_u + j * n_z + q, i)] = w_u[(i, j)] * mzt[q];
            }
        }
    }
    let c = prior.w_z().matrix() + mzt * mzt.transpose();
    for i in 0..n_u {
        for j in 0..n_u {
            for q in 0..n_z {
                for s in 0..n_z {
                    w[(n_u + i * n_z + q, n_u + j * n_z + s)] = w_u[(i, j)] * c[(q, s)];
                }
            }
        }
    }
    w
}

/// Dense assembly of the triangular factor `L` from its displayed blocks.
pub fn dense_l(prior: &PriorFactor) -> DMatrix<f64> {
    let n_u = prior.dim_u();
    let n_z = prior.dim_z();
    let u = prior.m_u().matrix()
        * prior.x()
        * DMatrix::from_diagonal(&prior.lambda().map(f64::sqrt));
    let f = prior.w_z_sqrt();
    let mzt = prior.m_ztilde();
    let n_t = n_u * (n_z + 1);
    let mut l = DMatrix::zeros(n_t, n_t);
    l.view_mut((0, 0), (n_u, n_u)).copy_from(&u);
    for i in 0..n_u {
        for j in 0..n_u {
            for q in 0..n_z {
                l[(n_u + i * n_z + q, j)] = u[(i, j)] * mzt[q];
                for s in 0..n_z {
                    l[(n_u + i * n_z + q, n_u + j * n_z + s)] = u[(i, j)] * f[(q, s)];
                }
            }
        }
    }
    l
}

/// Dense evaluation block `A(z) = [I, I (x) z^T M_z]`.
pub fn dense_a_block(z: &DVector<f64>, m_z: &SpdOperator) -> DMatrix<f64> {
    let n_u = m_z.dim().max(1);
    let _ = n_u;
    let n_z = m_z.dim();
    let zm = m_z.apply(z);
    // The state dimension is decoupled from n_z; caller passes it separately
    // via `dense_a`.
    let mut a = DMatrix::zeros(1, n_z);
    for q in 0..n_z {
        a[(0, q)] = zm[q];
    }
    a
}

/// Dense stacked forward operator for a design (N*n_u rows).
pub fn dense_a(design: &DesignSet, n_u: usize, m_z: &SpdOperator) -> DMatrix<f64> {
    let n_z = m_z.dim();
    let n = design.len();
    let n_t = n_u * (n_z + 1);
    let mut a = DMatrix::zeros(n * n_u, n_t);
    for (l, z) in design.points().iter().enumerate() {
        let zm = m_z.apply(z);
        for i in 0..n_u {
            a[(l * n_u + i, i)] = 1.0;
            for q in 0..n_z {
                a[(l * n_u + i, n_u + i * n_z + q)] = zm[q];
            }
        }
    }
    a
}

/// Dense noise precision `W_d = alpha_d^{-1} (I_N (x) M_u)`.
pub fn dense_w_d(n: usize, m_u: &SpdOperator, alpha_d: f64) -> DMatrix<f64> {
    let n_u = m_u.dim();
    let mut w = DMatrix::zeros(n * n_u, n * n_u);
    for l in 0..n {
        w.view_mut((l * n_u, l * n_u), (n_u, n_u))
            .copy_from(&(m_u.matrix() / alpha_d));
    }
    w
}

/// Dense normal-equations solve: returns (theta_bar, Sigma_theta).
pub fn dense_posterior(
    design: &DesignSet,
    data: &[DVector<f64>],
    prior: &PriorFactor,
    alpha_d: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n_u = prior.dim_u();
    let a = dense_a(design, n_u, prior.m_z());
    let w_d = dense_w_d(design.len(), prior.m_u(), alpha_d);
    let w_theta = dense_w_theta(prior);
    let precision = &w_theta + a.transpose() * &w_d * &a;
    let sigma = precision
        .clone()
        .try_inverse()
        .expect("posterior precision is invertible");
    let mut d = DVector::zeros(design.len() * n_u);
    for (l, dl) in data.iter().enumerate() {
        d.rows_mut(l * n_u, n_u).copy_from(dl);
    }
    let theta_bar = &sigma * (a.transpose() * &w_d * d);
    (theta_bar, sigma)
}
