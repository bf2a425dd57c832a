//! Sequential A-optimal acquisition of high-fidelity evaluation points.
//!
//! All candidate points live in the affine subspace spanned by the Hessian
//! projector, so the acquisition criterion is evaluated in subspace
//! coordinates: the design Gram matrix reduces to `G = e e^T + E^T Gamma E`
//! with `Gamma = V^T M_z W_z^{-1} M_z V`, and the per-evaluation cost after
//! offline setup is linear in the number of points times the state dimension.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::calibration::trace_table;
use crate::discrepancy::PriorFactor;
use crate::error::{Error, Result};
use crate::postopt::Projector;
use crate::spaces::{fix_column_signs, SpdOperator};

/// Exploration radius heuristic `alpha_k`, with the trace denominator
/// precomputed once.
#[derive(Debug, Clone)]
pub struct AlphaHeuristic {
    m_z: Arc<SpdOperator>,
    trace_ratio: f64,
    floor: f64,
}

impl AlphaHeuristic {
    /// `floor_scale` sets the returned floor `floor_scale / tr(W_z^{-1} M_z)`
    /// used when subsequent updates coincide.
    pub fn new(w_z: &SpdOperator, m_z: Arc<SpdOperator>, floor_scale: f64) -> Self {
        let trace_ratio = w_z.solve_mat(m_z.matrix()).trace();
        Self {
            m_z,
            trace_ratio,
            floor: floor_scale / trace_ratio,
        }
    }

    pub fn trace_ratio(&self) -> f64 {
        self.trace_ratio
    }

    /// `||z_bar_k - z_bar_prev||^2_{M_z} / tr(W_z^{-1} M_z)`, floored.
    pub fn alpha_k(&self, z_bar_k: &DVector<f64>, z_bar_prev: &DVector<f64>) -> f64 {
        let diff = z_bar_k - z_bar_prev;
        let raw = self.m_z.inner(&diff, &diff) / self.trace_ratio;
        raw.max(self.floor)
    }
}

/// One-shot form of the heuristic with the default floor scale 1e-8.
pub fn alpha_k(
    z_bar_k: &DVector<f64>,
    z_bar_prev: &DVector<f64>,
    w_z: &SpdOperator,
    m_z: &Arc<SpdOperator>,
) -> f64 {
    AlphaHeuristic::new(w_z, Arc::clone(m_z), 1e-8).alpha_k(z_bar_k, z_bar_prev)
}

/// New acquisition points in projector coordinates: column `l` of `eta` is
/// the coefficient vector of point `k + l + 1`.
#[derive(Debug, Clone)]
pub struct DesignParams {
    eta: DMatrix<f64>,
    projector: Arc<Projector>,
    z_tilde: DVector<f64>,
    k: usize,
}

impl DesignParams {
    pub fn eta(&self) -> &DMatrix<f64> {
        &self.eta
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_points(&self) -> usize {
        self.eta.ncols()
    }

    /// Materialize the candidate points `z = z_tilde + V eta`.
    pub fn points(&self) -> Vec<DVector<f64>> {
        (0..self.eta.ncols())
            .map(|l| {
                self.projector
                    .lift(&self.z_tilde, &self.eta.column(l).into_owned())
            })
            .collect()
    }
}

/// Offline pieces for fast criterion evaluation at a fixed round.
#[derive(Debug, Clone)]
pub struct CriterionWorkspace {
    lambda: DVector<f64>,
    xmx: DVector<f64>,
    alpha_d: f64,
    /// `V^T C V` with `C = M_z W_z^{-1} M_z`.
    gram: DMatrix<f64>,
    /// `V^T C W_z^{-1} C V`.
    gram2: DMatrix<f64>,
    /// `V^T C z_tilde`.
    a_tilde: DVector<f64>,
    /// `V^T C z_center`.
    a_center: DVector<f64>,
    alpha_oed: f64,
    /// Existing design in subspace coordinates (r x k).
    eta_known: DMatrix<f64>,
    /// Center in subspace coordinates.
    b_bar: DVector<f64>,
    projector: Arc<Projector>,
    z_tilde: DVector<f64>,
    /// Design-independent prior term of the expected pushforward trace.
    prior_expected: f64,
}

struct CriterionEval {
    value: f64,
    mu: DVector<f64>,
    g: DMatrix<f64>,
    e_mat: DMatrix<f64>,
    yhat: Vec<DVector<f64>>,
    f: Vec<f64>,
    p: Vec<f64>,
}

impl CriterionWorkspace {
    /// Assemble the workspace for the round with existing points `eta_known`
    /// (subspace coordinates, one column per point), ball center `z_center`
    /// (usually the current optimal-solution update), and radius `alpha_oed`.
    pub fn new(
        prior: &PriorFactor,
        projector: Arc<Projector>,
        eta_known: DMatrix<f64>,
        z_center: &DVector<f64>,
        alpha_oed: f64,
        alpha_d: f64,
    ) -> Result<Self> {
        if !(alpha_oed > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha_k must be positive, got {alpha_oed}"
            )));
        }
        let r = projector.rank();
        if eta_known.nrows() != r {
            return Err(Error::DimensionMismatch(
                "existing design coordinates disagree with projector rank".into(),
            ));
        }
        let v = projector.v();
        let m_z = prior.m_z();
        let w_z = prior.w_z();
        let c_of = |x: &DVector<f64>| m_z.apply(&w_z.solve(&m_z.apply(x)));
        let mut cv = DMatrix::zeros(v.nrows(), r);
        for j in 0..r {
            cv.set_column(j, &c_of(&v.column(j).into_owned()));
        }
        let gram = v.transpose() * &cv;
        let gram = (&gram + gram.transpose()) * 0.5;
        let winv_cv = w_z.solve_mat(&cv);
        let gram2 = cv.transpose() * winv_cv;
        let gram2 = (&gram2 + gram2.transpose()) * 0.5;
        let a_tilde = cv.transpose() * prior.z_tilde();
        let a_center = cv.transpose() * z_center;
        let b_bar = projector.coords(z_center, prior.z_tilde());

        // E_z[g(z)] * tr(W_u^{-1} M_u) for z ~ N(center, alpha W_z^{-1}).
        let centered = z_center - prior.z_tilde();
        let g_center = 1.0 + centered.dot(&c_of(&centered));
        let tr_winv_c = {
            let c_dense = m_z.matrix() * prior.w_z_inv() * m_z.matrix();
            (prior.w_z_inv() * c_dense).trace()
        };
        let tr_prior: f64 = prior
            .lambda()
            .iter()
            .zip(prior.x_mass_norms().iter())
            .map(|(&lam, &m)| m / lam)
            .sum();
        let prior_expected = (g_center + alpha_oed * tr_winv_c) * tr_prior;

        Ok(Self {
            lambda: prior.lambda().clone(),
            xmx: prior.x_mass_norms().clone(),
            alpha_d,
            gram,
            gram2,
            a_tilde,
            a_center,
            alpha_oed,
            eta_known,
            b_bar,
            projector,
            z_tilde: prior.z_tilde().clone(),
            prior_expected,
        })
    }

    pub fn alpha_oed(&self) -> f64 {
        self.alpha_oed
    }

    pub fn b_bar(&self) -> &DVector<f64> {
        &self.b_bar
    }

    pub fn rank(&self) -> usize {
        self.projector.rank()
    }

    pub fn k(&self) -> usize {
        self.eta_known.ncols()
    }

    pub fn projector(&self) -> &Arc<Projector> {
        &self.projector
    }

    pub fn z_tilde(&self) -> &DVector<f64> {
        &self.z_tilde
    }

    /// Design-independent term of the expected pushforward uncertainty.
    pub fn prior_expected(&self) -> f64 {
        self.prior_expected
    }

    /// Expected posterior pushforward uncertainty for a candidate batch:
    /// `Psi_k = prior_expected - criterion`.
    pub fn expected_uncertainty(&self, eta_new: &DMatrix<f64>) -> Result<f64> {
        Ok(self.prior_expected - self.criterion(eta_new)?)
    }

    /// Same, with degenerate (duplicated-point) designs permitted; used for
    /// the duplicate-point normalization of relative-reduction diagnostics.
    pub fn expected_uncertainty_degenerate(&self, eta_new: &DMatrix<f64>) -> Result<f64> {
        Ok(self.prior_expected - self.eval(eta_new, true)?.value)
    }

    fn trace_value(&self, mu: f64) -> f64 {
        trace_table(&self.lambda, &self.xmx, self.alpha_d, mu)
    }

    fn trace_deriv(&self, mu: f64) -> f64 {
        -self
            .lambda
            .iter()
            .zip(self.xmx.iter())
            .map(|(&lam, &m)| m / (lam * (mu + self.alpha_d * lam).powi(2)))
            .sum::<f64>()
    }

    fn eval(&self, eta_new: &DMatrix<f64>, allow_degenerate: bool) -> Result<CriterionEval> {
        let r = self.rank();
        let k = self.k();
        let p = eta_new.ncols();
        if eta_new.nrows() != r {
            return Err(Error::DimensionMismatch(
                "candidate coordinates disagree with projector rank".into(),
            ));
        }
        let n = k + p;
        let mut e_mat = DMatrix::zeros(r, n);
        e_mat.view_mut((0, 0), (r, k)).copy_from(&self.eta_known);
        e_mat.view_mut((0, k), (r, p)).copy_from(eta_new);

        let g_full = DMatrix::from_element(n, n, 1.0) + e_mat.transpose() * &self.gram * &e_mat;
        let g_full = (&g_full + g_full.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::try_new(g_full, f64::EPSILON, 0)
            .ok_or_else(|| Error::EigenFailure("gram eigendecomposition failed".into()))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let mut mu = DVector::zeros(n);
        let mut g = DMatrix::zeros(n, n);
        for (idx, &o) in order.iter().enumerate() {
            mu[idx] = eig.eigenvalues[o];
            g.set_column(idx, &eig.eigenvectors.column(o));
        }
        fix_column_signs(&mut g);
        if !allow_degenerate && mu[n - 1] < 1e-10 * mu[0].max(f64::MIN_POSITIVE) {
            return Err(Error::RankDeficientDesign(format!(
                "augmented design gram has eigenvalue ratio {:.3e}",
                mu[n - 1] / mu[0].max(f64::MIN_POSITIVE)
            )));
        }

        let mut yhat = Vec::with_capacity(n);
        let mut f = Vec::with_capacity(n);
        let mut pvec = Vec::with_capacity(n);
        let mut value = 0.0;
        for i in 0..n {
            let gi = g.column(i).into_owned();
            let yi = &e_mat * &gi;
            let e_dot = gi.sum();
            let s_i = e_dot - self.a_tilde.dot(&yi);
            let f_i = s_i + self.a_center.dot(&yi);
            let h_i = yi.dot(&(&self.gram2 * &yi));
            let p_i = f_i * f_i + self.alpha_oed * h_i;
            value += p_i * self.trace_value(mu[i].max(0.0));
            yhat.push(yi);
            f.push(f_i);
            pvec.push(p_i);
        }
        Ok(CriterionEval {
            value,
            mu,
            g,
            e_mat,
            yhat,
            f,
            p: pvec,
        })
    }

    /// Acquisition criterion to be maximized.
    pub fn criterion(&self, eta_new: &DMatrix<f64>) -> Result<f64> {
        Ok(self.eval(eta_new, false)?.value)
    }

    /// Analytic gradient via eigenpair derivatives; falls back to central
    /// finite differences when the spectrum is degenerate (gap below
    /// `1e-8 * mu_1`).
    pub fn criterion_grad(&self, eta_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let ev = self.eval(eta_new, false)?;
        let n = ev.mu.len();
        let gap_tol = 1e-8 * ev.mu[0].abs().max(f64::MIN_POSITIVE);
        let mut degenerate = false;
        for i in 0..n {
            for q in (i + 1)..n {
                if (ev.mu[i] - ev.mu[q]).abs() <= gap_tol {
                    degenerate = true;
                }
            }
        }
        if degenerate {
            return self.criterion_grad_fd(eta_new);
        }
        Ok(self.analytic_grad(&ev, eta_new.ncols()))
    }

    fn analytic_grad(&self, ev: &CriterionEval, p: usize) -> DMatrix<f64> {
        let r = self.rank();
        let k = self.k();
        let n = ev.mu.len();
        // t_j = E^T Gamma e_j stacked as columns of (Gamma E)^T.
        let tt = (&self.gram * &ev.e_mat).transpose(); // n x r
        // TG[i] = tt^T g_i, entry j is t_j . g_i
        let mut tg = Vec::with_capacity(n);
        for i in 0..n {
            tg.push(tt.transpose() * ev.g.column(i).into_owned()); // r-vector
        }
        let a_diff = &self.a_center - &self.a_tilde;
        let gram2_y: Vec<DVector<f64>> = ev.yhat.iter().map(|y| &self.gram2 * y).collect();
        let tv: Vec<f64> = ev.mu.iter().map(|&m| self.trace_value(m.max(0.0))).collect();
        let td: Vec<f64> = ev.mu.iter().map(|&m| self.trace_deriv(m.max(0.0))).collect();

        let mut grad = DMatrix::zeros(r, p);
        for l in 0..p {
            let m_col = k + l;
            for j in 0..r {
                let mut total = 0.0;
                for i in 0..n {
                    let gi = ev.g.column(i);
                    let t_gi = tg[i][j];
                    let dmu = 2.0 * gi[m_col] * t_gi;
                    // dg_i via deflated resolvent
                    let mut dg = DVector::zeros(n);
                    for q in 0..n {
                        if q == i {
                            continue;
                        }
                        let gq = ev.g.column(q);
                        let num = gq[m_col] * t_gi + tg[q][j] * gi[m_col];
                        dg += gq * (num / (ev.mu[i] - ev.mu[q]));
                    }
                    // dyhat = e_j g_i[m] + E dg
                    let mut dy = &ev.e_mat * &dg;
                    dy[j] += gi[m_col];
                    let df = dg.sum() + a_diff.dot(&dy);
                    let dh = 2.0 * gram2_y[i].dot(&dy);
                    let dp = 2.0 * ev.f[i] * df + self.alpha_oed * dh;
                    total += dp * tv[i] + ev.p[i] * td[i] * dmu;
                }
                grad[(j, l)] = total;
            }
        }
        grad
    }

    fn criterion_grad_fd(&self, eta_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r = self.rank();
        let p = eta_new.ncols();
        let h = 1e-6;
        let mut grad = DMatrix::zeros(r, p);
        for l in 0..p {
            for j in 0..r {
                let mut plus = eta_new.clone();
                plus[(j, l)] += h;
                let mut minus = eta_new.clone();
                minus[(j, l)] -= h;
                let fp = self.eval(&plus, true)?.value;
                let fm = self.eval(&minus, true)?.value;
                grad[(j, l)] = (fp - fm) / (2.0 * h);
            }
        }
        Ok(grad)
    }

    fn project_feasible(&self, eta: &mut DMatrix<f64>) {
        let radius = self.alpha_oed.sqrt();
        for mut col in eta.column_iter_mut() {
            let diff = &col - &self.b_bar;
            let norm = diff.norm();
            if norm > radius {
                let scaled = &self.b_bar + diff * (radius / norm);
                col.copy_from(&scaled);
            }
        }
    }

    /// Feasibility residual `max_l (||eta_l - b_bar||^2 - alpha_k)`.
    pub fn constraint_residual(&self, eta: &DMatrix<f64>) -> f64 {
        let mut worst = f64::MIN;
        for col in eta.column_iter() {
            let d = (&col - &self.b_bar).norm_squared() - self.alpha_oed;
            worst = worst.max(d);
        }
        worst
    }

    fn design_params(&self, eta: DMatrix<f64>) -> DesignParams {
        DesignParams {
            eta,
            projector: Arc::clone(&self.projector),
            z_tilde: self.z_tilde.clone(),
            k: self.k(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    pub n_starts: usize,
    pub max_iters: usize,
    pub step_tol: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            n_starts: 8,
            max_iters: 200,
            step_tol: 1e-8,
        }
    }
}

fn random_feasible_point(
    ws: &CriterionWorkspace,
    rng: &mut impl Rng,
) -> DVector<f64> {
    let r = ws.rank();
    let mut dir = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm > 0.0 {
        dir /= norm;
    }
    let u: f64 = rng.gen_range(0.0f64..1.0);
    let radius = ws.alpha_oed().sqrt() * u.powf(1.0 / r as f64);
    ws.b_bar() + dir * radius
}

/// Multi-start projected gradient ascent on the acquisition criterion over
/// the Mahalanobis ball `||eta_l - b_bar||^2 <= alpha_k` per candidate.
pub fn optimize_design(
    ws: &CriterionWorkspace,
    p: usize,
    opts: &OptimizeOptions,
    rng: &mut impl Rng,
) -> Result<DesignParams> {
    if p == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let r = ws.rank();
    let radius = ws.alpha_oed().sqrt();
    let mut best: Option<(f64, DMatrix<f64>)> = None;

    for _ in 0..opts.n_starts {
        // Draw a feasible start whose criterion is evaluable.
        let mut eta = DMatrix::zeros(r, p);
        let mut value = f64::NEG_INFINITY;
        let mut found = false;
        for _ in 0..50 {
            for l in 0..p {
                eta.set_column(l, &random_feasible_point(ws, rng));
            }
            if let Ok(v) = ws.criterion(&eta) {
                value = v;
                found = true;
                break;
            }
        }
        if !found {
            continue;
        }

        for _ in 0..opts.max_iters {
            let grad = match ws.criterion_grad(&eta) {
                Ok(g) => g,
                Err(_) => break,
            };
            let gnorm = grad.norm();
            if gnorm == 0.0 {
                break;
            }
            let mut t = 0.25 * radius / gnorm;
            let mut moved = false;
            for _ in 0..25 {
                let mut cand = &eta + &grad * t;
                ws.project_feasible(&mut cand);
                match ws.criterion(&cand) {
                    Ok(v) if v > value => {
                        let step = (&cand - &eta).norm();
                        eta = cand;
                        value = v;
                        moved = true;
                        if step < opts.step_tol {
                            moved = false; // converged
                        }
                        break;
                    }
                    _ => t *= 0.5,
                }
            }
            if !moved {
                break;
            }
        }

        match &best {
            Some((bv, _)) if *bv >= value => {}
            _ => best = Some((value, eta.clone())),
        }
    }

    let (_, eta) = best.ok_or(Error::AllStartsInfeasible)?;
    Ok(ws.design_params(eta))
}

/// Pre-clipping draw stage: `eta_l = b_bar + zeta`, `zeta ~ N(0, alpha_k I_r)`.
fn raw_random_etas(ws: &CriterionWorkspace, p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let r = ws.rank();
    let sd = ws.alpha_oed().sqrt();
    let mut eta = DMatrix::zeros(r, p);
    for l in 0..p {
        let zeta = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal) * sd);
        eta.set_column(l, &(ws.b_bar() + zeta));
    }
    eta
}

/// Random acquisition baseline: `p` draws `z = z_center + V zeta` with
/// `zeta ~ N(0, alpha_k I_r)`, clipped to the feasibility ball.
pub fn random_design(
    ws: &CriterionWorkspace,
    p: usize,
    rng: &mut impl Rng,
) -> Result<DesignParams> {
    if p == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut eta = raw_random_etas(ws, p, rng);
    ws.project_feasible(&mut eta);
    Ok(ws.design_params(eta))
}

/// Baseline policy that evaluates at the optimal-solution update itself.
pub fn tracing_design(ws: &CriterionWorkspace, z_bar_k: &DVector<f64>) -> DesignParams {
    let eta = DMatrix::from_column_slice(
        ws.rank(),
        1,
        ws.projector()
            .coords(z_bar_k, ws.z_tilde())
            .as_slice(),
    );
    ws.design_params(eta)
}
