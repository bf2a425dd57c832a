//! The two PDE testbeds behind the fidelity-pair interface: a nonlinear
//! diffusion-reaction control problem and a coupled flow contaminant
//! source-identification problem.

mod diffusion_reaction;
mod flow_transport;

pub use diffusion_reaction::{dr_solve, DiffusionReactionProblem, DrHifiView};
pub use flow_transport::{flow_solve, FlowConfig, FlowTransportProblem};

use nalgebra::DVector;

/// Solver fidelity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fidelity {
    High,
    Low,
}

/// Tridiagonal matrix with Thomas-algorithm solves. Rows are
/// `sub[i-1] x[i-1] + diag[i] x[i] + sup[i] x[i+1]`.
#[derive(Debug, Clone)]
pub(crate) struct Tridiag {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![0.0; n.saturating_sub(1)],
            diag: vec![0.0; n],
            sup: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.sub[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.sup[i] * x[i + 1];
            }
            y[i] = v;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.sup[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.sub[i] * x[i + 1];
            }
            y[i] = v;
        }
        y
    }

    /// Thomas solve; valid for diagonally dominant or SPD systems.
    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.n();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = self.diag[0];
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        c[0] = if n > 1 { self.sup[0] / denom } else { 0.0 };
        d[0] = b[0] / denom;
        for i in 1..n {
            denom = self.diag[i] - self.sub[i - 1] * c[i - 1];
            if denom == 0.0 || !denom.is_finite() {
                return None;
            }
            if i + 1 < n {
                c[i] = self.sup[i] / denom;
            }
            d[i] = (b[i] - self.sub[i - 1] * d[i - 1]) / denom;
        }
        let mut x = DVector::zeros(n);
        x[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = d[i] - c[i] * x[i + 1];
        }
        Some(x)
    }

    pub fn solve_transpose(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let t = Tridiag {
            sub: self.sup.clone(),
            diag: self.diag.clone(),
            sup: self.sub.clone(),
        };
        t.solve(b)
    }
}
