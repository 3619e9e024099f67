//! Sensitivity of the soft-optimal Q-table to the reward table.
//!
//! Differentiating the soft Bellman fixed point gives, for every column
//! `(s~, a~)`,
//!
//! ```text
//! dQ(s,a)/dR(s~,a~) = 1[(s,a) = (s~,a~)] + gamma * sum_s' P(s'|s,a) sum_a' pi(a'|s') dQ(s',a')/dR(s~,a~)
//! ```
//!
//! which is a policy-evaluation equation on state-action pairs. With
//! `M[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')` the full Jacobian is
//! `(I - gamma M)^-1`. The matrix is factored once per solution and reused for
//! every requested column, so restricting payments to a small support keeps the
//! cost at one factorization plus `|support|` triangular solves.

use nalgebra::{DMatrix, DVector, LU};
use nalgebra::Dyn;

use crate::error::{Error, Result};
use crate::mdp::{pair_index, FollowerSpec, SidePayment, SoftSolution};

const RESIDUAL_TOL: f64 = 1e-9;

/// Dense `dQ*/dR` with rows and columns in flattened `(s, a)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct QJacobian {
    pub matrix: DMatrix<f64>,
}

/// `dR/dx`: the 0/1 selection matrix mapping support coordinates to pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PaymentJacobian {
    pub matrix: DMatrix<f64>,
}

impl PaymentJacobian {
    pub fn new(payment: &SidePayment, num_states: usize, num_actions: usize) -> Result<Self> {
        payment.check_indices(num_states, num_actions)?;
        let mut matrix = DMatrix::zeros(num_states * num_actions, payment.len());
        for (col, &(s, a)) in payment.support().iter().enumerate() {
            matrix[(pair_index(s, a, num_actions), col)] = 1.0;
        }
        Ok(Self { matrix })
    }
}

/// `M_pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')`.
pub fn policy_pair_operator(spec: &FollowerSpec, policy: &DMatrix<f64>) -> DMatrix<f64> {
    let n = spec.num_states();
    let na = spec.num_actions();
    let mut m = DMatrix::zeros(n * na, n * na);
    for s in 0..n {
        for a in 0..na {
            let row = pair_index(s, a, na);
            let kernel = spec.transition(a);
            for s_next in 0..n {
                let p = kernel[(s, s_next)];
                if p == 0.0 {
                    continue;
                }
                for a_next in 0..na {
                    m[(row, pair_index(s_next, a_next, na))] = p * policy[(s_next, a_next)];
                }
            }
        }
    }
    m
}

/// Factored `(I - gamma M_pi)` for one follower solution.
pub struct QSensitivity {
    system: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

impl QSensitivity {
    pub fn new(spec: &FollowerSpec, solution: &SoftSolution) -> Result<Self> {
        if solution.policy.shape() != (spec.num_states(), spec.num_actions()) {
            return Err(Error::InvalidArgument("solution shape does not match follower".into()));
        }
        let dim = spec.num_pairs();
        let system =
            DMatrix::identity(dim, dim) - policy_pair_operator(spec, &solution.policy) * spec.discount();
        let lu = system.clone().lu();
        Ok(Self { system, lu })
    }

    pub fn dim(&self) -> usize {
        self.system.nrows()
    }

    /// Solves `(I - gamma M) u = rhs` and checks the residual.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self
            .lu
            .solve(rhs)
            .ok_or_else(|| Error::Singular("I - gamma M_pi".into()))?;
        let residual = (&self.system * &u - rhs).amax();
        if !(residual < RESIDUAL_TOL) {
            return Err(Error::Singular(format!("sensitivity residual {residual:e}")));
        }
        Ok(u)
    }

    /// Column `dQ*/dR(pair)`.
    pub fn column(&self, pair: usize) -> Result<DVector<f64>> {
        let mut e = DVector::zeros(self.dim());
        e[pair] = 1.0;
        self.solve(&e)
    }

    /// `dQ*/dR * selection`, one column per selected pair.
    pub fn columns(&self, pairs: &[usize]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim(), pairs.len());
        for (k, &pair) in pairs.iter().enumerate() {
            out.set_column(k, &self.column(pair)?);
        }
        Ok(out)
    }
}

/// Full `dQ*/dR` for a converged solution.
pub fn solve_q_jacobian(spec: &FollowerSpec, solution: &SoftSolution) -> Result<QJacobian> {
    let sens = QSensitivity::new(spec, solution)?;
    let all: Vec<usize> = (0..sens.dim()).collect();
    Ok(QJacobian {
        matrix: sens.columns(&all)?,
    })
}

/// `dQ*/dx` for every follower, stacked by type.
///
/// The payment is shared, so `DR(x)` is the same selection for each type and
/// `DQ*` is block diagonal; the product is one `(N*A) x |support|` block per type.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileJacobian {
    pub blocks: Vec<DMatrix<f64>>,
}

impl ProfileJacobian {
    /// Vertically stacked blocks, `(types * N*A) x |support|`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let rows: usize = self.blocks.iter().map(|b| b.nrows()).sum();
        let cols = self.blocks.first().map_or(0, |b| b.ncols());
        let mut out = DMatrix::zeros(rows, cols);
        let mut offset = 0;
        for b in &self.blocks {
            out.view_mut((offset, 0), b.shape()).copy_from(b);
            offset += b.nrows();
        }
        out
    }

    /// Pulls a profile gradient (concatenated per-type blocks) back to the support.
    pub fn pull_back(&self, theta_gradient: &[f64]) -> Result<Vec<f64>> {
        let rows: usize = self.blocks.iter().map(|b| b.nrows()).sum();
        if theta_gradient.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "profile gradient has length {}, expected {rows}",
                theta_gradient.len()
            )));
        }
        let cols = self.blocks.first().map_or(0, |b| b.ncols());
        let mut out = vec![0.0; cols];
        let mut offset = 0;
        for b in &self.blocks {
            for (j, o) in out.iter_mut().enumerate() {
                *o += b
                    .column(j)
                    .iter()
                    .zip(&theta_gradient[offset..offset + b.nrows()])
                    .map(|(d, g)| d * g)
                    .sum::<f64>();
            }
            offset += b.nrows();
        }
        Ok(out)
    }
}

pub fn profile_q_jacobian(
    specs: &[FollowerSpec],
    solutions: &[SoftSolution],
    payment: &SidePayment,
) -> Result<ProfileJacobian> {
    if specs.len() != solutions.len() {
        return Err(Error::Config(format!(
            "{} follower specs but {} solutions",
            specs.len(),
            solutions.len()
        )));
    }
    let blocks = specs
        .iter()
        .zip(solutions)
        .map(|(spec, solution)| {
            payment.check_indices(spec.num_states(), spec.num_actions())?;
            let pairs: Vec<usize> = payment
                .support()
                .iter()
                .map(|&(s, a)| pair_index(s, a, spec.num_actions()))
                .collect();
            QSensitivity::new(spec, solution)?.columns(&pairs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProfileJacobian { blocks })
}
