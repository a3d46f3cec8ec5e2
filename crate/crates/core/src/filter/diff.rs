//! Implicit differentiation of the filter solution.
//!
//! With the active set fixed, the KKT conditions are the linear system
//!
//! ```text
//! [ Q  −Gᵀ ] [ z ]   [ −q ]
//! [ G   0  ] [ ν ] = [  b ]
//! ```
//!
//! over `z = (u, ε)`, where `G` stacks the active rows (CBF row and clamped
//! bounds). Differentiating in a parameter `p` gives the same matrix with
//! right-hand side `[−(∂Q/∂p) z − ∂q/∂p; 0]`. Weakly active constraints were
//! already classified as inactive by the solver, so this yields one valid
//! element of the generalized Jacobian at such points.

use nalgebra::{DMatrix, DVector};

use super::{BoundState, FilterProblem, FilterSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterJacobians {
    /// `∂u*/∂γ`, shape `n_controls × n_agents`.
    pub du_dgamma: DMatrix<f64>,
    /// `∂u*/∂uᵈᵉˢ`, shape `n_controls × n_controls`.
    pub du_ddesired: DMatrix<f64>,
    /// `∂ε*/∂γ`.
    pub dslack_dgamma: DVector<f64>,
    /// `∂ε*/∂uᵈᵉˢ`.
    pub dslack_ddesired: DVector<f64>,
    /// Set when the reduced KKT matrix was singular and a least-squares
    /// solution was used instead.
    pub degenerate: bool,
}

pub fn differentiate_filter(problem: &FilterProblem, solution: &FilterSolution) -> FilterJacobians {
    let m = problem.n_controls();
    let n_agents = problem.n_agents();
    let owners = problem.owners();
    let w = problem.weights();
    let nz = m + 1;

    let mut rows: Vec<DVector<f64>> = Vec::new();
    if solution.active.cbf {
        let mut row = DVector::zeros(nz);
        row.rows_mut(0, m).copy_from_slice(problem.cbf_coeffs());
        row[m] = 1.0;
        rows.push(row);
    }
    for (j, state) in solution.active.bounds.iter().enumerate() {
        if *state != BoundState::Free {
            let mut row = DVector::zeros(nz);
            row[j] = 1.0;
            rows.push(row);
        }
    }

    let dim = nz + rows.len();
    let mut kkt = DMatrix::zeros(dim, dim);
    for j in 0..m {
        kkt[(j, j)] = 2.0 * (problem.gamma()[owners[j]] + w.beta1);
    }
    kkt[(m, m)] = 2.0 * w.beta2;
    for (k, row) in rows.iter().enumerate() {
        for c in 0..nz {
            kkt[(nz + k, c)] = row[c];
            kkt[(c, nz + k)] = -row[c];
        }
    }

    // One right-hand side per parameter: γ₁..γ_N, then each desired coordinate.
    let mut rhs = DMatrix::zeros(dim, n_agents + m);
    for j in 0..m {
        let i = owners[j];
        rhs[(j, i)] = 2.0 * (problem.desired()[j] - solution.controls[j]);
        rhs[(j, n_agents + j)] = 2.0 * problem.gamma()[i];
    }

    let (sol, degenerate) = match kkt.clone().lu().solve(&rhs) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => (sol, false),
        _ => {
            let svd = kkt.svd(true, true);
            let sol = svd
                .solve(&rhs, 1e-12)
                .unwrap_or_else(|_| DMatrix::zeros(dim, n_agents + m));
            (sol, true)
        }
    };

    FilterJacobians {
        du_dgamma: sol.view((0, 0), (m, n_agents)).into_owned(),
        du_ddesired: sol.view((0, n_agents), (m, m)).into_owned(),
        dslack_dgamma: sol.row(m).columns(0, n_agents).transpose(),
        dslack_ddesired: sol.row(m).columns(n_agents, m).transpose(),
        degenerate,
    }
}
