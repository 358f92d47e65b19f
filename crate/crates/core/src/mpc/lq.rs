//! Equality-constrained linear-quadratic trajectory problems solved
//! through their optimality system, with parameter gradients by implicit
//! differentiation.
//!
//! This is the independent reference route for checking the iLQR solver
//! and its tape replay: no rollouts, no Riccati recursion, just one dense
//! symmetric solve of the first-order conditions and, for gradients, one
//! more solve per parameter. Costs follow the same convention as the
//! solver (no one-half factor), so Hessians carry a factor of two.

use crate::math::{solve_linear, MathError, Matrix};

/// Finite-horizon LQ problem over `horizon` control intervals.
///
/// Decision vector: `mu = [x_0, ..., x_H, u_0, ..., u_{H-1}]`.
/// Constraints: `x_0 = x_init` and `x_{k+1} = A_k x_k + B_k u_k + c_k`.
/// Cost: `sum_k (x_k' Qx x_k + px_k' x_k + u_k' R u_k + pu_k' u_k)`
/// for `k < H`, plus `x_H' QN x_H + pn' x_H`.
#[derive(Clone, Debug)]
pub struct LqProblem {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub a: Vec<Matrix<f64>>,
    pub b: Vec<Matrix<f64>>,
    pub c: Vec<Vec<f64>>,
    pub qx: Matrix<f64>,
    pub r: Matrix<f64>,
    pub qn: Matrix<f64>,
    pub px: Vec<Vec<f64>>,
    pub pu: Vec<Vec<f64>>,
    pub pn: Vec<f64>,
    pub x_init: Vec<f64>,
}

/// Primal and dual solution of the optimality system, with the states and
/// controls unpacked for convenience.
#[derive(Clone, Debug)]
pub struct KktSolution {
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub us: Vec<Vec<f64>>,
}

impl LqProblem {
    /// Tracking problem around references, with the constant term of the
    /// expanded quadratic dropped (it does not move the optimum).
    #[allow(clippy::too_many_arguments)]
    pub fn tracking(
        a: Vec<Matrix<f64>>,
        b: Vec<Matrix<f64>>,
        qx: Matrix<f64>,
        r: Matrix<f64>,
        qn: Matrix<f64>,
        x_ref: &[f64],
        u_ref: &[f64],
        x_init: Vec<f64>,
    ) -> Self {
        let horizon = a.len();
        let nx = qx.rows();
        let nu = r.rows();
        let px_k: Vec<f64> = (0..nx)
            .map(|i| -2.0 * (0..nx).map(|j| qx[(i, j)] * x_ref[j]).sum::<f64>())
            .collect();
        let pu_k: Vec<f64> = (0..nu)
            .map(|i| -2.0 * (0..nu).map(|j| r[(i, j)] * u_ref[j]).sum::<f64>())
            .collect();
        let pn: Vec<f64> = (0..nx)
            .map(|i| -2.0 * (0..nx).map(|j| qn[(i, j)] * x_ref[j]).sum::<f64>())
            .collect();
        LqProblem {
            nx,
            nu,
            horizon,
            c: vec![vec![0.0; nx]; horizon],
            a,
            b,
            qx,
            r,
            qn,
            px: vec![px_k; horizon],
            pu: vec![pu_k; horizon],
            pn,
            x_init,
        }
    }

    pub fn num_primal(&self) -> usize {
        (self.horizon + 1) * self.nx + self.horizon * self.nu
    }

    pub fn num_dual(&self) -> usize {
        (self.horizon + 1) * self.nx
    }

    fn x_offset(&self, k: usize) -> usize {
        k * self.nx
    }

    fn u_offset(&self, k: usize) -> usize {
        (self.horizon + 1) * self.nx + k * self.nu
    }

    /// Primal cost Hessian (a factor of two on the block weights).
    fn hessian(&self) -> Matrix<f64> {
        let np = self.num_primal();
        let mut h = Matrix::<f64>::zeros(np, np);
        for k in 0..=self.horizon {
            let w = if k == self.horizon { &self.qn } else { &self.qx };
            let o = self.x_offset(k);
            for i in 0..self.nx {
                for j in 0..self.nx {
                    h[(o + i, o + j)] = 2.0 * w[(i, j)];
                }
            }
        }
        for k in 0..self.horizon {
            let o = self.u_offset(k);
            for i in 0..self.nu {
                for j in 0..self.nu {
                    h[(o + i, o + j)] = 2.0 * self.r[(i, j)];
                }
            }
        }
        h
    }

    /// Linear cost term stacked over the primal vector.
    fn linear(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.num_primal()];
        for k in 0..self.horizon {
            let o = self.x_offset(k);
            p[o..o + self.nx].copy_from_slice(&self.px[k]);
            let o = self.u_offset(k);
            p[o..o + self.nu].copy_from_slice(&self.pu[k]);
        }
        let o = self.x_offset(self.horizon);
        p[o..o + self.nx].copy_from_slice(&self.pn);
        p
    }

    /// Constraint matrix `G` with `G mu = g`; row block 0 pins the initial
    /// state, block `k + 1` encodes the transition out of step `k`.
    fn constraints(&self) -> (Matrix<f64>, Vec<f64>) {
        let (np, nd) = (self.num_primal(), self.num_dual());
        let mut g = Matrix::<f64>::zeros(nd, np);
        let mut rhs = vec![0.0; nd];
        for i in 0..self.nx {
            g[(i, self.x_offset(0) + i)] = 1.0;
            rhs[i] = self.x_init[i];
        }
        for k in 0..self.horizon {
            let row = (k + 1) * self.nx;
            for i in 0..self.nx {
                g[(row + i, self.x_offset(k + 1) + i)] = 1.0;
                for j in 0..self.nx {
                    g[(row + i, self.x_offset(k) + j)] = -self.a[k][(i, j)];
                }
                for j in 0..self.nu {
                    g[(row + i, self.u_offset(k) + j)] = -self.b[k][(i, j)];
                }
                rhs[row + i] = self.c[k][i];
            }
        }
        (g, rhs)
    }

    /// Assemble and solve the full optimality system in one dense solve.
    pub fn solve_kkt(&self) -> Result<KktSolution, MathError> {
        let (np, nd) = (self.num_primal(), self.num_dual());
        let h = self.hessian();
        let p = self.linear();
        let (g, rhs_g) = self.constraints();
        let n = np + nd;
        let mut m = Matrix::<f64>::zeros(n, n);
        let mut rhs = vec![0.0; n];
        for i in 0..np {
            for j in 0..np {
                m[(i, j)] = h[(i, j)];
            }
        }
        for i in 0..nd {
            for j in 0..np {
                m[(np + i, j)] = g[(i, j)];
                m[(j, np + i)] = g[(i, j)];
            }
        }
        for i in 0..np {
            rhs[i] = -p[i];
        }
        rhs[np..np + nd].copy_from_slice(&rhs_g);
        let sol = solve_linear(&m, &rhs)?;
        let mu = sol[..np].to_vec();
        let lambda = sol[np..].to_vec();
        let xs = (0..=self.horizon)
            .map(|k| mu[self.x_offset(k)..self.x_offset(k) + self.nx].to_vec())
            .collect();
        let us = (0..self.horizon)
            .map(|k| mu[self.u_offset(k)..self.u_offset(k) + self.nu].to_vec())
            .collect();
        Ok(KktSolution {
            mu,
            lambda,
            xs,
            us,
        })
    }

    /// Largest constraint violation of a candidate primal point.
    pub fn constraint_residual(&self, mu: &[f64]) -> f64 {
        let (g, rhs) = self.constraints();
        g.matvec(mu)
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A family of LQ problems indexed by a parameter vector, with analytic
/// derivatives of every problem datum. `d_problem` returns a problem
/// whose entries are elementwise derivatives with respect to parameter
/// `j`; shapes must match `problem`.
pub trait LqFamily {
    fn theta_dim(&self) -> usize;
    fn problem(&self, theta: &[f64]) -> LqProblem;
    fn d_problem(&self, theta: &[f64], j: usize) -> LqProblem;
}

/// Gradient of `loss(mu*)` with respect to the family parameters by
/// implicit differentiation of the optimality system. `d_loss` must
/// return the gradient of the loss over the primal vector at the solved
/// point. Returns the solution together with `d loss / d theta`.
pub fn kkt_gradient(
    family: &dyn LqFamily,
    theta: &[f64],
    d_loss: &dyn Fn(&KktSolution) -> Vec<f64>,
) -> Result<(KktSolution, Vec<f64>), MathError> {
    let prob = family.problem(theta);
    let sol = prob.solve_kkt()?;
    let (np, nd) = (prob.num_primal(), prob.num_dual());
    let n = np + nd;

    // The same system matrix as the solve, reassembled once and reused
    // for every parameter direction.
    let h = prob.hessian();
    let (g, _) = prob.constraints();
    let mut m = Matrix::<f64>::zeros(n, n);
    for i in 0..np {
        for j in 0..np {
            m[(i, j)] = h[(i, j)];
        }
    }
    for i in 0..nd {
        for j in 0..np {
            m[(np + i, j)] = g[(i, j)];
            m[(j, np + i)] = g[(i, j)];
        }
    }

    let gvec = d_loss(&sol);
    assert_eq!(gvec.len(), np, "loss gradient length");
    let mut grad = Vec::with_capacity(family.theta_dim());
    for j in 0..family.theta_dim() {
        let dp = family.d_problem(theta, j);
        let dh = dp.hessian();
        let dlin = dp.linear();
        // Derivative of the constraint map. The identity entries pinning
        // x_0 and each x_{k+1} are structural, so only the A, B blocks
        // and the right-hand sides differentiate.
        let mut dg = Matrix::<f64>::zeros(nd, np);
        let mut drhs = vec![0.0; nd];
        for i in 0..prob.nx {
            drhs[i] = dp.x_init[i];
        }
        for k in 0..prob.horizon {
            let row = (k + 1) * prob.nx;
            for i in 0..prob.nx {
                for jj in 0..prob.nx {
                    dg[(row + i, prob.x_offset(k) + jj)] = -dp.a[k][(i, jj)];
                }
                for jj in 0..prob.nu {
                    dg[(row + i, prob.u_offset(k) + jj)] = -dp.b[k][(i, jj)];
                }
                drhs[row + i] = dp.c[k][i];
            }
        }
        // Residual derivative of the stationarity block:
        //   d(H mu + p + G' lambda) = dH mu + dp + dG' lambda
        let mut rhs = vec![0.0; n];
        let dh_mu = dh.matvec(&sol.mu);
        let dgt_lam = dg.transpose().matvec(&sol.lambda);
        for i in 0..np {
            rhs[i] = -(dh_mu[i] + dlin[i] + dgt_lam[i]);
        }
        // Constraint block: d(G mu - g) = dG mu - dg.
        let dg_mu = dg.matvec(&sol.mu);
        for i in 0..nd {
            rhs[np + i] = -(dg_mu[i] - drhs[i]);
        }
        let dsol = solve_linear(&m, &rhs)?;
        grad.push((0..np).map(|i| gvec[i] * dsol[i]).sum());
    }
    Ok((sol, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Identity init-pin rows have zero derivative, so a derivative
    /// problem needs explicit zero x_init unless the initial state is a
    /// parameter.
    fn zeroed_like(p: &LqProblem) -> LqProblem {
        LqProblem {
            nx: p.nx,
            nu: p.nu,
            horizon: p.horizon,
            a: vec![Matrix::zeros(p.nx, p.nx); p.horizon],
            b: vec![Matrix::zeros(p.nx, p.nu); p.horizon],
            c: vec![vec![0.0; p.nx]; p.horizon],
            qx: Matrix::zeros(p.nx, p.nx),
            r: Matrix::zeros(p.nu, p.nu),
            qn: Matrix::zeros(p.nx, p.nx),
            px: vec![vec![0.0; p.nx]; p.horizon],
            pu: vec![vec![0.0; p.nu]; p.horizon],
            pn: vec![0.0; p.nx],
            x_init: vec![0.0; p.nx],
        }
    }

    /// Scalar one-step family: x_1 = a x_0 + b u_0, cost
    /// q x_0^2 + r u_0^2 + qf x_1^2, parameters [a, b].
    struct ScalarFamily {
        q: f64,
        r: f64,
        qf: f64,
        x0: f64,
    }

    impl LqFamily for ScalarFamily {
        fn theta_dim(&self) -> usize {
            2
        }

        fn problem(&self, theta: &[f64]) -> LqProblem {
            LqProblem {
                nx: 1,
                nu: 1,
                horizon: 1,
                a: vec![Matrix::from_rows(&[&[theta[0]]])],
                b: vec![Matrix::from_rows(&[&[theta[1]]])],
                c: vec![vec![0.0]],
                qx: Matrix::from_rows(&[&[self.q]]),
                r: Matrix::from_rows(&[&[self.r]]),
                qn: Matrix::from_rows(&[&[self.qf]]),
                px: vec![vec![0.0]],
                pu: vec![vec![0.0]],
                pn: vec![0.0],
                x_init: vec![self.x0],
            }
        }

        fn d_problem(&self, theta: &[f64], j: usize) -> LqProblem {
            let mut d = zeroed_like(&self.problem(theta));
            if j == 0 {
                d.a[0][(0, 0)] = 1.0;
            } else {
                d.b[0][(0, 0)] = 1.0;
            }
            d
        }
    }

    #[test]
    fn scalar_problem_matches_closed_form() {
        let fam = ScalarFamily {
            q: 0.7,
            r: 0.4,
            qf: 2.5,
            x0: 1.3,
        };
        let (a, b) = (0.9, 0.5);
        let sol = fam.problem(&[a, b]).solve_kkt().unwrap();
        // Minimizing r u^2 + qf (a x0 + b u)^2 in u.
        let expect = -fam.qf * a * b * fam.x0 / (fam.r + fam.qf * b * b);
        assert!(
            (sol.us[0][0] - expect).abs() < 1e-10,
            "u* = {} vs {}",
            sol.us[0][0],
            expect
        );
        assert!((sol.xs[0][0] - fam.x0).abs() < 1e-12);
        assert!((sol.xs[1][0] - (a * fam.x0 + b * expect)).abs() < 1e-12);
    }

    #[test]
    fn scalar_gradient_matches_hand_derivative() {
        let fam = ScalarFamily {
            q: 0.7,
            r: 0.4,
            qf: 2.5,
            x0: 1.3,
        };
        let theta = [0.9, 0.5];
        // Loss: the control itself.
        let d_loss = |sol: &KktSolution| {
            let mut g = vec![0.0; sol.mu.len()];
            let u_idx = sol.mu.len() - 1;
            g[u_idx] = 1.0;
            g
        };
        let (_, grad) = kkt_gradient(&fam, &theta, &d_loss).unwrap();
        // u*(a, b) = -qf a b x0 / (r + qf b^2), differentiated by hand.
        let (q_f, r, x0) = (fam.qf, fam.r, fam.x0);
        let (a, b) = (theta[0], theta[1]);
        let den = r + q_f * b * b;
        let du_da = -q_f * b * x0 / den;
        let du_db = (-q_f * a * x0 * den + q_f * a * b * x0 * (2.0 * q_f * b)) / (den * den);
        assert!((grad[0] - du_da).abs() < 1e-10, "{} vs {du_da}", grad[0]);
        assert!((grad[1] - du_db).abs() < 1e-10, "{} vs {du_db}", grad[1]);
    }

    /// Random dense LTV family where one parameter scales every A, one
    /// scales every B, and one shifts the offsets c.
    struct LtvFamily {
        base_a: Vec<Matrix<f64>>,
        base_b: Vec<Matrix<f64>>,
        qx: Matrix<f64>,
        r: Matrix<f64>,
        qn: Matrix<f64>,
        x_init: Vec<f64>,
    }

    impl LtvFamily {
        fn random(nx: usize, nu: usize, horizon: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mat = |r: usize, c: usize, scale: f64| {
                Matrix::from_fn(r, c, |_, _| scale * rng.gen_range(-1.0..1.0))
            };
            let base_a: Vec<_> = (0..horizon).map(|_| mat(nx, nx, 0.5)).collect();
            let base_b: Vec<_> = (0..horizon).map(|_| mat(nx, nu, 0.8)).collect();
            let qx = Matrix::from_fn(nx, nx, |r, c| if r == c { 1.0 + 0.3 * r as f64 } else { 0.0 });
            let r_m = Matrix::from_fn(nu, nu, |r, c| if r == c { 0.5 + 0.2 * r as f64 } else { 0.0 });
            let qn = qx.scale(4.0);
            let x_init = (0..nx).map(|_| rng.gen_range(-1.0..1.0)).collect();
            LtvFamily {
                base_a,
                base_b,
                qx,
                r: r_m,
                qn,
                x_init,
            }
        }
    }

    impl LqFamily for LtvFamily {
        fn theta_dim(&self) -> usize {
            3
        }

        fn problem(&self, theta: &[f64]) -> LqProblem {
            let horizon = self.base_a.len();
            let nx = self.qx.rows();
            LqProblem {
                nx,
                nu: self.r.rows(),
                horizon,
                a: self.base_a.iter().map(|m| m.scale(theta[0])).collect(),
                b: self.base_b.iter().map(|m| m.scale(theta[1])).collect(),
                c: vec![vec![theta[2]; nx]; horizon],
                qx: self.qx.clone(),
                r: self.r.clone(),
                qn: self.qn.clone(),
                px: vec![vec![0.0; nx]; horizon],
                pu: vec![vec![0.0; self.r.rows()]; horizon],
                pn: vec![0.0; nx],
                x_init: self.x_init.clone(),
            }
        }

        fn d_problem(&self, _theta: &[f64], j: usize) -> LqProblem {
            let horizon = self.base_a.len();
            let nx = self.qx.rows();
            let mut d = zeroed_like(&self.problem(&[1.0, 1.0, 0.0]));
            match j {
                0 => d.a = self.base_a.clone(),
                1 => d.b = self.base_b.clone(),
                _ => d.c = vec![vec![1.0; nx]; horizon],
            }
            d
        }
    }

    #[test]
    fn ltv_solution_satisfies_optimality_conditions() {
        let fam = LtvFamily::random(3, 2, 6, 21);
        let theta = [0.8, 1.1, 0.05];
        let prob = fam.problem(&theta);
        let sol = prob.solve_kkt().unwrap();
        assert!(prob.constraint_residual(&sol.mu) < 1e-10);
        // Stationarity: H mu + p + G' lambda = 0.
        let h = prob.hessian();
        let p = prob.linear();
        let (g, _) = prob.constraints();
        let mut res: f64 = 0.0;
        let hmu = h.matvec(&sol.mu);
        let gtl = g.transpose().matvec(&sol.lambda);
        for i in 0..prob.num_primal() {
            res = res.max((hmu[i] + p[i] + gtl[i]).abs());
        }
        assert!(res < 1e-9, "stationarity residual {res:.3e}");
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let fam = LtvFamily::random(3, 2, 6, 33);
        let theta = [0.9, 1.2, -0.1];
        // Loss: sum of squares of the first control.
        let d_loss = |sol: &KktSolution| {
            let mut g = vec![0.0; sol.mu.len()];
            let off = (sol.xs.len()) * sol.xs[0].len();
            for j in 0..sol.us[0].len() {
                g[off + j] = 2.0 * sol.us[0][j];
            }
            g
        };
        let loss_of = |th: &[f64]| -> f64 {
            let sol = fam.problem(th).solve_kkt().unwrap();
            sol.us[0].iter().map(|u| u * u).sum()
        };
        let (_, grad) = kkt_gradient(&fam, &theta, &d_loss).unwrap();
        for j in 0..3 {
            let h = 1e-6;
            let mut tp = theta;
            tp[j] += h;
            let mut tm = theta;
            tm[j] -= h;
            let fd = (loss_of(&tp) - loss_of(&tm)) / (2.0 * h);
            assert!(
                (grad[j] - fd).abs() < 1e-8 * (1.0 + fd.abs()),
                "theta[{j}]: implicit {:.9e} vs fd {:.9e}",
                grad[j],
                fd
            );
        }
    }

    #[test]
    fn tracking_constructor_recovers_reference_when_reachable() {
        // Drive a single integrator to a reference it can hold; with no
        // control penalty conflict the terminal state lands on it.
        let horizon = 12;
        let a = vec![Matrix::from_rows(&[&[1.0]]); horizon];
        let b = vec![Matrix::from_rows(&[&[0.5]]); horizon];
        let prob = LqProblem::tracking(
            a,
            b,
            Matrix::from_rows(&[&[1.0]]),
            Matrix::from_rows(&[&[1e-4]]),
            Matrix::from_rows(&[&[50.0]]),
            &[2.0],
            &[0.0],
            vec![0.0],
        );
        let sol = prob.solve_kkt().unwrap();
        assert!((sol.xs[horizon][0] - 2.0).abs() < 1e-2);
    }
}
