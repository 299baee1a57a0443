//! Solve-then-differentiate: the Euler–Maruyama recursion recorded on a tape
//! and swept backwards.
//!
//! Forward, `X_{i+1} = X_i + h (b(X_i) + b~(y)) + sigma(X_i) dW_{i+1}`.
//! Backward, with `a_N` the terminal cosensitivity,
//!
//! ```text
//! a_i = a_{i+1} + h (db/dx)^T a_{i+1} + sum_l dW^l (d sigma_l/dx)^T a_{i+1}
//! ```
//!
//! and the parameter gradients pick up `h (db/dtheta)^T a_{i+1}`,
//! `sum_l dW^l (d sigma_l/dtheta)^T a_{i+1}` and `h (db~/dbeta)^T a_{i+1}` at
//! every step.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::model::{CostCounters, LatentModel, ModelSystem};
use crate::paths::{NoisePath, TimeMesh};
use crate::solver::{sde_solve, SdeProblem, Trajectory};

#[derive(Debug, Clone, Copy, Default)]
pub struct TapeOptions<'a> {
    /// Materialize every step Jacobian during the forward pass instead of
    /// recomputing vector-Jacobian products from the stored states.
    pub cache_jacobians: bool,
    pub counters: Option<&'a CostCounters>,
}

/// Step Jacobians at `(X_i, t_i)`.
#[derive(Debug, Clone)]
struct StepJacobians {
    drift_x: DMatrix<f64>,
    drift_params: DMatrix<f64>,
    posterior_params: DMatrix<f64>,
    diffusion_x: DMatrix<f64>,
    diffusion_params: DMatrix<f64>,
}

/// Every Euler state of one path together with what the reverse sweep needs.
pub struct EulerTape<'a> {
    model: &'a LatentModel,
    theta: &'a [f64],
    beta: &'a [f64],
    y: &'a [f64],
    mesh: &'a TimeMesh,
    noise: &'a NoisePath,
    trajectory: Trajectory,
    cache: Option<Vec<StepJacobians>>,
    counters: Option<&'a CostCounters>,
}

impl EulerTape<'_> {
    /// The `N + 1` states `X_0, ..., X_N`.
    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn terminal(&self) -> &[f64] {
        self.trajectory.terminal()
    }

    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    fn step_jacobians(&self, i: usize) -> StepJacobians {
        let m = self.model;
        let (tb, ts) = m.split_theta(self.theta);
        let x = self.trajectory.state(i);
        let t = self.mesh.knots()[i];
        if let Some(c) = self.counters {
            let d = m.dim() as u64;
            let units = |p: usize| (p as u64).min(d);
            c.add(&c.drift_jac_units, d + units(tb.len()));
            c.add(&c.posterior_jac_units, units(self.beta.len()));
            c.add(&c.diffusion_jac_units, d + units(ts.len()));
        }
        StepJacobians {
            drift_x: m.drift.jac_x_unchecked(x, t, tb),
            drift_params: m.drift.jac_params_unchecked(x, t, tb),
            posterior_params: m.posterior.jac_params_unchecked(self.y, t, self.beta),
            diffusion_x: m.diffusion.jac_x_unchecked(x, t, ts),
            diffusion_params: m.diffusion.jac_params_unchecked(x, t, ts),
        }
    }
}

pub fn euler_forward<'a>(
    model: &'a LatentModel,
    theta: &'a [f64],
    beta: &'a [f64],
    y: &'a [f64],
    mesh: &'a TimeMesh,
    noise: &'a NoisePath,
) -> Result<EulerTape<'a>> {
    euler_forward_with(model, theta, beta, y, mesh, noise, TapeOptions::default())
}

pub fn euler_forward_with<'a>(
    model: &'a LatentModel,
    theta: &'a [f64],
    beta: &'a [f64],
    y: &'a [f64],
    mesh: &'a TimeMesh,
    noise: &'a NoisePath,
    options: TapeOptions<'a>,
) -> Result<EulerTape<'a>> {
    let mut system = ModelSystem::new(model, theta, beta, y)?;
    if let Some(c) = options.counters {
        system = system.with_counters(c);
    }
    let problem = SdeProblem::on_unit_interval(system, model.x0.as_slice().to_vec())?;
    let trajectory = sde_solve(&problem, mesh, noise)?;
    let mut tape = EulerTape {
        model,
        theta,
        beta,
        y,
        mesh,
        noise,
        trajectory,
        cache: None,
        counters: options.counters,
    };
    if options.cache_jacobians {
        tape.cache = Some((0..mesh.len()).map(|i| tape.step_jacobians(i)).collect());
    }
    Ok(tape)
}

/// Reverse sweep: gradients of a scalar loss `L(X_N)` given
/// `terminal_cosensitivity = dL/dX_N`. Returns `(grad_theta, grad_beta)`.
pub fn euler_backward(
    tape: &EulerTape<'_>,
    terminal_cosensitivity: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = tape.model;
    let d = m.dim();
    check_dim("terminal cosensitivity", d, terminal_cosensitivity.len())?;
    if terminal_cosensitivity.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite terminal cosensitivity".into()));
    }
    let (tb, ts) = m.split_theta(tape.theta);
    let nb = tb.len();
    let mut grad_theta = DVector::zeros(m.n_theta());
    let mut grad_beta = DVector::zeros(m.n_beta());
    let mut a = DVector::from_column_slice(terminal_cosensitivity);
    // cotangent on the flat column-major sigma: entry (i, l) is a_i dW^l
    let mut sigma_cot = vec![0.0; d * d];

    for i in (0..tape.mesh.len()).rev() {
        let h = tape.mesh.steps()[i];
        let dw = tape.noise.increment(i);
        let x = tape.trajectory.state(i);
        let t = tape.mesh.knots()[i];
        let ha = &a * h;
        for (l, w) in dw.iter().enumerate() {
            for r in 0..d {
                sigma_cot[l * d + r] = a[r] * w;
            }
        }

        let (gx_b, gp_b, gp_post, gx_s, gp_s) = match &tape.cache {
            Some(cache) => {
                let j = &cache[i];
                let cot = DVector::from_column_slice(&sigma_cot);
                (
                    j.drift_x.tr_mul(&ha),
                    j.drift_params.tr_mul(&ha),
                    j.posterior_params.tr_mul(&ha),
                    j.diffusion_x.tr_mul(&cot),
                    j.diffusion_params.tr_mul(&cot),
                )
            }
            None => {
                if let Some(c) = tape.counters {
                    c.add(&c.drift_jac_units, 1);
                    c.add(&c.posterior_jac_units, 1);
                    c.add(&c.diffusion_jac_units, 1);
                }
                let (gx_b, gp_b) = m.drift.vjp_unchecked(x, t, tb, ha.as_slice());
                let (_, gp_post) = m.posterior.vjp_unchecked(tape.y, t, tape.beta, ha.as_slice());
                let (gx_s, gp_s) = m.diffusion.vjp_unchecked(x, t, ts, &sigma_cot);
                (gx_b, gp_b, gp_post, gx_s, gp_s)
            }
        };

        grad_theta.rows_mut(0, nb).axpy(1.0, &gp_b, 1.0);
        grad_theta.rows_mut(nb, ts.len()).axpy(1.0, &gp_s, 1.0);
        grad_beta += gp_post;
        a += gx_b + gx_s;
    }
    Ok((grad_theta, grad_beta))
}
