//! Differentiate-then-solve: forward pathwise sensitivities.
//!
//! The latent state is augmented with its parameter Jacobians,
//!
//! ```text
//! d(dX/dbeta)  = (B_x dX/dbeta + dB~/dbeta) dt + sum_l S_{x,l} dX/dbeta dW^l
//! d(dX/dtheta) = (dB/dtheta + B_x dX/dtheta) dt
//!                + sum_l (dS_l/dtheta + S_{x,l} dX/dtheta) dW^l
//! ```
//!
//! where `B_x = db/dx` and `S_{x,l} = d sigma_l / dx` are evaluated along the
//! path, and the whole system is handed to the black-box solver.
//!
//! Flat layout of the augmented state (length `d + d k + d n`):
//! `[x (d) | dX/dbeta column-major (d x k) | dX/dtheta column-major (d x n)]`,
//! so column `i` of each Jacobian block is contiguous.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};
use crate::model::{CostCounters, LatentModel, StepParams};
use crate::paths::{NoisePath, TimeMesh};
use crate::solver::{solve_terminal, SdeProblem, SdeSystem};

/// Latent state together with its parameter Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub x: DVector<f64>,
    /// `d x k`.
    pub jac_beta: DMatrix<f64>,
    /// `d x n`.
    pub jac_theta: DMatrix<f64>,
}

impl AugmentedState {
    /// State at `t = 0`: the initial condition does not depend on any parameter.
    pub fn initial(x0: DVector<f64>, k: usize, n: usize) -> Self {
        let d = x0.len();
        Self {
            x: x0,
            jac_beta: DMatrix::zeros(d, k),
            jac_theta: DMatrix::zeros(d, n),
        }
    }

    pub fn flat_len(d: usize, k: usize, n: usize) -> usize {
        d + d * k + d * n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.x.len() * (1 + self.jac_beta.ncols() + self.jac_theta.ncols()));
        z.extend_from_slice(self.x.as_slice());
        z.extend_from_slice(self.jac_beta.as_slice());
        z.extend_from_slice(self.jac_theta.as_slice());
        z
    }

    pub fn unflatten(z: &[f64], d: usize, k: usize, n: usize) -> Result<Self> {
        check_dim("augmented state", Self::flat_len(d, k, n), z.len())?;
        let (x, rest) = z.split_at(d);
        let (jb, jt) = rest.split_at(d * k);
        Ok(Self {
            x: DVector::from_column_slice(x),
            jac_beta: DMatrix::from_column_slice(d, k, jb),
            jac_theta: DMatrix::from_column_slice(d, n, jt),
        })
    }
}

/// Jacobian factors of the model at one `(x, t)`.
struct LocalJacobians {
    /// `db/dx`, `d x d`.
    drift_x: DMatrix<f64>,
    /// `db/dtheta` over the full theta, `d x n`.
    drift_theta: DMatrix<f64>,
    /// `db~/dbeta`, `d x k`.
    posterior_beta: DMatrix<f64>,
    /// `d sigma / dx`, `d^2 x d`; rows `l d .. (l+1) d` belong to column `l`.
    diffusion_x: DMatrix<f64>,
    /// `d sigma / dtheta` over the full theta, `d^2 x n`.
    diffusion_theta: DMatrix<f64>,
}

/// The augmented SDE for `(X, dX/dbeta, dX/dtheta)`.
pub struct AugmentedSystem<'a> {
    model: &'a LatentModel,
    theta: &'a [f64],
    beta: &'a [f64],
    y: &'a [f64],
    counters: Option<&'a CostCounters>,
}

impl<'a> AugmentedSystem<'a> {
    pub fn with_counters(mut self, counters: &'a CostCounters) -> Self {
        self.counters = Some(counters);
        self
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.model.dim(), self.model.n_beta(), self.model.n_theta())
    }

    fn local_jacobians(&self, x: &[f64], t: f64) -> LocalJacobians {
        let m = self.model;
        let (d, k, n) = self.dims();
        let (tb, ts) = m.split_theta(self.theta);
        let nb = m.drift.n_params();

        let drift_x = m.drift.jac_x_unchecked(x, t, tb);
        let mut drift_theta = DMatrix::zeros(d, n);
        drift_theta
            .columns_mut(0, nb)
            .copy_from(&m.drift.jac_params_unchecked(x, t, tb));
        let posterior_beta = m.posterior.jac_params_unchecked(self.y, t, self.beta);
        let diffusion_x = m.diffusion.jac_x_unchecked(x, t, ts);
        let mut diffusion_theta = DMatrix::zeros(d * d, n);
        diffusion_theta
            .columns_mut(nb, n - nb)
            .copy_from(&m.diffusion.jac_params_unchecked(x, t, ts));

        if let Some(c) = self.counters {
            let wrt_theta = d.min(n) as u64;
            let wrt_x = d as u64;
            let wrt_beta = d.min(k) as u64;
            c.add(&c.drift_jac_units, wrt_x + wrt_theta);
            c.add(&c.posterior_jac_units, wrt_beta);
            c.add(&c.diffusion_jac_units, wrt_x + wrt_theta);
            c.add(&c.beta_block_units, k as u64 * (wrt_x + wrt_beta + wrt_x));
            c.add(
                &c.theta_block_units,
                n as u64 * ((wrt_theta + wrt_x) + (wrt_theta + wrt_x)),
            );
        }

        LocalJacobians {
            drift_x,
            drift_theta,
            posterior_beta,
            diffusion_x,
            diffusion_theta,
        }
    }
}

/// Builds the augmented problem on `[0, 1]` with initial state `(x0, 0, 0)`.
pub fn build_augmented<'a>(
    model: &'a LatentModel,
    theta: &'a [f64],
    beta: &'a [f64],
    y: &'a [f64],
) -> Result<SdeProblem<AugmentedSystem<'a>>> {
    model.check_params(theta, beta, y)?;
    let system = AugmentedSystem {
        model,
        theta,
        beta,
        y,
        counters: None,
    };
    let z0 = AugmentedState::initial(model.x0.clone(), model.n_beta(), model.n_theta()).flatten();
    SdeProblem::on_unit_interval(system, z0)
}

impl SdeSystem for AugmentedSystem<'_> {
    fn state_dim(&self) -> usize {
        let (d, k, n) = self.dims();
        AugmentedState::flat_len(d, k, n)
    }

    fn noise_dim(&self) -> usize {
        self.model.dim()
    }

    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let (d, k, n) = self.dims();
        let s = AugmentedState::unflatten(z, d, k, n).expect("solver passes full state");
        let (tb, _) = self.model.split_theta(self.theta);
        let b = self.model.drift.eval_unchecked(&z[..d], t, tb);
        let bt = self.model.posterior.eval_unchecked(self.y, t, self.beta);
        let j = self.local_jacobians(&z[..d], t);
        let jb = &j.drift_x * &s.jac_beta + &j.posterior_beta;
        let jt = &j.drift_theta + &j.drift_x * &s.jac_theta;
        out[..d].copy_from_slice((b + bt).as_slice());
        out[d..d + d * k].copy_from_slice(jb.as_slice());
        out[d + d * k..].copy_from_slice(jt.as_slice());
    }

    fn dispersion(&self, z: &[f64], t: f64) -> DMatrix<f64> {
        let (d, k, n) = self.dims();
        let s = AugmentedState::unflatten(z, d, k, n).expect("solver passes full state");
        let (_, ts) = self.model.split_theta(self.theta);
        let sigma = self.model.diffusion.eval_unchecked(&z[..d], t, ts);
        let j = self.local_jacobians(&z[..d], t);
        let mut g = DMatrix::zeros(self.state_dim(), d);
        for l in 0..d {
            let rows = l * d..(l + 1) * d;
            let sx = j.diffusion_x.rows(rows.start, d);
            let jb = sx * &s.jac_beta;
            let jt = j.diffusion_theta.rows(rows.start, d) + sx * &s.jac_theta;
            let mut col = g.column_mut(l);
            col.rows_mut(0, d).copy_from_slice(&sigma.as_slice()[rows]);
            col.rows_mut(d, d * k).copy_from_slice(jb.as_slice());
            col.rows_mut(d + d * k, d * n).copy_from_slice(jt.as_slice());
        }
        g
    }

    fn euler_increment(&self, z: &[f64], t: f64, h: f64, dw: &[f64], out: &mut [f64]) {
        let (d, k, n) = self.dims();
        if let Some(c) = self.counters {
            c.add(&c.steps, 1);
        }
        let x = &z[..d];
        let params = StepParams {
            theta: self.theta,
            beta: self.beta,
            y: self.y,
        };
        self.model
            .state_increment(params, x, t, h, dw, &mut out[..d], self.counters);

        let j = self.local_jacobians(x, t);
        // noise-weighted state Jacobian sum_l dW^l d sigma_l / dx
        let mut sx_dw = DMatrix::zeros(d, d);
        // noise-weighted parameter Jacobian sum_l dW^l d sigma_l / dtheta
        let mut stheta_dw = DMatrix::zeros(d, n);
        for (l, &w) in dw.iter().enumerate() {
            sx_dw += j.diffusion_x.rows(l * d, d) * w;
            stheta_dw += j.diffusion_theta.rows(l * d, d) * w;
        }

        let jac_beta = DMatrix::from_column_slice(d, k, &z[d..d + d * k]);
        let jac_theta = DMatrix::from_column_slice(d, n, &z[d + d * k..]);

        let inc_beta = (&j.drift_x * &jac_beta + &j.posterior_beta) * h + &sx_dw * &jac_beta;
        let inc_theta =
            (&j.drift_theta + &j.drift_x * &jac_theta) * h + stheta_dw + &sx_dw * &jac_theta;
        out[d..d + d * k].copy_from_slice(inc_beta.as_slice());
        out[d + d * k..].copy_from_slice(inc_theta.as_slice());
    }
}

/// Terminal latent state and its pathwise parameter Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseResult {
    pub x1: DVector<f64>,
    /// `dX_1 / dbeta`, `d x k`.
    pub jac_beta: DMatrix<f64>,
    /// `dX_1 / dtheta`, `d x n`.
    pub jac_theta: DMatrix<f64>,
}

impl From<AugmentedState> for PathwiseResult {
    fn from(s: AugmentedState) -> Self {
        Self {
            x1: s.x,
            jac_beta: s.jac_beta,
            jac_theta: s.jac_theta,
        }
    }
}

/// Solves the augmented problem on `mesh` with `noise` and unpacks the
/// terminal state.
pub fn pathwise_gradients(
    problem: &SdeProblem<AugmentedSystem<'_>>,
    mesh: &TimeMesh,
    noise: &NoisePath,
) -> Result<PathwiseResult> {
    let (d, k, n) = problem.system.dims();
    let z1 = solve_terminal(problem, mesh, noise)?;
    Ok(AugmentedState::unflatten(&z1, d, k, n)?.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Activation, VectorField};
    use crate::model::ModelSystem;
    use crate::paths::sample_wiener;
    use crate::rng;

    fn experiment_model(d: usize, act: Activation) -> LatentModel {
        LatentModel::new(
            VectorField::activation_linear(d, act).unwrap(),
            VectorField::identity_diffusion(d).unwrap(),
            VectorField::constant(d, d),
            DVector::zeros(d),
        )
        .unwrap()
    }

    fn randn(r: &mut rng::StreamRng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| s * rng::standard_normal(r)).collect()
    }

    #[test]
    fn flatten_round_trip() {
        let mut r = rng::stream(1);
        let s = AugmentedState {
            x: DVector::from_vec(randn(&mut r, 3, 1.0)),
            jac_beta: DMatrix::from_vec(3, 2, randn(&mut r, 6, 1.0)),
            jac_theta: DMatrix::from_vec(3, 4, randn(&mut r, 12, 1.0)),
        };
        let flat = s.flatten();
        assert_eq!(flat.len(), AugmentedState::flat_len(3, 2, 4));
        assert_eq!(AugmentedState::unflatten(&flat, 3, 2, 4).unwrap(), s);
        assert!(AugmentedState::unflatten(&flat[1..], 3, 2, 4).is_err());
    }

    #[test]
    fn constant_posterior_drift_gives_identity() {
        let d = 3;
        let model = LatentModel::new(
            VectorField::zero(d, d),
            VectorField::identity_diffusion(d).unwrap(),
            VectorField::constant(d, d),
            DVector::zeros(d),
        )
        .unwrap();
        let beta = [0.3, -1.0, 2.0];
        let y = [0.0; 3];
        for n in [1usize, 3, 7, 32, 100] {
            let mesh = TimeMesh::uniform(n).unwrap();
            let noise = sample_wiener(&mesh, d, n as u64).unwrap();
            let problem = build_augmented(&model, &[], &beta, &y).unwrap();
            let res = pathwise_gradients(&problem, &mesh, &noise).unwrap();
            assert_eq!(res.jac_beta, DMatrix::identity(d, d), "N = {n}");
            assert_eq!(res.jac_theta.ncols(), 0);
        }
    }

    #[test]
    fn constant_drift_parameter_sensitivity_is_one() {
        let model = LatentModel::new(
            VectorField::constant(1, 1),
            VectorField::identity_diffusion(1).unwrap(),
            VectorField::zero(1, 1),
            DVector::zeros(1),
        )
        .unwrap();
        let mesh = TimeMesh::uniform(50).unwrap();
        let noise = sample_wiener(&mesh, 1, 2).unwrap();
        let problem = build_augmented(&model, &[0.7], &[], &[0.0]).unwrap();
        let res = pathwise_gradients(&problem, &mesh, &noise).unwrap();
        assert_eq!(res.jac_theta[(0, 0)], 1.0);
    }

    #[test]
    fn diffusion_scale_sensitivity_is_the_wiener_path() {
        let model = LatentModel::new(
            VectorField::zero(1, 1),
            VectorField::scaled_identity_diffusion(1).unwrap(),
            VectorField::zero(1, 1),
            DVector::zeros(1),
        )
        .unwrap();
        let mesh = TimeMesh::uniform(64).unwrap();
        for seed in 0..20 {
            let noise = sample_wiener(&mesh, 1, seed).unwrap();
            let problem = build_augmented(&model, &[1.7], &[], &[0.0]).unwrap();
            let res = pathwise_gradients(&problem, &mesh, &noise).unwrap();
            let w1 = noise.terminal()[0];
            assert!((res.jac_theta[(0, 0)] - w1).abs() <= 1e-14, "seed {seed}");
        }
    }

    #[test]
    fn zero_length_interval() {
        let model = experiment_model(2, Activation::Sigmoid);
        let theta = [0.1, 0.2, 0.3, 0.4];
        let beta = [1.0, 2.0];
        let y = [0.0, 0.0];
        let mut problem = build_augmented(&model, &theta, &beta, &y).unwrap();
        problem.t0 = 0.5;
        problem.t1 = 0.5;
        let mesh = TimeMesh::uniform(8).unwrap();
        let noise = sample_wiener(&mesh, 2, 0).unwrap();
        let res = pathwise_gradients(&problem, &mesh, &noise).unwrap();
        assert_eq!(res.x1, model.x0);
        assert_eq!(res.jac_beta, DMatrix::zeros(2, 2));
        assert_eq!(res.jac_theta, DMatrix::zeros(2, 4));
    }

    #[test]
    fn state_row_matches_model_solve() {
        let d = 4;
        let model = experiment_model(d, Activation::Sigmoid);
        let mut r = rng::stream(12);
        let theta = randn(&mut r, d * d, 1.0);
        let beta = randn(&mut r, d, 1.0);
        let y = vec![0.0; d];
        let mesh = TimeMesh::uniform(32).unwrap();
        let noise = sample_wiener(&mesh, d, 5).unwrap();
        let aug = build_augmented(&model, &theta, &beta, &y).unwrap();
        let res = pathwise_gradients(&aug, &mesh, &noise).unwrap();
        let sys = ModelSystem::new(&model, &theta, &beta, &y).unwrap();
        let plain = SdeProblem::on_unit_interval(sys, vec![0.0; d]).unwrap();
        let x1 = solve_terminal(&plain, &mesh, &noise).unwrap();
        assert_eq!(res.x1.as_slice(), &x1[..]);
    }

    #[test]
    fn structured_increment_matches_generic_drift_and_dispersion() {
        // net diffusion exercises every block of the dispersion
        let d = 2;
        let diffusion = VectorField::new(crate::fields::Architecture::Mlp {
            in_dim: d,
            hidden: 3,
            out_dim: d * d,
            activation: Activation::Tanh,
            time_input: true,
            matrix_output: true,
        })
        .unwrap();
        let model = LatentModel::new(
            VectorField::mlp(d, 3, d, Activation::Softplus, true).unwrap(),
            diffusion,
            VectorField::affine(d, d, true).unwrap(),
            DVector::from_vec(vec![0.2, -0.1]),
        )
        .unwrap();
        let mut r = rng::stream(3);
        let theta = randn(&mut r, model.n_theta(), 0.4);
        let beta = randn(&mut r, model.n_beta(), 0.5);
        let y = randn(&mut r, d, 1.0);
        let problem = build_augmented(&model, &theta, &beta, &y).unwrap();
        let sys = &problem.system;
        let m = sys.state_dim();
        let z = randn(&mut r, m, 0.5);
        let dw = randn(&mut r, d, 0.3);
        let mut fast = vec![0.0; m];
        sys.euler_increment(&z, 0.4, 0.05, &dw, &mut fast);
        let mut drift = vec![0.0; m];
        sys.drift(&z, 0.4, &mut drift);
        let g = sys.dispersion(&z, 0.4);
        let noise = &g * DVector::from_vec(dw.clone());
        for i in 0..m {
            let generic = 0.05 * drift[i] + noise[i];
            assert!((fast[i] - generic).abs() <= 1e-12, "row {i}: {} vs {generic}", fast[i]);
        }
    }

    fn central_difference(
        model: &LatentModel,
        theta: &[f64],
        beta: &[f64],
        y: &[f64],
        mesh: &TimeMesh,
        noise: &NoisePath,
        step: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = model.dim();
        let x1 = |th: &[f64], be: &[f64]| {
            let sys = ModelSystem::new(model, th, be, y).unwrap();
            let p = SdeProblem::on_unit_interval(sys, model.x0.as_slice().to_vec()).unwrap();
            solve_terminal(&p, mesh, noise).unwrap()
        };
        let mut jb = DMatrix::zeros(d, beta.len());
        let mut b = beta.to_vec();
        for i in 0..beta.len() {
            b[i] = beta[i] + step;
            let up = x1(theta, &b);
            b[i] = beta[i] - step;
            let dn = x1(theta, &b);
            b[i] = beta[i];
            for r in 0..d {
                jb[(r, i)] = (up[r] - dn[r]) / (2.0 * step);
            }
        }
        let mut jt = DMatrix::zeros(d, theta.len());
        let mut th = theta.to_vec();
        for j in 0..theta.len() {
            th[j] = theta[j] + step;
            let up = x1(&th, beta);
            th[j] = theta[j] - step;
            let dn = x1(&th, beta);
            th[j] = theta[j];
            for r in 0..d {
                jt[(r, j)] = (up[r] - dn[r]) / (2.0 * step);
            }
        }
        (jb, jt)
    }

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        let scale = a.amax().max(b.amax());
        for (x, y) in a.iter().zip(b.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale);
            assert!(rel <= tol, "{x} vs {y} (rel {rel})");
        }
    }

    #[test]
    fn matches_same_noise_finite_differences() {
        let d = 3;
        let mesh = TimeMesh::uniform(1 << 10).unwrap();
        let mut r = rng::stream(99);
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Softplus] {
            let model = experiment_model(d, act);
            let theta = randn(&mut r, d * d, 1.0);
            let beta = randn(&mut r, d, 1.0);
            let y = vec![0.0; d];
            let noise = sample_wiener(&mesh, d, rng::derive_seed(4, act as u64)).unwrap();
            let problem = build_augmented(&model, &theta, &beta, &y).unwrap();
            let res = pathwise_gradients(&problem, &mesh, &noise).unwrap();
            let (jb, jt) = central_difference(&model, &theta, &beta, &y, &mesh, &noise, 1e-4);
            assert_close(&res.jac_beta, &jb, 1e-3);
            assert_close(&res.jac_theta, &jt, 1e-3);
        }
    }

    #[test]
    fn beta_jacobian_ignores_noise_for_linear_drift_and_additive_noise() {
        let d = 3;
        let model = LatentModel::new(
            VectorField::matrix_linear(d).unwrap(),
            VectorField::scaled_identity_diffusion(d).unwrap(),
            VectorField::constant(d, d),
            DVector::zeros(d),
        )
        .unwrap();
        let mut r = rng::stream(8);
        let mut theta = randn(&mut r, d * d, 0.7);
        theta.push(0.9);
        let beta = randn(&mut r, d, 1.0);
        let y = vec![0.0; d];
        let mesh = TimeMesh::uniform(64).unwrap();
        let problem = build_augmented(&model, &theta, &beta, &y).unwrap();
        let a = pathwise_gradients(&problem, &mesh, &sample_wiener(&mesh, d, 1).unwrap()).unwrap();
        let b = pathwise_gradients(&problem, &mesh, &sample_wiener(&mesh, d, 2).unwrap()).unwrap();
        assert_eq!(a.jac_beta, b.jac_beta);
        assert_ne!(a.x1, b.x1);
    }

    #[test]
    fn counters_follow_dimension_formulas() {
        let d = 3;
        let model = experiment_model(d, Activation::Sigmoid);
        let (k, n) = (d, d * d);
        let theta = vec![0.1; n];
        let beta = vec![0.2; k];
        let y = vec![0.0; d];
        let mesh = TimeMesh::uniform(10).unwrap();
        let noise = sample_wiener(&mesh, d, 0).unwrap();
        let counters = CostCounters::new();
        let mut problem = build_augmented(&model, &theta, &beta, &y).unwrap();
        problem.system = problem.system.with_counters(&counters);
        pathwise_gradients(&problem, &mesh, &noise).unwrap();
        let c = counters.snapshot();
        assert_eq!(c.steps, 10);
        let per_step_beta = (k * (d + d.min(k) + d)) as u64;
        let per_step_theta = (n * (d.min(n) + d) * 2) as u64;
        assert_eq!(c.beta_block_units, 10 * per_step_beta);
        assert_eq!(c.theta_block_units, 10 * per_step_theta);
        assert_eq!(c.field_evals(), 30);
    }
}
