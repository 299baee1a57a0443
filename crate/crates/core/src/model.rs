//! The latent neural SDE with its posterior drift,
//! `dX = (b(X,t;theta) + b~(y,t;beta)) dt + sigma(X,t;theta) dW`,
//! shared by both gradient engines.
//!
//! `theta` is the concatenation of the drift parameters and the diffusion
//! parameters (in that order); `beta` holds the posterior drift parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::fields::{OutShape, ParamVector, VectorField};
use crate::solver::SdeSystem;

#[derive(Debug, Clone)]
pub struct LatentModel {
    pub drift: VectorField,
    pub diffusion: VectorField,
    pub posterior: VectorField,
    pub x0: DVector<f64>,
}

impl LatentModel {
    pub fn new(
        drift: VectorField,
        diffusion: VectorField,
        posterior: VectorField,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let d = x0.len();
        if d == 0 {
            return Err(Error::InvalidArgument("latent dimension must be positive".into()));
        }
        check_dim("drift input", d, drift.in_dim())?;
        match drift.shape() {
            OutShape::Vector(n) => check_dim("drift output", d, n)?,
            OutShape::Matrix(_) => {
                return Err(Error::InvalidArgument("drift must be vector valued".into()))
            }
        }
        check_dim("diffusion input", d, diffusion.in_dim())?;
        match diffusion.shape() {
            OutShape::Matrix(n) => check_dim("diffusion output", d, n)?,
            OutShape::Vector(_) => {
                return Err(Error::InvalidArgument("diffusion must be matrix valued".into()))
            }
        }
        match posterior.shape() {
            OutShape::Vector(n) => check_dim("posterior drift output", d, n)?,
            OutShape::Matrix(_) => {
                return Err(Error::InvalidArgument(
                    "posterior drift must be vector valued".into(),
                ))
            }
        }
        Ok(Self {
            drift,
            diffusion,
            posterior,
            x0,
        })
    }

    /// Latent dimension `d`.
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Dimension of the observation fed to the posterior drift.
    pub fn obs_dim(&self) -> usize {
        self.posterior.in_dim()
    }

    pub fn n_theta(&self) -> usize {
        self.drift.n_params() + self.diffusion.n_params()
    }

    pub fn n_beta(&self) -> usize {
        self.posterior.n_params()
    }

    pub fn theta(&self, drift: &ParamVector, diffusion: &ParamVector) -> Result<ParamVector> {
        check_dim("drift parameters", self.drift.n_params(), drift.len())?;
        check_dim("diffusion parameters", self.diffusion.n_params(), diffusion.len())?;
        Ok(ParamVector::concat(&[("drift", drift), ("diffusion", diffusion)]))
    }

    /// Splits `theta` into (drift, diffusion) parameter slices.
    pub fn split_theta<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        theta.split_at(self.drift.n_params())
    }

    pub(crate) fn check_params(&self, theta: &[f64], beta: &[f64], y: &[f64]) -> Result<()> {
        check_dim("theta", self.n_theta(), theta.len())?;
        check_dim("beta", self.n_beta(), beta.len())?;
        check_dim("observation", self.obs_dim(), y.len())
    }

    /// `h (b + b~) + sigma dw` at `(x, t)`; every engine steps `X` through here.
    pub(crate) fn state_increment(
        &self,
        params: StepParams<'_>,
        x: &[f64],
        t: f64,
        h: f64,
        dw: &[f64],
        out: &mut [f64],
        counters: Option<&CostCounters>,
    ) {
        let (tb, ts) = self.split_theta(params.theta);
        let b = self.drift.eval_unchecked(x, t, tb);
        let bt = self.posterior.eval_unchecked(params.y, t, params.beta);
        let sigma = self.diffusion.eval_unchecked(x, t, ts);
        if let Some(c) = counters {
            c.add(&c.drift_evals, 1);
            c.add(&c.posterior_evals, 1);
            c.add(&c.diffusion_evals, 1);
        }
        let d = self.dim();
        for i in 0..d {
            let mut noise = 0.0;
            for (l, w) in dw.iter().enumerate() {
                noise += sigma[l * d + i] * w;
            }
            out[i] = h * (b[i] + bt[i]) + noise;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct StepParams<'a> {
    pub theta: &'a [f64],
    pub beta: &'a [f64],
    pub y: &'a [f64],
}

/// `X^{theta,beta}` as a black-box SDE system.
pub struct ModelSystem<'a> {
    model: &'a LatentModel,
    params: StepParams<'a>,
    counters: Option<&'a CostCounters>,
}

impl<'a> ModelSystem<'a> {
    pub fn new(
        model: &'a LatentModel,
        theta: &'a [f64],
        beta: &'a [f64],
        y: &'a [f64],
    ) -> Result<Self> {
        model.check_params(theta, beta, y)?;
        Ok(Self {
            model,
            params: StepParams { theta, beta, y },
            counters: None,
        })
    }

    pub fn with_counters(mut self, counters: &'a CostCounters) -> Self {
        self.counters = Some(counters);
        self
    }
}

impl SdeSystem for ModelSystem<'_> {
    fn state_dim(&self) -> usize {
        self.model.dim()
    }

    fn noise_dim(&self) -> usize {
        self.model.dim()
    }

    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let (tb, _) = self.model.split_theta(self.params.theta);
        let b = self.model.drift.eval_unchecked(z, t, tb);
        let bt = self.model.posterior.eval_unchecked(self.params.y, t, self.params.beta);
        for i in 0..out.len() {
            out[i] = b[i] + bt[i];
        }
    }

    fn dispersion(&self, z: &[f64], t: f64) -> DMatrix<f64> {
        let d = self.model.dim();
        let (_, ts) = self.model.split_theta(self.params.theta);
        let flat = self.model.diffusion.eval_unchecked(z, t, ts);
        DMatrix::from_column_slice(d, d, flat.as_slice())
    }

    fn euler_increment(&self, z: &[f64], t: f64, h: f64, dw: &[f64], out: &mut [f64]) {
        if let Some(c) = self.counters {
            c.add(&c.steps, 1);
        }
        self.model
            .state_increment(self.params, z, t, h, dw, out, self.counters)
    }
}

/// Work counters for the gradient engines.
///
/// Jacobian costs are in units of one evaluation of the differentiated field:
/// a dense Jacobian over `p` inputs of a field with `q` outputs (per diffusion
/// column) costs `min(p, q)` units when built column by column, as forward-
/// or reverse-mode AD would; a vector-Jacobian product costs one unit.
#[derive(Debug, Default)]
pub struct CostCounters {
    pub steps: AtomicU64,
    pub drift_evals: AtomicU64,
    pub posterior_evals: AtomicU64,
    pub diffusion_evals: AtomicU64,
    pub drift_jac_units: AtomicU64,
    pub posterior_jac_units: AtomicU64,
    pub diffusion_jac_units: AtomicU64,
    /// Sum over steps of (sensitivity columns) x (Jacobian units they consume)
    /// for the `d X / d beta` block.
    pub beta_block_units: AtomicU64,
    /// Same for the `d X / d theta` block.
    pub theta_block_units: AtomicU64,
}

/// Plain snapshot of [`CostCounters`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostReport {
    pub steps: u64,
    pub drift_evals: u64,
    pub posterior_evals: u64,
    pub diffusion_evals: u64,
    pub drift_jac_units: u64,
    pub posterior_jac_units: u64,
    pub diffusion_jac_units: u64,
    pub beta_block_units: u64,
    pub theta_block_units: u64,
}

impl CostReport {
    pub fn field_evals(&self) -> u64 {
        self.drift_evals + self.posterior_evals + self.diffusion_evals
    }

    pub fn jac_units(&self) -> u64 {
        self.drift_jac_units + self.posterior_jac_units + self.diffusion_jac_units
    }
}

impl CostCounters {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub(crate) fn add(&self, counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CostReport {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CostReport {
            steps: get(&self.steps),
            drift_evals: get(&self.drift_evals),
            posterior_evals: get(&self.posterior_evals),
            diffusion_evals: get(&self.diffusion_evals),
            drift_jac_units: get(&self.drift_jac_units),
            posterior_jac_units: get(&self.posterior_jac_units),
            diffusion_jac_units: get(&self.diffusion_jac_units),
            beta_block_units: get(&self.beta_block_units),
            theta_block_units: get(&self.theta_block_units),
        }
    }
}
