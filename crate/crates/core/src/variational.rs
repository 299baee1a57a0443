//! The variational free energy
//! `F(theta, beta; y) = 1/2 int |b~(y,t;beta)|^2 dt + E[-log p(y | X_1)]`,
//! its Monte-Carlo gradient through either engine, and gradient descent.
//!
//! Dataset reports and gradients are per-observation means.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::{euler_backward, euler_forward};
use crate::error::{check_dim, Error, Result};
use crate::fields::VectorField;
use crate::model::{LatentModel, ModelSystem};
use crate::paths::{sample_wiener, NoisePath, TimeMesh};
use crate::rng::derive_seed;
use crate::sensitivity::{build_augmented, pathwise_gradients};
use crate::solver::{solve_terminal, SdeProblem};

/// Likelihood `p(y | x)` of an observation given the terminal latent state.
pub trait ObservationModel: Sync {
    fn log_lik(&self, y: &[f64], x: &[f64]) -> f64;
    fn grad_x_log_lik(&self, y: &[f64], x: &[f64]) -> DVector<f64>;

    /// Returns `-log p(y | x)` and adds `-grad_x log p(y | x)` into `cotangent`.
    fn accumulate_nll(&self, y: &[f64], x: &[f64], cotangent: &mut DVector<f64>) -> f64 {
        *cotangent -= self.grad_x_log_lik(y, x);
        -self.log_lik(y, x)
    }
}

/// `y ~ N(x, I)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianObservation;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl ObservationModel for GaussianObservation {
    fn log_lik(&self, y: &[f64], x: &[f64]) -> f64 {
        let sq: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * sq - 0.5 * y.len() as f64 * LN_2PI
    }

    fn grad_x_log_lik(&self, y: &[f64], x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), y.iter().zip(x).map(|(a, b)| a - b))
    }

    fn accumulate_nll(&self, y: &[f64], x: &[f64], cotangent: &mut DVector<f64>) -> f64 {
        let mut sq = 0.0;
        for ((c, a), b) in cotangent.iter_mut().zip(y).zip(x) {
            let r = b - a;
            *c += r;
            sq += r * r;
        }
        0.5 * sq + 0.5 * y.len() as f64 * LN_2PI
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientEngine {
    Pathwise,
    #[default]
    EulerBackprop,
}

impl GradientEngine {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pathwise => "pathwise",
            Self::EulerBackprop => "euler_backprop",
        }
    }
}

impl FromStr for GradientEngine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pathwise" => Ok(Self::Pathwise),
            "euler_backprop" | "backprop" => Ok(Self::EulerBackprop),
            other => Err(Error::Unknown {
                kind: "gradient engine",
                name: other.to_string(),
            }),
        }
    }
}

/// How variational parameters are attached to observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSharing {
    /// One `beta` for every observation.
    #[default]
    Shared,
    /// Observation `j` owns block `j` of `beta`.
    PerObservation,
}

impl FromStr for BetaSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Self::Shared),
            "per_observation" => Ok(Self::PerObservation),
            other => Err(Error::Unknown {
                kind: "beta sharing",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub kl: f64,
    pub nll: f64,
    pub total: f64,
    pub nll_std_err: f64,
    pub n_paths: usize,
    pub engine: GradientEngine,
}

/// Monte-Carlo settings for one free-energy (gradient) estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub n_paths: usize,
    pub seed: u64,
    pub engine: GradientEngine,
    /// When set, paths are drawn on `TimeMesh::uniform(resolution)` and summed
    /// down to the working mesh, so estimates on different uniform meshes
    /// share Brownian paths. The working mesh must be uniform with a step
    /// count dividing `resolution`.
    pub noise_resolution: Option<usize>,
}

impl MonteCarlo {
    pub fn new(n_paths: usize, seed: u64, engine: GradientEngine) -> Self {
        Self {
            n_paths,
            seed,
            engine,
            noise_resolution: None,
        }
    }
}

/// Left-endpoint quadrature `1/2 sum_i h_{i+1} |b~(y, t_i; beta)|^2`.
///
/// Runs of equal integrand values are weighted by the knot span they cover,
/// so a constant drift integrates exactly.
pub fn kl_term(posterior: &VectorField, beta: &[f64], y: &[f64], mesh: &TimeMesh) -> Result<f64> {
    let knots = mesh.knots();
    let mut acc = 0.0;
    let mut run_start = 0.0;
    let mut run_value = posterior.eval(y, knots[0], beta)?.norm_squared();
    for &t in &knots[1..mesh.len()] {
        let q = posterior.eval(y, t, beta)?.norm_squared();
        if q != run_value {
            acc += run_value * (t - run_start);
            run_start = t;
            run_value = q;
        }
    }
    acc += run_value * (knots[mesh.len()] - run_start);
    Ok(0.5 * acc)
}

/// Gradient of [`kl_term`] in `beta`: `sum_i h_{i+1} (db~/dbeta)^T b~`.
pub fn kl_grad(
    posterior: &VectorField,
    beta: &[f64],
    y: &[f64],
    mesh: &TimeMesh,
) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(beta.len());
    for (t, h) in mesh.knots().iter().zip(mesh.steps()) {
        let u = posterior.eval(y, *t, beta)?;
        let (_, gp) = posterior.vjp(y, *t, beta, (u * *h).as_slice())?;
        g += gp;
    }
    Ok(g)
}

/// Observations sharing one set of latent paths.
#[derive(Debug, Clone)]
struct PathGroup {
    observations: Vec<usize>,
    beta_block: usize,
    seed: u64,
}

struct PathOutcome {
    nll: f64,
    grads: Option<(DVector<f64>, DVector<f64>)>,
}

/// Free energy of a dataset under a latent model.
pub struct VariationalObjective<'a, O: ObservationModel> {
    pub model: &'a LatentModel,
    pub obs: &'a O,
    pub data: &'a [Vec<f64>],
    pub mesh: &'a TimeMesh,
    pub sharing: BetaSharing,
}

/// Gradient estimate with the report built from the same paths.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyGradient {
    pub theta: DVector<f64>,
    pub beta: DVector<f64>,
    pub report: FreeEnergyReport,
}

impl<'a, O: ObservationModel> VariationalObjective<'a, O> {
    pub fn new(
        model: &'a LatentModel,
        obs: &'a O,
        data: &'a [Vec<f64>],
        mesh: &'a TimeMesh,
        sharing: BetaSharing,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        for y in data {
            check_dim("observation", model.obs_dim(), y.len())?;
        }
        Ok(Self {
            model,
            obs,
            data,
            mesh,
            sharing,
        })
    }

    /// Length of the full `beta` vector.
    pub fn n_beta(&self) -> usize {
        match self.sharing {
            BetaSharing::Shared => self.model.n_beta(),
            BetaSharing::PerObservation => self.model.n_beta() * self.data.len(),
        }
    }

    fn beta_block<'b>(&self, beta: &'b [f64], block: usize) -> &'b [f64] {
        let k = self.model.n_beta();
        &beta[block * k..(block + 1) * k]
    }

    fn groups(&self, seed: u64) -> Vec<PathGroup> {
        let n = self.data.len();
        match self.sharing {
            BetaSharing::Shared if self.model.posterior.ignores_input() => vec![PathGroup {
                observations: (0..n).collect(),
                beta_block: 0,
                seed,
            }],
            sharing => (0..n)
                .map(|j| PathGroup {
                    observations: vec![j],
                    beta_block: if sharing == BetaSharing::Shared { 0 } else { j },
                    seed: derive_seed(seed, j as u64),
                })
                .collect(),
        }
    }

    fn noise(&self, mc: &MonteCarlo, seed: u64) -> Result<NoisePath> {
        let d = self.model.dim();
        match mc.noise_resolution {
            None => sample_wiener(self.mesh, d, seed),
            Some(fine) => {
                let n = self.mesh.len();
                if !self.mesh.is_uniform() || fine % n != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "noise resolution {fine} is not a multiple of a uniform {n}-step mesh"
                    )));
                }
                sample_wiener(&TimeMesh::uniform(fine)?, d, seed)?.coarsen(fine / n)
            }
        }
    }

    fn run_path(
        &self,
        theta: &[f64],
        beta: &[f64],
        group: &PathGroup,
        mc: &MonteCarlo,
        path: usize,
        with_grad: bool,
    ) -> Result<PathOutcome> {
        let seed = derive_seed(group.seed, path as u64);
        let noise = self.noise(mc, seed)?;
        let y_post = &self.data[group.observations[0]];
        let m = self.model;
        let nll_and_cos = |x1: &[f64]| {
            let mut nll = 0.0;
            let mut cos = DVector::zeros(x1.len());
            for &j in &group.observations {
                nll += self.obs.accumulate_nll(&self.data[j], x1, &mut cos);
            }
            (nll, cos)
        };
        let wrap = |e: Error| Error::PathFailed {
            seed,
            source: Box::new(e),
        };
        if !with_grad {
            let sys = ModelSystem::new(m, theta, beta, y_post)?;
            let problem = SdeProblem::on_unit_interval(sys, m.x0.as_slice().to_vec())?;
            let x1 = solve_terminal(&problem, self.mesh, &noise).map_err(wrap)?;
            return Ok(PathOutcome {
                nll: nll_and_cos(&x1).0,
                grads: None,
            });
        }
        let (nll, gt, gb) = match mc.engine {
            GradientEngine::EulerBackprop => {
                let tape = euler_forward(m, theta, beta, y_post, self.mesh, &noise).map_err(wrap)?;
                let (nll, cos) = nll_and_cos(tape.terminal());
                let (gt, gb) = euler_backward(&tape, cos.as_slice()).map_err(wrap)?;
                (nll, gt, gb)
            }
            GradientEngine::Pathwise => {
                let aug = build_augmented(m, theta, beta, y_post)?;
                let res = pathwise_gradients(&aug, self.mesh, &noise).map_err(wrap)?;
                let (nll, cos) = nll_and_cos(res.x1.as_slice());
                (nll, res.jac_theta.tr_mul(&cos), res.jac_beta.tr_mul(&cos))
            }
        };
        if !nll.is_finite() {
            return Err(wrap(Error::InvalidArgument("non-finite log-likelihood".into())));
        }
        Ok(PathOutcome {
            nll,
            grads: Some((gt, gb)),
        })
    }

    fn estimate(
        &self,
        theta: &[f64],
        beta: &[f64],
        mc: &MonteCarlo,
        with_grad: bool,
    ) -> Result<FreeEnergyGradient> {
        let m = self.model;
        check_dim("theta", m.n_theta(), theta.len())?;
        check_dim("beta", self.n_beta(), beta.len())?;
        if mc.n_paths == 0 {
            return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
        }
        let n_obs = self.data.len() as f64;
        let p = mc.n_paths as f64;
        let k = m.n_beta();

        let mut kl = 0.0;
        let mut grad_beta = DVector::zeros(self.n_beta());
        for (j, y) in self.data.iter().enumerate() {
            let block = match self.sharing {
                BetaSharing::Shared => 0,
                BetaSharing::PerObservation => j,
            };
            let b = self.beta_block(beta, block);
            kl += kl_term(&m.posterior, b, y, self.mesh)?;
            if with_grad {
                let g = kl_grad(&m.posterior, b, y, self.mesh)?;
                grad_beta.rows_mut(block * k, k).axpy(1.0, &g, 1.0);
            }
            if self.sharing == BetaSharing::Shared && m.posterior.ignores_input() {
                kl *= n_obs;
                if with_grad {
                    grad_beta *= n_obs;
                }
                break;
            }
        }

        let mut grad_theta = DVector::zeros(m.n_theta());
        let mut nll = 0.0;
        let mut var = 0.0;
        for group in self.groups(mc.seed) {
            let b = self.beta_block(beta, group.beta_block);
            let outcomes: Vec<PathOutcome> = (0..mc.n_paths)
                .into_par_iter()
                .map(|i| self.run_path(theta, b, &group, mc, i, with_grad))
                .collect::<Result<_>>()?;
            let mean = outcomes.iter().map(|o| o.nll).sum::<f64>() / p;
            if mc.n_paths > 1 {
                let ss: f64 = outcomes.iter().map(|o| (o.nll - mean).powi(2)).sum();
                var += ss / (p - 1.0) / p;
            }
            nll += mean;
            for o in &outcomes {
                if let Some((gt, gb)) = &o.grads {
                    grad_theta.axpy(1.0 / p, gt, 1.0);
                    grad_beta
                        .rows_mut(group.beta_block * k, k)
                        .axpy(1.0 / p, gb, 1.0);
                }
            }
        }

        let report = FreeEnergyReport {
            kl: kl / n_obs,
            nll: nll / n_obs,
            total: kl / n_obs + nll / n_obs,
            nll_std_err: var.sqrt() / n_obs,
            n_paths: mc.n_paths,
            engine: mc.engine,
        };
        Ok(FreeEnergyGradient {
            theta: grad_theta / n_obs,
            beta: grad_beta / n_obs,
            report,
        })
    }

    pub fn free_energy(&self, theta: &[f64], beta: &[f64], mc: &MonteCarlo) -> Result<FreeEnergyReport> {
        Ok(self.estimate(theta, beta, mc, false)?.report)
    }

    pub fn grad_free_energy(
        &self,
        theta: &[f64],
        beta: &[f64],
        mc: &MonteCarlo,
    ) -> Result<FreeEnergyGradient> {
        self.estimate(theta, beta, mc, true)
    }
}

/// Free energy of a single observation.
pub fn free_energy<O: ObservationModel>(
    model: &LatentModel,
    obs: &O,
    y: &[f64],
    theta: &[f64],
    beta: &[f64],
    mesh: &TimeMesh,
    mc: &MonteCarlo,
) -> Result<FreeEnergyReport> {
    let data = [y.to_vec()];
    VariationalObjective::new(model, obs, &data, mesh, BetaSharing::Shared)?.free_energy(theta, beta, mc)
}

/// Free energy of a single observation with its gradient.
pub fn grad_free_energy<O: ObservationModel>(
    model: &LatentModel,
    obs: &O,
    y: &[f64],
    theta: &[f64],
    beta: &[f64],
    mesh: &TimeMesh,
    mc: &MonteCarlo,
) -> Result<FreeEnergyGradient> {
    let data = [y.to_vec()];
    VariationalObjective::new(model, obs, &data, mesh, BetaSharing::Shared)?
        .grad_free_energy(theta, beta, mc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// The same paths at every iteration.
    #[default]
    Fixed,
    /// New paths at every iteration.
    Fresh,
}

impl FromStr for SeedPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "fresh" => Ok(Self::Fresh),
            other => Err(Error::Unknown {
                kind: "seed policy",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub step_size: f64,
    pub n_iters: usize,
    pub mc: MonteCarlo,
    pub seed_policy: SeedPolicy,
    /// When false, `wall_ms` is recorded as 0 so histories are reproducible.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub iter: usize,
    pub kl: f64,
    pub nll: f64,
    pub total: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_beta: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Records for iterations `0..=n_iters`, each evaluated before that
    /// iteration's update.
    pub history: Vec<FitRecord>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
#[error("fit failed at iteration {iter}: {source}")]
pub struct FitError {
    /// Iteration whose evaluation failed; `partial.history` holds the ones before it.
    pub iter: usize,
    #[source]
    pub source: Error,
    /// Everything recorded before the failure, with the last finite parameters.
    pub partial: FitResult,
}

impl From<FitError> for Error {
    fn from(e: FitError) -> Self {
        e.source
    }
}

/// Plain gradient descent on `(theta, beta)` with one constant step size.
pub fn gd_fit<O: ObservationModel>(
    objective: &VariationalObjective<'_, O>,
    init_theta: &[f64],
    init_beta: &[f64],
    config: &FitConfig,
) -> std::result::Result<FitResult, FitError> {
    let mut res = FitResult {
        history: Vec::with_capacity(config.n_iters + 1),
        theta: init_theta.to_vec(),
        beta: init_beta.to_vec(),
    };
    if !(config.step_size > 0.0 && config.step_size.is_finite()) {
        return Err(FitError {
            iter: 0,
            source: Error::InvalidArgument(format!("step size {} must be positive", config.step_size)),
            partial: res,
        });
    }
    let start = Instant::now();
    for iter in 0..=config.n_iters {
        let mut mc = config.mc;
        if config.seed_policy == SeedPolicy::Fresh {
            mc.seed = derive_seed(config.mc.seed, iter as u64);
        }
        let g = match objective.grad_free_energy(&res.theta, &res.beta, &mc) {
            Ok(g) => g,
            Err(source) => {
                return Err(FitError {
                    iter,
                    source,
                    partial: res,
                })
            }
        };
        res.history.push(FitRecord {
            iter,
            kl: g.report.kl,
            nll: g.report.nll,
            total: g.report.total,
            grad_norm_theta: g.theta.norm(),
            grad_norm_beta: g.beta.norm(),
            wall_ms: if config.record_wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        });
        if iter == config.n_iters {
            break;
        }
        let next_theta: Vec<f64> = res
            .theta
            .iter()
            .zip(g.theta.iter())
            .map(|(p, d)| p - config.step_size * d)
            .collect();
        let next_beta: Vec<f64> = res
            .beta
            .iter()
            .zip(g.beta.iter())
            .map(|(p, d)| p - config.step_size * d)
            .collect();
        if next_theta.iter().chain(&next_beta).any(|v| !v.is_finite()) {
            return Err(FitError {
                iter: iter + 1,
                source: Error::Divergence { step: iter + 1, time: 1.0 },
                partial: res,
            });
        }
        res.theta = next_theta;
        res.beta = next_beta;
    }
    Ok(res)
}

pub fn write_history_csv<W: Write>(history: &[FitRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "iter",
        "kl",
        "nll",
        "total",
        "grad_norm_theta",
        "grad_norm_beta",
        "wall_ms",
    ])?;
    for r in history {
        w.write_record([
            r.iter.to_string(),
            r.kl.to_string(),
            r.nll.to_string(),
            r.total.to_string(),
            r.grad_norm_theta.to_string(),
            r.grad_norm_beta.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Activation;
    use crate::rng;

    fn conjugate(d: usize) -> LatentModel {
        LatentModel::new(
            VectorField::zero(d, d),
            VectorField::identity_diffusion(d).unwrap(),
            VectorField::constant(d, d),
            DVector::zeros(d),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_gradient_matches_finite_differences() {
        let obs = GaussianObservation;
        let mut r = rng::stream(1);
        for _ in 0..20 {
            let y: Vec<f64> = (0..4).map(|_| rng::standard_normal(&mut r)).collect();
            let x: Vec<f64> = (0..4).map(|_| rng::standard_normal(&mut r)).collect();
            let g = obs.grad_x_log_lik(&y, &x);
            for i in 0..4 {
                let (mut up, mut dn) = (x.clone(), x.clone());
                up[i] += 1e-5;
                dn[i] -= 1e-5;
                let fd = (obs.log_lik(&y, &up) - obs.log_lik(&y, &dn)) / 2e-5;
                assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
        assert!((obs.log_lik(&[0.0], &[0.0]) + 0.5 * LN_2PI).abs() < 1e-15);
        let (y, x) = ([1.0, -2.0], [0.5, 0.25]);
        let mut cos = DVector::from_vec(vec![1.0, 1.0]);
        let nll = obs.accumulate_nll(&y, &x, &mut cos);
        assert!((nll + obs.log_lik(&y, &x)).abs() <= 1e-15);
        assert_eq!(cos, DVector::from_vec(vec![1.0, 1.0]) - obs.grad_x_log_lik(&y, &x));
    }

    #[test]
    fn kl_identities() {
        let d = 3;
        let constant = VectorField::constant(d, d);
        let beta = [0.5, -1.0, 2.0];
        let half_sq = 0.5 * (0.25 + 1.0 + 4.0);
        for n in [1, 7, 100] {
            let mesh = TimeMesh::uniform(n).unwrap();
            assert_eq!(kl_term(&constant, &beta, &[0.0; 3], &mesh).unwrap(), half_sq);
            assert_eq!(kl_term(&VectorField::zero(d, d), &[], &[0.0; 3], &mesh).unwrap(), 0.0);
        }
        let mesh = TimeMesh::from_knots(vec![0.0, 0.1, 0.35, 0.9, 1.0]).unwrap();
        assert_eq!(kl_term(&constant, &beta, &[0.0; 3], &mesh).unwrap(), half_sq);

        // u_t = t: affine in time with zero weight and zero bias
        let ramp = VectorField::affine(1, 1, true).unwrap();
        let mesh = TimeMesh::uniform(1024).unwrap();
        let kl = kl_term(&ramp, &[0.0, 1.0, 0.0], &[0.0], &mesh).unwrap();
        assert!((kl - 1.0 / 6.0).abs() <= 1e-3);
        assert!(kl < 1.0 / 6.0);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let field = VectorField::affine(2, 3, true).unwrap();
        let mut r = rng::stream(4);
        let beta: Vec<f64> = (0..field.n_params()).map(|_| rng::standard_normal(&mut r)).collect();
        let y = [0.3, -0.7];
        let mesh = TimeMesh::uniform(16).unwrap();
        let g = kl_grad(&field, &beta, &y, &mesh).unwrap();
        for i in 0..beta.len() {
            let (mut up, mut dn) = (beta.clone(), beta.clone());
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            let fd = (kl_term(&field, &up, &y, &mesh).unwrap() - kl_term(&field, &dn, &y, &mesh).unwrap()) / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn brownian_nll_expectation() {
        let model = conjugate(1);
        let mesh = TimeMesh::uniform(4).unwrap();
        let mc = MonteCarlo::new(20_000, 3, GradientEngine::EulerBackprop);
        for c in [0.0, 1.5] {
            let r = free_energy(&model, &GaussianObservation, &[0.0], &[], &[c], &mesh, &mc).unwrap();
            let expect = 0.5 * LN_2PI + 0.5 * (1.0 + c * c);
            assert!((r.nll - expect).abs() <= 3.0 * r.nll_std_err, "{} vs {expect}", r.nll);
            assert_eq!(r.kl, 0.5 * c * c);
            assert_eq!(r.total, r.kl + r.nll);
        }
    }

    #[test]
    fn single_path_is_reproducible() {
        let model = conjugate(2);
        let mesh = TimeMesh::uniform(8).unwrap();
        let mc = MonteCarlo::new(1, 11, GradientEngine::Pathwise);
        let a = free_energy(&model, &GaussianObservation, &[1.0, 2.0], &[], &[0.1, 0.2], &mesh, &mc).unwrap();
        let b = free_energy(&model, &GaussianObservation, &[1.0, 2.0], &[], &[0.1, 0.2], &mesh, &mc).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.nll_std_err, 0.0);
    }

    #[test]
    fn conjugate_gradient_matches_per_path_formula() {
        let d = 2;
        let model = conjugate(d);
        let mesh = TimeMesh::uniform(16).unwrap();
        let y = [1.0, -0.5];
        let beta = [0.3, 0.2];
        for engine in [GradientEngine::EulerBackprop, GradientEngine::Pathwise] {
            let mc = MonteCarlo::new(50, 9, engine);
            let g = grad_free_energy(&model, &GaussianObservation, &y, &[], &beta, &mesh, &mc).unwrap();
            assert_eq!(g.theta.len(), 0);
            let mut expect = DVector::from_column_slice(&beta);
            for p in 0..50 {
                let w1 = sample_wiener(&mesh, d, derive_seed(9, p)).unwrap().terminal();
                let resid = DVector::from_column_slice(&y) - (w1 + DVector::from_column_slice(&beta));
                expect -= resid / 50.0;
            }
            for i in 0..d {
                assert!((g.beta[i] - expect[i]).abs() <= 1e-12, "{engine:?}: {} vs {}", g.beta[i], expect[i]);
            }
        }
    }

    fn experiment_model(d: usize) -> LatentModel {
        LatentModel::new(
            VectorField::activation_linear(d, Activation::Sigmoid).unwrap(),
            VectorField::identity_diffusion(d).unwrap(),
            VectorField::constant(d, d),
            DVector::zeros(d),
        )
        .unwrap()
    }

    #[test]
    fn engines_agree_on_dataset_gradients() {
        let d = 3;
        let model = experiment_model(d);
        let mut r = rng::stream(21);
        let theta: Vec<f64> = (0..d * d).map(|_| rng::standard_normal(&mut r)).collect();
        let data: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..d).map(|_| rng::standard_normal(&mut r)).collect())
            .collect();
        let mesh = TimeMesh::uniform(32).unwrap();
        for sharing in [BetaSharing::Shared, BetaSharing::PerObservation] {
            let obj = VariationalObjective::new(&model, &GaussianObservation, &data, &mesh, sharing).unwrap();
            let beta: Vec<f64> = (0..obj.n_beta()).map(|i| 0.1 * i as f64).collect();
            let a = obj
                .grad_free_energy(&theta, &beta, &MonteCarlo::new(8, 1, GradientEngine::EulerBackprop))
                .unwrap();
            let b = obj
                .grad_free_energy(&theta, &beta, &MonteCarlo::new(8, 1, GradientEngine::Pathwise))
                .unwrap();
            assert_eq!(a.report.total, b.report.total);
            for (x, y) in a.theta.iter().chain(a.beta.iter()).zip(b.theta.iter().chain(b.beta.iter())) {
                assert!((x - y).abs() <= 1e-8 * x.abs().max(y.abs()).max(1e-8));
            }
        }
    }

    #[test]
    fn dataset_gradient_matches_finite_differences_of_fixed_seed_objective() {
        let d = 2;
        let model = experiment_model(d);
        let data = vec![vec![0.5, 1.0], vec![-0.3, 0.8], vec![1.2, -0.1]];
        let mesh = TimeMesh::uniform(16).unwrap();
        let theta = vec![0.4, -0.2, 0.7, 0.1];
        for sharing in [BetaSharing::Shared, BetaSharing::PerObservation] {
            let obj = VariationalObjective::new(&model, &GaussianObservation, &data, &mesh, sharing).unwrap();
            let beta: Vec<f64> = (0..obj.n_beta()).map(|i| 0.2 - 0.1 * i as f64).collect();
            let mc = MonteCarlo::new(6, 5, GradientEngine::EulerBackprop);
            let g = obj.grad_free_energy(&theta, &beta, &mc).unwrap();
            let f = |t: &[f64], b: &[f64]| obj.free_energy(t, b, &mc).unwrap().total;
            for i in 0..theta.len() {
                let (mut up, mut dn) = (theta.clone(), theta.clone());
                up[i] += 1e-5;
                dn[i] -= 1e-5;
                let fd = (f(&up, &beta) - f(&dn, &beta)) / 2e-5;
                assert!((fd - g.theta[i]).abs() <= 1e-5 * fd.abs().max(1.0));
            }
            for i in 0..beta.len() {
                let (mut up, mut dn) = (beta.clone(), beta.clone());
                up[i] += 1e-5;
                dn[i] -= 1e-5;
                let fd = (f(&theta, &up) - f(&theta, &dn)) / 2e-5;
                assert!((fd - g.beta[i]).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shared_noise_resolution_coarsens_one_path() {
        let model = conjugate(1);
        let data = vec![vec![0.0]];
        let coarse = TimeMesh::uniform(4).unwrap();
        let fine = TimeMesh::uniform(16).unwrap();
        let mut mc = MonteCarlo::new(3, 2, GradientEngine::EulerBackprop);
        mc.noise_resolution = Some(16);
        let a = VariationalObjective::new(&model, &GaussianObservation, &data, &coarse, BetaSharing::Shared)
            .unwrap()
            .free_energy(&[], &[0.0], &mc)
            .unwrap();
        let b = VariationalObjective::new(&model, &GaussianObservation, &data, &fine, BetaSharing::Shared)
            .unwrap()
            .free_energy(&[], &[0.0], &mc)
            .unwrap();
        // X_1 = W_1 on both meshes; only summation order differs
        assert!((a.nll - b.nll).abs() <= 1e-12);
        mc.noise_resolution = Some(10);
        let obj = VariationalObjective::new(&model, &GaussianObservation, &data, &coarse, BetaSharing::Shared).unwrap();
        assert!(obj.free_energy(&[], &[0.0], &mc).is_err());
    }

    #[test]
    fn stationary_point_is_kept() {
        let model = conjugate(1);
        let mesh = TimeMesh::uniform(1).unwrap();
        let data = vec![vec![2.0]];
        let obj = VariationalObjective::new(&model, &GaussianObservation, &data, &mesh, BetaSharing::Shared).unwrap();
        let mc = MonteCarlo::new(64, 0, GradientEngine::EulerBackprop);
        let wbar: f64 = (0..64)
            .map(|p| sample_wiener(&mesh, 1, derive_seed(0, p)).unwrap().terminal()[0])
            .sum::<f64>()
            / 64.0;
        let beta_star = (2.0 - wbar) / 2.0;
        let cfg = FitConfig {
            step_size: 0.1,
            n_iters: 5,
            mc,
            seed_policy: SeedPolicy::Fixed,
            record_wall_time: false,
        };
        let fit = gd_fit(&obj, &[], &[beta_star], &cfg).unwrap();
        assert!((fit.beta[0] - beta_star).abs() <= 1e-14);
        assert_eq!(fit.history.len(), 6);
    }

    #[test]
    fn fixed_seed_descent_is_monotone() {
        let d = 2;
        let model = conjugate(d);
        let mesh = TimeMesh::uniform(8).unwrap();
        let data = vec![vec![1.5, -2.0]];
        let obj = VariationalObjective::new(&model, &GaussianObservation, &data, &mesh, BetaSharing::Shared).unwrap();
        let cfg = FitConfig {
            step_size: 0.2,
            n_iters: 30,
            mc: MonteCarlo::new(200, 4, GradientEngine::Pathwise),
            seed_policy: SeedPolicy::Fixed,
            record_wall_time: false,
        };
        let fit = gd_fit(&obj, &[], &[0.0, 0.0], &cfg).unwrap();
        for w in fit.history.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
        let again = gd_fit(&obj, &[], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(fit, again);
    }

    #[test]
    fn divergence_keeps_partial_history() {
        let model = conjugate(1);
        let mesh = TimeMesh::uniform(2).unwrap();
        let data = vec![vec![1.0]];
        let obj = VariationalObjective::new(&model, &GaussianObservation, &data, &mesh, BetaSharing::Shared).unwrap();
        let cfg = FitConfig {
            step_size: 1e200,
            n_iters: 10,
            mc: MonteCarlo::new(4, 0, GradientEngine::EulerBackprop),
            seed_policy: SeedPolicy::Fresh,
            record_wall_time: false,
        };
        let err = gd_fit(&obj, &[], &[0.5], &cfg).unwrap_err();
        assert!(!err.partial.history.is_empty());
        assert_eq!(err.partial.history.len(), err.iter);
        assert!(err.partial.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn history_csv_header() {
        let rec = FitRecord {
            iter: 0,
            kl: 0.5,
            nll: 1.0,
            total: 1.5,
            grad_norm_theta: 0.0,
            grad_norm_beta: 0.25,
            wall_ms: 0.0,
        };
        let mut buf = Vec::new();
        write_history_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "iter,kl,nll,total,grad_norm_theta,grad_norm_beta,wall_ms\n0,0.5,1,1.5,0,0.25,0\n"
        );
    }
}
