//! The oracle battery behind `nsde oracle-check`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::fields::VectorField;
use crate::oracle::{
    covariance_quadrature, euler_moments, follmer_affine_drift, follmer_euler_moments,
    follmer_mc_drift, fundamental_matrix, terminal_law, FollmerSampler, GaussianLaw,
    GaussianRatio, LinearSdeSpec,
};
use crate::paths::{sample_wiener, TimeMesh};
use crate::rng::{self, derive_seed};
use crate::solver::{solve_terminal, SdeProblem};
use crate::variational::kl_term;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<34} {}", self.name, self.detail)
    }
}

fn outcome(name: &'static str, check: Result<(bool, String)>) -> CheckOutcome {
    match check {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// `d/dx log E[f(x + sqrt(1-t) Z)]` for a scalar `log f`, by trapezoid
/// quadrature over `z` in `[-40, 40]` and a central difference in `x`.
pub fn heat_kernel_log_derivative(log_f: impl Fn(f64) -> f64, x: f64, t: f64) -> f64 {
    let s = (1.0 - t).sqrt();
    let q = |x: f64| {
        let n = 400_000;
        let dz = 80.0 / n as f64;
        (0..=n)
            .map(|i| {
                let z = -40.0 + i as f64 * dz;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * (log_f(x + s * z) - 0.5 * z * z).exp() * dz
            })
            .sum::<f64>()
    };
    let e = 1e-5;
    (q(x + e).ln() - q(x - e).ln()) / (2.0 * e)
}

/// Sample mean and covariance with standard errors of each entry.
pub struct SampleMoments {
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_se: DMatrix<f64>,
}

pub fn sample_moments(samples: &[DVector<f64>]) -> SampleMoments {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(d), |a, s| a + s) / n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let r = s - &mean;
        cov += &r * r.transpose();
    }
    cov /= n - 1.0;
    let mut fourth = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        let r = s - &mean;
        for i in 0..d {
            for j in 0..d {
                fourth[(i, j)] += (r[i] * r[j] - cov[(i, j)]).powi(2);
            }
        }
    }
    let cov_se = fourth.map(|v| (v / (n - 1.0) / n).sqrt());
    let mean_se = DVector::from_fn(d, |i, _| (cov[(i, i)] / n).sqrt());
    SampleMoments {
        mean,
        mean_se,
        cov,
        cov_se,
    }
}

/// Largest `|estimate - target| / allowance` over all entries.
fn worst_ratio(
    est: &SampleMoments,
    target: &GaussianLaw,
    bias: &GaussianLaw,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..target.dim() {
        let allow = 3.0 * est.mean_se[i] + (bias.mean[i] - target.mean[i]).abs();
        worst = worst.max((est.mean[i] - target.mean[i]).abs() / allow);
        for j in 0..target.dim() {
            let allow = 3.0 * est.cov_se[(i, j)] + (bias.cov[(i, j)] - target.cov[(i, j)]).abs();
            worst = worst.max((est.cov[(i, j)] - target.cov[(i, j)]).abs() / allow);
        }
    }
    worst
}

/// Simulates `spec` on `mesh` and compares with its terminal law, allowing
/// three standard errors plus the exact Euler bias.
pub fn linear_law_by_simulation(
    spec: &LinearSdeSpec,
    mesh: &TimeMesh,
    n_paths: usize,
    seed: u64,
) -> Result<f64> {
    let law = terminal_law(spec)?;
    let discrete = euler_moments(spec, mesh)?;
    let problem = SdeProblem::on_unit_interval(spec, spec.x0.as_slice().to_vec())?;
    let samples = (0..n_paths as u64)
        .map(|p| {
            let noise = sample_wiener(mesh, spec.noise_dim(), derive_seed(seed, p))?;
            Ok(DVector::from_vec(solve_terminal(&problem, mesh, &noise)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(worst_ratio(&sample_moments(&samples), &law, &discrete))
}

/// Follmer sampling of `target`, compared as in [`linear_law_by_simulation`].
pub fn follmer_by_simulation(
    target: &GaussianLaw,
    mesh: &TimeMesh,
    n_paths: usize,
    seed: u64,
) -> Result<(SampleMoments, f64)> {
    let sampler = FollmerSampler::new(target, mesh)?;
    let discrete = follmer_euler_moments(target, mesh)?;
    let samples = (0..n_paths as u64)
        .map(|p| sampler.sample(mesh, &sample_wiener(mesh, target.dim(), derive_seed(seed, p))?))
        .collect::<Result<Vec<_>>>()?;
    let m = sample_moments(&samples);
    let worst = worst_ratio(&m, target, &discrete);
    Ok((m, worst))
}

pub fn random_constant_spec(d: usize, seed: u64) -> Result<LinearSdeSpec> {
    let mut r = rng::stream(seed);
    let mut draw = |s: f64| DMatrix::from_fn(d, d, |_, _| s * rng::standard_normal(&mut r));
    let a = draw(0.5);
    let c = draw(0.5) + DMatrix::identity(d, d) * 0.5;
    let x0 = DVector::from_fn(d, |i, _| 1.0 - 0.5 * i as f64);
    LinearSdeSpec::constant(a, c, x0)
}

pub fn oracle_battery() -> Vec<CheckOutcome> {
    let scalar = |a: f64, c: f64| {
        LinearSdeSpec::constant(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, c),
            DVector::from_element(1, 1.0),
        )
    };
    let scalar_n14 = || GaussianLaw::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 4.0));
    vec![
        outcome("fundamental matrix: scalar e^a", (|| {
            let phi = fundamental_matrix(&scalar(0.8, 1.0)?, 0.0, 1.0)?[(0, 0)];
            let err = (phi - 0.8f64.exp()).abs() / 0.8f64.exp();
            Ok((err <= 1e-12, format!("rel err {err:.2e}")))
        })()),
        outcome("fundamental matrix: semigroup", (|| {
            let spec = random_constant_spec(4, 11)?;
            let lhs = fundamental_matrix(&spec, 0.1, 0.9)?;
            let rhs = fundamental_matrix(&spec, 0.4, 0.9)? * fundamental_matrix(&spec, 0.1, 0.4)?;
            let err = (&lhs - &rhs).amax() / lhs.amax();
            Ok((err <= 1e-10, format!("rel err {err:.2e}")))
        })()),
        outcome("terminal law: scalar closed form", (|| {
            let v = terminal_law(&scalar(1.0, 1.0)?)?.cov[(0, 0)];
            let exact = (2f64.exp() - 1.0) / 2.0;
            let err = (v - exact).abs();
            Ok((err <= 1e-6, format!("Sigma = {v:.11}, |err| {err:.2e}")))
        })()),
        outcome("terminal law: midpoint Richardson", (|| {
            let spec = scalar(1.0, 1.0)?;
            let exact = (2f64.exp() - 1.0) / 2.0;
            let e1 = (covariance_quadrature(&spec, 1 << 8)?[(0, 0)] - exact).abs();
            let e2 = (covariance_quadrature(&spec, 1 << 9)?[(0, 0)] - exact).abs();
            let ratio = e1 / e2;
            Ok((ratio >= 3.5, format!("error ratio {ratio:.3}")))
        })()),
        outcome("terminal law: Euler simulation d=3", (|| {
            let spec = random_constant_spec(3, 12)?;
            let worst = linear_law_by_simulation(&spec, &TimeMesh::uniform(128)?, 20_000, 5)?;
            Ok((worst <= 1.0, format!("worst |err| / allowance {worst:.3}")))
        })()),
        outcome("Föllmer drift: heat-kernel quadrature", (|| {
            let target = scalar_n14()?;
            let b = follmer_affine_drift(&target, &[2.0], 0.5)?[0];
            let q = heat_kernel_log_derivative(|y| -0.125 * (y - 1.0) * (y - 1.0) + 0.5 * y * y, 2.0, 0.5);
            let err = (b - q).abs() / q.abs();
            Ok((err <= 1e-6, format!("drift {b:.9}, rel err {err:.2e}")))
        })()),
        outcome("Föllmer MC drift: unit covariance", (|| {
            let m = DVector::from_vec(vec![0.4, -1.2]);
            let ratio = GaussianRatio::new(&GaussianLaw::new(m.clone(), DMatrix::identity(2, 2))?)?;
            let b = follmer_mc_drift(&ratio, &[0.3, 0.1], 0.6, 1000, 1)?;
            let err = (b - m).amax();
            Ok((err <= 1e-13, format!("max err {err:.2e}")))
        })()),
        outcome("Föllmer MC drift: n_mc = 1e5", (|| {
            let target = scalar_n14()?;
            let b = follmer_mc_drift(&GaussianRatio::new(&target)?, &[1.0], 0.75, 100_000, 3)?[0];
            let exact = follmer_affine_drift(&target, &[1.0], 0.75)?[0];
            let err = (b - exact).abs();
            Ok((err <= 1e-2, format!("|err| {err:.2e}")))
        })()),
        outcome("Föllmer sampler: N(1, 4)", (|| {
            let (m, worst) = follmer_by_simulation(&scalar_n14()?, &TimeMesh::uniform(256)?, 20_000, 8)?;
            Ok((
                worst <= 1.0,
                format!("mean {:.4}, var {:.4}, worst ratio {worst:.3}", m.mean[0], m.cov[(0, 0)]),
            ))
        })()),
        outcome("KL: constant and ramp drifts", (|| {
            let beta = [0.5, -1.5, 2.0];
            let mesh = TimeMesh::uniform(7)?;
            let kl = kl_term(&VectorField::constant(3, 3), &beta, &[0.0; 3], &mesh)?;
            let exact = 0.5 * DVector::from_column_slice(&beta).norm_squared();
            let ramp = kl_term(&VectorField::affine(1, 1, true)?, &[0.0, 1.0, 0.0], &[0.0], &TimeMesh::uniform(1024)?)?;
            let err = (ramp - 1.0 / 6.0).abs();
            Ok((kl == exact && err <= 1e-3, format!("constant exact: {}, ramp err {err:.2e}", kl == exact)))
        })()),
    ]
}
