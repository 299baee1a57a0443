//! Desk-scale synthetic experiment: data from `dX = act(A X) dt + dW`,
//! variational fits of `(A, beta)` with a constant posterior drift, and
//! mesh / sample-size sweeps written as CSV.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fields::{Activation, FieldDocument, ParamVector, VectorField};
use crate::model::{LatentModel, ModelSystem};
use crate::paths::{sample_wiener, TimeMesh};
use crate::rng::{self, derive_seed};
use crate::solver::{solve_terminal, SdeProblem};
use crate::variational::{
    gd_fit, write_history_csv, BetaSharing, FitConfig, FitError, FitRecord, FitResult,
    FreeEnergyReport, GaussianObservation, GradientEngine, MonteCarlo, SeedPolicy,
    VariationalObjective,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub mc: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            init: 2,
            mc: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n_samples: usize,
    /// Steps of the uniform mesh used by `fit` and the sample-size sweep.
    pub mesh_n: usize,
    pub mesh_sweep: Vec<usize>,
    /// Empty means `{ceil(sqrt d), d, 10 d, 100 d}`.
    pub sample_sweep: Vec<usize>,
    pub activation: Activation,
    pub step_size: f64,
    pub n_iters: usize,
    pub n_mc_paths: usize,
    pub engine: GradientEngine,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    /// Steps of the data-generating mesh; defaults to four times the finest
    /// fit mesh.
    pub data_mesh_n: Option<usize>,
    /// Forces the ground-truth `A` to zero.
    pub zero_a: bool,
    pub beta_sharing: BetaSharing,
    pub seed_policy: SeedPolicy,
    /// Standard deviation of the initial `A` entries.
    pub init_scale: f64,
    /// Held-out observations for the evaluation free energy (0 disables it).
    pub n_eval_samples: usize,
    pub n_eval_paths: usize,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 10,
            n_samples: 1000,
            mesh_n: 32,
            mesh_sweep: vec![4, 8, 16, 32, 64],
            sample_sweep: Vec::new(),
            activation: Activation::Sigmoid,
            step_size: 0.5,
            n_iters: 200,
            n_mc_paths: 64,
            engine: GradientEngine::EulerBackprop,
            seeds: Seeds::default(),
            output_dir: PathBuf::from("out"),
            data_mesh_n: None,
            zero_a: false,
            beta_sharing: BetaSharing::Shared,
            seed_policy: SeedPolicy::Fixed,
            init_scale: 0.1,
            n_eval_samples: 1000,
            n_eval_paths: 256,
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_samples", self.n_samples),
            ("mesh_n", self.mesh_n),
            ("n_mc_paths", self.n_mc_paths),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.mesh_sweep.is_empty() || self.mesh_sweep.contains(&0) {
            return Err(Error::InvalidArgument("mesh_sweep must be non-empty and positive".into()));
        }
        if self.sample_sweep.contains(&0) {
            return Err(Error::InvalidArgument("sample_sweep entries must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument("init_scale must be non-negative".into()));
        }
        if self.n_eval_samples > 0 && self.n_eval_paths == 0 {
            return Err(Error::InvalidArgument("n_eval_paths must be positive".into()));
        }
        if self.data_mesh_n == Some(0) {
            return Err(Error::InvalidArgument("data_mesh_n must be positive".into()));
        }
        Ok(())
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        if !self.sample_sweep.is_empty() {
            return self.sample_sweep.clone();
        }
        let d = self.d;
        let root = (1..=d).find(|r| r * r >= d).unwrap_or(d);
        vec![root, d, 10 * d, 100 * d]
    }

    pub fn data_mesh_steps(&self) -> usize {
        self.data_mesh_n.unwrap_or_else(|| {
            let finest = self.mesh_sweep.iter().copied().chain([self.mesh_n]).max().unwrap_or(1);
            4 * finest
        })
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub d: usize,
    pub activation: Activation,
    /// Row-major `A`.
    pub a: Vec<f64>,
    pub data_mesh_n: usize,
    pub data_seed: u64,
}

pub fn ground_truth(config: &ExperimentConfig) -> GroundTruth {
    let d = config.d;
    let mut r = rng::stream(derive_seed(config.seeds.data, 0));
    let a = if config.zero_a {
        vec![0.0; d * d]
    } else {
        (0..d * d).map(|_| rng::standard_normal(&mut r)).collect()
    };
    GroundTruth {
        d,
        activation: config.activation,
        a,
        data_mesh_n: config.data_mesh_steps(),
        data_seed: config.seeds.data,
    }
}

fn generative_model(d: usize, activation: Activation) -> Result<LatentModel> {
    LatentModel::new(
        VectorField::activation_linear(d, activation)?,
        VectorField::identity_diffusion(d)?,
        VectorField::zero(d, d),
        DVector::zeros(d),
    )
}

/// The fitted family: drift `act(A x)`, unit diffusion, constant posterior
/// drift `beta`.
pub fn fit_model(d: usize, activation: Activation) -> Result<LatentModel> {
    LatentModel::new(
        VectorField::activation_linear(d, activation)?,
        VectorField::identity_diffusion(d)?,
        VectorField::constant(d, d),
        DVector::zeros(d),
    )
}

/// Observations `first .. first + count` of the stream defined by `truth`:
/// `y_j = X_1^{(j)} + eps_j`.
pub fn simulate_observations(truth: &GroundTruth, first: u64, count: usize) -> Result<Vec<Vec<f64>>> {
    let d = truth.d;
    let model = generative_model(d, truth.activation)?;
    let mesh = TimeMesh::uniform(truth.data_mesh_n)?;
    let y = vec![0.0; d];
    let sys = ModelSystem::new(&model, &truth.a, &[], &y)?;
    let problem = SdeProblem::on_unit_interval(sys, vec![0.0; d])?;
    (0..count as u64)
        .into_par_iter()
        .map(|j| {
            let base = derive_seed(truth.data_seed, first + j + 1);
            let noise = sample_wiener(&mesh, d, derive_seed(base, 0))?;
            let mut x1 = solve_terminal(&problem, &mesh, &noise)?;
            let mut r = rng::stream(derive_seed(base, 1));
            for v in &mut x1 {
                *v += rng::standard_normal(&mut r);
            }
            Ok(x1)
        })
        .collect()
}

/// Offset of the held-out stream within the observation sequence.
pub const EVAL_STREAM: u64 = 1 << 40;

pub fn generate_data(config: &ExperimentConfig) -> Result<(GroundTruth, Vec<Vec<f64>>)> {
    config.validate()?;
    let truth = ground_truth(config);
    let data = simulate_observations(&truth, 0, config.n_samples)?;
    Ok((truth, data))
}

pub fn write_dataset<W: Write>(data: &[Vec<f64>], writer: W) -> Result<()> {
    let d = data.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((1..=d).map(|k| format!("y_{k}")))?;
    for row in data {
        check_dim("dataset row", d, row.len())?;
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_reader(reader);
    let d = r.headers()?.len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        check_dim("dataset row", d, rec.len())?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("dataset has no rows".into()));
    }
    Ok(rows)
}

/// Writes `dataset.csv` and `ground_truth.json` into the output directory.
pub fn run_generate(config: &ExperimentConfig) -> Result<(GroundTruth, Vec<Vec<f64>>)> {
    let (truth, data) = generate_data(config)?;
    fs::create_dir_all(&config.output_dir)?;
    write_dataset(&data, BufWriter::new(File::create(config.output_dir.join("dataset.csv"))?))?;
    let f = BufWriter::new(File::create(config.output_dir.join("ground_truth.json"))?);
    serde_json::to_writer_pretty(f, &truth)?;
    Ok((truth, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedParams {
    pub drift: FieldDocument,
    pub posterior: FieldDocument,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub fit: FitResult,
    /// Free energy of the fitted parameters on held-out observations.
    pub eval: Option<FreeEnergyReport>,
}

impl FitOutcome {
    pub fn final_record(&self) -> &FitRecord {
        self.fit.history.last().expect("history holds iteration 0")
    }

    pub fn params(&self, config: &ExperimentConfig) -> Result<FittedParams> {
        let model = fit_model(config.d, config.activation)?;
        let a = ParamVector::for_field(&model.drift, self.fit.theta.clone())?;
        let beta = ParamVector::for_field(&model.posterior, self.fit.beta[..model.n_beta()].to_vec())?;
        Ok(FittedParams {
            drift: FieldDocument::new(model.drift.clone(), &a)?,
            posterior: FieldDocument::new(model.posterior.clone(), &beta)?,
        })
    }
}

/// Fit settings that vary across sweep points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitPoint {
    pub mesh_n: usize,
    pub n_obs: usize,
    /// Resolution of the shared Brownian paths (see [`MonteCarlo`]).
    pub noise_resolution: Option<usize>,
}

fn initial_params(config: &ExperimentConfig, n_beta: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(config.seeds.init);
    let theta = (0..config.d * config.d)
        .map(|_| config.init_scale * rng::standard_normal(&mut r))
        .collect();
    (theta, vec![0.0; n_beta])
}

/// Gradient descent on the first `point.n_obs` observations, followed by the
/// held-out evaluation when enabled.
pub fn fit_point(
    config: &ExperimentConfig,
    data: &[Vec<f64>],
    eval_data: Option<&[Vec<f64>]>,
    point: FitPoint,
) -> std::result::Result<FitOutcome, FitError> {
    let fail = |source: Error| FitError {
        iter: 0,
        source,
        partial: FitResult {
            history: Vec::new(),
            theta: Vec::new(),
            beta: Vec::new(),
        },
    };
    if point.n_obs > data.len() {
        return Err(fail(Error::InvalidArgument(format!(
            "sample size {} exceeds the {} available observations",
            point.n_obs,
            data.len()
        ))));
    }
    let model = fit_model(config.d, config.activation).map_err(fail)?;
    let mesh = TimeMesh::uniform(point.mesh_n).map_err(fail)?;
    let obs = GaussianObservation;
    let subset = &data[..point.n_obs];
    let objective =
        VariationalObjective::new(&model, &obs, subset, &mesh, config.beta_sharing).map_err(fail)?;
    let (theta0, beta0) = initial_params(config, objective.n_beta());
    let mc = MonteCarlo {
        n_paths: config.n_mc_paths,
        seed: config.seeds.mc,
        engine: config.engine,
        noise_resolution: point.noise_resolution,
    };
    let fit_cfg = FitConfig {
        step_size: config.step_size,
        n_iters: config.n_iters,
        mc,
        seed_policy: config.seed_policy,
        record_wall_time: config.record_wall_time,
    };
    let fit = gd_fit(&objective, &theta0, &beta0, &fit_cfg)?;

    let eval = match eval_data {
        Some(held_out) if !held_out.is_empty() => {
            let iter = fit.history.len();
            let eval_fail = |source: Error| FitError {
                iter,
                source,
                partial: fit.clone(),
            };
            // held-out observations get the shared posterior drift
            let beta = fit.beta[..model.n_beta()].to_vec();
            let eval_obj = VariationalObjective::new(&model, &obs, held_out, &mesh, BetaSharing::Shared)
                .map_err(eval_fail)?;
            let eval_mc = MonteCarlo {
                n_paths: config.n_eval_paths,
                seed: derive_seed(config.seeds.mc, EVAL_STREAM),
                engine: config.engine,
                noise_resolution: point.noise_resolution,
            };
            Some(eval_obj.free_energy(&fit.theta, &beta, &eval_mc).map_err(eval_fail)?)
        }
        _ => None,
    };
    Ok(FitOutcome { fit, eval })
}

fn held_out(config: &ExperimentConfig) -> Result<Option<Vec<Vec<f64>>>> {
    if config.n_eval_samples == 0 {
        return Ok(None);
    }
    let truth = ground_truth(config);
    Ok(Some(simulate_observations(&truth, EVAL_STREAM, config.n_eval_samples)?))
}

/// Fits on `data` at `config.mesh_n`; writes `history.csv` and `params.json`.
pub fn run_fit(config: &ExperimentConfig, data: &[Vec<f64>]) -> Result<FitOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let eval = held_out(config)?;
    let point = FitPoint {
        mesh_n: config.mesh_n,
        n_obs: data.len(),
        noise_resolution: None,
    };
    let history_path = config.output_dir.join("history.csv");
    match fit_point(config, data, eval.as_deref(), point) {
        Ok(outcome) => {
            write_history_csv(&outcome.fit.history, BufWriter::new(File::create(&history_path)?))?;
            let f = BufWriter::new(File::create(config.output_dir.join("params.json"))?);
            serde_json::to_writer_pretty(f, &outcome.params(config)?)?;
            Ok(outcome)
        }
        Err(e) => {
            write_history_csv(&e.partial.history, BufWriter::new(File::create(&history_path)?))?;
            Err(e.into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVar {
    MeshN,
    SampleSize,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            Self::MeshN => "mesh_n",
            Self::SampleSize => "sample_size",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub var: SweepVar,
    pub value: usize,
    pub outcome: std::result::Result<FitOutcome, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn outcome(&self, var: SweepVar, value: usize) -> Option<&FitOutcome> {
        self.points
            .iter()
            .find(|p| p.var == var && p.value == value)
            .and_then(|p| p.outcome.as_ref().ok())
    }

    pub fn failures(&self) -> Vec<String> {
        self.points
            .iter()
            .filter_map(|p| {
                p.outcome
                    .as_ref()
                    .err()
                    .map(|e| format!("{}={}: {e}", p.var.name(), p.value))
            })
            .collect()
    }

    /// Long format: `sweep_var, value, iter, log_free_energy`.
    pub fn write_curves<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sweep_var", "value", "iter", "log_free_energy"])?;
        for p in &self.points {
            let history = match &p.outcome {
                Ok(o) => &o.fit.history,
                Err(_) => continue,
            };
            for r in history {
                w.write_record([
                    p.var.name().to_string(),
                    p.value.to_string(),
                    r.iter.to_string(),
                    r.total.ln().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "sweep_var",
            "value",
            "status",
            "initial_free_energy",
            "final_free_energy",
            "eval_free_energy",
            "eval_std_err",
        ])?;
        for p in &self.points {
            let row = match &p.outcome {
                Ok(o) => {
                    let (ev, se) = o
                        .eval
                        .map_or((String::new(), String::new()), |e| {
                            (e.total.to_string(), e.nll_std_err.to_string())
                        });
                    [
                        "ok".to_string(),
                        o.fit.history[0].total.to_string(),
                        o.final_record().total.to_string(),
                        ev,
                        se,
                    ]
                }
                Err(e) => [format!("failed: {e}"), String::new(), String::new(), String::new(), String::new()],
            };
            w.write_record([p.var.name().to_string(), p.value.to_string()].into_iter().chain(row))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Mesh sweep over `config.mesh_sweep` on all observations and sample-size
/// sweep at `config.mesh_n` on nested prefixes. All points share initial
/// parameters and Brownian paths.
pub fn sweep(config: &ExperimentConfig, data: &[Vec<f64>]) -> Result<SweepResult> {
    config.validate()?;
    let eval = held_out(config)?;
    let resolution = config.mesh_sweep.iter().fold(config.mesh_n, |acc, &n| lcm(acc, n));
    let mut jobs: Vec<(SweepVar, usize, FitPoint)> = config
        .mesh_sweep
        .iter()
        .map(|&n| {
            (
                SweepVar::MeshN,
                n,
                FitPoint {
                    mesh_n: n,
                    n_obs: data.len(),
                    noise_resolution: Some(resolution),
                },
            )
        })
        .collect();
    jobs.extend(config.sample_sizes().into_iter().map(|n| {
        (
            SweepVar::SampleSize,
            n,
            FitPoint {
                mesh_n: config.mesh_n,
                n_obs: n,
                noise_resolution: Some(resolution),
            },
        )
    }));
    let points = jobs
        .into_par_iter()
        .map(|(var, value, point)| SweepPoint {
            var,
            value,
            outcome: fit_point(config, data, eval.as_deref(), point).map_err(|e| e.to_string()),
        })
        .collect();
    Ok(SweepResult { points })
}

/// Runs [`sweep`] and writes `sweep.csv` and `sweep_summary.csv`; fails after
/// writing if any point failed.
pub fn run_sweep(config: &ExperimentConfig, data: &[Vec<f64>]) -> Result<SweepResult> {
    let result = sweep(config, data)?;
    fs::create_dir_all(&config.output_dir)?;
    result.write_curves(BufWriter::new(File::create(config.output_dir.join("sweep.csv"))?))?;
    result.write_summary(BufWriter::new(File::create(
        config.output_dir.join("sweep_summary.csv"),
    )?))?;
    let failures = result.failures();
    if failures.is_empty() {
        Ok(result)
    } else {
        Err(Error::InvalidArgument(format!(
            "sweep points failed: {}",
            failures.join("; ")
        )))
    }
}
