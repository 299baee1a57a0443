//! Time meshes, sampled Wiener paths and Girsanov drift shifts.
//!
//! A [`NoisePath`] stores Brownian *increments* on a [`TimeMesh`]; path values
//! `W_{t_i}` are recovered by cumulative summation. Every gradient engine
//! consumes increments directly, so holding the increments fixed is what makes
//! "same noise, different parameters" comparisons possible.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::fields::VectorField;
use crate::rng;

const MESH_TOL: f64 = 1e-12;

/// Strictly increasing grid `0 = t_0 < t_1 < ... < t_N = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMesh {
    knots: Vec<f64>,
    steps: Vec<f64>,
}

impl TimeMesh {
    /// Uniform mesh with `n` steps of size `1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMesh("a mesh needs at least one step".into()));
        }
        let knots = (0..=n).map(|i| i as f64 / n as f64).collect();
        Self::from_knots(knots)
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidMesh("a mesh needs at least two knots".into()));
        }
        if knots[0] != 0.0 {
            return Err(Error::InvalidMesh(format!("first knot is {}, not 0", knots[0])));
        }
        let last = knots[knots.len() - 1];
        if last != 1.0 {
            return Err(Error::InvalidMesh(format!("last knot is {last}, not 1")));
        }
        let mut steps = Vec::with_capacity(knots.len() - 1);
        for (i, w) in knots.windows(2).enumerate() {
            let h = w[1] - w[0];
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidMesh(format!(
                    "knots {} and {} are not strictly increasing",
                    i,
                    i + 1
                )));
            }
            steps.push(h);
        }
        let total: f64 = steps.iter().sum();
        if (total - 1.0).abs() > MESH_TOL {
            return Err(Error::InvalidMesh(format!("steps sum to {total}")));
        }
        Ok(Self { knots, steps })
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Step sizes `h_i = t_i - t_{i-1}`; `steps()[i]` is `h_{i+1}`.
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Index of the knot equal to `t` (within `1e-12`).
    pub fn knot_index(&self, t: f64) -> Option<usize> {
        self.knots.iter().position(|&k| (k - t).abs() <= MESH_TOL)
    }

    /// Whether every step has size `1/N` up to rounding.
    pub fn is_uniform(&self) -> bool {
        let h = 1.0 / self.len() as f64;
        self.steps.iter().all(|s| (s - h).abs() <= MESH_TOL)
    }
}

/// Brownian increments on a mesh; increment `i` is `W_{t_{i+1}} - W_{t_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    dim: usize,
    increments: Vec<f64>,
    seed: u64,
}

impl NoisePath {
    /// Wraps precomputed increments (`steps * dim` values, step-major).
    pub fn from_increments(dim: usize, increments: Vec<f64>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("noise dimension must be positive".into()));
        }
        if increments.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} increment values do not split into vectors of dimension {dim}",
                increments.len()
            )));
        }
        Ok(Self {
            dim,
            increments,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of increments.
    pub fn len(&self) -> usize {
        self.increments.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[i * self.dim..(i + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Path value `W_{t_i}`; `value(0)` is the zero vector.
    pub fn value(&self, i: usize) -> DVector<f64> {
        let mut w = DVector::zeros(self.dim);
        for j in 0..i {
            for (acc, dw) in w.iter_mut().zip(self.increment(j)) {
                *acc += dw;
            }
        }
        w
    }

    /// Path values `W_{t_0}, ..., W_{t_N}`.
    pub fn values(&self) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let mut w = DVector::zeros(self.dim);
        out.push(w.clone());
        for j in 0..self.len() {
            for (acc, dw) in w.iter_mut().zip(self.increment(j)) {
                *acc += dw;
            }
            out.push(w.clone());
        }
        out
    }

    pub fn terminal(&self) -> DVector<f64> {
        self.value(self.len())
    }

    /// Sums consecutive groups of `factor` increments, giving the same
    /// Brownian path observed on a mesh `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.len() % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {} increments by a factor of {factor}",
                self.len()
            )));
        }
        let n = self.len() / factor;
        let mut increments = vec![0.0; n * self.dim];
        for i in 0..n {
            let dst = &mut increments[i * self.dim..(i + 1) * self.dim];
            for j in 0..factor {
                for (acc, dw) in dst.iter_mut().zip(self.increment(i * factor + j)) {
                    *acc += dw;
                }
            }
        }
        Ok(Self {
            dim: self.dim,
            increments,
            seed: self.seed,
        })
    }

    /// Writes one increment vector per row, header `dw_1..dw_d`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((1..=self.dim).map(|k| format!("dw_{k}")))?;
        for i in 0..self.len() {
            w.write_record(self.increment(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws a Wiener path on `mesh`: increment `i` is `sqrt(h_{i+1}) * Z` with
/// `Z ~ N(0, I_dim)` taken from the stream keyed by `seed`.
pub fn sample_wiener(mesh: &TimeMesh, dim: usize, seed: u64) -> Result<NoisePath> {
    if dim == 0 {
        return Err(Error::InvalidArgument("noise dimension must be positive".into()));
    }
    let mut rng = rng::stream(seed);
    let mut increments = vec![0.0; mesh.len() * dim];
    for (chunk, h) in increments.chunks_exact_mut(dim).zip(mesh.steps()) {
        let scale = h.sqrt();
        for v in chunk {
            *v = scale * rng::standard_normal(&mut rng);
        }
    }
    Ok(NoisePath {
        dim,
        increments,
        seed,
    })
}

/// A deterministic drift `t -> u_t`, realised as a vector field evaluated at
/// a fixed input (the observation, for posterior drifts).
#[derive(Debug, Clone)]
pub struct DriftShift {
    field: VectorField,
    params: Vec<f64>,
    anchor: DVector<f64>,
}

impl DriftShift {
    pub fn new(field: VectorField, params: Vec<f64>, anchor: DVector<f64>) -> Result<Self> {
        check_dim("drift shift parameters", field.n_params(), params.len())?;
        check_dim("drift shift input", field.in_dim(), anchor.len())?;
        Ok(Self {
            field,
            params,
            anchor,
        })
    }

    /// Constant shift `u_t = value`.
    pub fn constant(value: DVector<f64>) -> Self {
        let dim = value.len();
        Self {
            field: VectorField::constant(dim, dim),
            params: value.as_slice().to_vec(),
            anchor: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.field.out_len()
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.field.eval(self.anchor.as_slice(), t, &self.params)
    }
}

/// Girsanov shift `Z_t = int_0^t u_s ds + W_t` with left-endpoint quadrature:
/// increment `i` becomes `dW_i + h_{i+1} u(t_i)`.
pub fn shift_path(path: &NoisePath, shift: &DriftShift, mesh: &TimeMesh) -> Result<NoisePath> {
    check_dim("shift_path mesh steps", mesh.len(), path.len())?;
    check_dim("shift_path drift dimension", path.dim(), shift.dim())?;
    let mut increments = path.increments.clone();
    for (i, chunk) in increments.chunks_exact_mut(path.dim).enumerate() {
        let h = mesh.steps()[i];
        let u = shift.eval(mesh.knots()[i])?;
        for (v, ui) in chunk.iter_mut().zip(u.iter()) {
            *v += h * ui;
        }
    }
    Ok(NoisePath {
        dim: path.dim,
        increments,
        seed: path.seed,
    })
}
