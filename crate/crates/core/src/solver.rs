//! Fixed-mesh Euler–Maruyama integration of Itô SDEs
//! `dZ = f(Z, t) dt + g(Z, t) dW` driven by an explicit [`NoisePath`].
//!
//! The noise is always an argument, never drawn here: gradient checks need to
//! re-solve with different parameters on the same Brownian path.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::paths::{NoisePath, TimeMesh};

/// Drift `f: R^m x [0,1] -> R^m` and dispersion `g: R^m x [0,1] -> R^{m x d}`.
pub trait SdeSystem {
    fn state_dim(&self) -> usize;

    /// Number of driving Brownian coordinates `d` (may differ from `m`).
    fn noise_dim(&self) -> usize;

    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]);

    fn dispersion(&self, z: &[f64], t: f64) -> DMatrix<f64>;

    /// Writes `h f(z,t) + g(z,t) dw` into `out`.
    ///
    /// Systems with structured dispersion override this to skip forming `g`.
    fn euler_increment(&self, z: &[f64], t: f64, h: f64, dw: &[f64], out: &mut [f64]) {
        self.drift(z, t, out);
        let g = self.dispersion(z, t);
        for (i, o) in out.iter_mut().enumerate() {
            let mut noise = 0.0;
            for (l, w) in dw.iter().enumerate() {
                noise += g[(i, l)] * w;
            }
            *o = h * *o + noise;
        }
    }
}

impl<S: SdeSystem + ?Sized> SdeSystem for &S {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        (**self).drift(z, t, out)
    }
    fn dispersion(&self, z: &[f64], t: f64) -> DMatrix<f64> {
        (**self).dispersion(z, t)
    }
    fn euler_increment(&self, z: &[f64], t: f64, h: f64, dw: &[f64], out: &mut [f64]) {
        (**self).euler_increment(z, t, h, dw, out)
    }
}

/// An SDE system assembled from closures.
pub struct FnSystem<F, G> {
    state_dim: usize,
    noise_dim: usize,
    drift: F,
    dispersion: G,
}

impl<F, G> FnSystem<F, G>
where
    F: Fn(&[f64], f64, &mut [f64]),
    G: Fn(&[f64], f64) -> DMatrix<f64>,
{
    pub fn new(state_dim: usize, noise_dim: usize, drift: F, dispersion: G) -> Self {
        Self {
            state_dim,
            noise_dim,
            drift,
            dispersion,
        }
    }
}

impl<F, G> SdeSystem for FnSystem<F, G>
where
    F: Fn(&[f64], f64, &mut [f64]),
    G: Fn(&[f64], f64) -> DMatrix<f64>,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        (self.drift)(z, t, out)
    }
    fn dispersion(&self, z: &[f64], t: f64) -> DMatrix<f64> {
        (self.dispersion)(z, t)
    }
}

/// Initial value problem on `[t0, t1]`.
pub struct SdeProblem<S> {
    pub system: S,
    pub z0: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
}

impl<S: SdeSystem> SdeProblem<S> {
    pub fn new(system: S, z0: Vec<f64>, t0: f64, t1: f64) -> Result<Self> {
        check_dim("initial state", system.state_dim(), z0.len())?;
        if !(0.0..=1.0).contains(&t0) || !(0.0..=1.0).contains(&t1) || t0 > t1 {
            return Err(Error::InvalidArgument(format!(
                "integration interval [{t0}, {t1}] is not inside [0, 1]"
            )));
        }
        Ok(Self { system, z0, t0, t1 })
    }

    /// Problem on the full interval `[0, 1]`.
    pub fn on_unit_interval(system: S, z0: Vec<f64>) -> Result<Self> {
        Self::new(system, z0, 0.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.system.state_dim()
    }
}

/// States of an Euler–Maruyama solve at each mesh knot in `[t0, t1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Rows `t, z_1, ..., z_m`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|k| format!("z_{k}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.times[i].to_string()];
            row.extend(self.state(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn step_range<S: SdeSystem>(
    problem: &SdeProblem<S>,
    mesh: &TimeMesh,
    noise: &NoisePath,
) -> Result<(usize, usize)> {
    check_dim("noise dimension", problem.system.noise_dim(), noise.dim())?;
    check_dim("noise length vs mesh steps", mesh.len(), noise.len())?;
    let start = mesh
        .knot_index(problem.t0)
        .ok_or_else(|| Error::InvalidArgument(format!("t0 = {} is not a mesh knot", problem.t0)))?;
    let end = mesh
        .knot_index(problem.t1)
        .ok_or_else(|| Error::InvalidArgument(format!("t1 = {} is not a mesh knot", problem.t1)))?;
    Ok((start, end))
}

/// Runs the recursion `z_{i+1} = z_i + h_{i+1} f(z_i, t_i) + g(z_i, t_i) dW_{i+1}`,
/// calling `visit` with each new state.
fn integrate<S: SdeSystem>(
    problem: &SdeProblem<S>,
    mesh: &TimeMesh,
    noise: &NoisePath,
    mut visit: impl FnMut(&[f64]),
) -> Result<Vec<f64>> {
    let (start, end) = step_range(problem, mesh, noise)?;
    let mut z = problem.z0.clone();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            time: problem.t0,
        });
    }
    let mut inc = vec![0.0; z.len()];
    for i in start..end {
        let t = mesh.knots()[i];
        problem
            .system
            .euler_increment(&z, t, mesh.steps()[i], noise.increment(i), &mut inc);
        let mut finite = true;
        for (zj, dj) in z.iter_mut().zip(&inc) {
            *zj += dj;
            finite &= zj.is_finite();
        }
        if !finite {
            return Err(Error::Divergence {
                step: i + 1 - start,
                time: mesh.knots()[i + 1],
            });
        }
        visit(&z);
    }
    Ok(z)
}

/// Euler–Maruyama solve returning every state on the mesh.
pub fn sde_solve<S: SdeSystem>(
    problem: &SdeProblem<S>,
    mesh: &TimeMesh,
    noise: &NoisePath,
) -> Result<Trajectory> {
    let (start, end) = step_range(problem, mesh, noise)?;
    let dim = problem.dim();
    let mut states = Vec::with_capacity((end - start + 1) * dim);
    states.extend_from_slice(&problem.z0);
    integrate(problem, mesh, noise, |z| states.extend_from_slice(z))?;
    Ok(Trajectory {
        times: mesh.knots()[start..=end].to_vec(),
        dim,
        states,
    })
}

/// Same recursion as [`sde_solve`], keeping only the final state.
pub fn solve_terminal<S: SdeSystem>(
    problem: &SdeProblem<S>,
    mesh: &TimeMesh,
    noise: &NoisePath,
) -> Result<Vec<f64>> {
    integrate(problem, mesh, noise, |_| {})
}
