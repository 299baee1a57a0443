//! Closed-form Gaussian ground truths.
//!
//! The linear SDE `dX = A_t X dt + C_t dW` with piecewise-constant
//! coefficients has terminal law `N(Phi_{0,1} x0, int Phi_{t,1} C C^T Phi_{t,1}^T dt)`.
//! A Gaussian target `q = N(m, Sigma)` is reached at `t = 1` by the unit
//! diffusion started at 0 with the affine Föllmer drift
//!
//! ```text
//! [(1-t) B S_{1-t} B - B] x - [(1-t) B S_{1-t} P - P] m,
//! P = Sigma^{-1},  B = P - I,  S_u = ((1-u) I + u P)^{-1}.
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::paths::{NoisePath, TimeMesh};
use crate::rng;
use crate::solver::{solve_terminal, SdeProblem, SdeSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("empty Gaussian law".into()));
        }
        check_dim("covariance rows", d, cov.nrows())?;
        check_dim("covariance columns", d, cov.ncols())?;
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance has negative eigenvalue {min_eig}"
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        let det = self.cov.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::SingularCovariance);
        }
        self.cov.clone().try_inverse().ok_or(Error::SingularCovariance)
    }
}

/// `dX = A(t) X dt + C(t) dW` with coefficients constant on each piece.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSdeSpec {
    /// `0 = b_0 < b_1 < ... < b_K = 1`.
    breaks: Vec<f64>,
    a: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    pub x0: DVector<f64>,
}

impl LinearSdeSpec {
    pub fn constant(a: DMatrix<f64>, c: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        Self::piecewise(vec![0.0, 1.0], vec![a], vec![c], x0)
    }

    /// Piece `k` holds on `[breaks[k], breaks[k+1])`.
    pub fn piecewise(
        breaks: Vec<f64>,
        a: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let d = x0.len();
        if d == 0 {
            return Err(Error::InvalidArgument("empty state".into()));
        }
        if breaks.len() < 2
            || breaks[0] != 0.0
            || *breaks.last().unwrap() != 1.0
            || breaks.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidMesh(
                "coefficient breakpoints must increase from 0 to 1".into(),
            ));
        }
        check_dim("drift pieces", breaks.len() - 1, a.len())?;
        check_dim("diffusion pieces", breaks.len() - 1, c.len())?;
        let q = c[0].ncols();
        for (ak, ck) in a.iter().zip(&c) {
            check_dim("A rows", d, ak.nrows())?;
            check_dim("A columns", d, ak.ncols())?;
            check_dim("C rows", d, ck.nrows())?;
            check_dim("C columns", q, ck.ncols())?;
        }
        Ok(Self { breaks, a, c, x0 })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.c[0].ncols()
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    fn piece(&self, t: f64) -> usize {
        let k = self.breaks.partition_point(|&b| b <= t);
        k.clamp(1, self.a.len()) - 1
    }

    pub fn a_at(&self, t: f64) -> &DMatrix<f64> {
        &self.a[self.piece(t)]
    }

    pub fn c_at(&self, t: f64) -> &DMatrix<f64> {
        &self.c[self.piece(t)]
    }
}

impl SdeSystem for LinearSdeSpec {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn noise_dim(&self) -> usize {
        LinearSdeSpec::noise_dim(self)
    }

    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let a = self.a_at(t);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..z.len()).map(|j| a[(i, j)] * z[j]).sum();
        }
    }

    fn dispersion(&self, _z: &[f64], t: f64) -> DMatrix<f64> {
        self.c_at(t).clone()
    }

    fn euler_increment(&self, z: &[f64], t: f64, h: f64, dw: &[f64], out: &mut [f64]) {
        let k = self.piece(t);
        let (a, c) = (&self.a[k], &self.c[k]);
        for (i, o) in out.iter_mut().enumerate() {
            let mut drift = 0.0;
            for (j, zj) in z.iter().enumerate() {
                drift += a[(i, j)] * zj;
            }
            let mut noise = 0.0;
            for (l, w) in dw.iter().enumerate() {
                noise += c[(i, l)] * w;
            }
            *o = h * drift + noise;
        }
    }
}

/// `Phi_{s,t}`, solving `d Phi / dt = A_t Phi` with `Phi_{s,s} = I`, as an
/// ordered product of matrix exponentials over the coefficient pieces.
pub fn fundamental_matrix(spec: &LinearSdeSpec, s: f64, t: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s > t {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= s <= t <= 1, got s = {s}, t = {t}"
        )));
    }
    let d = spec.dim();
    let mut phi = DMatrix::identity(d, d);
    for (k, a) in spec.a.iter().enumerate() {
        let lo = spec.breaks[k].max(s);
        let hi = spec.breaks[k + 1].min(t);
        if hi > lo {
            phi = (a * (hi - lo)).exp() * phi;
        }
    }
    Ok(phi)
}

/// Composite-midpoint approximation of `int_0^1 Phi_{t,1} C C^T Phi_{t,1}^T dt`
/// with `panels` midpoints in every coefficient piece.
pub fn covariance_quadrature(spec: &LinearSdeSpec, panels: usize) -> Result<DMatrix<f64>> {
    if panels == 0 {
        return Err(Error::InvalidArgument("need at least one panel".into()));
    }
    let d = spec.dim();
    let mut cov = DMatrix::zeros(d, d);
    for k in 0..spec.a.len() {
        let (lo, hi) = (spec.breaks[k], spec.breaks[k + 1]);
        let tail = fundamental_matrix(spec, hi, 1.0)?;
        let cct = &spec.c[k] * spec.c[k].transpose();
        let w = (hi - lo) / panels as f64;
        for p in 0..panels {
            let t = lo + (p as f64 + 0.5) * w;
            let phi = &tail * (&spec.a[k] * (hi - t)).exp();
            cov += &phi * &cct * phi.transpose() * w;
        }
    }
    Ok((&cov + cov.transpose()) * 0.5)
}

pub const TERMINAL_LAW_PANELS: usize = 1 << 12;

pub fn terminal_law(spec: &LinearSdeSpec) -> Result<GaussianLaw> {
    let mean = fundamental_matrix(spec, 0.0, 1.0)? * &spec.x0;
    let cov = covariance_quadrature(spec, TERMINAL_LAW_PANELS)?;
    GaussianLaw::new(mean, cov)
}

/// Exact mean and covariance of the Euler–Maruyama chain for `spec` on `mesh`.
pub fn euler_moments(spec: &LinearSdeSpec, mesh: &TimeMesh) -> Result<GaussianLaw> {
    let d = spec.dim();
    let mut mean = spec.x0.clone();
    let mut cov = DMatrix::zeros(d, d);
    for (t, h) in mesh.knots().iter().zip(mesh.steps()) {
        let step = DMatrix::identity(d, d) + spec.a_at(*t) * *h;
        let c = spec.c_at(*t);
        mean = &step * mean;
        cov = &step * cov * step.transpose() + c * c.transpose() * *h;
    }
    GaussianLaw::new(mean, (&cov + cov.transpose()) * 0.5)
}

/// The affine Föllmer drift of a nondegenerate Gaussian target.
#[derive(Debug, Clone)]
pub struct FollmerAffine {
    precision: DMatrix<f64>,
    shift: DMatrix<f64>,
    mean: DVector<f64>,
}

impl FollmerAffine {
    pub fn new(target: &GaussianLaw) -> Result<Self> {
        let precision = target.precision()?;
        let d = target.dim();
        let shift = &precision - DMatrix::identity(d, d);
        Ok(Self {
            precision,
            shift,
            mean: target.mean.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(M_t, c_t)` with drift `M_t x + c_t`; depends on `t` only through
    /// `S_{1-t}`.
    pub fn coefficients(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let d = self.dim();
        let u = 1.0 - t;
        let eye = DMatrix::<f64>::identity(d, d);
        let s = (&eye * (1.0 - u) + &self.precision * u)
            .try_inverse()
            .ok_or(Error::SingularCovariance)?;
        let b = &self.shift;
        let m_t = b * &s * b * u - b;
        let c_t = -((b * &s * &self.precision * u - &self.precision) * &self.mean);
        Ok((m_t, c_t))
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        check_dim("Föllmer drift input", self.dim(), x.len())?;
        let (m_t, c_t) = self.coefficients(t)?;
        Ok(m_t * DVector::from_column_slice(x) + c_t)
    }
}

pub fn follmer_affine_drift(target: &GaussianLaw, x: &[f64], t: f64) -> Result<DVector<f64>> {
    FollmerAffine::new(target)?.drift(x, t)
}

/// A positive density ratio `f = q / phi_d` (up to a constant) with gradient.
pub trait DensityRatio {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> DVector<f64>;
}

/// `f(x) = exp(-1/2 (x-m)^T P (x-m) + 1/2 x^T x)` for `q = N(m, P^{-1})`.
#[derive(Debug, Clone)]
pub struct GaussianRatio {
    precision: DMatrix<f64>,
    mean: DVector<f64>,
}

impl GaussianRatio {
    pub fn new(target: &GaussianLaw) -> Result<Self> {
        Ok(Self {
            precision: target.precision()?,
            mean: target.mean.clone(),
        })
    }

    fn log_value_and_score(&self, x: &[f64]) -> (f64, DVector<f64>) {
        let xv = DVector::from_column_slice(x);
        let r = &xv - &self.mean;
        let pr = &self.precision * &r;
        (-0.5 * r.dot(&pr) + 0.5 * xv.dot(&xv), xv - pr)
    }
}

impl DensityRatio for GaussianRatio {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.log_value_and_score(x).0.exp()
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let (lv, score) = self.log_value_and_score(x);
        score * lv.exp()
    }
}

/// The unit function: the Föllmer drift of the standard Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct UnitRatio(pub usize);

impl DensityRatio for UnitRatio {
    fn dim(&self) -> usize {
        self.0
    }

    fn value(&self, _x: &[f64]) -> f64 {
        1.0
    }

    fn gradient(&self, _x: &[f64]) -> DVector<f64> {
        DVector::zeros(self.0)
    }
}

/// Ratio estimator `sum_n grad f(x + sqrt(1-t) z_n) / sum_n f(x + sqrt(1-t) z_n)`
/// of `grad log Q_{1-t} f (x)`, with `z_n` standard normal from `seed`.
pub fn follmer_mc_drift<F: DensityRatio + ?Sized>(
    f: &F,
    x: &[f64],
    t: f64,
    n_mc: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    let d = f.dim();
    check_dim("Föllmer drift input", d, x.len())?;
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1)")));
    }
    let s = (1.0 - t).sqrt();
    let mut r = rng::stream(seed);
    let mut z = vec![0.0; d];
    let mut num = DVector::zeros(d);
    let mut den = 0.0;
    for _ in 0..n_mc {
        rng::fill_standard_normal(&mut r, &mut z);
        for (zi, xi) in z.iter_mut().zip(x) {
            *zi = xi + s * *zi;
        }
        den += f.value(&z);
        num += f.gradient(&z);
    }
    if !(den > f64::MIN_POSITIVE) || !den.is_finite() {
        return Err(Error::DenominatorUnderflow(den));
    }
    Ok(num / den)
}

/// Euler–Maruyama for `dX = b(X,t) dt + dW`, `X_0 = 0`, with the affine
/// Föllmer drift precomputed on the mesh knots.
pub struct FollmerSampler {
    knots: Vec<f64>,
    coefficients: Vec<(DMatrix<f64>, DVector<f64>)>,
    dim: usize,
}

impl FollmerSampler {
    pub fn new(target: &GaussianLaw, mesh: &TimeMesh) -> Result<Self> {
        let affine = FollmerAffine::new(target)?;
        let knots = mesh.knots()[..mesh.len()].to_vec();
        let coefficients = knots
            .iter()
            .map(|&t| affine.coefficients(t))
            .collect::<Result<_>>()?;
        Ok(Self {
            knots,
            coefficients,
            dim: target.dim(),
        })
    }

    pub fn sample(&self, mesh: &TimeMesh, noise: &NoisePath) -> Result<DVector<f64>> {
        check_dim("mesh steps", self.knots.len(), mesh.len())?;
        let problem = SdeProblem::on_unit_interval(self, vec![0.0; self.dim])?;
        Ok(DVector::from_vec(solve_terminal(&problem, mesh, noise)?))
    }

    fn at(&self, t: f64) -> &(DMatrix<f64>, DVector<f64>) {
        let i = self.knots.partition_point(|&k| k < t);
        &self.coefficients[i.min(self.knots.len() - 1)]
    }
}

impl SdeSystem for FollmerSampler {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let (m, c) = self.at(t);
        for (i, o) in out.iter_mut().enumerate() {
            *o = c[i] + (0..self.dim).map(|j| m[(i, j)] * z[j]).sum::<f64>();
        }
    }

    fn dispersion(&self, _z: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }

    fn euler_increment(&self, z: &[f64], t: f64, h: f64, dw: &[f64], out: &mut [f64]) {
        self.drift(z, t, out);
        for (o, w) in out.iter_mut().zip(dw) {
            *o = h * *o + w;
        }
    }
}

pub fn follmer_sample(target: &GaussianLaw, mesh: &TimeMesh, noise: &NoisePath) -> Result<DVector<f64>> {
    FollmerSampler::new(target, mesh)?.sample(mesh, noise)
}

/// Exact mean and covariance of [`FollmerSampler`]'s Euler chain.
pub fn follmer_euler_moments(target: &GaussianLaw, mesh: &TimeMesh) -> Result<GaussianLaw> {
    let affine = FollmerAffine::new(target)?;
    let d = target.dim();
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for (t, h) in mesh.knots().iter().zip(mesh.steps()) {
        let (m, c) = affine.coefficients(*t)?;
        let step = DMatrix::identity(d, d) + m * *h;
        mean = &step * mean + c * *h;
        cov = &step * cov * step.transpose() + DMatrix::identity(d, d) * *h;
    }
    GaussianLaw::new(mean, (&cov + cov.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::sample_wiener;

    fn randn_matrix(r: &mut rng::StreamRng, n: usize, m: usize, s: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| s * rng::standard_normal(r))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / a.amax().max(b.amax())
    }

    fn scalar(a: f64, c: f64) -> LinearSdeSpec {
        LinearSdeSpec::constant(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, c),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn law_validation() {
        let m = DVector::zeros(2);
        assert!(GaussianLaw::new(m.clone(), DMatrix::identity(2, 2)).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianLaw::new(m.clone(), asym).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianLaw::new(m.clone(), indefinite).is_err());
        let singular = GaussianLaw::new(m, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(follmer_affine_drift(&singular, &[0.0, 0.0], 0.5), Err(Error::SingularCovariance)));
    }

    #[test]
    fn fundamental_matrix_closed_forms() {
        let zero = LinearSdeSpec::constant(DMatrix::zeros(3, 3), DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        assert_eq!(fundamental_matrix(&zero, 0.0, 1.0).unwrap(), DMatrix::identity(3, 3));
        let s = scalar(0.7, 1.0);
        let e = fundamental_matrix(&s, 0.0, 1.0).unwrap()[(0, 0)];
        assert!((e - 0.7f64.exp()).abs() <= 1e-14 * e);
        assert_eq!(fundamental_matrix(&s, 0.3, 0.3).unwrap()[(0, 0)], 1.0);
        assert!(fundamental_matrix(&s, 0.6, 0.3).is_err());
    }

    #[test]
    fn fundamental_matrix_matches_fine_ode_integration() {
        let mut r = rng::stream(44);
        let a = randn_matrix(&mut r, 4, 4, 0.8);
        let spec = LinearSdeSpec::constant(a.clone(), DMatrix::identity(4, 4), DVector::zeros(4)).unwrap();
        // classical RK4 on dPhi/dt = A Phi with 2^14 steps
        let n = 1 << 14;
        let h = 1.0 / n as f64;
        let mut phi = DMatrix::<f64>::identity(4, 4);
        for _ in 0..n {
            let k1 = &a * &phi;
            let k2 = &a * (&phi + &k1 * (h / 2.0));
            let k3 = &a * (&phi + &k2 * (h / 2.0));
            let k4 = &a * (&phi + &k3 * h);
            phi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        assert!(rel(&fundamental_matrix(&spec, 0.0, 1.0).unwrap(), &phi) <= 1e-6);
    }

    #[test]
    fn semigroup_over_pieces() {
        let mut r = rng::stream(45);
        let a: Vec<_> = (0..3).map(|_| randn_matrix(&mut r, 3, 3, 1.0)).collect();
        let c: Vec<_> = (0..3).map(|_| randn_matrix(&mut r, 3, 2, 1.0)).collect();
        let spec = LinearSdeSpec::piecewise(vec![0.0, 0.3, 0.55, 1.0], a, c, DVector::zeros(3)).unwrap();
        for (s, t, u) in [(0.0, 0.5, 1.0), (0.1, 0.3, 0.9), (0.2, 0.6, 0.61), (0.0, 0.0, 1.0)] {
            let lhs = fundamental_matrix(&spec, s, u).unwrap();
            let rhs = fundamental_matrix(&spec, t, u).unwrap() * fundamental_matrix(&spec, s, t).unwrap();
            assert!(rel(&lhs, &rhs) <= 1e-10);
        }
    }

    #[test]
    fn terminal_law_closed_forms() {
        let spec = LinearSdeSpec::constant(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, -2.0]),
        )
        .unwrap();
        let law = terminal_law(&spec).unwrap();
        assert_eq!(law.mean, spec.x0);
        assert!(rel(&law.cov, &DMatrix::identity(2, 2)) <= 1e-14);

        let closed = (2f64.exp() - 1.0) / 2.0;
        let v = terminal_law(&scalar(1.0, 1.0)).unwrap().cov[(0, 0)];
        assert!((v - closed).abs() <= 1e-6 * closed);
        assert!((v - 3.19452804946).abs() <= 1e-6);
        let (a, c): (f64, f64) = (-0.6, 1.7);
        let closed = c * c * ((2.0 * a).exp() - 1.0) / (2.0 * a);
        let v = terminal_law(&scalar(a, c)).unwrap().cov[(0, 0)];
        assert!((v - closed).abs() <= 1e-6 * closed);
    }

    #[test]
    fn midpoint_rule_is_second_order() {
        let spec = scalar(1.3, 0.8);
        let exact = 0.64 * ((2.6f64).exp() - 1.0) / 2.6;
        let err = |n| (covariance_quadrature(&spec, n).unwrap()[(0, 0)] - exact).abs();
        for n in [64, 128, 256] {
            assert!(err(n) / err(2 * n) >= 3.5);
        }
    }

    #[test]
    fn piecewise_terminal_law_matches_euler_moments() {
        let mut r = rng::stream(46);
        let a: Vec<_> = (0..2).map(|_| randn_matrix(&mut r, 2, 2, 0.7)).collect();
        let c: Vec<_> = (0..2).map(|_| randn_matrix(&mut r, 2, 2, 0.7)).collect();
        let spec = LinearSdeSpec::piecewise(vec![0.0, 0.5, 1.0], a, c, DVector::from_vec(vec![1.0, 0.5])).unwrap();
        let law = terminal_law(&spec).unwrap();
        let fine = euler_moments(&spec, &TimeMesh::uniform(1 << 14).unwrap()).unwrap();
        assert!(rel(&law.cov, &fine.cov) <= 1e-3);
        assert!((&law.mean - &fine.mean).amax() <= 1e-3 * law.mean.amax());
    }

    #[test]
    fn follmer_drift_collapses_for_unit_covariance() {
        let m = DVector::from_vec(vec![0.3, -1.0]);
        let target = GaussianLaw::new(m.clone(), DMatrix::identity(2, 2)).unwrap();
        for t in [0.0, 0.4, 1.0] {
            let b = follmer_affine_drift(&target, &[5.0, -3.0], t).unwrap();
            assert!((&b - &m).amax() <= 1e-15);
        }
        let standard = GaussianLaw::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(follmer_affine_drift(&standard, &[1.0, 2.0], 0.3).unwrap(), DVector::zeros(2));
    }

    /// `d/dx log E[f(x + s Z)]` for the scalar target `N(m, v)` by trapezoid
    /// quadrature over `z` in `[-40, 40]` and a central difference in `x`.
    fn quadrature_log_heat_derivative(m: f64, v: f64, x: f64, t: f64) -> f64 {
        let s = (1.0 - t).sqrt();
        let log_f = |y: f64| -0.5 * (y - m) * (y - m) / v + 0.5 * y * y;
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

    #[test]
    fn scalar_follmer_drift_matches_heat_kernel_quadrature() {
        let target = GaussianLaw::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 4.0)).unwrap();
        let b = follmer_affine_drift(&target, &[2.0], 0.5).unwrap()[0];
        let q = quadrature_log_heat_derivative(1.0, 4.0, 2.0, 0.5);
        assert!((b - q).abs() <= 1e-6 * q.abs(), "{b} vs {q}");
        assert!((b - 2.8).abs() <= 1e-12);
        for (x, t) in [(-1.0, 0.1), (0.5, 0.9), (3.0, 0.0)] {
            let b = follmer_affine_drift(&target, &[x], t).unwrap()[0];
            let q = quadrature_log_heat_derivative(1.0, 4.0, x, t);
            assert!((b - q).abs() <= 1e-6 * q.abs().max(1e-3), "x = {x}, t = {t}");
        }
    }

    #[test]
    fn follmer_drift_is_affine_in_x() {
        let mut r = rng::stream(9);
        let l = randn_matrix(&mut r, 3, 3, 0.5) + DMatrix::identity(3, 3);
        let target = GaussianLaw::new(DVector::from_vec(vec![1.0, 0.0, -1.0]), &l * l.transpose()).unwrap();
        let affine = FollmerAffine::new(&target).unwrap();
        for t in [0.0, 0.25, 0.8, 1.0] {
            let (m_t, c_t) = affine.coefficients(t).unwrap();
            let x = [0.3, -0.2, 1.1];
            let b = affine.drift(&x, t).unwrap();
            assert_eq!(b, &m_t * DVector::from_column_slice(&x) + &c_t);
            // the drift at the origin is the offset, and differences are linear
            let b0 = affine.drift(&[0.0; 3], t).unwrap();
            let b2 = affine.drift(&[0.6, -0.4, 2.2], t).unwrap();
            assert!((&b0 - &c_t).amax() <= 1e-14);
            assert!((b2 - &b0 - (&b - &b0) * 2.0).amax() <= 1e-12);
        }
    }

    #[test]
    fn mc_drift_special_cases() {
        let ones = UnitRatio(3);
        assert_eq!(follmer_mc_drift(&ones, &[1.0, 2.0, 3.0], 0.2, 17, 4).unwrap(), DVector::zeros(3));
        let m = DVector::from_vec(vec![0.7, -0.4]);
        let ratio = GaussianRatio::new(&GaussianLaw::new(m.clone(), DMatrix::identity(2, 2)).unwrap()).unwrap();
        for seed in 0..5 {
            let b = follmer_mc_drift(&ratio, &[0.1, 0.5], 0.3, 1 + 10 * seed as usize, seed).unwrap();
            assert!((&b - &m).amax() <= 1e-14);
        }
        assert!(follmer_mc_drift(&ones, &[0.0; 3], 1.0, 10, 0).is_err());
        assert!(follmer_mc_drift(&ones, &[0.0; 3], 0.5, 0, 0).is_err());
    }

    #[test]
    fn mc_drift_reports_underflow() {
        let far = GaussianRatio::new(
            &GaussianLaw::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 0.01)).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            follmer_mc_drift(&far, &[400.0], 0.9, 10, 0),
            Err(Error::DenominatorUnderflow(_))
        ));
    }

    #[test]
    fn follmer_sampler_trivial_targets() {
        let mesh = TimeMesh::uniform(64).unwrap();
        let noise = sample_wiener(&mesh, 2, 3).unwrap();
        let standard = GaussianLaw::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(follmer_sample(&standard, &mesh, &noise).unwrap(), noise.terminal());
        let m = DVector::from_vec(vec![1.0, -0.5]);
        let shifted = GaussianLaw::new(m.clone(), DMatrix::identity(2, 2)).unwrap();
        let x = follmer_sample(&shifted, &mesh, &noise).unwrap();
        assert!((x - noise.terminal() - m).amax() <= 1e-13);
    }

    #[test]
    fn follmer_euler_bias_vanishes_with_step() {
        let target = GaussianLaw::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 4.0)).unwrap();
        let err = |n| {
            let e = follmer_euler_moments(&target, &TimeMesh::uniform(n).unwrap()).unwrap();
            (e.cov[(0, 0)] - 4.0).abs() + (e.mean[0] - 1.0).abs()
        };
        assert!(err(1 << 10) < 0.05);
        assert!(err(1 << 11) < err(1 << 10));
    }
}
