//! Parametric drift and diffusion fields with closed-form Jacobians.
//!
//! A [`VectorField`] maps `(x, t, params)` to a flat output vector. Drift
//! fields return `R^d`; diffusion fields return a `d x d` matrix flattened
//! column-major, so column `l` (the coefficient of `dW^l`) occupies entries
//! `l*d .. (l+1)*d`. Parameters are flat and row-major per weight matrix;
//! [`VectorField::layout`] names the segments.
//!
//! Only `C^2` activations are admitted (sigmoid, tanh, softplus); the
//! pathwise sensitivity equations need Lipschitz Jacobians.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "relu" | "leaky_relu" | "hardtanh" | "step" => Err(Error::NonSmoothActivation(s.into())),
            _ => Err(Error::Unknown {
                kind: "activation",
                name: s.into(),
            }),
        }
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.name().to_string()
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed set of supported field architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum Architecture {
    /// `x -> 0`, no parameters.
    Zero { in_dim: usize, out_dim: usize },
    /// `x -> p`, ignores `x` and `t`.
    Constant { in_dim: usize, out_dim: usize },
    /// `x -> W x (+ w t) + c`.
    Affine {
        in_dim: usize,
        out_dim: usize,
        time_input: bool,
    },
    /// `x -> W2 act(W1 [x; t] + b1) + b2`. With `matrix_output` the output is a
    /// square `in_dim x in_dim` matrix (experimental diffusion net).
    Mlp {
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        time_input: bool,
        #[serde(default)]
        matrix_output: bool,
    },
    /// `x -> A x`.
    MatrixLinear { dim: usize },
    /// `x -> act(A x)` coordinatewise.
    ActivationLinear { dim: usize, activation: Activation },
    /// Constant `sigma = I_d`.
    IdentityMatrix { dim: usize },
    /// `sigma = s I_d` with a single scale parameter.
    ScaledIdentity { dim: usize },
}

/// Named parameter range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutShape {
    Vector(usize),
    /// Square matrix, stored column-major.
    Matrix(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Architecture", into = "Architecture")]
pub struct VectorField {
    arch: Architecture,
}

impl TryFrom<Architecture> for VectorField {
    type Error = Error;
    fn try_from(arch: Architecture) -> Result<Self> {
        VectorField::new(arch)
    }
}

impl From<VectorField> for Architecture {
    fn from(f: VectorField) -> Architecture {
        f.arch
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::InvalidArgument(format!("{name} must be positive")))
    } else {
        Ok(())
    }
}

impl VectorField {
    pub fn new(arch: Architecture) -> Result<Self> {
        match &arch {
            Architecture::Zero { in_dim, out_dim } | Architecture::Constant { in_dim, out_dim } => {
                positive("in_dim", *in_dim)?;
                positive("out_dim", *out_dim)?;
            }
            Architecture::Affine { in_dim, out_dim, .. } => {
                positive("in_dim", *in_dim)?;
                positive("out_dim", *out_dim)?;
            }
            Architecture::Mlp {
                in_dim,
                hidden,
                out_dim,
                matrix_output,
                ..
            } => {
                positive("in_dim", *in_dim)?;
                positive("hidden", *hidden)?;
                positive("out_dim", *out_dim)?;
                if *matrix_output && *out_dim != in_dim * in_dim {
                    return Err(Error::InvalidArgument(
                        "a matrix-valued net needs out_dim = in_dim^2".into(),
                    ));
                }
            }
            Architecture::MatrixLinear { dim }
            | Architecture::ActivationLinear { dim, .. }
            | Architecture::IdentityMatrix { dim }
            | Architecture::ScaledIdentity { dim } => positive("dim", *dim)?,
        }
        Ok(Self { arch })
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self::new(Architecture::Zero { in_dim, out_dim }).expect("positive dims")
    }

    pub fn constant(in_dim: usize, out_dim: usize) -> Self {
        Self::new(Architecture::Constant { in_dim, out_dim }).expect("positive dims")
    }

    pub fn affine(in_dim: usize, out_dim: usize, time_input: bool) -> Result<Self> {
        Self::new(Architecture::Affine {
            in_dim,
            out_dim,
            time_input,
        })
    }

    pub fn mlp(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        time_input: bool,
    ) -> Result<Self> {
        Self::new(Architecture::Mlp {
            in_dim,
            hidden,
            out_dim,
            activation,
            time_input,
            matrix_output: false,
        })
    }

    pub fn matrix_linear(dim: usize) -> Result<Self> {
        Self::new(Architecture::MatrixLinear { dim })
    }

    pub fn activation_linear(dim: usize, activation: Activation) -> Result<Self> {
        Self::new(Architecture::ActivationLinear { dim, activation })
    }

    pub fn identity_diffusion(dim: usize) -> Result<Self> {
        Self::new(Architecture::IdentityMatrix { dim })
    }

    pub fn scaled_identity_diffusion(dim: usize) -> Result<Self> {
        Self::new(Architecture::ScaledIdentity { dim })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn in_dim(&self) -> usize {
        match self.arch {
            Architecture::Zero { in_dim, .. }
            | Architecture::Constant { in_dim, .. }
            | Architecture::Affine { in_dim, .. }
            | Architecture::Mlp { in_dim, .. } => in_dim,
            Architecture::MatrixLinear { dim }
            | Architecture::ActivationLinear { dim, .. }
            | Architecture::IdentityMatrix { dim }
            | Architecture::ScaledIdentity { dim } => dim,
        }
    }

    pub fn shape(&self) -> OutShape {
        match self.arch {
            Architecture::Zero { out_dim, .. }
            | Architecture::Constant { out_dim, .. }
            | Architecture::Affine { out_dim, .. } => OutShape::Vector(out_dim),
            Architecture::Mlp {
                in_dim,
                out_dim,
                matrix_output,
                ..
            } => {
                if matrix_output {
                    OutShape::Matrix(in_dim)
                } else {
                    OutShape::Vector(out_dim)
                }
            }
            Architecture::MatrixLinear { dim } | Architecture::ActivationLinear { dim, .. } => {
                OutShape::Vector(dim)
            }
            Architecture::IdentityMatrix { dim } | Architecture::ScaledIdentity { dim } => {
                OutShape::Matrix(dim)
            }
        }
    }

    /// Length of the flat output.
    pub fn out_len(&self) -> usize {
        match self.shape() {
            OutShape::Vector(n) => n,
            OutShape::Matrix(n) => n * n,
        }
    }

    pub fn is_matrix_valued(&self) -> bool {
        matches!(self.shape(), OutShape::Matrix(_))
    }

    pub fn uses_time(&self) -> bool {
        match self.arch {
            Architecture::Affine { time_input, .. } | Architecture::Mlp { time_input, .. } => {
                time_input
            }
            _ => false,
        }
    }

    /// True when the output does not depend on `x` for any parameter value.
    pub fn ignores_input(&self) -> bool {
        matches!(
            self.arch,
            Architecture::Zero { .. }
                | Architecture::Constant { .. }
                | Architecture::IdentityMatrix { .. }
                | Architecture::ScaledIdentity { .. }
        )
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut segs = Vec::new();
        let mut at = 0;
        let mut push = |name: &str, len: usize| {
            if len > 0 {
                segs.push(Segment {
                    name: name.to_string(),
                    range: at..at + len,
                });
                at += len;
            }
        };
        match self.arch {
            Architecture::Zero { .. } => {}
            Architecture::Constant { out_dim, .. } => push("value", out_dim),
            Architecture::Affine {
                in_dim,
                out_dim,
                time_input,
            } => {
                push("weight", out_dim * in_dim);
                if time_input {
                    push("time_weight", out_dim);
                }
                push("bias", out_dim);
            }
            Architecture::Mlp {
                in_dim,
                hidden,
                out_dim,
                time_input,
                ..
            } => {
                let cols = in_dim + usize::from(time_input);
                push("w1", hidden * cols);
                push("b1", hidden);
                push("w2", out_dim * hidden);
                push("b2", out_dim);
            }
            Architecture::MatrixLinear { dim } | Architecture::ActivationLinear { dim, .. } => {
                push("a", dim * dim)
            }
            Architecture::IdentityMatrix { .. } => {}
            Architecture::ScaledIdentity { .. } => push("scale", 1),
        }
        segs
    }

    pub fn n_params(&self) -> usize {
        self.layout().last().map_or(0, |s| s.range.end)
    }

    fn check(&self, x: &[f64], params: &[f64]) -> Result<()> {
        check_dim("field input", self.in_dim(), x.len())?;
        check_dim("field parameters", self.n_params(), params.len())
    }

    pub fn eval(&self, x: &[f64], t: f64, params: &[f64]) -> Result<DVector<f64>> {
        self.check(x, params)?;
        Ok(self.eval_unchecked(x, t, params))
    }

    /// Exact Jacobian in `x`, shape `out_len x in_dim`.
    pub fn jac_x(&self, x: &[f64], t: f64, params: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, params)?;
        Ok(self.jac_x_unchecked(x, t, params))
    }

    /// Exact Jacobian in the parameters, shape `out_len x n_params`.
    pub fn jac_params(&self, x: &[f64], t: f64, params: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, params)?;
        Ok(self.jac_params_unchecked(x, t, params))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], t: f64, p: &[f64]) -> DVector<f64> {
        match self.arch {
            Architecture::Zero { out_dim, .. } => DVector::zeros(out_dim),
            Architecture::Constant { .. } => DVector::from_column_slice(p),
            Architecture::Affine {
                in_dim,
                out_dim,
                time_input,
            } => {
                let mut out = DVector::zeros(out_dim);
                for i in 0..out_dim {
                    let row = &p[i * in_dim..(i + 1) * in_dim];
                    out[i] = dot(row, x);
                }
                let mut at = out_dim * in_dim;
                if time_input {
                    for i in 0..out_dim {
                        out[i] += p[at + i] * t;
                    }
                    at += out_dim;
                }
                for i in 0..out_dim {
                    out[i] += p[at + i];
                }
                out
            }
            Architecture::Mlp { .. } => self.mlp_forward(x, t, p).2,
            Architecture::MatrixLinear { dim } => {
                DVector::from_fn(dim, |i, _| dot(&p[i * dim..(i + 1) * dim], x))
            }
            Architecture::ActivationLinear { dim, activation } => DVector::from_fn(dim, |i, _| {
                activation.apply(dot(&p[i * dim..(i + 1) * dim], x))
            }),
            Architecture::IdentityMatrix { dim } => {
                DVector::from_column_slice(DMatrix::<f64>::identity(dim, dim).as_slice())
            }
            Architecture::ScaledIdentity { dim } => {
                let m = DMatrix::<f64>::identity(dim, dim) * p[0];
                DVector::from_column_slice(m.as_slice())
            }
        }
    }

    pub(crate) fn jac_x_unchecked(&self, x: &[f64], t: f64, p: &[f64]) -> DMatrix<f64> {
        let n_in = self.in_dim();
        match self.arch {
            Architecture::Zero { out_dim, .. } | Architecture::Constant { out_dim, .. } => {
                DMatrix::zeros(out_dim, n_in)
            }
            Architecture::Affine { in_dim, out_dim, .. } => {
                DMatrix::from_row_slice(out_dim, in_dim, &p[..out_dim * in_dim])
            }
            Architecture::Mlp {
                in_dim,
                hidden,
                out_dim,
                activation,
                time_input,
                ..
            } => {
                let cols = in_dim + usize::from(time_input);
                let (pre, _, _) = self.mlp_forward(x, t, p);
                let (w2_at, _) = mlp_offsets(in_dim, hidden, out_dim, time_input);
                let mut out = DMatrix::zeros(out_dim, in_dim);
                for k in 0..hidden {
                    let g = activation.derivative(pre[k]);
                    for i in 0..out_dim {
                        let w2 = p[w2_at + i * hidden + k] * g;
                        for j in 0..in_dim {
                            out[(i, j)] += w2 * p[k * cols + j];
                        }
                    }
                }
                out
            }
            Architecture::MatrixLinear { dim } => DMatrix::from_row_slice(dim, dim, &p[..dim * dim]),
            Architecture::ActivationLinear { dim, activation } => {
                let mut a = DMatrix::from_row_slice(dim, dim, &p[..dim * dim]);
                for i in 0..dim {
                    let g = activation.derivative(dot(&p[i * dim..(i + 1) * dim], x));
                    for j in 0..dim {
                        a[(i, j)] *= g;
                    }
                }
                a
            }
            Architecture::IdentityMatrix { dim } | Architecture::ScaledIdentity { dim } => {
                DMatrix::zeros(dim * dim, dim)
            }
        }
    }

    pub(crate) fn jac_params_unchecked(&self, x: &[f64], t: f64, p: &[f64]) -> DMatrix<f64> {
        let n_params = self.n_params();
        match self.arch {
            Architecture::Zero { out_dim, .. } => DMatrix::zeros(out_dim, 0),
            Architecture::Constant { out_dim, .. } => DMatrix::identity(out_dim, out_dim),
            Architecture::Affine {
                in_dim,
                out_dim,
                time_input,
            } => {
                let mut jac = DMatrix::zeros(out_dim, n_params);
                for i in 0..out_dim {
                    for j in 0..in_dim {
                        jac[(i, i * in_dim + j)] = x[j];
                    }
                }
                let mut at = out_dim * in_dim;
                if time_input {
                    for i in 0..out_dim {
                        jac[(i, at + i)] = t;
                    }
                    at += out_dim;
                }
                for i in 0..out_dim {
                    jac[(i, at + i)] = 1.0;
                }
                jac
            }
            Architecture::Mlp {
                in_dim,
                hidden,
                out_dim,
                activation,
                time_input,
                ..
            } => {
                let cols = in_dim + usize::from(time_input);
                let (pre, act, _) = self.mlp_forward(x, t, p);
                let (w2_at, b2_at) = mlp_offsets(in_dim, hidden, out_dim, time_input);
                let b1_at = hidden * cols;
                let mut jac = DMatrix::zeros(out_dim, n_params);
                for i in 0..out_dim {
                    for k in 0..hidden {
                        jac[(i, w2_at + i * hidden + k)] = act[k];
                        let back = p[w2_at + i * hidden + k] * activation.derivative(pre[k]);
                        jac[(i, b1_at + k)] = back;
                        for j in 0..in_dim {
                            jac[(i, k * cols + j)] = back * x[j];
                        }
                        if time_input {
                            jac[(i, k * cols + in_dim)] = back * t;
                        }
                    }
                    jac[(i, b2_at + i)] = 1.0;
                }
                jac
            }
            Architecture::MatrixLinear { dim } => {
                let mut jac = DMatrix::zeros(dim, n_params);
                for i in 0..dim {
                    for j in 0..dim {
                        jac[(i, i * dim + j)] = x[j];
                    }
                }
                jac
            }
            Architecture::ActivationLinear { dim, activation } => {
                let mut jac = DMatrix::zeros(dim, n_params);
                for i in 0..dim {
                    let g = activation.derivative(dot(&p[i * dim..(i + 1) * dim], x));
                    for j in 0..dim {
                        jac[(i, i * dim + j)] = g * x[j];
                    }
                }
                jac
            }
            Architecture::IdentityMatrix { dim } => DMatrix::zeros(dim * dim, 0),
            Architecture::ScaledIdentity { dim } => {
                let eye = DMatrix::<f64>::identity(dim, dim);
                DMatrix::from_column_slice(dim * dim, 1, eye.as_slice())
            }
        }
    }

    /// Vector-Jacobian products `(c^T d/dx, c^T d/dparams)` for a cotangent
    /// `c` on the flat output, without forming either Jacobian.
    pub fn vjp(
        &self,
        x: &[f64],
        t: f64,
        params: &[f64],
        cotangent: &[f64],
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check(x, params)?;
        check_dim("cotangent", self.out_len(), cotangent.len())?;
        Ok(self.vjp_unchecked(x, t, params, cotangent))
    }

    pub(crate) fn vjp_unchecked(
        &self,
        x: &[f64],
        t: f64,
        p: &[f64],
        c: &[f64],
    ) -> (DVector<f64>, DVector<f64>) {
        let n_in = self.in_dim();
        let mut gx = DVector::zeros(n_in);
        let mut gp = DVector::zeros(self.n_params());
        match self.arch {
            Architecture::Zero { .. } => {}
            Architecture::Constant { .. } => gp.copy_from_slice(c),
            Architecture::Affine {
                in_dim,
                out_dim,
                time_input,
            } => {
                for i in 0..out_dim {
                    for j in 0..in_dim {
                        gx[j] += p[i * in_dim + j] * c[i];
                        gp[i * in_dim + j] = c[i] * x[j];
                    }
                }
                let mut at = out_dim * in_dim;
                if time_input {
                    for i in 0..out_dim {
                        gp[at + i] = c[i] * t;
                    }
                    at += out_dim;
                }
                for i in 0..out_dim {
                    gp[at + i] = c[i];
                }
            }
            Architecture::Mlp {
                in_dim,
                hidden,
                out_dim,
                activation,
                time_input,
                ..
            } => {
                let cols = in_dim + usize::from(time_input);
                let (pre, act, _) = self.mlp_forward(x, t, p);
                let (w2_at, b2_at) = mlp_offsets(in_dim, hidden, out_dim, time_input);
                let b1_at = hidden * cols;
                for k in 0..hidden {
                    let mut g = 0.0;
                    for i in 0..out_dim {
                        g += c[i] * p[w2_at + i * hidden + k];
                        gp[w2_at + i * hidden + k] = c[i] * act[k];
                    }
                    let back = g * activation.derivative(pre[k]);
                    gp[b1_at + k] = back;
                    for j in 0..in_dim {
                        gx[j] += back * p[k * cols + j];
                        gp[k * cols + j] = back * x[j];
                    }
                    if time_input {
                        gp[k * cols + in_dim] = back * t;
                    }
                }
                for i in 0..out_dim {
                    gp[b2_at + i] = c[i];
                }
            }
            Architecture::MatrixLinear { dim } => {
                for i in 0..dim {
                    for j in 0..dim {
                        gx[j] += p[i * dim + j] * c[i];
                        gp[i * dim + j] = c[i] * x[j];
                    }
                }
            }
            Architecture::ActivationLinear { dim, activation } => {
                for i in 0..dim {
                    let row = &p[i * dim..(i + 1) * dim];
                    let s = c[i] * activation.derivative(dot(row, x));
                    for j in 0..dim {
                        gx[j] += row[j] * s;
                        gp[i * dim + j] = s * x[j];
                    }
                }
            }
            Architecture::IdentityMatrix { .. } => {}
            Architecture::ScaledIdentity { dim } => {
                gp[0] = (0..dim).map(|l| c[l * dim + l]).sum();
            }
        }
        (gx, gp)
    }

    /// Returns (pre-activations, activations, output).
    fn mlp_forward(&self, x: &[f64], t: f64, p: &[f64]) -> (Vec<f64>, Vec<f64>, DVector<f64>) {
        let Architecture::Mlp {
            in_dim,
            hidden,
            out_dim,
            activation,
            time_input,
            ..
        } = self.arch
        else {
            unreachable!("mlp_forward on non-mlp field")
        };
        let cols = in_dim + usize::from(time_input);
        let b1_at = hidden * cols;
        let (w2_at, b2_at) = mlp_offsets(in_dim, hidden, out_dim, time_input);
        let mut pre = vec![0.0; hidden];
        for (k, z) in pre.iter_mut().enumerate() {
            let row = &p[k * cols..(k + 1) * cols];
            let mut s = dot(&row[..in_dim], x);
            if time_input {
                s += row[in_dim] * t;
            }
            *z = s + p[b1_at + k];
        }
        let act: Vec<f64> = pre.iter().map(|&z| activation.apply(z)).collect();
        let out = DVector::from_fn(out_dim, |i, _| {
            dot(&p[w2_at + i * hidden..w2_at + (i + 1) * hidden], &act) + p[b2_at + i]
        });
        (pre, act, out)
    }
}

fn mlp_offsets(in_dim: usize, hidden: usize, out_dim: usize, time_input: bool) -> (usize, usize) {
    let cols = in_dim + usize::from(time_input);
    let w2_at = hidden * cols + hidden;
    (w2_at, w2_at + out_dim * hidden)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows of a diffusion Jacobian (or value) belonging to column `l` of the
/// `dim x dim` matrix.
pub fn column_rows(l: usize, dim: usize) -> Range<usize> {
    l * dim..(l + 1) * dim
}

/// Flat parameter vector with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn for_field(field: &VectorField, values: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector", field.n_params(), values.len())?;
        Ok(Self {
            values,
            layout: field.layout(),
        })
    }

    pub fn zeros_for(field: &VectorField) -> Self {
        Self {
            values: vec![0.0; field.n_params()],
            layout: field.layout(),
        }
    }

    /// Concatenates vectors, prefixing each segment name with its part name.
    pub fn concat(parts: &[(&str, &ParamVector)]) -> Self {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (prefix, part) in parts {
            let at = values.len();
            values.extend_from_slice(&part.values);
            layout.extend(part.layout.iter().map(|s| Segment {
                name: format!("{prefix}.{}", s.name),
                range: s.range.start + at..s.range.end + at,
            }));
        }
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range.clone()])
    }

    pub fn slice(&self, range: Range<usize>) -> &[f64] {
        &self.values[range]
    }
}

/// JSON form of a field together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDocument {
    #[serde(flatten)]
    pub field: VectorField,
    pub params: Vec<f64>,
}

impl FieldDocument {
    pub fn new(field: VectorField, params: &ParamVector) -> Result<Self> {
        check_dim("field document parameters", field.n_params(), params.len())?;
        Ok(Self {
            field,
            params: params.as_slice().to_vec(),
        })
    }

    pub fn params(&self) -> Result<ParamVector> {
        ParamVector::for_field(&self.field, self.params.clone())
    }
}
