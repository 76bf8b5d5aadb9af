//! Dense linear algebra, activations, affine layers with explicit backward
//! passes, optimizers, and a central-difference gradient checker.
//!
//! Everything is `f64` and row-major. Networks elsewhere in the crate are
//! small fixed compositions, so each layer carries its own hand-written
//! backward pass instead of going through an autodiff graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("Matrix::new", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    /// He-uniform initialisation for a layer with `cols` inputs.
    pub fn he_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / cols.max(1) as f64).sqrt();
        Self::random_uniform(rows, cols, bound, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · other^T` without materialising the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err("matmul_transposed", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T · other` without materialising the transpose.
    pub fn transposed_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err("transposed_matmul", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(shape_err("matvec", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `self^T · y`.
    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(shape_err("transpose_matvec", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            axpy(yr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            let cols = self.cols;
            axpy(s, b, &mut self.data[r * cols..(r + 1) * cols]);
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err(
                "add_assign",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(shape_err("softmax", "non-empty input", 0));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub fn relu_backward_in_place(pre: &[f64], grad: &mut [f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    #[serde(skip)]
    cached_input: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Vec<f64>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(shape_err("AffineLayer::new", weight.rows(), bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            cached_input: None,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            cached_input: None,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::he_uniform(outputs, inputs, rng),
            bias: vec![0.0; outputs],
            cached_input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// `weight · x + bias` without touching the cache.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.apply(x)?;
        self.cached_input = Some(x.to_vec());
        Ok(y)
    }

    pub fn backward(&self, upstream: &[f64]) -> Result<AffineGrads> {
        let input = self
            .cached_input
            .as_deref()
            .ok_or_else(|| Error::State("affine backward called before forward".into()))?;
        self.backward_at(input, upstream)
    }

    /// Gradients of the affine map evaluated at an explicit input.
    pub fn backward_at(&self, input: &[f64], upstream: &[f64]) -> Result<AffineGrads> {
        if upstream.len() != self.outputs() {
            return Err(shape_err("affine backward", self.outputs(), upstream.len()));
        }
        if input.len() != self.inputs() {
            return Err(shape_err("affine backward input", self.inputs(), input.len()));
        }
        let mut weight = Matrix::zeros(self.outputs(), self.inputs());
        weight.add_outer(1.0, upstream, input);
        Ok(AffineGrads {
            input: self.weight.transpose_matvec(upstream)?,
            weight,
            bias: upstream.to_vec(),
        })
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn accumulate_backward(&self, input: &[f64], upstream: &[f64], grad: &mut AffineLayer) -> Vec<f64> {
        grad.weight.add_outer(1.0, upstream, input);
        axpy(1.0, upstream, &mut grad.bias);
        let mut dx = vec![0.0; self.inputs()];
        for (r, &u) in upstream.iter().enumerate() {
            if u != 0.0 {
                axpy(u, self.weight.row(r), &mut dx);
            }
        }
        dx
    }
}

/// Named flat views over every trainable tensor in a parameter set.
///
/// Used for optimizer steps, checkpoints, and finite-difference checks; the
/// visiting order must be stable.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, s| out.push((name.to_string(), s.len())));
        out
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(shape_err("Parameters::assign", expected, flat.len()));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
    }

    /// `self += scale · other`; both sides must share a layout.
    fn add_scaled(&mut self, scale: f64, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, s| {
            axpy(scale, &flat[offset..offset + s.len()], s);
            offset += s.len();
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

impl Parameters for Matrix {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("matrix", &self.data);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("matrix", &mut self.data);
    }
}

impl AffineLayer {
    pub(crate) fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), self.weight.data());
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.data_mut());
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Parameters for AffineLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.visit_named("affine", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_named_mut("affine", f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain gradient descent or Adam over a flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        if self.lr == 0.0 {
            return;
        }
        let g = grads.flatten();
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(-self.lr, grads),
            OptimizerKind::Adam => {
                if self.m.len() != g.len() {
                    self.m = vec![0.0; g.len()];
                    self.v = vec![0.0; g.len()];
                    self.t = 0;
                }
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
                let (m, v) = (&mut self.m, &mut self.v);
                let mut offset = 0;
                params.visit_mut(&mut |_, s| {
                    for (k, p) in s.iter_mut().enumerate() {
                        let i = offset + k;
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                    offset += s.len();
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub errors: Vec<f64>,
}

/// Relative error floor; below this magnitude differences are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `analytic` against central differences `(f(p+h) - f(p-h)) / 2h`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("grad_check step must be positive, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(shape_err("grad_check", params.len(), analytic.len()));
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("objective is {base} at the check point")));
    }
    let mut p = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p);
        p[i] = orig - step;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("objective non-finite when perturbing coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        errors.push(relative_error(analytic[i], numeric));
    }
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        errors,
    })
}
