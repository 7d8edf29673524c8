//! Small dense linear algebra, activations and seeded randomness.
//!
//! Everything is `f64`. Reductions sum left to right in index order, so a
//! naive loop written the same way reproduces results bit for bit.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense column vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn from_vec(entries: Vec<f64>) -> Self {
        Vector(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let mut acc = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            acc += a * b;
        }
        acc
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::eye(n, n)
    }

    /// Rectangular identity: ones on the main diagonal.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * u v^T`
    pub fn add_outer(&mut self, alpha: f64, u: &Vector, v: &Vector) {
        self.add_outer_slices(alpha, u.as_slice(), v.as_slice());
    }

    pub(crate) fn add_outer_slices(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!((self.rows, self.cols), (u.len(), v.len()));
        for i in 0..self.rows {
            let ui = alpha * u[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, vj) in row.iter_mut().zip(v.iter()) {
                *r += ui * vj;
            }
        }
    }

    /// `m^T v`, accumulating over rows in index order.
    pub fn matvec_transpose(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.rows {
            return Err(Error::dims("matvec_transpose", self.rows, v.dim()));
        }
        let mut out = Vector::zeros(self.cols);
        self.matvec_transpose_into(v.as_slice(), &mut out.0);
        Ok(out)
    }

    pub(crate) fn matvec_transpose_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!((self.rows, self.cols), (v.len(), out.len()));
        out.fill(0.0);
        for i in 0..self.rows {
            let vi = v[i];
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += m * vi;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Elementwise activation used inside residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative. ReLU uses the subgradient 0 at the origin.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
        }
    }

    /// `(σ(z), σ'(z))`, bit-identical to calling [`value`](Self::value) and
    /// [`derivative`](Self::derivative) separately.
    #[inline]
    pub fn value_and_derivative(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Relu => (z.max(0.0), if z > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                (s, s * (1.0 - s))
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Standard matrix-vector product. Row sums run left to right over columns.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols() != v.dim() {
        return Err(Error::dims("matvec", m.cols(), v.dim()));
    }
    let mut out = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let mut acc = 0.0;
        for (a, b) in m.row(i).iter().zip(v.iter()) {
            acc += a * b;
        }
        out.push(acc);
    }
    Ok(Vector(out))
}

fn check_block(op: &'static str, theta: &Matrix, x: &Vector) -> Result<()> {
    if theta.rows() != theta.cols() || theta.cols() != x.dim() {
        return Err(Error::dims(
            op,
            format!("square {0}x{0} block", x.dim()),
            format!("{}x{}", theta.rows(), theta.cols()),
        ));
    }
    Ok(())
}

/// Residual block output `σ(θx)`.
pub fn apply_block(theta: &Matrix, x: &Vector, act: Activation) -> Result<Vector> {
    check_block("apply_block", theta, x)?;
    let mut z = matvec(theta, x)?;
    for v in z.as_mut_slice() {
        *v = act.value(*v);
    }
    Ok(z)
}

/// Jacobian of `σ(θx)` with respect to θ, stored in factored form.
///
/// The full Jacobian is the rank-structured map `dθ ↦ σ'(θx) ⊙ (dθ x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaJacobian {
    slope: Vector,
    input: Vector,
}

impl ThetaJacobian {
    /// Directional derivative along `dtheta`.
    pub fn apply(&self, dtheta: &Matrix) -> Result<Vector> {
        let mut out = matvec(dtheta, &self.input)?;
        for (o, s) in out.as_mut_slice().iter_mut().zip(self.slope.iter()) {
            *o *= s;
        }
        Ok(out)
    }

    /// Pull back a cotangent `u`: entry `(i, j)` is `u_i σ'((θx)_i) x_j`.
    pub fn apply_transpose(&self, u: &Vector) -> Result<Matrix> {
        if u.dim() != self.slope.dim() {
            return Err(Error::dims("ThetaJacobian::apply_transpose", self.slope.dim(), u.dim()));
        }
        let d = self.slope.dim();
        let mut out = Matrix::zeros(d, self.input.dim());
        let weighted = Vector(u.iter().zip(self.slope.iter()).map(|(a, b)| a * b).collect());
        out.add_outer(1.0, &weighted, &self.input);
        Ok(out)
    }

    pub fn slope(&self) -> &Vector {
        &self.slope
    }
}

/// Jacobians of `σ(θx)` with respect to `x` (dense) and `θ` (factored).
pub fn block_jacobians(
    theta: &Matrix,
    x: &Vector,
    act: Activation,
) -> Result<(Matrix, ThetaJacobian)> {
    check_block("block_jacobians", theta, x)?;
    let z = matvec(theta, x)?;
    let slope = Vector(z.iter().map(|&v| act.derivative(v)).collect());
    let jac_x = Matrix::from_fn(theta.rows(), theta.cols(), |i, j| slope[i] * theta[(i, j)]);
    Ok((
        jac_x,
        ThetaJacobian {
            slope,
            input: x.clone(),
        },
    ))
}

/// Reproducible random stream.
///
/// Backed by ChaCha8 keyed from a 64-bit seed; the same seed and stream id
/// always produce the same sequence on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of a [`SeededRng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream of the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_stream(stream);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }

    pub fn normal_vector(&mut self, dim: usize, std: f64) -> Vector {
        Vector((0..dim).map(|_| std * self.normal()).collect())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
