//! Local losses, the surrogate problem each device solves, the gradient
//! method, global aggregation and the iteration/accuracy bounds.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value at local iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("non-contractive step size: q = {q} (need 0 < eta*L < 2)")]
    NonContractive { q: f64 },
    #[error("invalid accuracy target {0} (need 0 < phi < 1)")]
    InvalidAccuracy(f64),
    #[error("model already optimal for the surrogate problem")]
    AlreadyOptimal,
    #[error("surrogate optimum oracle did not converge after {iterations} iterations (grad norm {grad_norm:e})")]
    OracleDiverged { iterations: usize, grad_norm: f64 },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, FlError>;

/// Dense parameter vector shared by the master and every device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
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

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|x| alpha * x).collect())
    }

    pub fn plus(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(FlError::DimensionMismatch { expected, got: self.dim() });
        }
        Ok(())
    }
}

/// A device's local training set. Rows are stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(FlError::InvalidDataset("dataset needs at least one sample".into()));
        }
        if rows.len() != labels.len() {
            return Err(FlError::InvalidDataset(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let dim = rows[0].len();
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(FlError::DimensionMismatch { expected: dim, got: row.len() });
            }
            features.extend_from_slice(row);
        }
        if !features.iter().chain(&labels).all(|x| x.is_finite()) {
            return Err(FlError::InvalidDataset("non-finite feature or label".into()));
        }
        Ok(Self { features, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn samples(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    /// Eigenvalues of the scaled Gram matrix `XᵀX / d`, ascending.
    pub fn gram_eigenvalues(&self) -> Vec<f64> {
        let d = self.len() as f64;
        let x = DMatrix::from_row_slice(self.len(), self.dim, &self.features);
        let gram = (x.transpose() * &x) / d;
        let mut eig: Vec<f64> = gram.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        eig
    }

    pub fn max_row_norm_sq(&self) -> f64 {
        self.features
            .chunks_exact(self.dim)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    LeastSquaresRidge,
    LogisticRidge,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::LeastSquaresRidge => "least-squares-ridge",
            LossKind::LogisticRidge => "logistic-ridge",
        }
    }
}

/// Loss family plus the curvature constants and step size used by the
/// gradient method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub lambda: f64,
    /// strong-convexity modulus
    pub mu: f64,
    /// gradient Lipschitz constant
    pub lipschitz: f64,
    pub step_size: f64,
    /// weight on the global gradient in the surrogate problem
    pub xi: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, lambda: f64, mu: f64, lipschitz: f64, step_size: f64, xi: f64) -> Result<Self> {
        let spec = Self { kind, lambda, mu, lipschitz, step_size, xi };
        spec.validate()?;
        Ok(spec)
    }

    /// Derives `mu` and `L` from the datasets (worst case over devices) and
    /// sets `eta = step_scale / L`.
    pub fn from_datasets(kind: LossKind, lambda: f64, step_scale: f64, xi: f64, datasets: &[Dataset]) -> Result<Self> {
        if datasets.is_empty() {
            return Err(FlError::Empty("datasets"));
        }
        let (mut mu, mut lipschitz) = (f64::INFINITY, 0.0_f64);
        for data in datasets {
            let (m, l) = curvature_bounds(kind, lambda, data);
            mu = mu.min(m);
            lipschitz = lipschitz.max(l);
        }
        Self::new(kind, lambda, mu, lipschitz, step_scale / lipschitz, xi)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FlError::InvalidSpec(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if !(self.mu > 0.0 && self.lipschitz >= self.mu && self.lipschitz.is_finite()) {
            return Err(FlError::InvalidSpec(format!(
                "need 0 < mu <= L, got mu = {}, L = {}",
                self.mu, self.lipschitz
            )));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(FlError::InvalidSpec(format!("xi = {} must be > 0", self.xi)));
        }
        contraction_factor(self.step_size, self.lipschitz)?;
        Ok(())
    }

    pub fn contraction(&self) -> f64 {
        contraction_factor(self.step_size, self.lipschitz).expect("validated on construction")
    }
}

/// `(mu, L)` of the regularized local loss on one dataset.
pub fn curvature_bounds(kind: LossKind, lambda: f64, data: &Dataset) -> (f64, f64) {
    match kind {
        LossKind::LeastSquaresRidge => {
            let eig = data.gram_eigenvalues();
            (eig[0].max(0.0) + lambda, eig[eig.len() - 1] + lambda)
        }
        LossKind::LogisticRidge => (lambda, lambda + data.max_row_norm_sq() / 4.0),
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Regularized empirical loss of one device at `w`.
pub fn local_loss(w: &ModelVector, data: &Dataset, spec: &LossSpec) -> Result<f64> {
    w.check_dim(data.dim())?;
    let w = w.as_slice();
    let sum: f64 = match spec.kind {
        LossKind::LeastSquaresRidge => data
            .samples()
            .map(|(x, y)| {
                let r = y - dot(w, x);
                0.5 * r * r
            })
            .sum(),
        LossKind::LogisticRidge => data.samples().map(|(x, y)| softplus(-y * dot(w, x))).sum(),
    };
    let reg = 0.5 * spec.lambda * dot(w, w);
    Ok(sum / data.len() as f64 + reg)
}

pub fn local_gradient(w: &ModelVector, data: &Dataset, spec: &LossSpec) -> Result<ModelVector> {
    w.check_dim(data.dim())?;
    let ws = w.as_slice();
    let mut grad = vec![0.0; data.dim()];
    for (x, y) in data.samples() {
        let coef = match spec.kind {
            LossKind::LeastSquaresRidge => dot(ws, x) - y,
            LossKind::LogisticRidge => -y * sigmoid(-y * dot(ws, x)),
        };
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += coef * xi;
        }
    }
    let inv_d = 1.0 / data.len() as f64;
    for (g, wi) in grad.iter_mut().zip(ws) {
        *g = *g * inv_d + spec.lambda * wi;
    }
    Ok(ModelVector(grad))
}

fn mean_of(vectors: &[ModelVector], what: &'static str) -> Result<ModelVector> {
    let first = vectors.first().ok_or(FlError::Empty(what))?;
    let mut acc = ModelVector::zeros(first.dim());
    for v in vectors {
        v.check_dim(first.dim())?;
        acc.axpy(1.0, v);
    }
    let k = vectors.len() as f64;
    Ok(acc.scaled(1.0 / k))
}

/// Master-side average of the local gradients.
pub fn average_gradient(grads: &[ModelVector]) -> Result<ModelVector> {
    mean_of(grads, "gradient list")
}

/// Value of the surrogate objective
/// `F(h) = L_k(w + h) - (grad L_k(w) - xi * grad G(w))ᵀ h`.
pub fn surrogate_objective(
    w: &ModelVector,
    h: &ModelVector,
    data: &Dataset,
    local_grad_at_w: &ModelVector,
    global_grad: &ModelVector,
    spec: &LossSpec,
) -> Result<f64> {
    for v in [h, local_grad_at_w, global_grad] {
        v.check_dim(w.dim())?;
    }
    let shift: f64 = local_grad_at_w
        .as_slice()
        .iter()
        .zip(global_grad.as_slice())
        .zip(h.as_slice())
        .map(|((lg, gg), hi)| (lg - spec.xi * gg) * hi)
        .sum();
    Ok(local_loss(&w.plus(h), data, spec)? - shift)
}

pub fn surrogate_gradient(
    w: &ModelVector,
    h: &ModelVector,
    data: &Dataset,
    local_grad_at_w: &ModelVector,
    global_grad: &ModelVector,
    spec: &LossSpec,
) -> Result<ModelVector> {
    for v in [h, local_grad_at_w, global_grad] {
        v.check_dim(w.dim())?;
    }
    let mut g = local_gradient(&w.plus(h), data, spec)?;
    g.axpy(-1.0, local_grad_at_w);
    g.axpy(spec.xi, global_grad);
    Ok(g)
}

/// Runs `iterations` gradient steps on the surrogate problem starting from
/// `h = 0` and returns the local update.
pub fn run_local_iterations(
    w: &ModelVector,
    data: &Dataset,
    global_grad: &ModelVector,
    spec: &LossSpec,
    iterations: usize,
) -> Result<ModelVector> {
    let local_grad = local_gradient(w, data, spec)?;
    let mut h = ModelVector::zeros(w.dim());
    for it in 0..iterations {
        let g = surrogate_gradient(w, &h, data, &local_grad, global_grad, spec)?;
        h.axpy(-spec.step_size, &g);
        if !h.is_finite() {
            return Err(FlError::NonFinite { iteration: it + 1 });
        }
    }
    Ok(h)
}

/// Master-side model update: `w + mean(updates)`.
pub fn aggregate(w: &ModelVector, updates: &[ModelVector]) -> Result<ModelVector> {
    let mean = mean_of(updates, "update list")?;
    mean.check_dim(w.dim())?;
    Ok(w.plus(&mean))
}

pub const ORACLE_GRAD_TOL: f64 = 1e-12;
pub const ORACLE_MAX_ITER: usize = 1_000_000;

/// Minimizer of the surrogate problem, found by running the gradient method
/// with step `1/L` until the gradient norm drops to `1e-12`.
pub fn surrogate_optimum(
    w: &ModelVector,
    data: &Dataset,
    global_grad: &ModelVector,
    spec: &LossSpec,
) -> Result<ModelVector> {
    let local_grad = local_gradient(w, data, spec)?;
    let step = 1.0 / spec.lipschitz;
    let mut h = ModelVector::zeros(w.dim());
    let mut grad_norm = f64::INFINITY;
    for _ in 0..ORACLE_MAX_ITER {
        let g = surrogate_gradient(w, &h, data, &local_grad, global_grad, spec)?;
        grad_norm = g.norm();
        if grad_norm <= ORACLE_GRAD_TOL {
            return Ok(h);
        }
        h.axpy(-step, &g);
    }
    Err(FlError::OracleDiverged { iterations: ORACLE_MAX_ITER, grad_norm })
}

/// Relative suboptimality `(F(h) - F(h*)) / (F(0) - F(h*))` of a local
/// solution. Returns [`FlError::AlreadyOptimal`] when `w` already solves the
/// surrogate problem; callers treat that as accuracy 0.
pub fn accuracy_ratio(
    w: &ModelVector,
    h: &ModelVector,
    h_star: &ModelVector,
    data: &Dataset,
    global_grad: &ModelVector,
    spec: &LossSpec,
) -> Result<f64> {
    let local_grad = local_gradient(w, data, spec)?;
    let f = |v: &ModelVector| surrogate_objective(w, v, data, &local_grad, global_grad, spec);
    let f_star = f(h_star)?;
    let denom = f(&ModelVector::zeros(w.dim()))? - f_star;
    if denom <= 1e-15 {
        return Err(FlError::AlreadyOptimal);
    }
    Ok((f(h)? - f_star) / denom)
}

/// Per-iteration contraction `q = eta²L²/2 - eta L + 1`, valid for
/// `0 < eta L < 2`.
pub fn contraction_factor(step_size: f64, lipschitz: f64) -> Result<f64> {
    let el = step_size * lipschitz;
    let q = 0.5 * el * el - el + 1.0;
    if !(el > 0.0 && el < 2.0) || !(q > 0.0 && q < 1.0) {
        return Err(FlError::NonContractive { q });
    }
    Ok(q)
}

/// Smallest iteration count `j` with `q^j <= phi`.
pub fn iteration_lower_bound(phi: f64, step_size: f64, lipschitz: f64) -> Result<usize> {
    let q = contraction_factor(step_size, lipschitz)?;
    if !(phi > 0.0 && phi < 1.0) {
        return Err(FlError::InvalidAccuracy(phi));
    }
    let mut j = (phi.ln() / q.ln()).ceil().max(0.0) as usize;
    // the ceiling can overshoot by one when the ratio is an exact integer
    // perturbed upward by rounding
    if j > 0 && powi(q, j - 1) <= phi {
        j -= 1;
    }
    Ok(j)
}

/// Upper bound `q^j` on the accuracy reached after `j` iterations.
pub fn accuracy_upper_bound(iterations: usize, step_size: f64, lipschitz: f64) -> Result<f64> {
    Ok(powi(contraction_factor(step_size, lipschitz)?, iterations))
}

fn powi(q: f64, n: usize) -> f64 {
    q.powi(n.min(i32::MAX as usize) as i32)
}
