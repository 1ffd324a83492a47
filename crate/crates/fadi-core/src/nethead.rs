//! Dense numerical core: matrices, a fully connected layer with rectifier,
//! a cosine-similarity classifier, and the disentangled dual-head forward
//! pass. All gradients are hand-derived and checked against central finite
//! differences in the test suites.
//!
//! Everything is 64-bit; the finite-difference acceptance tolerances do not
//! leave room for f32.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stabilizer added to vector norms before division in cosine logits.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix data length {got} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("classifier row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("dual head branches disagree: {0}")]
    BranchMismatch(String),
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if data.len() != rows * cols {
            return Err(NetError::BadLength { rows, cols, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Single-column matrix wrapping a vector.
    pub fn column(data: Vec<f64>) -> Self {
        Matrix { rows: data.len(), cols: 1, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, NetError> {
        if self.cols != rhs.rows {
            return Err(NetError::ShapeMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(lhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Stabilized cosine of the angle between two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((norm(a) + NORM_EPS) * (norm(b) + NORM_EPS))
}

/// Fully connected layer `y = W x + b`.
///
/// `frozen` marks parameters that must not receive updates; the training
/// loops audit this with checksums rather than trusting call sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub frozen: bool,
}

/// Gradients produced by [`LinearLayer::backward`].
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub input: Matrix,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self, NetError> {
        if bias.rows() != weight.rows() || bias.cols() != 1 {
            return Err(NetError::ShapeMismatch(format!(
                "bias {}x{} for weight {}x{}",
                bias.rows(),
                bias.cols(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(LinearLayer { weight, bias, frozen: false })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `y = W x + b`; `x` may carry a batch as columns.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NetError> {
        if x.rows() != self.in_dim() {
            return Err(NetError::ShapeMismatch(format!(
                "input {}x{} for weight {}x{}",
                x.rows(),
                x.cols(),
                self.weight.rows(),
                self.weight.cols()
            )));
        }
        let mut y = self.weight.matmul(x)?;
        for r in 0..y.rows() {
            let b = self.bias.get(r, 0);
            for c in 0..y.cols() {
                let v = y.get(r, c) + b;
                y.set(r, c, v);
            }
        }
        Ok(y)
    }

    /// Exact gradients for `y = W x + b` given `dL/dy`.
    ///
    /// `dW = g xᵀ`, `db = g·1`, `dx = Wᵀ g`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<LinearGrads, NetError> {
        if grad_out.rows() != self.out_dim() || grad_out.cols() != x.cols() {
            return Err(NetError::ShapeMismatch(format!(
                "grad {}x{} for output {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                self.out_dim(),
                x.cols()
            )));
        }
        let weight = grad_out.matmul(&x.transpose())?;
        let mut bias = Matrix::zeros(self.out_dim(), 1);
        for r in 0..grad_out.rows() {
            bias.set(r, 0, grad_out.row(r).iter().sum());
        }
        let input = self.weight.transpose().matmul(grad_out)?;
        Ok(LinearGrads { weight, bias, input })
    }

    /// Convenience single-sample forward over a slice.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim()];
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot(self.weight.row(r), x) + self.bias.get(r, 0);
        }
        y
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Matrix) -> Matrix {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Matrix { rows: x.rows(), cols: x.cols(), data }
}

/// Backward of [`relu`]: passes gradient where the forward input was
/// strictly positive; the subgradient at 0 is taken as 0.
pub fn relu_backward(input: &Matrix, grad_out: &Matrix) -> Matrix {
    assert_eq!(input.rows(), grad_out.rows());
    assert_eq!(input.cols(), grad_out.cols());
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix { rows: input.rows(), cols: input.cols(), data }
}

pub fn relu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward_slice(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Bias-free classifier producing temperature-scaled cosine logits
/// `p_j = τ · xᵀW_j / ((‖x‖+δ)(‖W_j‖+δ))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    pub weight: Matrix,
    pub tau: f64,
    pub frozen: bool,
}

impl CosineClassifier {
    pub fn new(weight: Matrix, tau: f64) -> Result<Self, NetError> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(NetError::BadTemperature(tau));
        }
        for r in 0..weight.rows() {
            if norm(weight.row(r)) == 0.0 {
                return Err(NetError::ZeroNormRow(r));
            }
        }
        Ok(CosineClassifier { weight, tau, frozen: false })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.in_dim() {
            return Err(NetError::ShapeMismatch(format!(
                "input dim {} for classifier dim {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Raw stabilized cosines, one per class row.
    pub fn cosines(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_dim(x)?;
        Ok((0..self.num_classes()).map(|r| cosine(x, self.weight.row(r))).collect())
    }

    /// Temperature-scaled cosine logits.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.cosines(x)?.into_iter().map(|c| self.tau * c).collect())
    }

    /// Gradients of the raw cosines w.r.t. weights and input, contracted
    /// with an upstream gradient `grad_cos` (one entry per class).
    ///
    /// With `n_x = ‖x‖+δ`, `n_j = ‖W_j‖+δ`, `d_j = xᵀW_j`:
    /// `∂cos_j/∂x = W_j/(n_x n_j) − d_j x/(‖x‖ n_x² n_j)` and symmetrically
    /// for `W_j`. The norm-direction term is dropped at exactly zero norm.
    pub fn cosines_backward(
        &self,
        x: &[f64],
        grad_cos: &[f64],
    ) -> Result<(Matrix, Vec<f64>), NetError> {
        self.check_dim(x)?;
        if grad_cos.len() != self.num_classes() {
            return Err(NetError::ShapeMismatch(format!(
                "grad len {} for {} classes",
                grad_cos.len(),
                self.num_classes()
            )));
        }
        let nx_raw = norm(x);
        let nx = nx_raw + NORM_EPS;
        let mut grad_w = Matrix::zeros(self.num_classes(), self.in_dim());
        let mut grad_x = vec![0.0; self.in_dim()];
        for j in 0..self.num_classes() {
            let g = grad_cos[j];
            if g == 0.0 {
                continue;
            }
            let w = self.weight.row(j);
            let nw_raw = norm(w);
            let nw = nw_raw + NORM_EPS;
            let d = dot(x, w);
            let inv = 1.0 / (nx * nw);
            // d cos / dx
            let x_dir = if nx_raw > 0.0 { d / (nx_raw * nx * nx * nw) } else { 0.0 };
            for (k, gx) in grad_x.iter_mut().enumerate() {
                *gx += g * (w[k] * inv - x[k] * x_dir);
            }
            // d cos / dW_j
            let w_dir = if nw_raw > 0.0 { d / (nw_raw * nw * nw * nx) } else { 0.0 };
            let gw = grad_w.row_mut(j);
            for (k, gwk) in gw.iter_mut().enumerate() {
                *gwk = g * (x[k] * inv - w[k] * w_dir);
            }
        }
        Ok((grad_w, grad_x))
    }

    /// Backward of [`CosineClassifier::logits`]: scales the upstream
    /// gradient by τ and delegates to [`CosineClassifier::cosines_backward`].
    pub fn logits_backward(
        &self,
        x: &[f64],
        grad_logits: &[f64],
    ) -> Result<(Matrix, Vec<f64>), NetError> {
        let scaled: Vec<f64> = grad_logits.iter().map(|g| g * self.tau).collect();
        self.cosines_backward(x, &scaled)
    }
}

/// Max-shifted softmax; entries are positive and sum to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward of [`softmax`]: `dL/dp_i = s_i (g_i − Σ_k g_k s_k)` where `g`
/// is the gradient w.r.t. the softmax output `s`.
pub fn softmax_backward(s: &[f64], grad_s: &[f64]) -> Vec<f64> {
    assert_eq!(s.len(), grad_s.len());
    let inner: f64 = s.iter().zip(grad_s).map(|(si, gi)| si * gi).sum();
    s.iter().zip(grad_s).map(|(si, gi)| si * (gi - inner)).collect()
}

/// Disentangled dual-head classifier: a frozen base-branch fc layer with a
/// base-class cosine classifier, and a frozen novel-branch fc layer with a
/// (novel + background) cosine classifier. Predictions are one joint softmax
/// over the concatenated logits, base classes first, background last.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualHead {
    pub g_base: LinearLayer,
    pub g_novel: LinearLayer,
    pub cls_base: CosineClassifier,
    pub cls_novel: CosineClassifier,
}

/// Intermediate activations kept for the backward pass.
pub struct DualActivations {
    pub pre_base: Vec<f64>,
    pub pre_novel: Vec<f64>,
    pub z_base: Vec<f64>,
    pub z_novel: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Gradients for the trainable parts of the dual head (classifier weights
/// only; the `g` layers are frozen by construction).
pub struct DualGrads {
    pub cls_base: Matrix,
    pub cls_novel: Matrix,
}

impl DualHead {
    pub fn new(
        g_base: LinearLayer,
        g_novel: LinearLayer,
        cls_base: CosineClassifier,
        cls_novel: CosineClassifier,
    ) -> Result<Self, NetError> {
        if g_base.in_dim() != g_novel.in_dim() || g_base.out_dim() != g_novel.out_dim() {
            return Err(NetError::BranchMismatch(format!(
                "g_base {}x{} vs g_novel {}x{}",
                g_base.out_dim(),
                g_base.in_dim(),
                g_novel.out_dim(),
                g_novel.in_dim()
            )));
        }
        if cls_base.in_dim() != g_base.out_dim() || cls_novel.in_dim() != g_novel.out_dim() {
            return Err(NetError::BranchMismatch(
                "classifier input dim does not match g output dim".into(),
            ));
        }
        if !g_base.frozen || !g_novel.frozen {
            return Err(NetError::BranchMismatch("g layers must be frozen".into()));
        }
        Ok(DualHead { g_base, g_novel, cls_base, cls_novel })
    }

    /// Joint class count: |base| + |novel| + 1 (background).
    pub fn num_classes(&self) -> usize {
        self.cls_base.num_classes() + self.cls_novel.num_classes()
    }

    pub fn forward(&self, q: &[f64]) -> Result<DualActivations, NetError> {
        if q.len() != self.g_base.in_dim() {
            return Err(NetError::ShapeMismatch(format!(
                "input dim {} for g dim {}",
                q.len(),
                self.g_base.in_dim()
            )));
        }
        let pre_base = self.g_base.apply(q);
        let pre_novel = self.g_novel.apply(q);
        let z_base = relu_slice(&pre_base);
        let z_novel = relu_slice(&pre_novel);
        let mut logits = self.cls_base.logits(&z_base)?;
        logits.extend(self.cls_novel.logits(&z_novel)?);
        let probs = softmax(&logits);
        Ok(DualActivations { pre_base, pre_novel, z_base, z_novel, logits, probs })
    }

    /// Gradients w.r.t. the classifier weights given `dL/dlogits` over the
    /// concatenated logit vector. Gradients do not flow past the frozen `g`
    /// layers.
    pub fn backward(
        &self,
        act: &DualActivations,
        grad_logits: &[f64],
    ) -> Result<DualGrads, NetError> {
        let nb = self.cls_base.num_classes();
        if grad_logits.len() != self.num_classes() {
            return Err(NetError::ShapeMismatch(format!(
                "grad len {} for {} classes",
                grad_logits.len(),
                self.num_classes()
            )));
        }
        let (gb, _) = self.cls_base.logits_backward(&act.z_base, &grad_logits[..nb])?;
        let (gn, _) = self.cls_novel.logits_backward(&act.z_novel, &grad_logits[nb..])?;
        Ok(DualGrads { cls_base: gb, cls_novel: gn })
    }
}
