//! Desk-scale numeric kernels for the adaptation math: a gated activation,
//! low-rank weight composition, causal cross-entropy, and the
//! finite-difference machinery that verifies their gradients.
//!
//! The gated activation is implemented exactly in its printed form,
//! x·σ(βx) + (1−σ(βx))·(Wx+b), which differs from the canonical
//! Swish-gated linear projection; fidelity to that form is deliberate.
//! The low-rank update carries no alpha/r scaling factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to target probabilities before the log so degenerate
/// inputs keep the loss finite.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {r} must satisfy 1 <= r < min(d={d}, k={k})")]
    RankOutOfRange { r: usize, d: usize, k: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("step {step}: probabilities sum to {sum}, expected 1 within 1e-9")]
    NotNormalized { step: usize, sum: f64 },
    #[error("step {step}: target {target} outside vocabulary of size {vocab}")]
    TargetOutOfRange {
        step: usize,
        target: usize,
        vocab: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
}

/// Row-major dense matrix of f64 entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, AdapterError> {
        if entries.len() != rows * cols {
            return Err(AdapterError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if let Some(i) = entries.iter().position(|e| !e.is_finite()) {
            return Err(AdapterError::NonFinite(i));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.entries[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, AdapterError> {
        if x.len() != self.cols {
            return Err(AdapterError::ShapeMismatch(format!(
                "matvec: {}x{} matrix with input of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.entries[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect())
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, AdapterError> {
        if self.cols != other.rows {
            return Err(AdapterError::ShapeMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self.get(i, l);
                if a != 0.0 {
                    for j in 0..other.cols {
                        out.entries[i * other.cols + j] += a * other.get(l, j);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Frozen base weights plus a trainable rank-r update held in factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    w0: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub rank: usize,
}

impl LoraAdapter {
    /// `w0` is d x k, `b` is d x r, `a` is r x k, with 1 <= r < min(d, k).
    pub fn new(w0: DenseMatrix, b: DenseMatrix, a: DenseMatrix) -> Result<Self, AdapterError> {
        let (d, k) = (w0.rows, w0.cols);
        let r = b.cols;
        if r < 1 || r >= d.min(k) {
            return Err(AdapterError::RankOutOfRange { r, d, k });
        }
        if a.rows != r || a.cols != k || b.rows != d {
            return Err(AdapterError::ShapeMismatch(format!(
                "adapter shapes: w0 {d}x{k}, b {}x{}, a {}x{}",
                b.rows, b.cols, a.rows, a.cols
            )));
        }
        Ok(LoraAdapter { w0, a, b, rank: r })
    }

    /// The frozen base; no operation mutates it.
    pub fn base(&self) -> &DenseMatrix {
        &self.w0
    }
}

/// W0·x + B·(A·x), computed in factored form without materializing B·A.
pub fn lora_apply(adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>, AdapterError> {
    let base = adapter.w0.matvec(x)?;
    let low = adapter.a.matvec(x)?;
    let update = adapter.b.matvec(&low)?;
    Ok(base.iter().zip(&update).map(|(w, u)| w + u).collect())
}

/// Dense merged weights W = W0 + B·A; the base stays untouched.
pub fn lora_merge(adapter: &LoraAdapter) -> Result<DenseMatrix, AdapterError> {
    let delta = adapter.b.matmul(&adapter.a)?;
    let mut merged = adapter.w0.clone();
    for (m, d) in merged.entries.iter_mut().zip(&delta.entries) {
        *m += d;
    }
    Ok(merged)
}

/// Trainable-parameter counts: full = d·k, factored = r·(d+k), and their ratio.
pub fn lora_param_savings(d: usize, k: usize, r: usize) -> Result<(u64, u64, f64), AdapterError> {
    if r < 1 || r >= d.min(k) {
        return Err(AdapterError::RankOutOfRange { r, d, k });
    }
    let full = (d as u64) * (k as u64);
    let lora = (r as u64) * (d as u64 + k as u64);
    Ok((full, lora, full as f64 / lora as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwigluParams {
    pub w: DenseMatrix,
    pub bias: Vec<f64>,
    pub beta: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise gate σ(βx) blending the input against the affine branch:
/// out_i = x_i·σ(βx_i) + (1 − σ(βx_i))·(Wx + b)_i. Requires a square W.
pub fn swiglu(x: &[f64], params: &SwigluParams) -> Result<Vec<f64>, AdapterError> {
    if params.w.rows != x.len() || params.w.cols != x.len() || params.bias.len() != x.len() {
        return Err(AdapterError::ShapeMismatch(format!(
            "swiglu: input {} vs W {}x{} and bias {}",
            x.len(),
            params.w.rows,
            params.w.cols,
            params.bias.len()
        )));
    }
    let affine: Vec<f64> = params
        .w
        .matvec(x)?
        .iter()
        .zip(&params.bias)
        .map(|(wx, b)| wx + b)
        .collect();
    Ok(x.iter()
        .zip(&affine)
        .map(|(&xi, &yi)| {
            let gate = sigmoid(params.beta * xi);
            xi * gate + (1.0 - gate) * yi
        })
        .collect())
}

/// Analytic Jacobian of [`swiglu`] with respect to the input.
pub fn swiglu_jacobian(x: &[f64], params: &SwigluParams) -> Result<DenseMatrix, AdapterError> {
    let n = x.len();
    if params.w.rows != n || params.w.cols != n || params.bias.len() != n {
        return Err(AdapterError::ShapeMismatch("swiglu_jacobian".into()));
    }
    let affine: Vec<f64> = params
        .w
        .matvec(x)?
        .iter()
        .zip(&params.bias)
        .map(|(wx, b)| wx + b)
        .collect();
    let mut jac = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let gate = sigmoid(params.beta * x[i]);
        let gate_deriv = params.beta * gate * (1.0 - gate);
        for j in 0..n {
            let mut value = (1.0 - gate) * params.w.get(i, j);
            if i == j {
                value += gate + gate_deriv * (x[i] - affine[i]);
            }
            jac.entries[i * n + j] = value;
        }
    }
    Ok(jac)
}

/// Per-step next-token probability vectors with their target indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistributionSequence {
    pub steps: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

impl TokenDistributionSequence {
    pub fn new(steps: Vec<Vec<f64>>, targets: Vec<usize>) -> Result<Self, AdapterError> {
        if steps.is_empty() {
            return Err(AdapterError::EmptySequence);
        }
        if steps.len() != targets.len() {
            return Err(AdapterError::ShapeMismatch(format!(
                "{} steps vs {} targets",
                steps.len(),
                targets.len()
            )));
        }
        for (step, (probs, &target)) in steps.iter().zip(&targets).enumerate() {
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(AdapterError::NotNormalized { step, sum });
            }
            if probs.iter().any(|&p| p < 0.0) {
                return Err(AdapterError::NotNormalized { step, sum });
            }
            if target >= probs.len() {
                return Err(AdapterError::TargetOutOfRange {
                    step,
                    target,
                    vocab: probs.len(),
                });
            }
        }
        Ok(TokenDistributionSequence { steps, targets })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Mean negative log-likelihood of the targets, natural log, with target
/// probabilities clamped at [`PROB_CLAMP`].
pub fn cross_entropy(dist: &TokenDistributionSequence) -> f64 {
    let total: f64 = dist
        .steps
        .iter()
        .zip(&dist.targets)
        .map(|(probs, &t)| -probs[t].max(PROB_CLAMP).ln())
        .sum();
    total / dist.len() as f64
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy on softmax-normalized score rows.
pub fn cross_entropy_from_logits(
    logits: &[Vec<f64>],
    targets: &[usize],
) -> Result<f64, AdapterError> {
    let steps: Vec<Vec<f64>> = logits.iter().map(|row| softmax(row)).collect();
    let dist = TokenDistributionSequence::new(steps, targets.to_vec())?;
    Ok(cross_entropy(&dist))
}

/// Analytic gradient of [`cross_entropy_from_logits`] with respect to the
/// scores: (softmax − onehot) / T per step.
pub fn cross_entropy_logit_gradient(
    logits: &[Vec<f64>],
    targets: &[usize],
) -> Result<Vec<Vec<f64>>, AdapterError> {
    if logits.is_empty() {
        return Err(AdapterError::EmptySequence);
    }
    if logits.len() != targets.len() {
        return Err(AdapterError::ShapeMismatch(format!(
            "{} logit rows vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let t = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(row, &target)| {
            let mut grad = softmax(row);
            grad[target] -= 1.0;
            for g in &mut grad {
                *g /= t;
            }
            grad
        })
        .collect())
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}
