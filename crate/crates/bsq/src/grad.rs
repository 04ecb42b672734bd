//! Backward passes for the quantization bottlenecks and the dense layers of
//! the toy autoencoder, plus finite-difference machinery to check them.
//!
//! The sign step has no useful derivative, so training runs it straight
//! through: the forward pass keeps the hard corner, the backward pass
//! differentiates the surrogate `v -> v / (|v| sqrt(L))` instead, which is the
//! same map with the sign removed. That surrogate is what
//! [`bsq_ste_backward`] differentiates exactly, including the normalization
//! Jacobian `(I - u u^T)/|v|` that kills the radial direction. For LFQ the
//! surrogate is the identity.

use thiserror::Error;

/// Step size for central differences; balances truncation against rounding in
/// 64-bit floats.
pub const FD_STEP: f64 = 1e-5;

/// Components whose analytic and numeric magnitudes both sit below this floor
/// are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("cannot differentiate through a normalization of norm {norm:e}")]
    ZeroNorm { norm: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("function evaluated to a non-finite value during differencing")]
    NonFinite,
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub tolerance: f64,
}

/// Compares gradients component-wise. The relative error divides by the
/// larger magnitude, floored at [`REL_FLOOR`] so near-zero pairs do not blow
/// up the ratio. `passed` is exactly `max_rel_err <= tolerance`.
pub fn grad_check(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut max_abs_err = 0.0f64;
    let mut max_rel_err = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(rel);
    }
    GradCheckReport { max_abs_err, max_rel_err, passed: max_rel_err <= tolerance, tolerance }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>, GradError> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for d in 0..x.len() {
        probe[d] = x[d] + h;
        let plus = f(&probe);
        probe[d] = x[d] - h;
        let minus = f(&probe);
        probe[d] = x[d];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradError::NonFinite);
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Backward through `v -> v/|v|`: upstream multiplied by `(I - u u^T)/|v|`
/// where `u = v/|v|`.
pub fn normalize_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>, GradError> {
    if v.len() != upstream.len() {
        return Err(GradError::ShapeMismatch { expected: v.len(), got: upstream.len() });
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(GradError::ZeroNorm { norm });
    }
    let dot: f64 = v.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
    Ok(v.iter().zip(upstream).map(|(&vd, &gd)| (gd - vd * dot) / norm).collect())
}

/// Straight-through backward for the BSQ bottleneck: the gradient of the
/// surrogate `v -> v / (|v| sqrt(L))`, i.e. the normalization Jacobian scaled
/// by the corner coordinate.
pub fn bsq_ste_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>, GradError> {
    let scale = (v.len() as f64).sqrt();
    let mut grad = normalize_backward(v, upstream)?;
    for g in &mut grad {
        *g /= scale;
    }
    Ok(grad)
}

/// Straight-through backward for LFQ: the surrogate is the identity, so the
/// upstream gradient passes through unchanged.
pub fn lfq_ste_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>, GradError> {
    if v.len() != upstream.len() {
        return Err(GradError::ShapeMismatch { expected: v.len(), got: upstream.len() });
    }
    Ok(upstream.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// One fully connected layer: `y = act(W x + b)` with `W` stored row-major as
/// `out_dim` rows of `in_dim` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self, GradError> {
        if weights.len() != in_dim * out_dim {
            return Err(GradError::ShapeMismatch { expected: in_dim * out_dim, got: weights.len() });
        }
        if bias.len() != out_dim {
            return Err(GradError::ShapeMismatch { expected: out_dim, got: bias.len() });
        }
        Ok(DenseLayer { in_dim, out_dim, weights, bias, activation })
    }
}

/// Gradients produced by [`dense_backward`]: with respect to the input and to
/// the layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn dense_forward(layer: &DenseLayer, input: &[f64]) -> Result<Vec<f64>, GradError> {
    if input.len() != layer.in_dim {
        return Err(GradError::ShapeMismatch { expected: layer.in_dim, got: input.len() });
    }
    let mut output = Vec::with_capacity(layer.out_dim);
    for o in 0..layer.out_dim {
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        let pre = layer.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        output.push(match layer.activation {
            Activation::Tanh => pre.tanh(),
            Activation::Identity => pre,
        });
    }
    Ok(output)
}

/// Exact reverse-mode gradients for one layer. `output` must be the value
/// [`dense_forward`] returned for this `input`; for tanh the derivative is
/// recovered from it as `1 - y^2`.
pub fn dense_backward(
    layer: &DenseLayer,
    input: &[f64],
    output: &[f64],
    upstream: &[f64],
) -> Result<DenseGrads, GradError> {
    if input.len() != layer.in_dim {
        return Err(GradError::ShapeMismatch { expected: layer.in_dim, got: input.len() });
    }
    if output.len() != layer.out_dim {
        return Err(GradError::ShapeMismatch { expected: layer.out_dim, got: output.len() });
    }
    if upstream.len() != layer.out_dim {
        return Err(GradError::ShapeMismatch { expected: layer.out_dim, got: upstream.len() });
    }
    let mut grads = DenseGrads {
        input: vec![0.0; layer.in_dim],
        weights: vec![0.0; layer.weights.len()],
        bias: vec![0.0; layer.out_dim],
    };
    for o in 0..layer.out_dim {
        let delta = match layer.activation {
            Activation::Tanh => upstream[o] * (1.0 - output[o] * output[o]),
            Activation::Identity => upstream[o],
        };
        grads.bias[o] = delta;
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        let grad_row = &mut grads.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        for i in 0..layer.in_dim {
            grad_row[i] = delta * input[i];
            grads.input[i] += delta * row[i];
        }
    }
    Ok(grads)
}
