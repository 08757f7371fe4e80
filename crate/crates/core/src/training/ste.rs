//! Decoupled forward and backward functions of the sign operator.
//!
//! The forward pass always uses `sign`. The backward pass substitutes the
//! derivative of a smooth surrogate: a piecewise quadratic for activations and
//! a hard clip for weights. The surrogates themselves are only evaluated by
//! gradient checks.

/// Which sign node a straight-through estimator sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteKind {
    Activation,
    Weight,
}

/// Backward function of the activation sign: `upstream * (2 - 2|x|)` on `[-1, 1]`.
#[inline]
pub fn ste_activation_backward(x: f64, upstream: f64) -> f64 {
    if x.abs() <= 1.0 {
        upstream * (2.0 - 2.0 * x.abs())
    } else {
        0.0
    }
}

/// Piecewise quadratic whose derivative is [`ste_activation_backward`].
#[inline]
pub fn ste_activation_surrogate(x: f64) -> f64 {
    if x < -1.0 {
        -1.0
    } else if x < 0.0 {
        x * x + 2.0 * x
    } else if x < 1.0 {
        -x * x + 2.0 * x
    } else {
        1.0
    }
}

/// Backward function of the weight sign: `upstream` on `[-1, 1]`, else 0.
#[inline]
pub fn ste_weight_backward(x: f64, upstream: f64) -> f64 {
    if x.abs() <= 1.0 {
        upstream
    } else {
        0.0
    }
}

/// `clip(x, -1, 1)`, whose derivative is [`ste_weight_backward`].
#[inline]
pub fn ste_weight_surrogate(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

impl SteKind {
    pub fn backward(self, x: f64, upstream: f64) -> f64 {
        match self {
            Self::Activation => ste_activation_backward(x, upstream),
            Self::Weight => ste_weight_backward(x, upstream),
        }
    }

    pub fn surrogate(self, x: f64) -> f64 {
        match self {
            Self::Activation => ste_activation_surrogate(x),
            Self::Weight => ste_weight_surrogate(x),
        }
    }
}

/// Points at which the backward functions are compared with central
/// differences of the surrogates.
pub const CHECK_POINTS: [f64; 7] = [-0.9, -0.5, 0.0, 0.25, 0.5, 0.9, 1.5];

/// Largest relative gap between each backward function and the central
/// difference of its surrogate over [`CHECK_POINTS`].
pub fn surrogate_derivative_gap(kind: SteKind, step: f64) -> f64 {
    CHECK_POINTS
        .iter()
        .map(|&x| {
            let fd = (kind.surrogate(x + step) - kind.surrogate(x - step)) / (2.0 * step);
            let analytic = kind.backward(x, 1.0);
            (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-12)
        })
        .map(|g| if g.is_nan() { 0.0 } else { g })
        .fold(0.0, f64::max)
}
