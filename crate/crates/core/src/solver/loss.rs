use serde::{Deserialize, Serialize};

/// Robust loss applied to the squared norm `s = ‖r‖²` of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustLoss {
    #[default]
    None,
    Huber {
        delta: f64,
    },
}

impl RobustLoss {
    pub fn huber(delta: f64) -> Self {
        assert!(delta > 0.0, "Huber delta must be positive");
        RobustLoss::Huber { delta }
    }

    /// `(ρ(s), ρ'(s), ρ''(s))`.
    pub fn evaluate(&self, s: f64) -> (f64, f64, f64) {
        match *self {
            RobustLoss::None => (s, 1.0, 0.0),
            RobustLoss::Huber { delta } => huber_weight(s.sqrt(), delta),
        }
    }

    /// `ρ(s_new) − ρ(s_old)`, where `ds = s_new − s_old` was formed without
    /// cancellation.
    pub fn difference(&self, s_old: f64, s_new: f64, ds: f64) -> f64 {
        match *self {
            RobustLoss::None => ds,
            RobustLoss::Huber { delta } => {
                let d2 = delta * delta;
                match (s_old <= d2, s_new <= d2) {
                    (true, true) => ds,
                    (false, false) => 2.0 * delta * ds / (s_new.sqrt() + s_old.sqrt()),
                    _ => self.evaluate(s_new).0 - self.evaluate(s_old).0,
                }
            }
        }
    }
}

/// Huber loss of a scalar residual `r`, expressed on `s = r²`:
/// `ρ(s) = s` for `|r| ≤ δ`, `2δ|r| − δ²` beyond.
///
/// Returns `(ρ(r²), ρ', ρ'')` with derivatives taken with respect to `s`.
pub fn huber_weight(r: f64, delta: f64) -> (f64, f64, f64) {
    debug_assert!(delta > 0.0);
    let a = r.abs();
    if a <= delta {
        (a * a, 1.0, 0.0)
    } else {
        let s = a * a;
        (2.0 * delta * a - delta * delta, delta / a, -0.5 * delta / (s * a))
    }
}

/// Rescales a residual and its Jacobian rows so that the Gauss-Newton model
/// of `½ρ(‖r‖²)` is reproduced by ordinary least squares on the corrected
/// quantities.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Corrector {
    sqrt_rho1: f64,
    residual_scaling: f64,
    alpha_sq_norm: f64,
}

impl Corrector {
    pub(crate) fn new(sq_norm: f64, rho: (f64, f64, f64)) -> Self {
        let (_, rho1, rho2) = rho;
        let sqrt_rho1 = rho1.max(0.0).sqrt();
        if sq_norm == 0.0 || rho2 <= 0.0 {
            return Self {
                sqrt_rho1,
                residual_scaling: sqrt_rho1,
                alpha_sq_norm: 0.0,
            };
        }
        let d = 1.0 + 2.0 * sq_norm * rho2 / rho1;
        let alpha = 1.0 - d.max(0.0).sqrt();
        Self {
            sqrt_rho1,
            residual_scaling: sqrt_rho1 / (1.0 - alpha),
            alpha_sq_norm: alpha / sq_norm,
        }
    }

    pub(crate) fn correct_jacobian(&self, residual: &[f64], jac: &mut nalgebra::DMatrix<f64>) {
        if self.alpha_sq_norm == 0.0 {
            *jac *= self.sqrt_rho1;
            return;
        }
        let r = nalgebra::DVector::from_column_slice(residual);
        let rt_j = r.transpose() * &*jac;
        let correction = (&r * rt_j) * self.alpha_sq_norm;
        *jac -= correction;
        *jac *= self.sqrt_rho1;
    }

    pub(crate) fn correct_residual(&self, residual: &mut [f64]) {
        for r in residual {
            *r *= self.residual_scaling;
        }
    }
}
