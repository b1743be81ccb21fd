use serde::{Deserialize, Serialize};

/// Arguments beyond this magnitude are counted as guard events. Logistic
/// evaluation itself is overflow-free at any argument.
pub const GUARD_BOUND: f64 = 50.0;

/// Monotonically decreasing convex outer loss `l(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EllKind {
    /// `log(1 + exp(-u))`
    #[default]
    Logistic,
    /// `max(0, 1 - u)`
    Hinge,
    /// `1 - u`
    Correlation,
}

impl EllKind {
    pub fn value(self, u: f64) -> f64 {
        match self {
            EllKind::Logistic => {
                if u > 0.0 {
                    (-u).exp().ln_1p()
                } else {
                    -u + u.exp().ln_1p()
                }
            }
            EllKind::Hinge => (1.0 - u).max(0.0),
            EllKind::Correlation => 1.0 - u,
        }
    }

    /// `l'(u)`; the hinge uses the left derivative at its kink.
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            EllKind::Logistic => {
                if u > 0.0 {
                    let e = (-u).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + u.exp())
                }
            }
            EllKind::Hinge => {
                if u <= 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            EllKind::Correlation => -1.0,
        }
    }

    /// `l(0)`, the value every SPIN loss takes at its fixed point.
    pub fn at_zero(self) -> f64 {
        self.value(0.0)
    }

    pub fn all() -> [EllKind; 3] {
        [EllKind::Logistic, EllKind::Hinge, EllKind::Correlation]
    }
}
