use crate::error::{invalid, Result};

/// Per-group importance weights, positive and non-increasing, normalized so
/// that they sum to the group count.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualWeights {
    w: Vec<f64>,
}

impl PerceptualWeights {
    /// Validates and normalizes `w` to sum to `w.len()`.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return invalid("weights need at least one group");
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid("weights must be positive and finite");
        }
        if w.windows(2).any(|p| p[1] > p[0]) {
            return invalid("weights must be non-increasing");
        }
        let k = w.len() as f64;
        let total: f64 = w.iter().sum();
        Ok(Self {
            w: w.into_iter().map(|v| v * k / total).collect(),
        })
    }

    /// `w_k ∝ k^(−α)` for `k = 1..=groups`.
    pub fn power_law(groups: usize, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return invalid(format!("power-law exponent must be ≥ 0, got {alpha}"));
        }
        Self::new((1..=groups).map(|k| (k as f64).powf(-alpha)).collect())
    }

    pub fn uniform(groups: usize) -> Result<Self> {
        Self::power_law(groups, 0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}
