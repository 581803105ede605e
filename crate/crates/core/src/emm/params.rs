use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detector and collaboration parameters shared by every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Memory region (state) size `B` in bytes.
    pub region_size_bytes: u64,
    /// Number of transition probabilities averaged by the score window.
    pub window_k: usize,
    /// An averaged window probability below this raises an alert.
    pub p_thr: f64,
    /// Fraction of contributing models that must have observed a
    /// transition for it to survive combining.
    pub p_a: f64,
    /// Attestation distance bound.
    pub alpha: f64,
    /// Initial learning period during which no alerts are raised.
    pub t_grace_secs: f64,
}

impl ModelParams {
    /// The parameter set used for the testbed experiments: 256-byte regions,
    /// k = 10,000, p_thr = 0.012, p_a = 25%, alpha = 0.05.
    ///
    /// The grace period has no published value; two hours of training
    /// preceded every measurement, so that is what is used here.
    pub fn paper() -> Self {
        Self {
            region_size_bytes: 256,
            window_k: 10_000,
            p_thr: 0.012,
            p_a: 0.25,
            alpha: 0.05,
            t_grace_secs: 2.0 * 3600.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.region_size_bytes == 0 {
            return bad("region_size_bytes must be positive".into());
        }
        if self.window_k == 0 {
            return bad("window_k must be positive".into());
        }
        if !(self.p_thr > 0.0 && self.p_thr < 1.0) {
            return bad(format!("p_thr must lie in (0, 1), got {}", self.p_thr));
        }
        if !(self.p_a > 0.0 && self.p_a < 1.0) {
            return bad(format!("p_a must lie in (0, 1), got {}", self.p_a));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.t_grace_secs >= 0.0) {
            return bad(format!(
                "t_grace_secs must be non-negative, got {}",
                self.t_grace_secs
            ));
        }
        if !self.region_size_bytes.is_power_of_two() {
            log::warn!(
                "region size {} is not a power of two; address mapping falls back to division",
                self.region_size_bytes
            );
        }
        Ok(())
    }

    pub fn region_size_is_power_of_two(&self) -> bool {
        self.region_size_bytes.is_power_of_two()
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::paper()
    }
}
