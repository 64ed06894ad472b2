//! Run configuration: a single JSON file, fully echoed into the manifest,
//! with command-line flags overriding individual fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sns_core::noise::CovarianceSpec;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Galerkin cutoff
    pub m: u32,
    /// low-frequency cutoff for Jacobian and bracket diagnostics
    pub n: u32,
    /// degeneracy cutoff: modes of `Z_l(n0)` are unforced
    pub n0: u32,
    /// isotropic covariance exponent (`q_k = |k|^{-2r}`)
    pub r: f64,
    /// trace-regularity exponent reported with the covariance
    pub sigma: f64,
    /// Feynman-Kac coefficient
    pub fk_coeff: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// replica count for ensemble commands
    pub ensemble: u64,
    pub output_dir: PathBuf,
    /// explicit covariance blocks overriding the isotropic construction
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovarianceSpec>,
    /// store full state snapshots every this many steps
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            m: 3,
            n: 2,
            n0: 1,
            r: 1.4,
            sigma: 0.1,
            fk_coeff: 0.0,
            dt: 1e-3,
            horizon: 1.0,
            seed: 1,
            ensemble: 1,
            output_dir: PathBuf::from("out"),
            covariance: None,
            snapshot_stride: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| {
            format!(
                "{}:{}:{}: malformed config: {e}",
                path.display(),
                e.line(),
                e.column()
            )
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.m == 0 {
            return Err("field `m`: cutoff must be at least 1".into());
        }
        if !(self.n0 < self.n) {
            return Err(format!(
                "fields `n0`/`n`: need n0 < n, got n0={} n={}",
                self.n0, self.n
            ));
        }
        if !(self.n <= self.m) {
            return Err(format!(
                "fields `n`/`m`: need n <= m, got n={} m={}",
                self.n, self.m
            ));
        }
        if !(self.dt > 0.0) {
            return Err(format!("field `dt`: must be positive, got {}", self.dt));
        }
        if !(self.horizon >= 0.0) {
            return Err(format!(
                "field `horizon`: must be nonnegative, got {}",
                self.horizon
            ));
        }
        if !(self.fk_coeff >= 0.0) {
            return Err(format!(
                "field `fk_coeff`: must be nonnegative, got {}",
                self.fk_coeff
            ));
        }
        if self.ensemble == 0 {
            return Err("field `ensemble`: need at least one replica".into());
        }
        if !self.r.is_finite() || !self.sigma.is_finite() {
            return Err("fields `r`/`sigma`: must be finite".into());
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !sns_core::noise::r_in_recommended_range(self.r) {
            out.push(format!(
                "covariance exponent r = {} is outside the recommended window (1.25, 1.5)",
                self.r
            ));
        }
        out
    }
}
