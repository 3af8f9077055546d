use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How major-class prototypes are chosen from in-annotation assignment counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MajorRule {
    /// The `m` most frequent prototypes.
    FixedM(usize),
    /// The shortest most-frequent-first prefix covering this fraction of annotated patches.
    Coverage(f64),
}

/// Hyperparameters for every stage of the refinement pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub c_local: usize,
    pub k_global: usize,
    pub major_rule: MajorRule,
    pub theta: f64,
    pub preserve_coarse_positives: bool,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub batch_half_size: usize,
    pub dynamic_iters: usize,
    pub refinetune_epochs: usize,
    pub learning_rate: f64,
    /// Width of the optional ReLU hidden layer; `None` gives a logistic head.
    pub hidden_units: Option<usize>,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            c_local: 8,
            k_global: 16,
            major_rule: MajorRule::Coverage(0.8),
            theta: 0.85,
            preserve_coarse_positives: false,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            batch_half_size: 32,
            dynamic_iters: 500,
            refinetune_epochs: 3,
            learning_rate: 0.1,
            hidden_units: None,
            seed: 0,
            kmeans_max_iters: 300,
            kmeans_tol: 1e-9,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.c_local < 1 {
            return fail("c_local must be at least 1".into());
        }
        if self.k_global < 1 {
            return fail("k_global must be at least 1".into());
        }
        match self.major_rule {
            MajorRule::FixedM(m) if m < 1 || m > self.k_global => {
                return fail(format!(
                    "fixed_m = {m} must lie in [1, k_global = {}]",
                    self.k_global
                ))
            }
            MajorRule::Coverage(rho) if !(rho > 0.0 && rho <= 1.0) => {
                return fail(format!("coverage = {rho} must lie in (0, 1]"))
            }
            _ => {}
        }
        if !(self.theta > -1.0 && self.theta < 1.0) {
            return fail(format!("theta = {} must lie in (-1, 1)", self.theta));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return fail(format!("focal_gamma = {} must be >= 0", self.focal_gamma));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return fail(format!(
                "focal_alpha = {} must lie in (0, 1)",
                self.focal_alpha
            ));
        }
        if self.batch_half_size < 1 {
            return fail("batch_half_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate = {} must be > 0",
                self.learning_rate
            ));
        }
        if self.hidden_units == Some(0) {
            return fail("hidden_units must be at least 1 when set".into());
        }
        if self.kmeans_max_iters < 1 {
            return fail("kmeans_max_iters must be at least 1".into());
        }
        if self.kmeans_tol.is_nan() || self.kmeans_tol < 0.0 {
            return fail(format!("kmeans_tol = {} must be >= 0", self.kmeans_tol));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
