use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constrainer::{ConstraintSpec, DEFAULT_DELTA0, DEFAULT_P};
use crate::error::{Error, Result};
use crate::hwmodel::CostConfig;
use crate::supernet::DEFAULT_LAYERS;

/// How the search treats its constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Hinge constraints enforced through gradient manipulation.
    Hdx,
    /// Constraints folded into the loss as a weighted penalty.
    Soft,
    /// Constraints only logged.
    Unconstrained,
}

impl SearchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchMode::Hdx => "hdx",
            SearchMode::Soft => "soft",
            SearchMode::Unconstrained => "unconstrained",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hdx" => Ok(SearchMode::Hdx),
            "soft" => Ok(SearchMode::Soft),
            "unconstrained" => Ok(SearchMode::Unconstrained),
            _ => Err(Error::Config(format!("unknown search mode `{s}`"))),
        }
    }
}

/// Architecture encoding fed to the generator and estimator during search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchEncoding {
    /// Softmax probabilities of α.
    Soft,
    /// One-hot argmax of α in the forward pass, softmax gradient in the
    /// backward pass.
    StraightThrough,
}

/// Hyperparameters of one co-exploration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub lambda_cost: f64,
    /// Cost coefficients. References are replaced by the estimator's.
    pub cost: CostConfig,
    pub constraints: Vec<ConstraintSpec>,
    pub epochs: usize,
    pub batch: usize,
    /// Caps the batches per epoch; `None` makes one full pass over the task.
    pub steps_per_epoch: Option<usize>,
    pub lr_w: f64,
    pub lr_alpha: f64,
    pub lr_v: f64,
    /// Number of seeds for multi-seed experiments.
    pub seeds: usize,
    pub soft_lambda: f64,
    /// Targets are multiplied by this factor during search only.
    pub margin: f64,
    pub delta0: f64,
    pub p: f64,
    /// Update intervals, in steps, for `w`, `alpha` and the generator.
    pub w_every: usize,
    pub alpha_every: usize,
    pub v_every: usize,
    pub layers: usize,
    pub task_seed: u64,
    pub arch_encoding: ArchEncoding,
    /// Standard deviation of the seeded initial α logits.
    pub alpha_init_std: f64,
    /// Constraint-gradient norm at or below which a parameter group is
    /// left unmanipulated.
    pub const_grad_floor: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda_cost: 0.005,
            cost: CostConfig::default(),
            constraints: Vec::new(),
            epochs: 120,
            batch: 64,
            steps_per_epoch: None,
            lr_w: 1e-3,
            lr_alpha: 0.01,
            lr_v: 0.01,
            seeds: 10,
            soft_lambda: 0.01,
            margin: 1.0,
            delta0: DEFAULT_DELTA0,
            p: DEFAULT_P,
            w_every: 1,
            alpha_every: 1,
            v_every: 1,
            layers: DEFAULT_LAYERS,
            task_seed: 0,
            arch_encoding: ArchEncoding::StraightThrough,
            alpha_init_std: 1e-3,
            const_grad_floor: 1e-6,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.epochs == 0 || self.batch == 0 || self.layers == 0 || self.seeds == 0 {
            return bad("epochs, batch, layers and seeds must be at least 1");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1");
        }
        if !(pos(self.lr_w) && pos(self.lr_alpha) && pos(self.lr_v)) {
            return bad("learning rates must be positive");
        }
        if !(nonneg(self.lambda_cost) && nonneg(self.soft_lambda)) {
            return bad("lambda_cost and soft_lambda must be nonnegative");
        }
        if !(nonneg(self.alpha_init_std) && nonneg(self.const_grad_floor)) {
            return bad("alpha_init_std and const_grad_floor must be nonnegative");
        }
        if !(pos(self.delta0) && nonneg(self.p)) {
            return bad("delta0 must be positive and p nonnegative");
        }
        if !(pos(self.margin) && self.margin <= 1.0) {
            return bad("margin must lie in (0, 1]");
        }
        if self.w_every == 0 || self.alpha_every == 0 || self.v_every == 0 {
            return bad("update intervals must be at least 1");
        }
        self.cost.validate()?;
        for c in &self.constraints {
            c.with_schedule(self.delta0, self.p)?;
        }
        for (i, a) in self.constraints.iter().enumerate() {
            if self.constraints[..i].iter().any(|b| b.metric == a.metric) {
                return Err(Error::Config(format!("metric {} constrained twice", a.metric)));
            }
        }
        Ok(())
    }

    /// Constraints carrying this config's δ schedule.
    pub fn scheduled_constraints(&self) -> Result<Vec<ConstraintSpec>> {
        self.constraints
            .iter()
            .map(|c| c.with_schedule(self.delta0, self.p))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = SearchConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SearchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<SearchConfig>(r#"{"epochz": 3}"#).is_err());
        let cfg: SearchConfig = serde_json::from_str(r#"{"constraints": ["latency_ms<=0.2"], "epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.constraints.len(), 1);
        cfg.validate().unwrap();
        for patch in [
            r#"{"epochs": 0}"#,
            r#"{"lr_alpha": 0}"#,
            r#"{"margin": 1.5}"#,
            r#"{"delta0": -1}"#,
            r#"{"constraints": ["area_mm2<=3", "area_mm2<=4"]}"#,
        ] {
            let cfg: SearchConfig = serde_json::from_str(patch).unwrap();
            assert!(cfg.validate().is_err(), "{patch}");
        }
    }

    #[test]
    fn mode_names() {
        for m in [SearchMode::Hdx, SearchMode::Soft, SearchMode::Unconstrained] {
            assert_eq!(m.as_str().parse::<SearchMode>().unwrap(), m);
        }
        assert!("nas".parse::<SearchMode>().is_err());
    }
}
