use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A pairwise preference objective of the form `softplus(-z)`, where `z` is
/// built from the implicit-reward margin `beta * delta` and the pair's
/// quality gap.
pub trait PreferenceObjective: Send + Sync {
    fn name(&self) -> &str;

    /// Whether pairs must carry a positive quality gap.
    fn needs_delta_rho(&self) -> bool;

    /// The sigmoid argument for one pair. `delta` is the difference of
    /// policy/reference log-ratios between winner and loser.
    fn logit(&self, beta: f64, alpha: f64, delta: f64, delta_rho: Option<f64>) -> Result<f64>;
}

pub struct Dpo;

impl PreferenceObjective for Dpo {
    fn name(&self) -> &str {
        "dpo"
    }

    fn needs_delta_rho(&self) -> bool {
        false
    }

    fn logit(&self, beta: f64, _alpha: f64, delta: f64, _delta_rho: Option<f64>) -> Result<f64> {
        Ok(beta * delta)
    }
}

/// DPO with the quality gap subtracted inside the sigmoid, scaled by `alpha`.
pub struct Mlpo;

impl PreferenceObjective for Mlpo {
    fn name(&self) -> &str {
        "mlpo"
    }

    fn needs_delta_rho(&self) -> bool {
        true
    }

    fn logit(&self, beta: f64, alpha: f64, delta: f64, delta_rho: Option<f64>) -> Result<f64> {
        let dr = delta_rho
            .ok_or_else(|| Error::InvalidArgument("pair has no quality gap".into()))?;
        Ok(beta * delta - alpha * dr)
    }
}

type ObjectiveFactory = fn() -> Arc<dyn PreferenceObjective>;

/// Name → objective lookup used by the CLI `--mode` switch.
pub struct ObjectiveRegistry {
    entries: BTreeMap<String, ObjectiveFactory>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = ObjectiveRegistry { entries: BTreeMap::new() };
        r.register("dpo", || Arc::new(Dpo));
        r.register("mlpo", || Arc::new(Mlpo));
        r
    }
}

impl ObjectiveRegistry {
    pub fn register(&mut self, name: &str, factory: ObjectiveFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PreferenceObjective>> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "objective",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}
