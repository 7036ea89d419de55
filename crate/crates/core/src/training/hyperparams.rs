use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// How a per-sample or per-class loss term is reduced over an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Model and optimisation settings. Missing fields in a config file take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Attention softmax temperature.
    pub gamma: f64,
    /// Cosine threshold for category-graph edges.
    pub edge_threshold: f64,
    /// Propagation steps.
    pub steps: usize,
    pub consistency_weight: f64,
    pub ways: usize,
    pub shots: usize,
    pub query_per_class: usize,
    /// Seen classes mixed into each unseen visual prototype.
    pub init_neighbors: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub experts: usize,
    /// Prototype width.
    pub d: usize,
    /// Classifier hidden width; `None` means `d`.
    pub d_h: Option<usize>,
    pub seed: u64,
    /// Reduction of the query cross-entropy.
    pub ce_reduction: Reduction,
    /// Reduction of the consistency term over episode classes.
    pub consistency_reduction: Reduction,
    pub decay_biases: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 10.0,
            edge_threshold: 40f64.to_radians().cos(),
            steps: 2,
            consistency_weight: 1.0,
            ways: 30,
            shots: 1,
            query_per_class: 5,
            init_neighbors: 5,
            lr: 2.0e-5,
            lr_decay_factor: 0.1,
            lr_decay_every: 240,
            epochs: 360,
            weight_decay: 1.0e-4,
            experts: 2,
            d: 32,
            d_h: None,
            seed: 0,
            ce_reduction: Reduction::Mean,
            consistency_reduction: Reduction::Mean,
            decay_biases: true,
        }
    }
}

/// Parses `cos<degrees>` presets such as `cos40` into a cosine value.
pub fn parse_threshold(s: &str) -> Option<f64> {
    let deg: f64 = s.strip_prefix("cos")?.parse().ok()?;
    Some(deg.to_radians().cos())
}

impl Hyperparams {
    /// Settings for the small synthetic benchmark: larger step size,
    /// fewer epochs and ways sized for 20 seen classes.
    pub fn desk_scale() -> Self {
        Hyperparams {
            lr: 1.0e-3,
            epochs: 200,
            ways: 10,
            ..Hyperparams::default()
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.d_h.unwrap_or(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(-1.0..=1.0).contains(&self.edge_threshold) {
            return fail(format!("edge_threshold {} outside [-1, 1]", self.edge_threshold));
        }
        if !(self.consistency_weight >= 0.0 && self.consistency_weight.is_finite()) {
            return fail(format!(
                "consistency_weight must be non-negative, got {}",
                self.consistency_weight
            ));
        }
        if self.ways < 2 {
            return fail(format!("ways must be at least 2, got {}", self.ways));
        }
        if self.shots < 1 {
            return fail("shots must be at least 1".into());
        }
        if self.query_per_class < 1 {
            return fail("query_per_class must be at least 1".into());
        }
        if self.init_neighbors < 1 {
            return fail("init_neighbors must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return fail(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.experts == 0 || self.d == 0 || self.d_h == Some(0) {
            return fail("experts, d and d_h must be positive".into());
        }
        Ok(())
    }

    pub fn field_names() -> Vec<String> {
        match serde_json::to_value(Hyperparams::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Sets one field from its textual form, as given on a command line.
    /// `edge_threshold` also accepts `cos<degrees>`.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = match (key, parse_threshold(raw)) {
            ("edge_threshold", Some(c)) => c.to_string(),
            _ => raw.to_string(),
        };
        set_field(self, key, &raw)
    }
}

/// Replaces one field of a serde struct, parsing `raw` as JSON and
/// falling back to a plain string.
pub fn set_field<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, raw: &str) -> Result<()> {
    let mut map = match serde_json::to_value(&*target)? {
        Value::Object(m) => m,
        _ => return Err(Error::Config(format!("cannot set `{key}` on a non-object"))),
    };
    if !map.contains_key(key) {
        let names: Vec<_> = map.keys().cloned().collect();
        return Err(Error::Config(format!(
            "unknown setting `{key}`; valid names: {}",
            names.join(", ")
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    map.insert(key.to_string(), value);
    *target = serde_json::from_value(Value::Object(map))
        .map_err(|e| Error::Config(format!("bad value `{raw}` for {key}: {e}")))?;
    Ok(())
}

/// `lr · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, hp: &Hyperparams) -> f64 {
    hp.lr * hp.lr_decay_factor.powi((epoch / hp.lr_decay_every.max(1)) as i32)
}
