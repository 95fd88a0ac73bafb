use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LatticeConfig;
use crate::loss::{DistanceForm, LossWeights};
use crate::synth::{DatasetSpec, SubsetKind};
use crate::trainer::{LrSchedule, TrainConfig};

/// One experiment, as a flat JSON object. Every key except `K` has a
/// default; unknown keys are rejected.
///
/// ```json
/// {"name": "mixed-k2", "K": 2, "lambda1": 0.8, "lambda2": 0.5, "seed": 0}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Parent of the run directory; falls back to `DIVDR_OUT`, then `runs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,

    #[serde(default = "d::num_layers")]
    pub num_layers: usize,
    #[serde(default = "d::num_scales")]
    pub num_scales: usize,
    #[serde(default = "d::channels")]
    pub channels: usize,
    #[serde(default = "d::gate_hidden")]
    pub gate_hidden: usize,

    #[serde(default = "d::total_steps")]
    pub total_steps: u64,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::lr0")]
    pub lr0: f64,
    #[serde(default = "d::lr_power")]
    pub lr_power: f64,
    #[serde(default = "d::lr_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d::lr_decay_steps")]
    pub lr_decay_steps: u64,
    #[serde(default = "d::momentum")]
    pub momentum: f64,
    #[serde(default = "d::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d::kmeans_interval")]
    pub kmeans_interval: u64,
    #[serde(default = "d::warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default = "d::eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "d::flip")]
    pub flip: bool,

    #[serde(default = "d::lambda1")]
    pub lambda1: f64,
    #[serde(default = "d::lambda2")]
    pub lambda2: f64,
    #[serde(default = "d::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub distance: DistanceForm,

    /// Which subset the model trains on.
    #[serde(default = "d::train_subset")]
    pub train_subset: SubsetKind,
    #[serde(default = "d::n_train")]
    pub n_train: usize,
    #[serde(default = "d::n_val")]
    pub n_val: usize,
    #[serde(default = "d::mix")]
    pub mix: f64,
    #[serde(default = "d::radius_small")]
    pub radius_small: (f64, f64),
    #[serde(default = "d::radius_large")]
    pub radius_large: (f64, f64),
    #[serde(default = "d::noise_std")]
    pub noise_std: f64,
}

fn default_name() -> String {
    "divdr".to_string()
}

mod d {
    use super::*;

    fn lattice() -> LatticeConfig {
        LatticeConfig::default()
    }
    fn train() -> TrainConfig {
        TrainConfig::default()
    }
    fn data() -> DatasetSpec {
        DatasetSpec::default()
    }

    pub fn num_layers() -> usize {
        lattice().num_layers
    }
    pub fn num_scales() -> usize {
        lattice().num_scales
    }
    pub fn channels() -> usize {
        lattice().channels
    }
    pub fn gate_hidden() -> usize {
        lattice().gate_hidden
    }
    pub fn total_steps() -> u64 {
        train().total_steps
    }
    pub fn batch_size() -> usize {
        train().batch_size
    }
    pub fn lr0() -> f64 {
        train().lr0
    }
    pub fn lr_power() -> f64 {
        train().lr_power
    }
    pub fn lr_schedule() -> LrSchedule {
        train().lr_schedule
    }
    pub fn lr_decay_steps() -> u64 {
        train().lr_decay_steps
    }
    pub fn momentum() -> f64 {
        train().momentum
    }
    pub fn weight_decay() -> f64 {
        train().weight_decay
    }
    pub fn kmeans_interval() -> u64 {
        train().kmeans_interval
    }
    pub fn warmup_steps() -> u64 {
        train().warmup_steps
    }
    pub fn eval_interval() -> u64 {
        train().eval_interval
    }
    pub fn flip() -> bool {
        train().flip
    }
    pub fn lambda1() -> f64 {
        LossWeights::default().lambda1
    }
    pub fn lambda2() -> f64 {
        LossWeights::default().lambda2
    }
    pub fn alpha() -> f64 {
        LossWeights::default().alpha
    }
    pub fn train_subset() -> SubsetKind {
        SubsetKind::X
    }
    pub fn n_train() -> usize {
        data().n_train
    }
    pub fn n_val() -> usize {
        data().n_val
    }
    pub fn mix() -> f64 {
        data().mix
    }
    pub fn radius_small() -> (f64, f64) {
        data().radius_small
    }
    pub fn radius_large() -> (f64, f64) {
        data().radius_large
    }
    pub fn noise_std() -> f64 {
        data().noise_std
    }
}

impl ExperimentConfig {
    /// Defaults everywhere, with the given `K`.
    pub fn with_k(k: usize) -> Self {
        let v = serde_json::json!({ "K": k });
        serde_json::from_value(v).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("config", format!("not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::config("config", "top level must be a JSON object"))?;
        if !obj.contains_key("K") {
            return Err(Error::config("K", "required field is missing"));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every key spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn lattice_config(&self) -> LatticeConfig {
        LatticeConfig {
            num_layers: self.num_layers,
            num_scales: self.num_scales,
            channels: self.channels,
            gate_hidden: self.gate_hidden,
            ..LatticeConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            alpha: self.alpha,
        }
    }

    pub fn train_config(&self, threads: usize) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            lr0: self.lr0,
            lr_power: self.lr_power,
            lr_schedule: self.lr_schedule,
            lr_decay_steps: self.lr_decay_steps,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            kmeans_interval: self.kmeans_interval,
            warmup_steps: self.warmup_steps,
            eval_interval: self.eval_interval,
            seed: self.seed,
            weights: self.weights(),
            k: self.k,
            distance: self.distance,
            flip: self.flip,
            threads: threads.max(1),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_train: self.n_train,
            n_val: self.n_val,
            mix: self.mix,
            radius_small: self.radius_small,
            radius_large: self.radius_large,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::config("name", "must be a plain, non-empty directory name"));
        }
        self.lattice_config().validate()?;
        self.train_config(1).validate()?;
        self.dataset_spec().validate()?;
        if self.n_train < self.k {
            return Err(Error::config("n_train", format!("must be at least K = {}", self.k)));
        }
        Ok(())
    }

    /// Sets one sweepable parameter.
    pub fn set_param(&mut self, param: &str, value: f64) -> Result<()> {
        match param {
            "K" => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(Error::config("K", format!("sweep value {value} is not a count")));
                }
                self.k = value as usize;
            }
            "alpha" => self.alpha = value,
            "lambda1" => self.lambda1 = value,
            "lambda2" => self.lambda2 = value,
            other => {
                return Err(Error::config(
                    "param",
                    format!("unknown sweep parameter `{other}`; expected K, alpha, lambda1 or lambda2"),
                ))
            }
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(err: Error) -> String {
        match err {
            Error::Config { field, .. } => field,
            e => panic!("expected a config error, got {e}"),
        }
    }

    #[test]
    fn k_is_required() {
        assert_eq!(field_of(ExperimentConfig::from_json("{}").unwrap_err()), "K");
        assert_eq!(field_of(ExperimentConfig::from_json(r#"{"lambda1": 0.8}"#).unwrap_err()), "K");
    }

    #[test]
    fn unknown_and_bad_fields_are_named() {
        let e = ExperimentConfig::from_json(r#"{"K": 2, "lamda2": 0.5}"#).unwrap_err();
        assert_eq!(field_of(e), "lamda2");
        let e = ExperimentConfig::from_json(r#"{"K": 2, "kmeans_interval": 0}"#).unwrap_err();
        assert_eq!(field_of(e), "kmeans_interval");
        let e = ExperimentConfig::from_json(r#"{"K": 2, "radius_small": [2, 20]}"#).unwrap_err();
        assert_eq!(field_of(e), "radius_small");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::from_json(r#"{"K": 3, "lambda2": 0.1, "name": "x"}"#).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), cfg.to_json());
        assert_eq!(cfg.train_config(1).weights.lambda1, 0.8);
    }

    #[test]
    fn sweep_params() {
        let mut cfg = ExperimentConfig::with_k(2);
        cfg.set_param("K", 4.0).unwrap();
        assert_eq!(cfg.k, 4);
        assert!(cfg.set_param("K", 2.5).is_err());
        assert_eq!(field_of(cfg.set_param("gamma", 1.0).unwrap_err()), "param");
    }
}
