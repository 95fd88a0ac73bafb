//! Alternating optimization: SGD on the combined loss with the route
//! centers frozen, interleaved with K-means refits of those centers.

mod eval;
mod metrics;
mod run;

pub use eval::{evaluate, pooled_iou, EvalRecord};
pub use metrics::{read_metrics, write_metrics, Record, RefitRecord, RunMetrics, StepRecord};
pub use run::{gate_matrix, parallel_map, train, RunFiles, TrainOutput, TrainState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::ParamStore;
use crate::loss::{DistanceForm, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr0 * (1 - step / total_steps)^lr_power`.
    Poly,
    /// `lr0 * lr_power^(step / lr_decay_steps)`.
    Exp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_power: f64,
    pub lr_schedule: LrSchedule,
    /// Only read by [`LrSchedule::Exp`].
    pub lr_decay_steps: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps between center refits.
    pub kmeans_interval: u64,
    /// Steps before the first refit; the clustering term is off until then.
    pub warmup_steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub k: usize,
    pub distance: DistanceForm,
    pub flip: bool,
    /// Worker threads for per-sample work. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            batch_size: 8,
            lr0: 0.05,
            lr_power: 0.9,
            lr_schedule: LrSchedule::Poly,
            lr_decay_steps: 100,
            momentum: 0.9,
            weight_decay: 1e-4,
            kmeans_interval: 50,
            warmup_steps: 50,
            eval_interval: 200,
            seed: 0,
            weights: LossWeights::default(),
            k: 2,
            distance: DistanceForm::Euclidean,
            flip: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let at_least_one = [
            ("total_steps", self.total_steps),
            ("batch_size", self.batch_size as u64),
            ("kmeans_interval", self.kmeans_interval),
            ("warmup_steps", self.warmup_steps),
            ("eval_interval", self.eval_interval),
            ("lr_decay_steps", self.lr_decay_steps),
            ("threads", self.threads as u64),
        ];
        for (field, v) in at_least_one {
            if v < 1 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.k < 2 {
            return Err(Error::config("K", format!("must be >= 2, got {}", self.k)));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::config("lr0", "must be finite and >= 0"));
        }
        if !(self.lr_power.is_finite() && self.lr_power > 0.0) {
            return Err(Error::config("lr_power", "must be finite and > 0"));
        }
        if self.lr_schedule == LrSchedule::Exp && self.lr_power >= 1.0 {
            return Err(Error::config("lr_power", "exponential decay needs a rate below 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        self.weights.validate()
    }

    /// Steps at which the centers are refit.
    pub fn refit_steps(&self) -> impl Iterator<Item = u64> + '_ {
        (self.warmup_steps..self.total_steps).step_by(self.kmeans_interval as usize)
    }

    pub fn is_refit_step(&self, step: u64) -> bool {
        step >= self.warmup_steps && (step - self.warmup_steps).is_multiple_of(self.kmeans_interval)
    }

    pub fn is_eval_step(&self, step: u64) -> bool {
        (step + 1).is_multiple_of(self.eval_interval) || step + 1 == self.total_steps
    }
}

/// Learning rate for `step` in `0..=total_steps`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let step = step.min(config.total_steps) as f64;
    match config.lr_schedule {
        LrSchedule::Poly => {
            config.lr0 * (1.0 - step / config.total_steps as f64).powf(config.lr_power)
        }
        LrSchedule::Exp => config.lr0 * config.lr_power.powf(step / config.lr_decay_steps as f64),
    }
}

/// One SGD-with-momentum update, weight decay folded into the gradient:
/// `v = momentum * v + g + wd * p`, `p -= lr * v`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    velocity: &mut ParamStore,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads.entries() {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}[{i}] = {}", g.data()[i])));
        }
    }
    let grads = grads.entries();
    let ps = params.values_mut();
    let vs = velocity.values_mut();
    for ((p, v), (name, g)) in ps.into_iter().zip(vs).zip(grads) {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "{name}: parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        let (pd, vd) = (p.data_mut(), v.data_mut());
        for ((p, v), &g) in pd.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeConfig;

    fn small() -> LatticeConfig {
        LatticeConfig {
            num_layers: 1,
            num_scales: 1,
            channels: 2,
            height: 4,
            width: 4,
            gate_hidden: 2,
            ..LatticeConfig::default()
        }
    }

    #[test]
    fn poly_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.05);
        assert_eq!(lr_schedule(cfg.total_steps, &cfg), 0.0);
        let half = lr_schedule(cfg.total_steps / 2, &cfg);
        assert!((half - 0.02679).abs() < 1e-5);
        assert!((half - 0.05 * 0.5f64.powf(0.9)).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=cfg.total_steps).map(|s| lr_schedule(s, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn exp_schedule() {
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::Exp,
            lr_decay_steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.05);
        assert!((lr_schedule(20, &cfg) - 0.05 * 0.81).abs() < 1e-15);
    }

    fn filled(cfg: &LatticeConfig, v: f64) -> ParamStore {
        let mut p = ParamStore::zeros(cfg);
        for t in p.values_mut() {
            t.data_mut().fill(v);
        }
        p
    }

    #[test]
    fn sgd_examples() {
        let cfg = small();
        let init = ParamStore::init(&cfg, 3);
        let g = filled(&cfg, 0.25);

        let mut p = init.clone();
        let mut v = ParamStore::zeros(&cfg);
        sgd_step(&mut p, &g, &mut v, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p, init);

        let mut p = init.clone();
        let mut v = ParamStore::zeros(&cfg);
        sgd_step(&mut p, &g, &mut v, 1.0, 0.0, 0.0).unwrap();
        for ((_, a), (_, b)) in p.entries().into_iter().zip(init.entries()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y - 0.25);
            }
        }

        let mut p = filled(&cfg, 1.0);
        let mut v = ParamStore::zeros(&cfg);
        sgd_step(&mut p, &ParamStore::zeros(&cfg), &mut v, 1.0, 0.0, 0.1).unwrap();
        assert!(p.values_mut().iter().all(|t| t.data().iter().all(|&x| x == 0.9)));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let cfg = small();
        let mut p = ParamStore::init(&cfg, 0);
        let mut v = ParamStore::zeros(&cfg);
        let mut g = ParamStore::zeros(&cfg);
        g.head_b.data_mut()[1] = f64::NAN;
        let err = sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("head.b"), "{err}");
    }

    #[test]
    fn refit_schedule() {
        let cfg = TrainConfig {
            total_steps: 260,
            ..TrainConfig::default()
        };
        let steps: Vec<u64> = cfg.refit_steps().collect();
        assert_eq!(steps, vec![50, 100, 150, 200, 250]);
        assert!((0..260).filter(|&s| cfg.is_refit_step(s)).eq(steps));
    }

    #[test]
    fn validation_names_fields() {
        let bad = TrainConfig {
            kmeans_interval: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "kmeans_interval"));
        let bad = TrainConfig {
            k: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "K"));
    }
}
