//! Loss terms of the diversified routing objective.
//!
//! ```text
//! L = task + lambda1 * cost(A) + lambda2 * clustering(A)
//!
//! clustering(A) = max(0, alpha + |A - mu(A)| / (2 s2)
//!                      + log sum_{k != nearest} exp(-|A - mu_k| / (2 s2)))
//! ```
//!
//! `mu(A)` is the nearest center and `s2` the batch spread
//! `1/(N-1) * sum_i |A_i - mu(A_i)|^2`, held constant under
//! differentiation. Distances are plain Euclidean norms by default;
//! [`DistanceForm::Squared`] switches both terms to squared norms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::clustering::CenterRegistry;
use crate::error::{Error, Result};
use crate::lattice::EdgeCostTable;

pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.5,
            alpha: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("alpha", self.alpha)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceForm {
    #[default]
    Euclidean,
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSigma {
    pub sigma_sq: f64,
    pub sample_count: usize,
}

impl BatchSigma {
    pub fn new(sigma_sq: f64, sample_count: usize) -> Result<Self> {
        if !sigma_sq.is_finite() || sample_count == 0 {
            return Err(Error::invalid("sigma^2 must be finite over a nonempty batch"));
        }
        Ok(Self {
            sigma_sq: sigma_sq.max(SIGMA_FLOOR),
            sample_count,
        })
    }
}

/// Mean per-pixel softmax cross-entropy.
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Batch spread of gate activations around their nearest centers. With a
/// single sample the `N - 1` denominator is taken as 1.
pub fn compute_sigma_sq<P: AsRef<[f64]>>(batch: &[P], centers: &CenterRegistry) -> Result<BatchSigma> {
    if batch.is_empty() {
        return Err(Error::invalid("compute_sigma_sq on an empty batch"));
    }
    let mut total = 0.0;
    for a in batch {
        let (_, d) = centers.nearest(a.as_ref())?;
        total += d * d;
    }
    let n = batch.len();
    BatchSigma::new(total / (n.max(2) - 1) as f64, n)
}

fn distance(tape: &mut Tape, a: Var, center: &[f64], form: DistanceForm) -> Result<Var> {
    let neg: Vec<f64> = center.iter().map(|c| -c).collect();
    let diff = tape.add_const(a, &neg)?;
    let d = tape.l2_norm(diff);
    match form {
        DistanceForm::Euclidean => Ok(d),
        DistanceForm::Squared => tape.mul_scalar(d, d),
    }
}

/// Margin clustering loss for one gate-activation vector `a`.
pub fn clustering_loss(
    tape: &mut Tape,
    a: Var,
    centers: &CenterRegistry,
    sigma: BatchSigma,
    alpha: f64,
    form: DistanceForm,
) -> Result<Var> {
    if centers.k() < 2 {
        return Err(Error::invalid(format!(
            "clustering_loss needs K >= 2 centers, got {}",
            centers.k()
        )));
    }
    let values = tape.value(a).data();
    if values.iter().any(|v| v.is_nan()) || sigma.sigma_sq.is_nan() || alpha.is_nan() {
        return Err(Error::invalid("clustering_loss: NaN input"));
    }
    let (nearest, _) = centers.nearest(values)?;
    let inv = 1.0 / (2.0 * sigma.sigma_sq);

    let pull = distance(tape, a, centers.center(nearest), form)?;
    let pull = tape.scale(pull, inv);
    let mut push_terms = Vec::with_capacity(centers.k() - 1);
    for k in (0..centers.k()).filter(|&k| k != nearest) {
        let d = distance(tape, a, centers.center(k), form)?;
        push_terms.push(tape.scale(d, -inv));
    }
    let stacked = tape.concat(&push_terms)?;
    let push = tape.log_sum_exp(stacked);
    let inner = tape.add(pull, push)?;
    let inner = tape.add_const(inner, &[alpha])?;
    Ok(tape.relu(inner))
}

/// [`clustering_loss`] evaluated off-tape.
pub fn clustering_loss_value(
    a: &[f64],
    centers: &CenterRegistry,
    sigma: BatchSigma,
    alpha: f64,
    form: DistanceForm,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(a.to_vec()));
    let l = clustering_loss(&mut tape, v, centers, sigma, alpha, form)?;
    Ok(tape.scalar(l))
}

/// Normalized expected cost `sum_e A_e cost_e / sum_e cost_e` on the tape.
pub fn cost_loss(tape: &mut Tape, gates: Var, costs: &EdgeCostTable) -> Result<Var> {
    let n = tape.value(gates).len();
    if n != costs.len() {
        return Err(Error::Shape {
            op: "cost_loss",
            lhs: vec![n],
            rhs: vec![costs.len()],
        });
    }
    let row = tape.reshape(gates, &[1, n])?;
    let w = tape.constant(Tensor::new(vec![n, 1], costs.normalized())?);
    let c = tape.matmul(row, w)?;
    tape.reshape(c, &[1])
}

/// Per-term values of one total-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub cost: f64,
    pub clustering: f64,
    pub weighted_cost: f64,
    pub weighted_clustering: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(task: f64, cost: f64, clustering: f64, weights: &LossWeights) -> Self {
        let weighted_cost = weights.lambda1 * cost;
        let weighted_clustering = weights.lambda2 * clustering;
        Self {
            task,
            cost,
            clustering,
            weighted_cost,
            weighted_clustering,
            total: task + weighted_cost + weighted_clustering,
        }
    }
}

/// Clustering context for [`total_loss`]; absent before the first center fit.
#[derive(Debug, Clone, Copy)]
pub struct ClusterContext<'a> {
    pub centers: &'a CenterRegistry,
    pub sigma: BatchSigma,
    pub form: DistanceForm,
}

/// `task + lambda1 * cost + lambda2 * clustering` for one sample.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    gates: Var,
    clusters: Option<ClusterContext<'_>>,
    weights: &LossWeights,
    costs: &EdgeCostTable,
) -> Result<(Var, LossBreakdown)> {
    let task = task_loss(tape, logits, labels)?;
    let cost = cost_loss(tape, gates, costs)?;
    let weighted_cost = tape.scale(cost, weights.lambda1);
    let mut total = tape.add(task, weighted_cost)?;
    let mut clustering_value = 0.0;
    if let Some(ctx) = clusters.filter(|_| weights.lambda2 > 0.0) {
        let cl = clustering_loss(tape, gates, ctx.centers, ctx.sigma, weights.alpha, ctx.form)?;
        clustering_value = tape.scalar(cl);
        let weighted = tape.scale(cl, weights.lambda2);
        total = tape.add(total, weighted)?;
    }
    let breakdown = LossBreakdown::from_components(tape.scalar(task), tape.scalar(cost), clustering_value, weights);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(c: &[&[f64]]) -> CenterRegistry {
        CenterRegistry::new(c.iter().map(|v| v.to_vec()).collect()).unwrap()
    }

    fn sigma(s: f64) -> BatchSigma {
        BatchSigma::new(s, 1).unwrap()
    }

    #[test]
    fn hand_evaluated_clustering_examples() {
        let e = DistanceForm::Euclidean;
        let v = clustering_loss_value(&[0.0, 0.0], &reg(&[&[0.0, 0.0], &[4.0, 0.0]]), sigma(1.0), 1.0, e).unwrap();
        assert_eq!(v, 0.0);
        let v = clustering_loss_value(&[0.0, 0.0], &reg(&[&[0.0, 0.0], &[1.0, 0.0]]), sigma(1.0), 1.0, e).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = clustering_loss_value(&[1.0, 0.0], &reg(&[&[0.0, 0.0], &[3.0, 0.0]]), sigma(2.0), 0.0, e).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn squared_form_differs() {
        // d = 1 to the nearest, 2 to the other: {2 + 1/2 - 4/2}+
        let r = reg(&[&[0.0, 0.0], &[3.0, 0.0]]);
        let sq = clustering_loss_value(&[1.0, 0.0], &r, sigma(1.0), 2.0, DistanceForm::Squared).unwrap();
        assert!((sq - (2.0 + 0.5 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn single_center_is_rejected() {
        let r = reg(&[&[0.0]]);
        assert!(clustering_loss_value(&[0.0], &r, sigma(1.0), 0.5, DistanceForm::Euclidean).is_err());
        let r = reg(&[&[0.0], &[1.0]]);
        assert!(clustering_loss_value(&[f64::NAN], &r, sigma(1.0), 0.5, DistanceForm::Euclidean).is_err());
    }

    #[test]
    fn sigma_examples() {
        let r = reg(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let s = compute_sigma_sq(&[vec![1.0, 0.0], vec![0.0, 1.0]], &r).unwrap();
        assert_eq!(s.sigma_sq, 2.0);
        let s = compute_sigma_sq(&[vec![0.0, 0.0], vec![10.0, 10.0]], &r).unwrap();
        assert_eq!(s.sigma_sq, SIGMA_FLOOR);
        let s = compute_sigma_sq(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]], &r).unwrap();
        assert_eq!(s.sigma_sq, 7.0);
        assert!(compute_sigma_sq::<Vec<f64>>(&[], &r).is_err());
    }

    #[test]
    fn task_loss_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap());
        let l = task_loss(&mut t, z, &[0]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((t.scalar(l) - expected).abs() < 1e-12);
        assert!((t.scalar(l) - 0.3133).abs() < 1e-4);

        let u = t.constant(Tensor::zeros(&[2, 4, 4]));
        let l = task_loss(&mut t, u, &[1; 16]).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-12);

        let mut big = vec![0.0; 2 * 16];
        big[..16].fill(50.0);
        let s = t.constant(Tensor::new(vec![2, 4, 4], big).unwrap());
        let l = task_loss(&mut t, s, &[0; 16]).unwrap();
        assert!(t.scalar(l) < 1e-6);

        assert!(task_loss(&mut t, s, &[2; 16]).is_err());
    }

    #[test]
    fn breakdown_arithmetic() {
        let w = LossWeights {
            lambda1: 1.0,
            lambda2: 2.0,
            alpha: 0.5,
        };
        let b = LossBreakdown::from_components(0.5, 0.4, 0.2, &w);
        assert!((b.total - 1.3).abs() < 1e-15);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            alpha: 0.5,
        };
        assert_eq!(LossBreakdown::from_components(0.7, 0.4, 0.2, &zero).total, 0.7);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            alpha: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "alpha"));
    }
}
