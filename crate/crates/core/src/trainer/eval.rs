use serde::{Deserialize, Serialize};

use super::run::parallel_map;
use crate::clustering::{
    alignment, gate_variance, inter_cluster_distance, intra_cluster_distance, CenterRegistry, MAX_ALIGNMENT_K,
};
use crate::error::{Error, Result};
use crate::lattice::{expected_cost, pruned_cost, GateActivationMap, Lattice, ParamStore, PRUNE_THRESHOLD};
use crate::synth::SynthSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub split: String,
    pub samples: usize,
    /// Mean IoU over classes, in `[0, 1]`.
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub expected_cost: f64,
    pub pruned_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<f64>,
}

/// Per-class IoU with intersections and unions pooled over every pixel of
/// the set. `None` for a class absent from both prediction and target.
pub fn pooled_iou<'a>(
    pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>,
    num_classes: usize,
) -> Vec<Option<f64>> {
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (pred, target) in pairs {
        for (&p, &t) in pred.iter().zip(target) {
            if p == t {
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[t] += 1;
            }
        }
    }
    inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect()
}

fn argmax_classes(logits: &[f64], num_classes: usize) -> Vec<usize> {
    let pixels = logits.len() / num_classes;
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..num_classes {
                if logits[c * pixels + p] > logits[best * pixels + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Scores `params` on `samples`. Diversity terms need an initialized
/// `registry`; alignment additionally needs `K <= 6`.
pub fn evaluate(
    lattice: &Lattice,
    params: &ParamStore,
    registry: &CenterRegistry,
    samples: &[SynthSample],
    split: &str,
    step: u64,
    threads: usize,
) -> Result<EvalRecord> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate: empty dataset"));
    }
    let num_classes = lattice.config().num_classes;
    let outputs = parallel_map(samples, threads, |s| {
        let out = lattice.infer(params, &s.image)?;
        Ok((argmax_classes(out.logits.data(), num_classes), out.gates))
    })?;
    let targets: Vec<Vec<usize>> = samples.iter().map(|s| s.labels()).collect();
    let class_iou = pooled_iou(
        outputs.iter().zip(&targets).map(|((p, _), t)| (p.as_slice(), t.as_slice())),
        num_classes,
    );
    let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;

    let gates: Vec<&GateActivationMap> = outputs.iter().map(|(_, g)| g).collect();
    let n = samples.len() as f64;
    let mut exp_sum = 0.0;
    let mut pruned_sum = 0.0;
    for g in &gates {
        exp_sum += expected_cost(g.values(), lattice.costs())?;
        pruned_sum += pruned_cost(g.values(), lattice.costs(), PRUNE_THRESHOLD)?;
    }
    let points: Vec<Vec<f64>> = gates.iter().map(|g| g.values().to_vec()).collect();

    let mut record = EvalRecord {
        step,
        split: split.to_string(),
        samples: samples.len(),
        miou,
        class_iou,
        expected_cost: exp_sum / n,
        pruned_cost: pruned_sum / n,
        inter: None,
        intra: None,
        gate_variance: (points.len() >= 2).then(|| gate_variance(&points)).transpose()?,
        cluster_sizes: None,
        alignment: None,
    };
    if registry.is_initialized() {
        let assignment = registry.assign(&points)?;
        let mut sizes = vec![0; registry.k()];
        for &c in &assignment.indices {
            sizes[c] += 1;
        }
        record.inter = Some(inter_cluster_distance(registry)?);
        record.intra = Some(intra_cluster_distance(&points, &assignment.indices)?);
        record.cluster_sizes = Some(sizes);
        if registry.k() <= MAX_ALIGNMENT_K {
            let labels: Vec<usize> = samples.iter().map(|s| s.true_subset as usize).collect();
            record.alignment = Some(alignment(&assignment.indices, &labels, registry.k())?);
        }
    }
    Ok(record)
}
