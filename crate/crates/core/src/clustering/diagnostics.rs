//! Route-diversity measures over A-space.

use serde::{Deserialize, Serialize};

use super::registry::{euclidean, CenterRegistry, ClusterAssignment};
use crate::error::{Error, Result};

/// Largest K for which [`alignment`] enumerates label permutations.
pub const MAX_ALIGNMENT_K: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub inter: f64,
    pub intra: f64,
    pub gate_variance: f64,
    pub per_cluster_sizes: Vec<usize>,
}

impl DiversityReport {
    pub fn compute(points: &[Vec<f64>], registry: &CenterRegistry, assignment: &ClusterAssignment) -> Result<Self> {
        let mut sizes = vec![0; registry.k()];
        for &i in &assignment.indices {
            sizes[i] += 1;
        }
        Ok(Self {
            inter: inter_cluster_distance(registry)?,
            intra: intra_cluster_distance(points, &assignment.indices)?,
            gate_variance: gate_variance(points)?,
            per_cluster_sizes: sizes,
        })
    }
}

/// Mean Euclidean distance over all center pairs.
pub fn inter_cluster_distance(registry: &CenterRegistry) -> Result<f64> {
    let k = registry.k();
    if k < 2 {
        return Err(Error::invalid(format!(
            "inter_cluster_distance needs K >= 2, got {k}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += euclidean(registry.center(i), registry.center(j));
        }
    }
    Ok(2.0 * sum / (k * (k - 1)) as f64)
}

/// Mean pairwise member distance per cluster, averaged over clusters that
/// have at least two members. Zero when no such cluster exists.
pub fn intra_cluster_distance(points: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    if points.len() != assignment.len() {
        return Err(Error::Shape {
            op: "intra_cluster_distance",
            lhs: vec![points.len()],
            rhs: vec![assignment.len()],
        });
    }
    let k = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
    for (p, &c) in points.iter().zip(assignment) {
        members[c].push(p);
    }
    let means: Vec<f64> = members
        .iter()
        .filter(|m| m.len() >= 2)
        .map(|m| {
            let mut sum = 0.0;
            for i in 0..m.len() {
                for j in i + 1..m.len() {
                    sum += euclidean(m[i], m[j]);
                }
            }
            sum / (m.len() * (m.len() - 1) / 2) as f64
        })
        .collect();
    if means.is_empty() {
        return Ok(0.0);
    }
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// Mean over gate dimensions of the per-dimension sample standard
/// deviation across inputs.
pub fn gate_variance(points: &[Vec<f64>]) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid(format!("gate_variance needs >= 2 samples, got {n}")));
    }
    let dim = points[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
        let ss: f64 = points.iter().map(|p| (p[j] - mean).powi(2)).sum();
        total += (ss / (n - 1) as f64).sqrt();
    }
    Ok(total / dim as f64)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Best fraction of samples whose relabeled cluster matches the true label,
/// maximized over all relabelings of the `k` clusters.
pub fn alignment(assignment: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if k > MAX_ALIGNMENT_K {
        return Err(Error::invalid(format!(
            "alignment enumerates K! permutations; K = {k} exceeds {MAX_ALIGNMENT_K}"
        )));
    }
    if assignment.len() != labels.len() {
        return Err(Error::Shape {
            op: "alignment",
            lhs: vec![assignment.len()],
            rhs: vec![labels.len()],
        });
    }
    if assignment.is_empty() {
        return Err(Error::invalid("alignment of an empty assignment"));
    }
    if let Some(&c) = assignment.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("cluster index {c} outside 0..{k}")));
    }
    // counts[cluster][label]
    let mut counts = vec![vec![0usize; k]; k];
    for (&c, &l) in assignment.iter().zip(labels) {
        if l < k {
            counts[c][l] += 1;
        }
    }
    let best = permutations(k)
        .iter()
        .map(|perm| (0..k).map(|c| counts[c][perm[c]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / assignment.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(c: Vec<Vec<f64>>) -> CenterRegistry {
        CenterRegistry::new(c).unwrap()
    }

    #[test]
    fn inter_examples() {
        assert_eq!(inter_cluster_distance(&reg(vec![vec![0.0, 0.0], vec![3.0, 0.0]])).unwrap(), 3.0);
        let h = 3f64.sqrt() / 2.0;
        let tri = reg(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]]);
        assert!((inter_cluster_distance(&tri).unwrap() - 1.0).abs() < 1e-15);
        let r = reg(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(inter_cluster_distance(&r).unwrap(), 4.0);
        assert!(inter_cluster_distance(&reg(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn intra_examples() {
        let p = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(intra_cluster_distance(&p, &[0, 0]).unwrap(), 2.0);
        assert_eq!(intra_cluster_distance(&p, &[0, 1]).unwrap(), 0.0);
        let p: Vec<Vec<f64>> = [0.0, 2.0, 0.0, 1.0, 2.0].iter().map(|&x| vec![x]).collect();
        let v = intra_cluster_distance(&p, &[0, 0, 1, 1, 1]).unwrap();
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn variance_examples() {
        let same = vec![vec![0.3, 0.7]; 5];
        assert_eq!(gate_variance(&same).unwrap(), 0.0);
        let two = vec![vec![0.0], vec![1.0]];
        assert!((gate_variance(&two).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        // per-dim stds 0.2 and 0.4 from symmetric pairs: std of {m-d, m+d} is d*sqrt(2)
        let d1 = 0.2 / 2f64.sqrt();
        let d2 = 0.4 / 2f64.sqrt();
        let p = vec![vec![0.5 - d1, 0.5 - d2], vec![0.5 + d1, 0.5 + d2]];
        assert!((gate_variance(&p).unwrap() - 0.3).abs() < 1e-12);
        assert!(gate_variance(&two[..1]).is_err());
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(alignment(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        assert_eq!(alignment(&[1, 0, 0, 1], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        assert_eq!(alignment(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 0.75);
        assert!(alignment(&[0], &[0], 7).is_err());
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(6).len(), 720);
    }
}
