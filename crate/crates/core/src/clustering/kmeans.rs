//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;

use super::registry::{squared_euclidean, CenterRegistry};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub registry: CenterRegistry,
    /// Final assignment of every input point.
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned center, one entry per
    /// Lloyd iteration (after its assignment step).
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one iteration")
    }
}

fn nearest_sq(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = squared_euclidean(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_euclidean(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!(
                "kmeans_fit: fewer than K = {k} distinct points"
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut chosen = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                chosen = i;
                break;
            }
            target -= d;
        }
        let c = points[chosen].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(squared_euclidean(p, &c));
        }
        centers.push(c);
    }
    Ok(centers)
}

/// Clusters `points` into `k` groups. Seeding draws from the `KMeans`
/// substream of `seed`. Empty clusters are reseeded to the point farthest
/// from its assigned center.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::invalid("kmeans_fit: K must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "kmeans_fit: {} points for K = {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Shape {
            op: "kmeans_fit",
            lhs: vec![dim],
            rhs: vec![p.len()],
        });
    }

    let mut rng = substream(seed, Stream::KMeans, 0);
    let mut centers = plus_plus(points, k, &mut rng)?;
    let mut assignment = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..MAX_LLOYD_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        let mut dist = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_sq(p, &centers);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            dist[i] = d;
            objective += d;
        }
        trace.push(objective);
        if !changed {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            } else {
                // farthest point from its own center; zero it so a second
                // empty cluster picks a different point
                let far = dist
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best })
                    .0;
                centers[c] = points[far].clone();
                dist[far] = 0.0;
            }
        }
    }

    Ok(KMeansFit {
        registry: CenterRegistry::new(centers)?,
        assignment,
        objective_trace: trace,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    /// Best 2-partition of a 1-D set by brute force over all subsets.
    fn brute_force_two_means(v: &[f64]) -> (f64, f64, f64) {
        let n = v.len();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for mask in 1..(1u32 << n) - 1 {
            let a: Vec<f64> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| v[i]).collect();
            let b: Vec<f64> = (0..n).filter(|i| mask >> i & 1 == 0).map(|i| v[i]).collect();
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ma.min(mb), ma.max(mb));
            }
        }
        best
    }

    #[test]
    fn two_pairs_recover_exact_centers() {
        let v = [0.0, 1.0, 10.0, 11.0];
        let (_, lo, hi) = brute_force_two_means(&v);
        assert_eq!((lo, hi), (0.5, 10.5));
        for seed in 0..20 {
            let fit = kmeans_fit(&pts(&v), 2, seed).unwrap();
            let mut c: Vec<f64> = fit.registry.centers().iter().map(|c| c[0]).collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![lo, hi], "seed {seed}");
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let p = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
        let fit = kmeans_fit(&p, 1, 0).unwrap();
        assert_eq!(fit.registry.center(0), &[3.0, 3.0]);
    }

    #[test]
    fn one_cluster_per_point() {
        let p = pts(&[0.0, 3.0, 7.0, 8.5]);
        let fit = kmeans_fit(&p, 4, 1).unwrap();
        assert_eq!(fit.objective(), 0.0);
    }

    #[test]
    fn too_few_points() {
        assert!(kmeans_fit(&pts(&[1.0]), 2, 0).is_err());
        assert!(kmeans_fit(&pts(&[1.0, 1.0, 1.0]), 2, 0).is_err());
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..30u64 {
            let mut rng = substream(seed, Stream::Data, 99);
            let p: Vec<Vec<f64>> = (0..60)
                .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
                .collect();
            let fit = kmeans_fit(&p, 4, seed).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective_trace);
            }
        }
    }
}
