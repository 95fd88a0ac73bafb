use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The K prototype routes `mu_1..mu_K` in A-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterRegistry {
    centers: Vec<Vec<f64>>,
    /// Training step of the fit that produced these centers.
    pub last_update_step: Option<u64>,
}

/// Per-sample nearest center and distance to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl CenterRegistry {
    /// A registry with no centers yet; lookups fail until it is replaced.
    pub fn uninitialized() -> Self {
        Self {
            centers: Vec::new(),
            last_update_step: None,
        }
    }

    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centers
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("a registry needs at least one center"))?;
        if dim == 0 {
            return Err(Error::invalid("centers must have positive dimension"));
        }
        for c in &centers {
            if c.len() != dim {
                return Err(Error::Shape {
                    op: "center_registry",
                    lhs: vec![dim],
                    rhs: vec![c.len()],
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("center entries must be finite"));
            }
        }
        Ok(Self {
            centers,
            last_update_step: None,
        })
    }

    pub fn is_initialized(&self) -> bool {
        !self.centers.is_empty()
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i]
    }

    /// Euclidean argmin over centers; ties go to the lowest index.
    pub fn nearest(&self, point: &[f64]) -> Result<(usize, f64)> {
        if !self.is_initialized() {
            return Err(Error::invalid("nearest_center on an uninitialized registry"));
        }
        if point.len() != self.dim() {
            return Err(Error::Shape {
                op: "nearest_center",
                lhs: vec![self.dim()],
                rhs: vec![point.len()],
            });
        }
        let (mut best, mut best_d2) = (0, f64::INFINITY);
        for (i, c) in self.centers.iter().enumerate() {
            let d2 = squared_euclidean(point, c);
            if d2 < best_d2 {
                best = i;
                best_d2 = d2;
            }
        }
        Ok((best, best_d2.sqrt()))
    }

    pub fn assign(&self, points: &[Vec<f64>]) -> Result<ClusterAssignment> {
        let mut indices = Vec::with_capacity(points.len());
        let mut distances = Vec::with_capacity(points.len());
        for p in points {
            let (i, d) = self.nearest(p)?;
            indices.push(i);
            distances.push(d);
        }
        Ok(ClusterAssignment { indices, distances })
    }

    /// Hash of the exact center bits; unchanged iff the centers are.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for c in &self.centers {
            for v in c {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// `idx,g_0,...` rows, one per center.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("center");
        for j in 0..self.dim() {
            s.push_str(&format!(",g_{j}"));
        }
        s.push('\n');
        for (i, c) in self.centers.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in c {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut centers = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("centers csv line {}: {e}", ln + 1)))?;
            centers.push(row);
        }
        Self::new(centers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_examples() {
        let r = CenterRegistry::new(vec![vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(r.nearest(&[0.0, 0.0]).unwrap(), (0, 1.0));

        let tie = CenterRegistry::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(tie.nearest(&[0.0, 0.0]).unwrap().0, 0);

        let r = CenterRegistry::new(vec![vec![0.0, 0.0], vec![4.0, 4.0], vec![10.0, 0.0]]).unwrap();
        let (i, d) = r.nearest(&[5.0, 5.0]).unwrap();
        assert_eq!(i, 1);
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn uninitialized_lookup_fails() {
        assert!(CenterRegistry::uninitialized().nearest(&[0.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = CenterRegistry::new(vec![vec![0.1, 0.7], vec![0.3, 1.0 / 3.0]]).unwrap();
        let back = CenterRegistry::from_csv(&r.to_csv()).unwrap();
        assert_eq!(r.centers(), back.centers());
    }

    #[test]
    fn centers_map_to_themselves() {
        let r = CenterRegistry::new(vec![vec![0.2, 0.1], vec![0.9, 0.4], vec![0.5, 0.5]]).unwrap();
        for i in 0..r.k() {
            assert_eq!(r.nearest(r.center(i)).unwrap().0, i);
        }
    }
}
