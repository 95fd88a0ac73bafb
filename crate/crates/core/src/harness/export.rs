//! A-space exports: the gate matrix with cluster assignments, the edge
//! enumeration sidecar, and a 2-D PCA projection.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Edge, Lattice};

#[derive(Debug, Clone, PartialEq)]
pub struct AspaceRow {
    pub sample_id: u64,
    pub true_subset: usize,
    pub assigned_cluster: usize,
    pub gates: Vec<f64>,
}

/// `sample_id,true_subset,assigned_cluster,g_0,...,g_{n-1}`.
pub fn aspace_csv(rows: &[AspaceRow], dim: usize) -> String {
    let mut s = String::from("sample_id,true_subset,assigned_cluster");
    for j in 0..dim {
        s.push_str(&format!(",g_{j}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{}", r.sample_id, r.true_subset, r.assigned_cluster));
        for g in &r.gates {
            s.push_str(&format!(",{g}"));
        }
        s.push('\n');
    }
    s
}

fn parse_field<T: std::str::FromStr>(v: Option<&str>, line: usize, what: &str) -> Result<T> {
    v.and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::invalid(format!("line {line}: bad or missing {what}")))
}

pub fn parse_aspace_csv(text: &str) -> Result<Vec<AspaceRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty A-space csv"))?;
    if !header.starts_with("sample_id,true_subset,assigned_cluster") {
        return Err(Error::invalid(format!("unexpected A-space header `{header}`")));
    }
    let dim = header.split(',').count() - 3;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ln = i + 2;
        let mut f = line.split(',');
        let sample_id = parse_field(f.next(), ln, "sample_id")?;
        let true_subset = parse_field(f.next(), ln, "true_subset")?;
        let assigned_cluster = parse_field(f.next(), ln, "assigned_cluster")?;
        let gates = f.map(|v| parse_field(Some(v), ln, "gate")).collect::<Result<Vec<f64>>>()?;
        if gates.len() != dim {
            return Err(Error::invalid(format!("line {ln}: {} gates, header has {dim}", gates.len())));
        }
        rows.push(AspaceRow {
            sample_id,
            true_subset,
            assigned_cluster,
            gates,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeInfo {
    pub index: usize,
    #[serde(flatten)]
    pub edge: Edge,
    pub target_scale: usize,
    pub cost: f64,
}

/// Sidecar describing what each `g_i` column is.
pub fn edges_json(lattice: &Lattice) -> String {
    let s = lattice.config().num_scales;
    let info: Vec<EdgeInfo> = lattice
        .edges()
        .iter()
        .zip(lattice.costs().costs())
        .enumerate()
        .map(|(index, (e, &cost))| EdgeInfo {
            index,
            edge: *e,
            target_scale: e.target_scale(s),
            cost,
        })
        .collect();
    serde_json::to_string_pretty(&info).expect("edges serialize") + "\n"
}

/// Projects `points` onto the two leading principal axes of their
/// covariance. Each axis is signed so its largest-magnitude loading is
/// positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs >= 2 points, got {n}")));
    }
    let dim = points[0].len();
    if dim < 2 {
        return Err(Error::invalid("PCA to 2-D needs at least 2 dimensions"));
    }
    let mean: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

/// `sample_id,pc1,pc2,assigned_cluster`.
pub fn pca_csv(rows: &[AspaceRow], projection: &[[f64; 2]]) -> String {
    let mut s = String::from("sample_id,pc1,pc2,assigned_cluster\n");
    for (r, p) in rows.iter().zip(projection) {
        s.push_str(&format!("{},{},{},{}\n", r.sample_id, p[0], p[1], r.assigned_cluster));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeConfig;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            AspaceRow {
                sample_id: 7,
                true_subset: 1,
                assigned_cluster: 0,
                gates: vec![0.1, 1.0 / 3.0],
            },
            AspaceRow {
                sample_id: 9,
                true_subset: 0,
                assigned_cluster: 1,
                gates: vec![0.0, 0.999],
            },
        ];
        let text = aspace_csv(&rows, 2);
        assert!(text.starts_with("sample_id,true_subset,assigned_cluster,g_0,g_1\n"));
        assert_eq!(parse_aspace_csv(&text).unwrap(), rows);
        assert!(parse_aspace_csv("sample_id,true_subset,assigned_cluster,g_0\n1,0,0\n").is_err());
    }

    #[test]
    fn pca_of_centered_2d_points_is_a_rotation() {
        let pts = vec![vec![2.0, 0.1], vec![-2.0, -0.1], vec![0.5, -1.0], vec![-0.5, 1.0]];
        let proj = pca_2d(&pts).unwrap();
        for (p, q) in pts.iter().zip(&proj) {
            let r0 = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let r1 = (q[0] * q[0] + q[1] * q[1]).sqrt();
            assert!((r0 - r1).abs() < 1e-12);
        }
        // pairwise distances survive too
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let e = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((d(proj[0], proj[2]) - e(&pts[0], &pts[2])).abs() < 1e-12);
    }

    #[test]
    fn pca_first_axis_carries_most_variance() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                vec![t, 0.1 * (i % 3) as f64, 0.0]
            })
            .collect();
        let proj = pca_2d(&pts).unwrap();
        let var = |k: usize| proj.iter().map(|p| p[k] * p[k]).sum::<f64>();
        assert!(var(0) > 100.0 * var(1));
    }

    #[test]
    fn edges_sidecar_lists_every_gate() {
        let lattice = Lattice::new(LatticeConfig::default()).unwrap();
        let info: Vec<EdgeInfo> = serde_json::from_str(&edges_json(&lattice)).unwrap();
        assert_eq!(info.len(), 28);
        assert_eq!(info[0].index, 0);
        assert!(info.iter().all(|e| e.cost > 0.0));
    }
}
