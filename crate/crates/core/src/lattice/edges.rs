use serde::{Deserialize, Serialize};

use super::LatticeConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// To the next finer scale (`s - 1`), nearest-neighbour upsampled.
    Up,
    Keep,
    /// To the next coarser scale (`s + 1`), 2x2 average pooled.
    Down,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Up, Direction::Keep, Direction::Down];

    /// Destination scale, or `None` if it falls outside `0..num_scales`.
    pub fn target(self, scale: usize, num_scales: usize) -> Option<usize> {
        match self {
            Direction::Up => scale.checked_sub(1),
            Direction::Keep => Some(scale),
            Direction::Down => (scale + 1 < num_scales).then_some(scale + 1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Keep => "keep",
            Direction::Down => "down",
        }
    }
}

/// One gate of the lattice: the output of node `(layer, scale)` routed in
/// `direction` to layer `layer + 1` (or to the fusion head after the last
/// layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub layer: usize,
    pub scale: usize,
    pub direction: Direction,
}

impl Edge {
    pub fn target_scale(&self, num_scales: usize) -> usize {
        self.direction
            .target(self.scale, num_scales)
            .expect("enumerated edges stay in range")
    }
}

/// All lattice edges in A-space order: layer-major, then scale ascending,
/// then `up < keep < down`. Out-of-range directions at the boundary scales
/// are omitted.
pub fn enumerate_edges(config: &LatticeConfig) -> Vec<Edge> {
    let mut edges = Vec::with_capacity(config.gate_dim());
    for layer in 0..config.num_layers {
        for scale in 0..config.num_scales {
            for direction in Direction::ALL {
                if direction.target(scale, config.num_scales).is_some() {
                    edges.push(Edge {
                        layer,
                        scale,
                        direction,
                    });
                }
            }
        }
    }
    edges
}

/// Inverse of [`enumerate_edges`].
pub fn edge_position(config: &LatticeConfig, edge: &Edge) -> Option<usize> {
    if edge.layer >= config.num_layers
        || edge.scale >= config.num_scales
        || edge.direction.target(edge.scale, config.num_scales).is_none()
    {
        return None;
    }
    let per_layer: usize = (0..config.num_scales).map(|s| config.directions_at(s)).sum();
    let before_scale: usize = (0..edge.scale).map(|s| config.directions_at(s)).sum();
    let within = Direction::ALL
        .iter()
        .filter(|d| d.target(edge.scale, config.num_scales).is_some())
        .position(|d| *d == edge.direction)?;
    Some(edge.layer * per_layer + before_scale + within)
}

/// Gate activations `A(x)` for one input, in [`enumerate_edges`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateActivationMap {
    values: Vec<f64>,
}

impl GateActivationMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("gate activation {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Per-edge compute cost.
///
/// An edge pays for the 3x3 cell at its destination resolution
/// (`H * W * C^2 * 9`) plus its resampling: `H * W * C` for a nearest
/// upsample and `4 * H * W * C` for a 2x2 average pool, all at the
/// destination resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCostTable {
    costs: Vec<f64>,
}

impl EdgeCostTable {
    pub fn for_lattice(config: &LatticeConfig, edges: &[Edge]) -> Self {
        let c = config.channels as f64;
        let costs = edges
            .iter()
            .map(|e| {
                let (h, w) = config.spatial(e.target_scale(config.num_scales));
                let area = (h * w) as f64;
                let resample = match e.direction {
                    Direction::Up => area * c,
                    Direction::Keep => 0.0,
                    Direction::Down => 4.0 * area * c,
                };
                area * c * c * 9.0 + resample
            })
            .collect();
        Self { costs }
    }

    pub fn from_costs(costs: Vec<f64>) -> Result<Self> {
        if costs.is_empty() || costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::invalid("edge costs must be finite and strictly positive"));
        }
        Ok(Self { costs })
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn total(&self) -> f64 {
        self.costs.iter().sum()
    }

    /// Costs divided by their sum.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        self.costs.iter().map(|c| c / total).collect()
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// `sum_e A_e * cost_e / sum_e cost_e`.
pub fn expected_cost(gates: &[f64], costs: &EdgeCostTable) -> Result<f64> {
    if gates.len() != costs.len() {
        return Err(Error::Shape {
            op: "expected_cost",
            lhs: vec![gates.len()],
            rhs: vec![costs.len()],
        });
    }
    let weighted: f64 = gates.iter().zip(costs.costs()).map(|(a, c)| a * c).sum();
    Ok(weighted / costs.total())
}

/// Cost of the edges kept after pruning every gate below `threshold`,
/// normalized like [`expected_cost`].
pub fn pruned_cost(gates: &[f64], costs: &EdgeCostTable, threshold: f64) -> Result<f64> {
    if gates.len() != costs.len() {
        return Err(Error::Shape {
            op: "pruned_cost",
            lhs: vec![gates.len()],
            rhs: vec![costs.len()],
        });
    }
    let kept: f64 = gates
        .iter()
        .zip(costs.costs())
        .filter(|(a, _)| **a >= threshold)
        .map(|(_, c)| c)
        .sum();
    Ok(kept / costs.total())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, scales: usize) -> LatticeConfig {
        LatticeConfig {
            num_layers: layers,
            num_scales: scales,
            ..LatticeConfig::default()
        }
    }

    #[test]
    fn single_node_has_one_keep_edge() {
        let edges = enumerate_edges(&cfg(1, 1));
        assert_eq!(
            edges,
            vec![Edge {
                layer: 0,
                scale: 0,
                direction: Direction::Keep
            }]
        );
    }

    #[test]
    fn default_lattice_has_28_edges() {
        let c = cfg(4, 3);
        let edges = enumerate_edges(&c);
        assert_eq!(edges.len(), 28);
        assert_eq!(c.gate_dim(), 28);
        // top scale keep+down, middle all three, bottom up+keep
        let dirs: Vec<_> = edges[..7].iter().map(|e| (e.scale, e.direction)).collect();
        use Direction::*;
        assert_eq!(
            dirs,
            vec![(0, Keep), (0, Down), (1, Up), (1, Keep), (1, Down), (2, Up), (2, Keep)]
        );
    }

    #[test]
    fn enumeration_round_trips() {
        for (l, s) in [(1, 1), (2, 2), (4, 3), (3, 5)] {
            let c = cfg(l, s);
            for (i, e) in enumerate_edges(&c).iter().enumerate() {
                assert_eq!(edge_position(&c, e), Some(i));
            }
            let outside = Edge {
                layer: 0,
                scale: 0,
                direction: Direction::Up,
            };
            assert_eq!(edge_position(&c, &outside), None);
        }
    }

    #[test]
    fn costs_are_positive_and_depend_on_edge_only() {
        let c = cfg(4, 3);
        let edges = enumerate_edges(&c);
        let table = EdgeCostTable::for_lattice(&c, &edges);
        assert!(table.costs().iter().all(|&v| v > 0.0));
        // layer does not matter
        assert_eq!(table.costs()[..7], table.costs()[21..]);
        // keep at scale 0: 32*32*64*9
        assert_eq!(table.costs()[0], 1024.0 * 64.0 * 9.0);
    }

    #[test]
    fn expected_cost_examples() {
        let t = EdgeCostTable::from_costs(vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(expected_cost(&[0.0; 3], &t).unwrap(), 0.0);
        assert_eq!(expected_cost(&[1.0; 3], &t).unwrap(), 1.0);
        assert!((expected_cost(&[1.0, 0.5, 0.0], &t).unwrap() - 0.625).abs() < 1e-15);
        assert!(expected_cost(&[1.0], &t).is_err());
    }

    #[test]
    fn pruning_threshold() {
        let t = EdgeCostTable::from_costs(vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(pruned_cost(&[0.05, 0.5, 0.2], &t, 0.1).unwrap(), 0.5);
    }

    #[test]
    fn gate_map_range_is_checked() {
        assert!(GateActivationMap::new(vec![0.0, 1.0, 0.3]).is_ok());
        assert!(GateActivationMap::new(vec![1.5]).is_err());
        assert!(GateActivationMap::new(vec![f64::NAN]).is_err());
    }
}
