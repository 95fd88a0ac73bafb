//! Lattice parameters and the checkpoint file format.
//!
//! Checkpoint layout (UTF-8 text, version 1):
//!
//! ```text
//! divdr-checkpoint 1
//! <entry count>
//! <name>\t<d0>x<d1>x...\t<v0> <v1> ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a write/read
//! cycle is bit-exact. Entry names follow `stem.{w,b}`,
//! `node.<layer>.<scale>.cell.{w,b}`,
//! `node.<layer>.<scale>.gate.fc1.{w,b}`,
//! `node.<layer>.<scale>.gate.fc2.{w,b}` and `head.{w,b}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::LatticeConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub const CHECKPOINT_MAGIC: &str = "divdr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams<T> {
    pub cell_w: T,
    pub cell_b: T,
    pub fc1_w: T,
    pub fc1_b: T,
    pub fc2_w: T,
    pub fc2_b: T,
}

/// Every parameter of the lattice, generic over the storage (`Tensor` for
/// values, `Var` once bound to a tape, `Vec<f64>` for optimizer state).
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeParams<T> {
    pub stem_w: T,
    pub stem_b: T,
    /// Layer-major, scale ascending.
    pub nodes: Vec<NodeParams<T>>,
    pub head_w: T,
    pub head_b: T,
    num_scales: usize,
}

pub type ParamStore = LatticeParams<Tensor>;

impl<T> LatticeParams<T> {
    pub fn node(&self, layer: usize, scale: usize) -> &NodeParams<T> {
        &self.nodes[layer * self.num_scales + scale]
    }

    pub fn num_scales(&self) -> usize {
        self.num_scales
    }

    /// Stable `(name, value)` listing in checkpoint order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![("stem.w".to_string(), &self.stem_w), ("stem.b".to_string(), &self.stem_b)];
        for (i, n) in self.nodes.iter().enumerate() {
            let p = format!("node.{}.{}", i / self.num_scales, i % self.num_scales);
            out.push((format!("{p}.cell.w"), &n.cell_w));
            out.push((format!("{p}.cell.b"), &n.cell_b));
            out.push((format!("{p}.gate.fc1.w"), &n.fc1_w));
            out.push((format!("{p}.gate.fc1.b"), &n.fc1_b));
            out.push((format!("{p}.gate.fc2.w"), &n.fc2_w));
            out.push((format!("{p}.gate.fc2.b"), &n.fc2_b));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.stem_w, &mut self.stem_b];
        for n in &mut self.nodes {
            out.extend([
                &mut n.cell_w,
                &mut n.cell_b,
                &mut n.fc1_w,
                &mut n.fc1_b,
                &mut n.fc2_w,
                &mut n.fc2_b,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LatticeParams<U> {
        LatticeParams {
            stem_w: f(&self.stem_w),
            stem_b: f(&self.stem_b),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeParams {
                    cell_w: f(&n.cell_w),
                    cell_b: f(&n.cell_b),
                    fc1_w: f(&n.fc1_w),
                    fc1_b: f(&n.fc1_b),
                    fc2_w: f(&n.fc2_w),
                    fc2_b: f(&n.fc2_b),
                })
                .collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
            num_scales: self.num_scales,
        }
    }
}

fn shapes(config: &LatticeConfig) -> LatticeParams<Vec<usize>> {
    let c = config.channels;
    let nodes = (0..config.num_layers)
        .flat_map(|_| 0..config.num_scales)
        .map(|s| {
            let dirs = config.directions_at(s);
            NodeParams {
                cell_w: vec![c, c, 3, 3],
                cell_b: vec![c],
                fc1_w: vec![config.gate_hidden, c],
                fc1_b: vec![config.gate_hidden],
                fc2_w: vec![dirs, config.gate_hidden],
                fc2_b: vec![dirs],
            }
        })
        .collect();
    LatticeParams {
        stem_w: vec![c, config.input_channels, 3, 3],
        stem_b: vec![c],
        nodes,
        head_w: vec![config.num_classes, config.num_scales * c],
        head_b: vec![config.num_classes],
        num_scales: config.num_scales,
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl ParamStore {
    /// He-normal weights, zero biases, drawn from the `Init` substream.
    pub fn init(config: &LatticeConfig, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Init, 0);
        let shapes = shapes(config);
        let mut weight = |shape: &Vec<usize>| {
            let fan_in: usize = shape[1..].iter().product();
            normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
        };
        let stem_w = weight(&shapes.stem_w);
        let mut nodes = Vec::with_capacity(shapes.nodes.len());
        for n in &shapes.nodes {
            nodes.push(NodeParams {
                cell_w: weight(&n.cell_w),
                cell_b: Tensor::zeros(&n.cell_b),
                fc1_w: weight(&n.fc1_w),
                fc1_b: Tensor::zeros(&n.fc1_b),
                fc2_w: weight(&n.fc2_w),
                fc2_b: Tensor::zeros(&n.fc2_b),
            });
        }
        let head_w = weight(&shapes.head_w);
        LatticeParams {
            stem_w,
            stem_b: Tensor::zeros(&shapes.stem_b),
            nodes,
            head_w,
            head_b: Tensor::zeros(&shapes.head_b),
            num_scales: config.num_scales,
        }
    }

    pub fn zeros(config: &LatticeConfig) -> Self {
        shapes(config).map(|s| Tensor::zeros(s))
    }

    pub fn num_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.entries().iter().map(|(_, t)| t.sum_sq()).sum()
    }

    /// Sets every gate's output bias to `bias`, e.g. to force gates open
    /// (large positive) or shut (large negative).
    pub fn set_gate_bias(&mut self, bias: f64) {
        for n in &mut self.nodes {
            n.fc2_b.data_mut().fill(bias);
        }
    }

    pub fn check_matches(&self, config: &LatticeConfig) -> Result<()> {
        let expected = shapes(config);
        let want = expected.entries();
        let have = self.entries();
        if want.len() != have.len() {
            return Err(Error::invalid(format!(
                "parameter count {} does not match lattice ({})",
                have.len(),
                want.len()
            )));
        }
        for ((name, shape), (_, t)) in want.iter().zip(&have) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "{name}: lattice expects shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let entries = self.entries();
        let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{}\n", entries.len());
        for (name, t) in entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{name}\t{}\t{}\n", dims.join("x"), vals.join(" ")));
        }
        s
    }

    pub fn from_checkpoint_str(config: &LatticeConfig, text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        match header.split_once(' ') {
            Some((CHECKPOINT_MAGIC, v)) if v == CHECKPOINT_VERSION.to_string() => {}
            _ => return Err(bad(format!("unsupported header `{header}`"))),
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("missing entry count".into()))?;
        let mut table = BTreeMap::new();
        for line in lines.by_ref().take(count) {
            let mut parts = line.split('\t');
            let (Some(name), Some(dims), Some(vals)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("malformed entry `{line:.40}`")));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("{name}: bad shape: {e}")))?;
            let data = vals
                .split(' ')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("{name}: bad value: {e}")))?;
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            table.insert(name.to_string(), t);
        }
        if table.len() != count {
            return Err(bad(format!("expected {count} entries, found {}", table.len())));
        }
        let mut store = Self::zeros(config);
        let names: Vec<String> = store.entries().into_iter().map(|(n, _)| n).collect();
        if names.len() != count {
            return Err(bad(format!(
                "checkpoint has {count} entries but the lattice needs {}",
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(store.values_mut()) {
            let t = table
                .remove(name)
                .ok_or_else(|| bad(format!("missing entry `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "{name}: shape {:?}, lattice expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_checkpoint_string().as_bytes())
    }

    pub fn load(config: &LatticeConfig, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_checkpoint_str(config, &text, path)
    }
}

/// Writes through a sibling temp file and renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming onto {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_the_documented_scheme() {
        let cfg = LatticeConfig {
            num_layers: 2,
            num_scales: 2,
            ..LatticeConfig::default()
        };
        let p = ParamStore::init(&cfg, 0);
        let names: Vec<String> = p.entries().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "stem.w");
        assert_eq!(names[2], "node.0.0.cell.w");
        assert_eq!(names[6], "node.0.0.gate.fc2.w");
        assert!(names.contains(&"node.1.1.gate.fc1.b".to_string()));
        assert_eq!(names.last().unwrap(), "head.b");
        assert_eq!(names.len(), 2 + 4 * 6 + 2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = LatticeConfig::default();
        let p = ParamStore::init(&cfg, 3);
        let text = p.to_checkpoint_string();
        let q = ParamStore::from_checkpoint_str(&cfg, &text, Path::new("mem")).unwrap();
        for ((_, a), (_, b)) in p.entries().iter().zip(q.entries()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn checkpoint_rejects_other_lattices() {
        let p = ParamStore::init(&LatticeConfig::default(), 0);
        let other = LatticeConfig {
            channels: 4,
            ..LatticeConfig::default()
        };
        let err = ParamStore::from_checkpoint_str(&other, &p.to_checkpoint_string(), Path::new("x"));
        assert!(err.is_err());
        let err = ParamStore::from_checkpoint_str(&other, "garbage\n", Path::new("x"));
        assert!(matches!(err, Err(Error::Format { .. })));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = LatticeConfig::default();
        assert_eq!(ParamStore::init(&cfg, 1), ParamStore::init(&cfg, 1));
        assert_ne!(ParamStore::init(&cfg, 1), ParamStore::init(&cfg, 2));
    }
}
