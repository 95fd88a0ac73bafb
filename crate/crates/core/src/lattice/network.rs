use super::edges::{enumerate_edges, Direction, Edge, EdgeCostTable, GateActivationMap};
use super::params::{LatticeParams, NodeParams, ParamStore};
use super::LatticeConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The gated multi-scale network.
///
/// The stem output is average-pooled down to every scale to form the
/// layer-0 node inputs. Each node applies `relu(conv3x3)` and a gate
/// `sigmoid(fc2(relu(fc1(gap(y)))))` with one output per direction; the
/// input of node `(l + 1, s)` is the gate-weighted sum of the resampled
/// outputs routed to scale `s`. After the last layer the routed sums at
/// every scale are upsampled to input resolution, concatenated and mapped
/// to class logits by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Lattice {
    config: LatticeConfig,
    edges: Vec<Edge>,
    costs: EdgeCostTable,
}

#[derive(Debug, Clone, Copy)]
pub struct LatticeOutput {
    /// `(num_classes, H, W)`.
    pub logits: Var,
    /// `(gate_dim)`, A-space order.
    pub gates: Var,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Tensor,
    pub gates: GateActivationMap,
}

impl Lattice {
    pub fn new(config: LatticeConfig) -> Result<Self> {
        config.validate()?;
        let edges = enumerate_edges(&config);
        let costs = EdgeCostTable::for_lattice(&config, &edges);
        Ok(Self { config, edges, costs })
    }

    pub fn config(&self) -> &LatticeConfig {
        &self.config
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn costs(&self) -> &EdgeCostTable {
        &self.costs
    }

    pub fn gate_dim(&self) -> usize {
        self.edges.len()
    }

    /// Places `params` on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, params: &ParamStore, trainable: bool) -> LatticeParams<Var> {
        params.map(|t| tape.leaf(t.clone(), trainable))
    }

    /// Per-direction gate values in `(0, 1)` for one node's features
    /// `(C, H_s, W_s)`.
    pub fn gate_forward(&self, tape: &mut Tape, node: &NodeParams<Var>, features: Var) -> Result<Var> {
        let c = self.config.channels;
        let pooled = tape.global_avg_pool(features)?;
        let pooled = tape.reshape(pooled, &[c, 1])?;
        let hidden = tape.matmul(node.fc1_w, pooled)?;
        let hidden = tape.channel_bias(hidden, node.fc1_b)?;
        let hidden = tape.relu(hidden);
        let out = tape.matmul(node.fc2_w, hidden)?;
        let out = tape.channel_bias(out, node.fc2_b)?;
        let out = tape.sigmoid(out);
        let dirs = tape.value(out).len();
        tape.reshape(out, &[dirs])
    }

    pub fn forward(&self, tape: &mut Tape, params: &LatticeParams<Var>, x: &Tensor) -> Result<LatticeOutput> {
        let cfg = &self.config;
        let expected = [cfg.input_channels, cfg.height, cfg.width];
        if x.shape() != expected {
            return Err(Error::Shape {
                op: "lattice_forward",
                lhs: expected.to_vec(),
                rhs: x.shape().to_vec(),
            });
        }

        let input = tape.constant(x.clone());
        let stem = tape.conv3x3(input, params.stem_w, Some(params.stem_b))?;
        let stem = tape.relu(stem);
        let mut inputs = Vec::with_capacity(cfg.num_scales);
        inputs.push(stem);
        for s in 1..cfg.num_scales {
            let prev = inputs[s - 1];
            inputs.push(tape.downsample2x(prev)?);
        }

        let mut gate_blocks = Vec::with_capacity(cfg.num_layers * cfg.num_scales);
        for layer in 0..cfg.num_layers {
            let mut routed: Vec<Option<Var>> = vec![None; cfg.num_scales];
            for (scale, &node_in) in inputs.iter().enumerate() {
                let node = params.node(layer, scale);
                let y = tape.conv3x3(node_in, node.cell_w, Some(node.cell_b))?;
                let y = tape.relu(y);
                let gates = self.gate_forward(tape, node, y)?;
                gate_blocks.push(gates);

                let valid = Direction::ALL
                    .iter()
                    .filter_map(|d| d.target(scale, cfg.num_scales).map(|t| (*d, t)));
                for (slot, (dir, target)) in valid.enumerate() {
                    let moved = match dir {
                        Direction::Up => tape.upsample2x(y)?,
                        Direction::Keep => y,
                        Direction::Down => tape.downsample2x(y)?,
                    };
                    let g = tape.select(gates, slot)?;
                    let contribution = tape.mul_scalar(moved, g)?;
                    routed[target] = Some(match routed[target] {
                        None => contribution,
                        Some(acc) => tape.add(acc, contribution)?,
                    });
                }
            }
            inputs = routed
                .into_iter()
                .map(|r| r.expect("every scale receives its own keep edge"))
                .collect();
        }

        let mut upsampled = Vec::with_capacity(cfg.num_scales);
        for (scale, &z) in inputs.iter().enumerate() {
            let mut z = z;
            for _ in 0..scale {
                z = tape.upsample2x(z)?;
            }
            upsampled.push(z);
        }
        let fused = tape.concat(&upsampled)?;
        let pixels = cfg.height * cfg.width;
        let flat = tape.reshape(fused, &[cfg.num_scales * cfg.channels, pixels])?;
        let logits = tape.matmul(params.head_w, flat)?;
        let logits = tape.channel_bias(logits, params.head_b)?;
        let logits = tape.reshape(logits, &[cfg.num_classes, cfg.height, cfg.width])?;
        let gates = tape.concat(&gate_blocks)?;
        debug_assert_eq!(tape.value(gates).len(), self.gate_dim());
        Ok(LatticeOutput { logits, gates })
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, params: &ParamStore, x: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, false);
        let out = self.forward(&mut tape, &bound, x)?;
        let logits = tape.value(out.logits).clone();
        let gates = GateActivationMap::new(tape.value(out.gates).data().to_vec())?;
        Ok(Inference { logits, gates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::lattice::expected_cost;

    fn input(cfg: &LatticeConfig, seed: u64) -> Tensor {
        let n = cfg.input_channels * cfg.height * cfg.width;
        let data = (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 1000.0)
            .collect();
        Tensor::new(vec![cfg.input_channels, cfg.height, cfg.width], data).unwrap()
    }

    #[test]
    fn default_shapes() {
        let cfg = LatticeConfig::default();
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let params = ParamStore::init(&cfg, 0);
        let out = lattice.infer(&params, &input(&cfg, 0)).unwrap();
        assert_eq!(out.logits.shape(), &[2, 32, 32]);
        assert_eq!(out.gates.len(), 28);
        assert!(out.gates.values().iter().all(|g| (0.0..=1.0).contains(g)));
    }

    #[test]
    fn input_mismatch_is_rejected() {
        let cfg = LatticeConfig::default();
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let params = ParamStore::init(&cfg, 0);
        let bad = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(
            lattice.infer(&params, &bad),
            Err(Error::Shape { op: "lattice_forward", .. })
        ));
    }

    #[test]
    fn zero_gate_weights_give_half() {
        let cfg = LatticeConfig::default();
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let mut params = ParamStore::init(&cfg, 0);
        for n in &mut params.nodes {
            n.fc1_w.data_mut().fill(0.0);
            n.fc2_w.data_mut().fill(0.0);
        }
        let out = lattice.infer(&params, &input(&cfg, 1)).unwrap();
        assert!(out.gates.values().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn saturated_bias_turns_gates_off() {
        let cfg = LatticeConfig::default();
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let mut params = ParamStore::init(&cfg, 0);
        for n in &mut params.nodes {
            n.fc2_w.data_mut().fill(0.0);
            n.fc2_b.data_mut().fill(-20.0);
        }
        let out = lattice.infer(&params, &input(&cfg, 1)).unwrap();
        assert!(out.gates.values().iter().all(|&g| g < 1e-8));
    }

    #[test]
    fn gates_are_deterministic() {
        let cfg = LatticeConfig::default();
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let params = ParamStore::init(&cfg, 0);
        let x = input(&cfg, 2);
        let a = lattice.infer(&params, &x).unwrap();
        let b = lattice.infer(&params, &x).unwrap();
        assert_eq!(a.gates, b.gates);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn open_gates_cost_everything() {
        let cfg = LatticeConfig::default();
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let mut params = ParamStore::init(&cfg, 0);
        params.set_gate_bias(50.0);
        for n in &mut params.nodes {
            n.fc2_w.data_mut().fill(0.0);
        }
        let out = lattice.infer(&params, &input(&cfg, 3)).unwrap();
        assert!(out.gates.values().iter().all(|&g| g == 1.0));
        let c = expected_cost(out.gates.values(), lattice.costs()).unwrap();
        assert_eq!(c * lattice.costs().total(), lattice.costs().total());
    }

    #[test]
    fn closed_gates_leave_the_head_bias() {
        let cfg = LatticeConfig::default();
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let mut params = ParamStore::init(&cfg, 0);
        for n in &mut params.nodes {
            n.fc2_w.data_mut().fill(0.0);
        }
        params.set_gate_bias(-60.0);
        params.head_b = Tensor::from_vec(vec![0.25, -0.5]);
        let out = lattice.infer(&params, &input(&cfg, 4)).unwrap();
        let plane = 32 * 32;
        for (i, v) in out.logits.data().iter().enumerate() {
            assert!(v.is_finite());
            let bias = if i < plane { 0.25 } else { -0.5 };
            assert!((v - bias).abs() < 1e-12, "{v} vs {bias}");
        }
    }

    #[test]
    fn lattice_gradients_match_finite_differences() {
        let cfg = LatticeConfig {
            num_layers: 2,
            num_scales: 2,
            channels: 4,
            num_classes: 2,
            input_channels: 1,
            height: 8,
            width: 8,
            gate_hidden: 4,
        };
        let lattice = Lattice::new(cfg.clone()).unwrap();
        let params = ParamStore::init(&cfg, 5);
        let x = input(&cfg, 5);
        let labels: Vec<usize> = (0..64).map(|i| (i / 3) % 2).collect();
        let template = params.clone();
        let flat: Vec<Tensor> = params.entries().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let mut it = vars.iter().copied();
                let bound = template.map(|_| it.next().unwrap());
                let out = lattice.forward(tape, &bound, &x)?;
                let task = tape.softmax_cross_entropy(out.logits, &labels)?;
                let cost = tape.mean(out.gates);
                let s = tape.scale(cost, 0.3);
                tape.add(task, s)
            },
            &flat,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }
}
