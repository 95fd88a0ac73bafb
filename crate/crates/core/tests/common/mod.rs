#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use divdr::autodiff::{grad_check, Tape, Tensor, Var};
use divdr::clustering::CenterRegistry;
use divdr::harness::ExperimentConfig;
use divdr::loss::{clustering_loss, clustering_loss_value, BatchSigma, DistanceForm};
use divdr::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Values at least `gap` away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, values(rng, n))
}

/// A smooth scalar readout of any tensor.
fn readout(t: &mut Tape, x: Var) -> Var {
    t.log_sum_exp(x)
}

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random program per tape operation, named after the op under test.
pub fn op_programs(seed: u64) -> Vec<(&'static str, Program, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n) = (dim(1, 4), dim(1, 4), dim(1, 4));
    let (ci, co, h, w) = (dim(1, 3), dim(1, 3), dim(2, 5), dim(2, 5));
    let (c2, h2, w2) = (dim(1, 3), 2 * dim(1, 3), 2 * dim(1, 3));
    let (len, classes) = (dim(2, 9), dim(2, 4));
    let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..classes)).collect();
    let index = rng.random_range(0..len);
    let shift = values(&mut rng, len);

    let mut out: Vec<(&'static str, Program, Vec<Tensor>)> = Vec::new();
    out.push((
        "matmul",
        Box::new(|t, p| {
            let y = t.matmul(p[0], p[1])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])],
    ));
    out.push((
        "conv3x3",
        Box::new(|t, p| {
            let y = t.conv3x3(p[0], p[1], Some(p[2]))?;
            Ok(readout(t, y))
        }),
        vec![
            rand_tensor(&mut rng, &[ci, h, w]),
            rand_tensor(&mut rng, &[co, ci, 3, 3]),
            rand_tensor(&mut rng, &[co]),
        ],
    ));
    out.push((
        "add",
        Box::new(|t, p| {
            let y = t.add(p[0], p[1])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[len]), rand_tensor(&mut rng, &[len])],
    ));
    out.push((
        "mul_scalar",
        Box::new(|t, p| {
            let y = t.mul_scalar(p[0], p[1])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[len]), rand_tensor(&mut rng, &[1])],
    ));
    out.push((
        "relu",
        Box::new(|t, p| {
            let y = t.relu(p[0]);
            Ok(readout(t, y))
        }),
        vec![tensor(&[len], off_zero(&mut rng, len, 0.05))],
    ));
    out.push((
        "sigmoid",
        Box::new(|t, p| {
            let y = t.sigmoid(p[0]);
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[len])],
    ));
    out.push(("mean", Box::new(|t, p| Ok(t.mean(p[0]))), vec![rand_tensor(&mut rng, &[ci, h, w])]));
    out.push((
        "global_avg_pool",
        Box::new(|t, p| {
            let y = t.global_avg_pool(p[0])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[ci, h, w])],
    ));
    out.push((
        "upsample2x_nearest",
        Box::new(|t, p| {
            let y = t.upsample2x(p[0])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[ci, h, w])],
    ));
    out.push((
        "downsample2x_avg",
        Box::new(|t, p| {
            let y = t.downsample2x(p[0])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[c2, h2, w2])],
    ));
    out.push((
        "concat_channels",
        Box::new(|t, p| {
            let y = t.concat(&[p[0], p[1]])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[ci, h, w]), rand_tensor(&mut rng, &[co, h, w])],
    ));
    out.push((
        "softmax_cross_entropy",
        Box::new(move |t, p| t.softmax_cross_entropy(p[0], &labels)),
        vec![rand_tensor(&mut rng, &[classes, h, w])],
    ));
    out.push(("l2_norm", Box::new(|t, p| Ok(t.l2_norm(p[0]))), vec![rand_tensor(&mut rng, &[len])]));
    out.push(("log_sum_exp", Box::new(|t, p| Ok(t.log_sum_exp(p[0]))), vec![rand_tensor(&mut rng, &[len])]));
    out.push((
        "scale",
        Box::new(|t, p| {
            let y = t.scale(p[0], -0.7);
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[len])],
    ));
    out.push((
        "add_const",
        Box::new(move |t, p| {
            let y = t.add_const(p[0], &shift)?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[len])],
    ));
    out.push((
        "reshape",
        Box::new(move |t, p| {
            let y = t.reshape(p[0], &[len, 1])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[len])],
    ));
    out.push((
        "select",
        Box::new(move |t, p| {
            let s = t.select(p[0], index)?;
            let y = t.mul_scalar(s, s)?;
            Ok(t.sigmoid(y))
        }),
        vec![rand_tensor(&mut rng, &[len])],
    ));
    out.push((
        "channel_bias",
        Box::new(|t, p| {
            let y = t.channel_bias(p[0], p[1])?;
            Ok(readout(t, y))
        }),
        vec![rand_tensor(&mut rng, &[ci, h, w]), rand_tensor(&mut rng, &[ci])],
    ));
    out
}

/// A random clustering-loss configuration whose hinge and nearest-center
/// choice are both at least `gap` away from switching.
pub struct ClusterCase {
    pub a: Vec<f64>,
    pub registry: CenterRegistry,
    pub sigma_sq: f64,
    pub alpha: f64,
    pub form: DistanceForm,
}

pub fn cluster_case(seed: u64, gap: f64) -> ClusterCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    loop {
        let dim = rng.random_range(2..=8);
        let k = rng.random_range(2..=4);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let sigma_sq = rng.random_range(0.05..1.0);
        let alpha = rng.random_range(0.1..1.5);
        let form = if rng.random_bool(0.5) {
            DistanceForm::Euclidean
        } else {
            DistanceForm::Squared
        };
        let mut d: Vec<f64> = centers
            .iter()
            .map(|c| c.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        let registry = CenterRegistry::new(centers).unwrap();
        let sigma = BatchSigma::new(sigma_sq, 1).unwrap();
        let near_kink = {
            // the hinge argument, recovered by lowering alpha until relu opens
            let at = |alpha: f64| clustering_loss_value(&a, &registry, sigma, alpha, form).unwrap();
            let v = at(alpha);
            v > 0.0 && v < gap || v == 0.0 && at(alpha + gap) > 0.0
        };
        if d[1] - d[0] > gap && d[0] > gap && !near_kink {
            return ClusterCase {
                a,
                registry,
                sigma_sq,
                alpha,
                form,
            };
        }
    }
}

/// Max relative error of every op and of the clustering loss at `seed`.
pub fn gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut errs: Vec<(&'static str, f64)> = op_programs(seed)
        .into_iter()
        .map(|(name, f, params)| {
            let r = grad_check(f, &params, FD_STEP, FD_TOL).unwrap();
            (name, r.max_rel_error)
        })
        .collect();
    let case = cluster_case(seed, 1e-3);
    let sigma = BatchSigma::new(case.sigma_sq, 1).unwrap();
    let r = grad_check(
        |t, p| clustering_loss(t, p[0], &case.registry, sigma, case.alpha, case.form),
        &[Tensor::from_vec(case.a.clone())],
        FD_STEP,
        FD_TOL,
    )
    .unwrap();
    errs.push(("clustering_loss", r.max_rel_error));
    errs
}

/// A config small enough for a training run to take well under a second.
pub fn tiny_config(k: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::with_k(k);
    c.name = "tiny".into();
    c.num_layers = 2;
    c.num_scales = 2;
    c.channels = 2;
    c.gate_hidden = 2;
    c.total_steps = 12;
    c.batch_size = 2;
    c.warmup_steps = 4;
    c.kmeans_interval = 4;
    c.eval_interval = 6;
    c.n_train = 16;
    c.n_val = 8;
    c
}
