use std::fs;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::metrics::{read_metrics, write_metrics, Record, RefitRecord, RunMetrics, StepRecord};
use super::{lr_schedule, sgd_step, TrainConfig};
use crate::autodiff::Tape;
use crate::clustering::{kmeans_fit, CenterRegistry};
use crate::error::{Error, Result};
use crate::lattice::{write_atomic, Lattice, ParamStore};
use crate::loss::{compute_sigma_sq, total_loss, ClusterContext, LossBreakdown};
use crate::rng::{derive_seed, substream, Stream};
use crate::synth::SynthSample;

/// Maps `f` over `items` on up to `threads` scoped workers, each taking a
/// contiguous chunk. Output order matches input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.txt")
    }

    pub fn centers(&self) -> PathBuf {
        self.dir.join("centers.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn resume(&self) -> PathBuf {
        self.dir.join("resume.json")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
}

/// Everything needed to continue a run from `next_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub next_step: u64,
    pub params: ParamStore,
    pub velocity: ParamStore,
    pub registry: CenterRegistry,
    pub metrics: RunMetrics,
}

#[derive(Serialize, Deserialize)]
struct ResumeFile {
    next_step: u64,
    records: usize,
    params: String,
    velocity: String,
    registry: CenterRegistry,
}

impl TrainState {
    pub fn fresh(lattice: &Lattice, config: &TrainConfig) -> Self {
        Self {
            next_step: 0,
            params: ParamStore::init(lattice.config(), config.seed),
            velocity: ParamStore::zeros(lattice.config()),
            registry: CenterRegistry::uninitialized(),
            metrics: RunMetrics::default(),
        }
    }

    /// Writes metrics, checkpoint and centers, then the resume file that
    /// commits them.
    pub fn persist(&self, files: &RunFiles) -> Result<()> {
        write_metrics(&files.metrics(), &self.metrics)?;
        self.params.save(&files.checkpoint())?;
        if self.registry.is_initialized() {
            write_atomic(&files.centers(), self.registry.to_csv().as_bytes())?;
        }
        let resume = ResumeFile {
            next_step: self.next_step,
            records: self.metrics.records.len(),
            params: self.params.to_checkpoint_string(),
            velocity: self.velocity.to_checkpoint_string(),
            registry: self.registry.clone(),
        };
        write_atomic(&files.resume(), serde_json::to_string(&resume)?.as_bytes())
    }

    /// Loads the last committed state, or `None` when the run never
    /// reached an eval boundary.
    pub fn load(lattice: &Lattice, files: &RunFiles) -> Result<Option<Self>> {
        let path = files.resume();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let r: ResumeFile = serde_json::from_str(&text)?;
        let mut metrics = read_metrics(&files.metrics())?;
        if metrics.records.len() < r.records {
            return Err(Error::format(files.metrics(), "fewer records than the resume point"));
        }
        metrics.records.truncate(r.records);
        Ok(Some(Self {
            next_step: r.next_step,
            params: ParamStore::from_checkpoint_str(lattice.config(), &r.params, &path)?,
            velocity: ParamStore::from_checkpoint_str(lattice.config(), &r.velocity, &path)?,
            registry: r.registry,
            metrics,
        }))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub registry: CenterRegistry,
    pub metrics: RunMetrics,
}

fn refit(
    lattice: &Lattice,
    state: &mut TrainState,
    data: &[SynthSample],
    config: &TrainConfig,
    step: u64,
) -> Result<()> {
    let points = gate_matrix(lattice, &state.params, data, config.threads)?;
    let fit = kmeans_fit(&points, config.k, derive_seed(config.seed, Stream::KMeans, step))?;
    let mut sizes = vec![0; config.k];
    for &c in &fit.assignment {
        sizes[c] += 1;
    }
    let mut registry = fit.registry;
    registry.last_update_step = Some(step);
    state.metrics.push(Record::Refit(RefitRecord {
        step,
        objective: fit.objective_trace.last().copied().unwrap_or(0.0),
        iterations: fit.iterations,
        cluster_sizes: sizes,
        fingerprint: registry.fingerprint(),
    }));
    state.registry = registry;
    Ok(())
}

/// Gradient of the batch-mean loss, and the mean loss breakdown.
fn batch_gradient(
    lattice: &Lattice,
    state: &TrainState,
    batch: &[SynthSample],
    config: &TrainConfig,
) -> Result<(ParamStore, LossBreakdown)> {
    let mut passes = Vec::with_capacity(batch.len());
    for sample in batch {
        let mut tape = Tape::new();
        let bound = lattice.bind(&mut tape, &state.params, true);
        let out = lattice.forward(&mut tape, &bound, &sample.image)?;
        passes.push((tape, bound, out));
    }
    let sigma = if state.registry.is_initialized() && config.weights.lambda2 > 0.0 {
        let gates: Vec<&[f64]> = passes.iter().map(|(t, _, o)| t.value(o.gates).data()).collect();
        Some(compute_sigma_sq(&gates, &state.registry)?)
    } else {
        None
    };

    let mut grads = ParamStore::zeros(lattice.config());
    let mut sums = [0.0; 4];
    for ((mut tape, bound, out), sample) in passes.into_iter().zip(batch) {
        let ctx = sigma.map(|sigma| ClusterContext {
            centers: &state.registry,
            sigma,
            form: config.distance,
        });
        let (loss, b) = total_loss(
            &mut tape,
            out.logits,
            &sample.labels(),
            out.gates,
            ctx,
            &config.weights,
            lattice.costs(),
        )?;
        for (s, v) in sums.iter_mut().zip([b.task, b.cost, b.clustering, b.total]) {
            *s += v;
        }
        let g = tape.backward(loss)?;
        for (acc, (_, var)) in grads.values_mut().into_iter().zip(bound.entries()) {
            let gv = g.get(*var).expect("parameters are tracked");
            for (a, v) in acc.data_mut().iter_mut().zip(gv.data()) {
                *a += v;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in grads.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    let [task, cost, clustering, total] = sums.map(|s| s * inv);
    let mut breakdown = LossBreakdown::from_components(task, cost, clustering, &config.weights);
    breakdown.total = total;
    Ok((grads, breakdown))
}

fn draw_batch(data: &[SynthSample], config: &TrainConfig, step: u64) -> Vec<SynthSample> {
    let mut pick = substream(config.seed, Stream::Batch, step);
    let mut flip = substream(config.seed, Stream::Augment, step);
    (0..config.batch_size)
        .map(|_| {
            let s = &data[pick.random_range(0..data.len())];
            if config.flip && flip.random_bool(0.5) {
                s.flipped()
            } else {
                s.clone()
            }
        })
        .collect()
}

/// Runs (or, when `files` holds a resume point, continues) training.
///
/// `evals` are scored at every eval boundary; the run directory, when
/// given, is updated at the same points.
pub fn train(
    lattice: &Lattice,
    data: &[SynthSample],
    evals: &[(&str, &[SynthSample])],
    config: &TrainConfig,
    files: Option<&RunFiles>,
) -> Result<TrainOutput> {
    config.validate()?;
    if data.len() < config.k {
        return Err(Error::invalid(format!(
            "training set of {} samples cannot be split into K = {} clusters",
            data.len(),
            config.k
        )));
    }
    let resumed = match files {
        Some(f) => TrainState::load(lattice, f)?,
        None => None,
    };
    let mut state = resumed.unwrap_or_else(|| TrainState::fresh(lattice, config));

    let mut fingerprint = state.registry.is_initialized().then(|| state.registry.fingerprint());
    for step in state.next_step..config.total_steps {
        if config.is_refit_step(step) {
            refit(lattice, &mut state, data, config, step)?;
            fingerprint = Some(state.registry.fingerprint());
        } else if fingerprint.is_some() && fingerprint != Some(state.registry.fingerprint()) {
            return Err(Error::invalid(format!("centers changed outside a refit at step {step}")));
        }

        let batch = draw_batch(data, config, step);
        let (grads, b) = batch_gradient(lattice, &state, &batch, config)?;
        let lr = lr_schedule(step, config);
        sgd_step(
            &mut state.params,
            &grads,
            &mut state.velocity,
            lr,
            config.momentum,
            config.weight_decay,
        )?;
        state.metrics.push(Record::Step(StepRecord {
            step,
            task_loss: b.task,
            cost_loss: b.cost,
            clustering_loss: b.clustering,
            total: b.total,
            lr,
        }));

        if config.is_eval_step(step) {
            for (name, samples) in evals {
                let r = evaluate(lattice, &state.params, &state.registry, samples, name, step, config.threads)?;
                state.metrics.push(Record::Eval(r));
            }
            state.next_step = step + 1;
            if let Some(f) = files {
                state.persist(f)?;
            }
        }
    }
    Ok(TrainOutput {
        params: state.params,
        registry: state.registry,
        metrics: state.metrics,
    })
}

/// Gate activations of every sample, in order.
pub fn gate_matrix(lattice: &Lattice, params: &ParamStore, data: &[SynthSample], threads: usize) -> Result<Vec<Vec<f64>>> {
    parallel_map(data, threads, |s| Ok(lattice.infer(params, &s.image)?.gates.into_values()))
}
