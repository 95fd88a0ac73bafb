//! Experiment recipes behind the `divdr` command line.
//!
//! A run directory holds `config.json` (the full config echo),
//! `metrics.jsonl`, `checkpoint.txt`, `centers.csv` and `resume.json`.
//! `eval` and `export-aspace` add their outputs next to them.

mod config;
mod export;

pub use config::ExperimentConfig;
pub use export::{aspace_csv, edges_json, parse_aspace_csv, pca_2d, pca_csv, AspaceRow, EdgeInfo};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::CenterRegistry;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, ParamStore};
use crate::synth::{generate, write_cache, SplitKind, SubsetKind, SynthSample};
use crate::trainer::{evaluate, gate_matrix, read_metrics, train, EvalRecord, RunFiles};

pub const OUT_ENV: &str = "DIVDR_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValS,
    ValL,
    ValX,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::ValS, Split::ValL, Split::ValX];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValS => "val_s",
            Split::ValL => "val_l",
            Split::ValX => "val_x",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("split", format!("unknown split `{s}`")))
    }

    /// The validation split matching a training subset.
    pub fn val_for(subset: SubsetKind) -> Self {
        match subset {
            SubsetKind::S => Split::ValS,
            SubsetKind::L => Split::ValL,
            SubsetKind::X => Split::ValX,
        }
    }

    pub fn samples(self, cfg: &ExperimentConfig) -> Vec<SynthSample> {
        let spec = cfg.dataset_spec();
        match self {
            Split::Train => generate(&spec, cfg.train_subset, SplitKind::Train),
            Split::ValS => generate(&spec, SubsetKind::S, SplitKind::Val),
            Split::ValL => generate(&spec, SubsetKind::L, SplitKind::Val),
            Split::ValX => generate(&spec, SubsetKind::X, SplitKind::Val),
        }
    }
}

/// `explicit`, else the config's `out_dir`, else `DIVDR_OUT`, else `runs`.
pub fn output_root(explicit: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return PathBuf::from(p);
    }
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_eval: EvalRecord,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains into `<root>/<name>`, resuming if that directory holds an
/// interrupted run of the same config.
pub fn cmd_train(cfg: &ExperimentConfig, out: Option<&Path>, threads: usize) -> Result<TrainSummary> {
    cfg.validate()?;
    let lattice = Lattice::new(cfg.lattice_config())?;
    let run_dir = output_root(out, cfg).join(&cfg.name);
    let files = RunFiles::new(&run_dir);
    let echo = cfg.to_json();
    if let Ok(existing) = fs::read_to_string(files.config()) {
        if existing != echo {
            return Err(Error::config(
                "name",
                format!("{} already holds a run with a different config", run_dir.display()),
            ));
        }
    }

    let data = Split::Train.samples(cfg);
    let val_split = Split::val_for(cfg.train_subset);
    let val = val_split.samples(cfg);
    create_dir(&run_dir)?;
    write(&files.config(), &echo)?;
    let out = train(
        &lattice,
        &data,
        &[(val_split.as_str(), &val)],
        &cfg.train_config(threads),
        Some(&files),
    )?;
    let final_eval = out
        .metrics
        .last_eval()
        .cloned()
        .ok_or_else(|| Error::invalid("run finished without an eval record"))?;
    Ok(TrainSummary { run_dir, final_eval })
}

/// Everything a finished (or interrupted) run directory provides.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub lattice: Lattice,
    pub params: ParamStore,
    pub registry: CenterRegistry,
    pub files: RunFiles,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let files = RunFiles::new(run_dir);
    let config = ExperimentConfig::load(&files.config())?;
    let lattice = Lattice::new(config.lattice_config())?;
    let ckpt = files.checkpoint();
    if !ckpt.exists() {
        return Err(Error::invalid(format!("no checkpoint at {}", ckpt.display())));
    }
    let params = ParamStore::load(lattice.config(), &ckpt)?;
    let registry = match fs::read_to_string(files.centers()) {
        Ok(text) => CenterRegistry::from_csv(&text)?,
        Err(_) => CenterRegistry::uninitialized(),
    };
    Ok(LoadedRun {
        config,
        lattice,
        params,
        registry,
        files,
    })
}

/// Scores a run's checkpoint on `split` and writes `eval_<split>.json`.
pub fn cmd_eval(run_dir: &Path, split: Split, threads: usize) -> Result<EvalRecord> {
    let run = load_run(run_dir)?;
    let step = read_metrics(&run.files.metrics())
        .ok()
        .and_then(|m| m.records.last().map(|r| r.step()))
        .unwrap_or(0);
    let samples = split.samples(&run.config);
    let record = evaluate(
        &run.lattice,
        &run.params,
        &run.registry,
        &samples,
        split.as_str(),
        step,
        threads,
    )?;
    let json = serde_json::to_string_pretty(&record)? + "\n";
    write(&run_dir.join(format!("eval_{}.json", split.as_str())), &json)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub record: EvalRecord,
}

pub const SWEEP_PARAMS: [&str; 4] = ["K", "alpha", "lambda1", "lambda2"];

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from("param,value,miou,expected_cost,pruned_cost,inter,intra,gate_variance,alignment\n");
    for r in rows {
        let e = &r.record;
        s.push_str(&format!(
            "{param},{},{},{},{},{},{},{},{}\n",
            r.value,
            e.miou,
            e.expected_cost,
            e.pruned_cost,
            opt(e.inter),
            opt(e.intra),
            opt(e.gate_variance),
            opt(e.alignment)
        ));
    }
    s
}

/// One training run per value of `param`, each in
/// `<root>/<name>-sweep-<param>/<param>_<value>`, summarized in
/// `summary.csv` sorted by value.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    param: &str,
    values: &[f64],
    out: Option<&Path>,
    threads: usize,
) -> Result<(PathBuf, Vec<SweepRow>)> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::config(
            "param",
            format!("unknown sweep parameter `{param}`; expected one of {SWEEP_PARAMS:?}"),
        ));
    }
    if values.is_empty() {
        return Err(Error::config("values", "at least one value is required"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let trials = sorted
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.set_param(param, v)?;
            cfg.name = format!("{param}_{v}");
            Ok((v, cfg))
        })
        .collect::<Result<Vec<_>>>()?;

    let sweep_dir = output_root(out, base).join(format!("{}-sweep-{param}", base.name));
    let mut rows = Vec::with_capacity(trials.len());
    for (value, cfg) in trials {
        let summary = cmd_train(&cfg, Some(&sweep_dir), threads)?;
        rows.push(SweepRow {
            value,
            record: summary.final_eval,
        });
    }
    write(&sweep_dir.join("summary.csv"), &sweep_csv(param, &rows))?;
    Ok((sweep_dir, rows))
}

#[derive(Debug, Clone)]
pub struct AspaceExport {
    pub aspace: PathBuf,
    pub edges: PathBuf,
    pub pca: PathBuf,
    pub rows: Vec<AspaceRow>,
}

/// Writes `aspace_<split>.csv`, `edges.json` and `pca_<split>.csv`.
pub fn cmd_export_aspace(run_dir: &Path, split: Split, threads: usize) -> Result<AspaceExport> {
    let run = load_run(run_dir)?;
    if !run.registry.is_initialized() {
        return Err(Error::invalid(format!(
            "{} has no fitted centers to assign clusters with",
            run_dir.display()
        )));
    }
    let samples = split.samples(&run.config);
    let points = gate_matrix(&run.lattice, &run.params, &samples, threads)?;
    let assignment = run.registry.assign(&points)?;
    let projection = pca_2d(&points)?;
    let rows: Vec<AspaceRow> = samples
        .iter()
        .zip(points)
        .zip(&assignment.indices)
        .map(|((s, gates), &c)| AspaceRow {
            sample_id: s.sample_id,
            true_subset: s.true_subset as usize,
            assigned_cluster: c,
            gates,
        })
        .collect();

    let aspace = run_dir.join(format!("aspace_{}.csv", split.as_str()));
    let edges = run_dir.join("edges.json");
    let pca = run_dir.join(format!("pca_{}.csv", split.as_str()));
    write(&aspace, &aspace_csv(&rows, run.lattice.gate_dim()))?;
    write(&edges, &edges_json(&run.lattice))?;
    write(&pca, &pca_csv(&rows, &projection))?;
    Ok(AspaceExport { aspace, edges, pca, rows })
}

/// Writes the train split and all three validation splits as caches
/// under `dir`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let spec = cfg.dataset_spec();
    let mut written = Vec::new();
    for split in Split::ALL {
        let (subset, kind) = match split {
            Split::Train => (cfg.train_subset, SplitKind::Train),
            Split::ValS => (SubsetKind::S, SplitKind::Val),
            Split::ValL => (SubsetKind::L, SplitKind::Val),
            Split::ValX => (SubsetKind::X, SplitKind::Val),
        };
        let samples = split.samples(cfg);
        write_cache(dir, split.as_str(), &spec, subset, kind, &samples)?;
        written.push(dir.join(format!("{}.bin", split.as_str())));
    }
    Ok(written)
}
