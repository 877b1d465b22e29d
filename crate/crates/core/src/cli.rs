//! Experiment commands and their artifacts.
//!
//! Every command writes only inside its output directory. `manifest.json`
//! echoes the full configuration and seed, so each artifact can be rebuilt
//! from it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{trajectory_deviation, update_rank_trace, DeviationPoint};
use crate::checkpoint::{self, WorkerCheckpoint};
use crate::costmodel::{cost_report, CostInputs, CostReport};
use crate::lte::{run, RunOutcome, Trajectory};
use crate::{Error, Result};

pub use crate::lte::{DatasetSpec, MergePolicy, Mode, RunConfig};

pub const DEFAULT_TRAIN_DIR: &str = "out/train";
pub const DEFAULT_COMPARE_DIR: &str = "out/compare";
pub const DEFAULT_SWEEP_DIR: &str = "out/sweep";

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "merge_id",
    "worker_id",
    "loss",
    "eff_weight_dev",
    "update_eff_rank",
    "mean_cosine",
    "mean_grassman",
];

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub per_worker_batch: usize,
    pub dropped_samples_per_step: usize,
    pub steps_run: u64,
    pub stopped_at: Option<u64>,
    pub final_eval_loss: Option<f64>,
}

impl Manifest {
    fn new(cfg: &RunConfig, traj: &Trajectory) -> Self {
        Manifest {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            seed: cfg.seed,
            per_worker_batch: cfg.per_worker_batch(),
            dropped_samples_per_step: traj.dropped_samples,
            steps_run: traj.steps.len() as u64,
            stopped_at: traj.stopped_at,
            final_eval_loss: traj.final_eval_loss(),
        }
    }
}

/// Rows of `metrics.csv`: one per (step, worker); analysis columns are
/// filled on snapshot steps.
pub fn write_metrics<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    let mut snaps = traj.snapshots.iter().peekable();
    for rec in &traj.steps {
        while snaps.peek().is_some_and(|s| s.step < rec.step) {
            snaps.next();
        }
        let snap = snaps.peek().filter(|s| s.step == rec.step);
        let dev = snap.map(|s| s.weight_deviation);
        let rank = snap.and_then(|s| s.change_rank());
        let cos = snap.and_then(|s| s.mean_cosine());
        let grass = snap.and_then(|s| s.mean_grassman());
        for (worker, loss) in rec.losses.iter().enumerate() {
            w.write_record([
                rec.step.to_string(),
                rec.merge_id.to_string(),
                worker.to_string(),
                loss.to_string(),
                opt(dev),
                opt(rank),
                opt(cos),
                opt(grass),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("metrics.csv", e))
}

/// Long-format `analysis.csv`: snapshot step, layer, metric, value.
pub fn write_analysis<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["snapshot", "layer", "metric", "value"])?;
    for s in &traj.snapshots {
        for (l, ls) in s.layers.iter().enumerate() {
            let mut rows: Vec<(&str, Option<f64>)> = vec![
                ("change_eff_rank", ls.change_rank),
                ("weight_eff_rank", ls.weight_rank),
                ("last_update_eff_rank", ls.last_delta_rank),
            ];
            if let Some(a) = &ls.alignment {
                rows.push(("mean_cosine", a.mean_cosine));
                rows.push(("grassman_pair_mean", a.grassman_pair_mean));
                rows.push(("grassman_inv_2n", a.grassman_inv_2n));
                rows.push(("excluded_heads", Some(a.excluded.len() as f64)));
            }
            for (metric, value) in rows {
                if let Some(v) = value {
                    w.write_record([
                        s.step.to_string(),
                        l.to_string(),
                        metric.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("analysis.csv", e))
}

fn write_evals<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "eval_loss"])?;
    for e in &traj.evals {
        w.write_record([e.step.to_string(), e.loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("evals.csv", e))
}

fn write_snapshots(dir: &Path, traj: &Trajectory) -> Result<()> {
    create_dir(dir)?;
    for s in &traj.snapshots {
        for (l, w) in s.weights.iter().enumerate() {
            let path = dir.join(format!("step{:08}_layer{l}.csv", s.step));
            w.write_csv(create_file(&path)?)?;
        }
    }
    Ok(())
}

/// Outcome of `cmd_train`.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub outcome: RunOutcome,
}

/// Runs `cfg` and writes manifest, metrics, evaluations, snapshots, analysis
/// and a checkpoint under `out_dir` (or the config's own `out_dir`).
pub fn cmd_train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = match (out_dir, &cfg.out_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from(DEFAULT_TRAIN_DIR),
    };
    let outcome = run(cfg)?;
    let traj = &outcome.trajectory;
    create_dir(&dir)?;
    let mut echoed = cfg.clone();
    echoed.out_dir = Some(dir.to_string_lossy().into_owned());
    write_json(&dir.join("manifest.json"), &Manifest::new(&echoed, traj))?;
    write_metrics(traj, create_file(&dir.join("metrics.csv"))?)?;
    write_evals(traj, create_file(&dir.join("evals.csv"))?)?;
    write_analysis(traj, create_file(&dir.join("analysis.csv"))?)?;
    write_snapshots(&dir.join("snapshots"), traj)?;
    let workers: Vec<WorkerCheckpoint> =
        outcome.workers.iter().map(WorkerCheckpoint::from).collect();
    checkpoint::save(&dir.join("checkpoint"), &outcome.network, &workers)?;
    Ok(TrainSummary {
        out_dir: dir,
        outcome,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub snapshots: usize,
    pub max_deviation: f64,
    pub mean_deviation: f64,
    pub final_deviation: f64,
    pub config_a: RunConfig,
    pub config_b: RunConfig,
}

/// Runs both configs and writes `deviation.csv` and `summary.json`.
pub fn cmd_compare(
    a: &RunConfig,
    b: &RunConfig,
    out_dir: &Path,
) -> Result<(CompareSummary, Vec<DeviationPoint>)> {
    a.validate()?;
    b.validate()?;
    if a.dims() != b.dims() {
        return Err(Error::InvalidArgument(format!(
            "architectures differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (ra, rb) = rayon::join(|| run(a), || run(b));
    let (ra, rb) = (ra?, rb?);
    let points = trajectory_deviation(&ra.trajectory, &rb.trajectory)?;
    let totals: Vec<f64> = points.iter().map(|p| p.total).collect();
    let summary = CompareSummary {
        snapshots: points.len(),
        max_deviation: totals.iter().copied().fold(0.0, f64::max),
        mean_deviation: if totals.is_empty() {
            0.0
        } else {
            totals.iter().sum::<f64>() / totals.len() as f64
        },
        final_deviation: totals.last().copied().unwrap_or(0.0),
        config_a: a.clone(),
        config_b: b.clone(),
    };
    create_dir(out_dir)?;
    let path = out_dir.join("deviation.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    let layers = points.first().map_or(0, |p| p.per_layer.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..layers).map(|l| format!("layer{l}")));
    header.push("total".into());
    w.write_record(&header)?;
    for p in &points {
        let mut row = vec![p.step.to_string()];
        row.extend(p.per_layer.iter().map(f64::to_string));
        row.push(p.total.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok((summary, points))
}

fn default_threshold() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

/// A grid over heads, ranks and merge periods, each cell run for every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base: RunConfig,
    pub heads: Vec<usize>,
    pub ranks: Vec<usize>,
    pub merge_periods: Vec<u64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Loss level for steps-to-threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Rescale `alpha` per cell so `alpha / r` matches the base config.
    #[serde(default = "default_true")]
    pub keep_scale: bool,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl SweepGrid {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Every (cell, seed) config in row-major order over heads, ranks, periods.
    pub fn configs(&self) -> Result<Vec<((usize, usize, u64), RunConfig)>> {
        if self.heads.is_empty() || self.ranks.is_empty() || self.merge_periods.is_empty() {
            return Err(Error::config(
                "grid",
                "heads, ranks and merge_periods must be non-empty",
            ));
        }
        let mut out = Vec::new();
        for &n in &self.heads {
            for &r in &self.ranks {
                for &t in &self.merge_periods {
                    for seed in self.seeds() {
                        let mut c = self.base.clone();
                        c.heads = n;
                        c.rank = r;
                        if self.keep_scale {
                            c.alpha = self.base.alpha * r as f64 / self.base.rank as f64;
                        }
                        c.policy.period = t;
                        c.seed = seed;
                        c.validate()?;
                        out.push(((n, r, t), c));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub heads: usize,
    pub rank: usize,
    pub merge_period: u64,
    pub seeds: usize,
    /// Median over seeds.
    pub final_loss: f64,
    /// Median over seeds; `None` when most seeds never reached the threshold.
    pub steps_to_threshold: Option<u64>,
    /// Median final effective rank of the cumulative weight change.
    pub final_change_rank: Option<f64>,
    /// Largest effective rank of any merged update.
    pub max_update_rank: Option<f64>,
}

/// Median of the values; `None` counts as larger than everything.
fn median_opt<T: Copy + PartialOrd>(mut v: Vec<Option<T>>) -> Option<T> {
    v.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    v.get(v.len().saturating_sub(1) / 2).copied().flatten()
}

fn sweep_row(cell: (usize, usize, u64), runs: &[Trajectory], threshold: f64) -> SweepRow {
    let final_loss =
        median_opt(runs.iter().map(Trajectory::final_eval_loss).collect()).unwrap_or(f64::NAN);
    let steps = median_opt(runs.iter().map(|t| t.steps_to_loss(threshold)).collect());
    let ranks = median_opt(
        runs.iter()
            .map(|t| t.snapshots.last().and_then(|s| s.change_rank()))
            .collect(),
    );
    let max_update_rank = runs
        .iter()
        .flat_map(update_rank_trace)
        .filter_map(|p| p.update_rank)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        });
    SweepRow {
        heads: cell.0,
        rank: cell.1,
        merge_period: cell.2,
        seeds: runs.len(),
        final_loss,
        steps_to_threshold: steps,
        final_change_rank: ranks,
        max_update_rank,
    }
}

/// Aligned plain-text rendering of the sweep table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let header = [
        "heads",
        "rank",
        "T",
        "seeds",
        "final_loss",
        "steps_to_thr",
        "change_rank",
        "max_update_rank",
    ];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.heads.to_string(),
                r.rank.to_string(),
                r.merge_period.to_string(),
                r.seeds.to_string(),
                format!("{:.3e}", r.final_loss),
                r.steps_to_threshold.map_or("-".into(), |s| s.to_string()),
                r.final_change_rank
                    .map_or("-".into(), |v| format!("{v:.2}")),
                r.max_update_rank.map_or("-".into(), |v| format!("{v:.2}")),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&line(header.to_vec()));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Runs every cell of the grid and writes `sweep.csv` and `sweep.txt`.
pub fn cmd_sweep(grid: &SweepGrid, out_dir: &Path) -> Result<Vec<SweepRow>> {
    let configs = grid.configs()?;
    let trajectories: Vec<Result<Trajectory>> = configs
        .par_iter()
        .map(|(_, c)| run(c).map(|o| o.trajectory))
        .collect();
    let mut rows = Vec::new();
    let mut i = 0;
    let per_cell = grid.seeds().len();
    let trajectories = trajectories.into_iter().collect::<Result<Vec<_>>>()?;
    while i < configs.len() {
        rows.push(sweep_row(
            configs[i].0,
            &trajectories[i..i + per_cell],
            grid.threshold,
        ));
        i += per_cell;
    }
    create_dir(out_dir)?;
    let path = out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out_dir.join("sweep.txt");
    fs::write(&path, sweep_table(&rows)).map_err(|e| Error::io(&path, e))?;
    write_json(&out_dir.join("grid.json"), grid)?;
    Ok(rows)
}

/// The cost report as aligned text and as JSON.
pub fn cmd_cost(
    inputs: &CostInputs,
    bytes_per_param: Option<f64>,
) -> Result<(CostReport, String, String)> {
    let report = cost_report(inputs)?;
    let json =
        serde_json::to_string_pretty(&serde_json::json!({ "inputs": inputs, "report": report }))?;
    Ok((report, report.to_text(bytes_per_param), json))
}
