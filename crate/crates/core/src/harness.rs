//! Experiment driver: seeded runs, aggregation, ablations and heatmaps.
//!
//! A run directory looks like
//!
//! ```text
//! <output_dir>/config.json
//! <output_dir>/aggregate.csv
//! <output_dir>/seed_<s>/curve.csv
//! <output_dir>/seed_<s>/summary.json
//! <output_dir>/seed_<s>/cells.csv            (when log_cells is set)
//! <output_dir>/seed_<s>/agent<i>_policy.bin  (when checkpoint is set)
//! <output_dir>/seed_<s>/agent<i>_value.bin
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hindsight::RewardMode;
use crate::ippo::{self, CellLog, CurveRecord, EvalResult, TrainOutput, CELL_HEADER, CURVE_HEADER};

/// Written next to every seed's curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub grid_size: usize,
    pub num_agents: usize,
    pub iterations: usize,
    pub env_steps: u64,
    pub bus_scalars: u64,
    pub final_mean_episode_reward: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub messages: u64,
}

impl From<EvalResult> for EvalSummary {
    fn from(e: EvalResult) -> Self {
        EvalSummary {
            episodes: e.episodes,
            mean_reward: e.mean_reward,
            success_rate: e.success_rate,
            messages: e.messages,
        }
    }
}

#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub curve: Vec<CurveRecord>,
    pub summary: SeedSummary,
}

#[derive(Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub seeds: Vec<SeedRun>,
    /// Seeds that failed, with the error message.
    pub failures: Vec<(u64, String)>,
    pub aggregate: Vec<AggregateRow>,
}

/// Mean and standard error across seeds of one curve row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_se: f64,
    pub r_nov_mean: f64,
    pub r_nov_se: f64,
    pub r_hin_mean: f64,
    pub r_hin_se: f64,
    pub success_mean: f64,
    pub success_se: f64,
}

pub const AGGREGATE_HEADER: &str = "iteration,env_steps,seeds,mean_episode_reward,mean_episode_reward_se,\
mean_r_nov,mean_r_nov_se,mean_r_hin,mean_r_hin_se,success_rate,success_rate_se";

impl AggregateRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.seeds,
            self.reward_mean,
            self.reward_se,
            self.r_nov_mean,
            self.r_nov_se,
            self.r_hin_mean,
            self.r_hin_se,
            self.success_mean,
            self.success_se
        )
    }
}

/// Arithmetic mean and standard error (sample standard deviation over
/// `sqrt(n)`; zero for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Row-wise aggregate over curves; truncated to the shortest curve.
pub fn aggregate(curves: &[Vec<CurveRecord>]) -> Vec<AggregateRow> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|k| {
            let col = |f: fn(&CurveRecord) -> f64| curves.iter().map(|c| f(&c[k])).collect::<Vec<_>>();
            let (reward_mean, reward_se) = mean_se(&col(|r| r.mean_episode_reward));
            let (r_nov_mean, r_nov_se) = mean_se(&col(|r| r.mean_r_nov));
            let (r_hin_mean, r_hin_se) = mean_se(&col(|r| r.mean_r_hin));
            let (success_mean, success_se) = mean_se(&col(|r| r.success_rate));
            AggregateRow {
                iteration: curves[0][k].iteration,
                env_steps: curves[0][k].env_steps,
                seeds: curves.len(),
                reward_mean,
                reward_se,
                r_nov_mean,
                r_nov_se,
                r_hin_mean,
                r_hin_se,
                success_mean,
                success_se,
            }
        })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn curve_csv(curve: &[CurveRecord]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in curve {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn cells_csv(log: &CellLog) -> String {
    let mut out = String::from(CELL_HEADER);
    out.push('\n');
    for ((it, agent, x, y), s) in log {
        let _ = writeln!(out, "{it},{agent},{x},{y},{},{},{}", s.visits, s.r_nov, s.r_hin);
    }
    out
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(bad("missing curve header".into()));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("line {}: expected 6 fields", k + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", k + 2)));
            Ok(CurveRecord {
                iteration: f[0].parse().map_err(|e| bad(format!("line {}: {e}", k + 2)))?,
                env_steps: f[1].parse().map_err(|e| bad(format!("line {}: {e}", k + 2)))?,
                mean_episode_reward: num(f[2])?,
                mean_r_nov: num(f[3])?,
                mean_r_hin: num(f[4])?,
                success_rate: num(f[5])?,
            })
        })
        .collect()
}

fn write_seed(cfg: &RunConfig, dir: &Path, seed: u64, out: &TrainOutput) -> Result<SeedSummary> {
    create_dir(dir)?;
    write(&dir.join("curve.csv"), &curve_csv(&out.curve))?;
    if let Some(cells) = &out.cells {
        write(&dir.join("cells.csv"), &cells_csv(cells))?;
    }
    if cfg.checkpoint {
        for (i, learner) in out.learners.iter().enumerate() {
            learner.policy().save(&dir.join(format!("agent{i}_policy.bin")))?;
            learner.value().save(&dir.join(format!("agent{i}_value.bin")))?;
        }
    }
    let summary = SeedSummary {
        seed,
        grid_size: cfg.task_spec()?.grid_size(),
        num_agents: out.learners.len(),
        iterations: out.curve.len(),
        env_steps: out.env_steps,
        bus_scalars: out.bus_scalars,
        final_mean_episode_reward: out.curve.last().map_or(0.0, |r| r.mean_episode_reward),
        eval: out.eval.map(EvalSummary::from),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

/// Train every seed in `cfg.seeds` and write the run directory. A seed that
/// fails is reported and skipped; the aggregate covers the seeds that
/// finished.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    run_with(cfg, |_, _| {})
}

/// [`run`] with a callback after each finished seed.
pub fn run_with(cfg: &RunConfig, mut on_seed: impl FnMut(&SeedRun, &[CurveRecord])) -> Result<RunReport> {
    cfg.validate()?;
    cfg.task_spec()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    cfg.save(&dir.join("config.json"))?;

    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed_{seed}"));
        let result = ippo::train(cfg, seed).and_then(|out| {
            let summary = write_seed(cfg, &seed_dir, seed, &out)?;
            Ok(SeedRun {
                seed,
                dir: seed_dir,
                curve: out.curve,
                summary,
            })
        });
        match result {
            Ok(run) => {
                on_seed(&run, &run.curve);
                seeds.push(run);
            }
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let curves: Vec<Vec<CurveRecord>> = seeds.iter().map(|s| s.curve.clone()).collect();
    let aggregate = aggregate(&curves);
    write(&dir.join("aggregate.csv"), &aggregate_csv(&aggregate))?;
    Ok(RunReport {
        dir,
        seeds,
        failures,
        aggregate,
    })
}

/// Ablation axis and the values it sweeps.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    Mode(Vec<RewardMode>),
    Lambda(Vec<f64>),
    Window(Vec<usize>),
    SumVsMax,
}

impl Axis {
    pub fn default_for(name: &str) -> Result<Axis> {
        match name {
            "mode" => Ok(Axis::Mode(vec![
                RewardMode::Loc,
                RewardMode::NovSum,
                RewardMode::Hin,
                RewardMode::Mace,
            ])),
            "lambda" => Ok(Axis::Lambda(vec![0.1, 0.01, 0.001])),
            "w" | "window" => Ok(Axis::Window(vec![1, 10, 50])),
            "sum_vs_max" => Ok(Axis::SumVsMax),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}; expected mode, lambda, w or sum_vs_max"
            ))),
        }
    }

    /// Axis `name` with explicit comma-separated values.
    pub fn with_values(name: &str, values: &str) -> Result<Axis> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let bad = |v: &str| Error::Config(format!("bad value {v:?} for axis {name}"));
        match Axis::default_for(name)? {
            Axis::Mode(_) => items.iter().map(|v| RewardMode::from_str(v)).collect::<Result<_>>().map(Axis::Mode),
            Axis::Lambda(_) => items
                .iter()
                .map(|v| v.parse().map_err(|_| bad(v)))
                .collect::<Result<_>>()
                .map(Axis::Lambda),
            Axis::Window(_) => items
                .iter()
                .map(|v| v.parse().map_err(|_| bad(v)))
                .collect::<Result<_>>()
                .map(Axis::Window),
            Axis::SumVsMax => Err(Error::Config("sum_vs_max takes no values".into())),
        }
    }

    /// `(variant name, config)` for every point on the axis.
    pub fn variants(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
            let mut cfg = base.clone();
            f(&mut cfg);
            cfg.output_dir = base.output_dir.join(&name);
            (name, cfg)
        };
        match self {
            Axis::Mode(modes) => modes.iter().map(|&m| with(m.to_string(), &|c| c.mode = m)).collect(),
            Axis::Lambda(ls) => ls.iter().map(|&l| with(format!("lambda_{l}"), &|c| c.lambda = l)).collect(),
            Axis::Window(ws) => ws.iter().map(|&w| with(format!("w_{w}"), &|c| c.window = w)).collect(),
            Axis::SumVsMax => [RewardMode::NovSum, RewardMode::NovMax]
                .iter()
                .map(|&m| with(m.to_string(), &|c| c.mode = m))
                .collect(),
        }
    }
}

#[derive(Debug)]
pub struct AblationReport {
    pub dir: PathBuf,
    pub variants: Vec<(String, RunReport)>,
}

impl AblationReport {
    /// Final-iteration median of the per-seed mean episode reward, per variant.
    pub fn final_medians(&self) -> BTreeMap<String, f64> {
        self.variants
            .iter()
            .map(|(name, report)| {
                let finals: Vec<f64> = report
                    .seeds
                    .iter()
                    .map(|s| s.summary.final_mean_episode_reward)
                    .collect();
                (name.clone(), median(&finals))
            })
            .collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run every variant of `axis` under `base.output_dir/<variant>` and write
/// `ablation.csv`, the aggregates joined and keyed by variant.
pub fn ablate(base: &RunConfig, axis: &Axis) -> Result<AblationReport> {
    base.validate()?;
    create_dir(&base.output_dir)?;
    let mut variants = Vec::new();
    let mut joined = format!("variant,{AGGREGATE_HEADER}\n");
    for (name, cfg) in axis.variants(base) {
        let report = run(&cfg)?;
        for row in &report.aggregate {
            let _ = writeln!(joined, "{name},{}", row.csv_row());
        }
        variants.push((name, report));
    }
    write(&base.output_dir.join("ablation.csv"), &joined)?;
    Ok(AblationReport {
        dir: base.output_dir.clone(),
        variants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Nov,
    Hin,
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nov" | "r_nov" => Ok(Component::Nov),
            "hin" | "r_hin" => Ok(Component::Hin),
            other => Err(Error::Usage(format!("unknown reward component {other:?}; expected nov or hin"))),
        }
    }
}

/// Per-cell mean of one intrinsic component; `None` for unvisited cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    cells: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.cells[y * self.size + x]
    }

    /// Cell with the largest mean, ties broken by row-major order.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in self.cells.iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
        }
        best.map(|(k, _)| (k % self.size, k / self.size))
    }

    /// `x,y,value` rows; unvisited cells have an empty value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        for y in 0..self.size {
            for x in 0..self.size {
                match self.get(x, y) {
                    Some(v) => {
                        let _ = writeln!(out, "{x},{y},{v}");
                    }
                    None => {
                        let _ = writeln!(out, "{x},{y},");
                    }
                }
            }
        }
        out
    }

    /// Whitespace-aligned grid, one row per line; unvisited cells show `.`.
    pub fn to_text(&self) -> String {
        let cells: Vec<String> = self
            .cells
            .iter()
            .map(|v| v.map_or(".".to_string(), |v| format!("{v:.4}")))
            .collect();
        let width = cells.iter().map(String::len).max().unwrap_or(1);
        let mut out = String::new();
        for row in cells.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|c| format!("{c:>width$}")).collect();
            out.push_str(line.join(" ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Heatmap from an in-memory cell log over iterations `from..=to`.
pub fn heatmap(log: &CellLog, size: usize, agent: usize, component: Component, from: usize, to: usize) -> Heatmap {
    let mut sums = vec![(0u64, 0.0); size * size];
    for &((it, a, x, y), s) in log {
        if a == agent && (from..=to).contains(&it) && x < size && y < size {
            let cell = &mut sums[y * size + x];
            cell.0 += s.visits;
            cell.1 += match component {
                Component::Nov => s.r_nov,
                Component::Hin => s.r_hin,
            };
        }
    }
    Heatmap {
        size,
        cells: sums
            .into_iter()
            .map(|(n, total)| (n > 0).then(|| total / n as f64))
            .collect(),
    }
}

pub fn read_cells(path: &Path) -> Result<CellLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(CELL_HEADER) {
        return Err(bad("missing cell header".into()));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("line {}: expected 7 fields", k + 2)));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", k + 2)));
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", k + 2)));
            Ok((
                (int(f[0])?, int(f[1])?, int(f[2])?, int(f[3])?),
                ippo::CellSums {
                    visits: int(f[4])? as u64,
                    r_nov: num(f[5])?,
                    r_hin: num(f[6])?,
                },
            ))
        })
        .collect()
}

/// Heatmap from a seed directory written by [`run`] with `log_cells` set.
pub fn heatmap_export(seed_dir: &Path, agent: usize, component: Component, from: usize, to: usize) -> Result<Heatmap> {
    let cells_path = seed_dir.join("cells.csv");
    if !cells_path.exists() {
        return Err(Error::Usage(format!(
            "{} has no cells.csv; train with \"log_cells\": true",
            seed_dir.display()
        )));
    }
    let summary_path = seed_dir.join("summary.json");
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: SeedSummary = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: summary_path.clone(),
        reason: e.to_string(),
    })?;
    if agent >= summary.num_agents {
        return Err(Error::Usage(format!(
            "agent {agent} out of range for {} agents",
            summary.num_agents
        )));
    }
    let log = read_cells(&cells_path)?;
    Ok(heatmap(&log, summary.grid_size, agent, component, from, to))
}
