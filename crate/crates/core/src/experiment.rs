//! Layered experiment configuration and the command runners behind the CLI.
//!
//! Resolution order is built-in defaults, then a config file, then
//! individual overrides. The resolved result is written next to every
//! artifact as `spec.txt`, which parses back to the same experiment.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{key_values, suggest, ConfigValue, KeyValues};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_models, generalization_sweep, mean_std, robustness_grid, write_eval_csv, write_generalization_csv,
    write_grid, write_matrix, EvalConfig, EvalReport, NamedModel, EVAL_HEADER, GENERALIZATION_HEADER, GRID_HEADER,
};
use crate::qnet::{ModelConfig, QNetwork};
use crate::trainer::{train, TrainConfig, TrainOutcome};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Grid,
    Generalize,
    Sweep,
    Report,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::Eval,
        Command::Grid,
        Command::Generalize,
        Command::Sweep,
        Command::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Grid => "grid",
            Command::Generalize => "generalize",
            Command::Sweep => "sweep",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown command `{s}`")))
    }
}

/// One model feature varied by a sensitivity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Granule count.
    Expansion,
    FanIn,
    TopkFraction,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [SweepAxis::Expansion, SweepAxis::FanIn, SweepAxis::TopkFraction];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Expansion => "expansion",
            SweepAxis::FanIn => "fan_in",
            SweepAxis::TopkFraction => "topk_fraction",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Expansion => &["2048", "4096", "8192", "16384"],
            SweepAxis::FanIn => &["2", "5", "16", "full"],
            SweepAxis::TopkFraction => &["0.01", "0.05", "0.1", "0.25", "1.0"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Sets the swept field. `full` fan-in wires every granule to every
    /// mossy fibre.
    pub fn apply(self, model: &mut ModelConfig, value: &str) -> Result<()> {
        match self {
            SweepAxis::Expansion => model.set("grc_dim", value),
            SweepAxis::FanIn if value.trim() == "full" => {
                model.fan_in = model.mf_dim;
                Ok(())
            }
            SweepAxis::FanIn => model.set("fan_in", value),
            SweepAxis::TopkFraction => model.set("topk_fraction", value),
        }
    }
}

impl ConfigValue for Option<SweepAxis> {
    const EXPECTED: &'static str = "one of expansion, fan_in, topk_fraction, none";

    fn parse_value(s: &str) -> Option<Self> {
        match s.trim() {
            "none" | "" => Some(None),
            v => SweepAxis::ALL.into_iter().find(|a| a.as_str() == v).map(Some),
        }
    }

    fn render(&self) -> String {
        self.map_or("none", SweepAxis::as_str).to_string()
    }
}

/// Orchestration settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub sweep_axis: Option<SweepAxis>,
    /// Values of `sweep_axis`; empty means the axis defaults.
    pub sweep_values: Vec<String>,
    /// Evaluate every checkpoint on its own training seed instead of `seeds`.
    pub paired_seeds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            sweep_axis: None,
            sweep_values: Vec::new(),
            paired_seeds: false,
        }
    }
}

key_values!(RunConfig, "run", {
    "seeds" => seeds,
    "sweep_axis" => sweep_axis,
    "sweep_values" => sweep_values,
    "paired_seeds" => paired_seeds,
});

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn all_keys() -> Vec<String> {
        let mut keys = EnvConfig::full_keys();
        keys.extend(TrainConfig::full_keys());
        keys.extend(ModelConfig::full_keys());
        keys.extend(crate::gate::GateConfig::full_keys());
        keys.extend(EvalConfig::full_keys());
        keys.extend(RunConfig::full_keys());
        keys
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let unknown = || {
            let all = Self::all_keys();
            Error::UnknownKey {
                key: key.to_string(),
                suggestion: suggest(key, all.iter().map(String::as_str)),
            }
        };
        let (section, field) = key.split_once('.').ok_or_else(unknown)?;
        let res = match section {
            "env" => self.env.set(field, value),
            "train" => self.train.set(field, value),
            "model" => self.model.set(field, value),
            "gate" => self.model.gate.set(field, value),
            "eval" => self.eval.set(field, value),
            "run" => self.run.set(field, value),
            _ => return Err(unknown()),
        };
        match res {
            Err(Error::UnknownKey { .. }) => Err(unknown()),
            other => other,
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{pair}` is not of the form key=value")))?;
        self.set(k, v)
    }

    /// Applies config text: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{origin}:{}", n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut spec = Self::default();
        if let Some(path) = file {
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
            spec.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            spec.set_pair(o)?;
        }
        Ok(spec)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e = self.env.entries();
        e.extend(self.train.entries());
        e.extend(self.model.entries());
        e.extend(self.model.gate.entries());
        e.extend(self.eval.entries());
        e.extend(self.run.entries());
        e
    }

    pub fn to_text(&self, command: Command) -> String {
        let mut out = format!("# resolved configuration for `cdrl {command}`\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        self.eval.validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "needs at least one seed"));
        }
        Ok(())
    }

    /// Writes `spec.txt` into `dir`.
    pub fn write_resolved(&self, dir: &Path, command: Command) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join("spec.txt");
        fs::write(&path, self.to_text(command)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    fn sweep_values(&self) -> Result<(SweepAxis, Vec<String>)> {
        let axis = self
            .run
            .sweep_axis
            .ok_or_else(|| Error::config("run.sweep_axis", "a sweep needs an axis"))?;
        let values = if self.run.sweep_values.is_empty() {
            axis.default_values()
        } else {
            self.run.sweep_values.clone()
        };
        Ok((axis, values))
    }
}

/// `runs/<unix seconds>-<command>-<model>` under `root`.
pub fn default_run_dir(root: &Path, command: Command, spec: &ExperimentSpec) -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    root.join("runs").join(format!("{secs}-{command}-{}", spec.model.kind))
}

/// Trains every seed of `spec` into `out/seed<k>`, seeds in parallel.
pub fn run_train(spec: &ExperimentSpec, out: &Path) -> Result<Vec<TrainOutcome>> {
    spec.validate()?;
    spec.write_resolved(out, Command::Train)?;
    spec.run
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = out.join(format!("seed{seed}"));
            train(&spec.env, &spec.train, &spec.model, seed, &dir, |_| {})
        })
        .collect()
}

/// Loads every checkpoint before anything is evaluated, so a bad path fails
/// the command without partial output.
pub fn load_models(paths: &[PathBuf], spec: &ExperimentSpec) -> Result<Vec<NamedModel>> {
    if paths.is_empty() {
        return Err(Error::Usage("at least one checkpoint is required".into()));
    }
    paths
        .iter()
        .map(|p| {
            let net = QNetwork::<f32>::load(p)?;
            let seeds = if spec.run.paired_seeds {
                vec![net.seed()]
            } else {
                spec.run.seeds.clone()
            };
            Ok(NamedModel::new(net.kind().as_str(), net, seeds))
        })
        .collect()
}

pub fn run_eval(spec: &ExperimentSpec, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    let models = load_models(checkpoints, spec)?;
    let reports = evaluate_models(&models, "train", &spec.env, &spec.eval.noise(), spec.eval.episodes)?;
    spec.write_resolved(out, Command::Eval)?;
    write_eval_csv(&out.join("eval.csv"), &reports)?;
    Ok(reports)
}

pub fn run_grid(spec: &ExperimentSpec, checkpoints: &[PathBuf], out: &Path) -> Result<crate::eval::Grid> {
    spec.validate()?;
    let models = load_models(checkpoints, spec)?;
    let grid = robustness_grid(&models, &spec.env, spec.eval.episodes, spec.eval.noise_seed)?;
    spec.write_resolved(out, Command::Grid)?;
    write_grid(out, &grid)?;
    Ok(grid)
}

pub fn run_generalize(spec: &ExperimentSpec, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    let models = load_models(checkpoints, spec)?;
    let reports = generalization_sweep(&models, &spec.env, spec.eval.episodes)?;
    spec.write_resolved(out, Command::Generalize)?;
    write_generalization_csv(&out.join("generalization.csv"), &reports)?;
    Ok(reports)
}

pub const SWEEP_HEADER: [&str; 7] = ["axis", "value", "model", "seed", "win_rate", "mean_reward", "final_ema_reward"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub win_rate: f64,
    pub mean_reward: f64,
    pub final_ema_reward: f64,
}

/// Trains and evaluates one run per axis value and seed. Each value gets its
/// own directory with a resolved spec and `eval.csv`; `sweep.csv` collects
/// every row with its axis value.
pub fn run_sweep(spec: &ExperimentSpec, out: &Path) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let (axis, values) = spec.sweep_values()?;
    let mut variants = Vec::with_capacity(values.len());
    for v in &values {
        let mut s = spec.clone();
        axis.apply(&mut s.model, v)?;
        s.run.sweep_values = vec![v.clone()];
        s.validate()?;
        variants.push((v.clone(), s));
    }
    spec.write_resolved(out, Command::Sweep)?;
    let mut rows = Vec::new();
    for (value, s) in &variants {
        let dir = out.join(format!("{}={value}", axis.as_str()));
        let outcomes = run_train(s, &dir)?;
        let models: Vec<NamedModel> = outcomes
            .iter()
            .zip(&s.run.seeds)
            .map(|(o, &seed)| Ok(NamedModel::new(s.model.kind.as_str(), QNetwork::load(&o.final_checkpoint)?, vec![seed])))
            .collect::<Result<_>>()?;
        let reports = evaluate_models(&models, "train", &s.env, &s.eval.noise(), s.eval.episodes)?;
        write_eval_csv(&dir.join("eval.csv"), &reports)?;
        for (o, r) in outcomes.iter().zip(reports.iter().flat_map(|r| &r.per_seed)) {
            rows.push(SweepRow {
                value: value.clone(),
                seed: r.seed,
                win_rate: r.win_rate,
                mean_reward: r.mean_reward,
                final_ema_reward: o.episodes.last().map_or(f64::NAN, |e| e.ema_reward),
            });
        }
    }
    let path = out.join("sweep.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(SWEEP_HEADER)?;
    for r in &rows {
        w.write_record([
            axis.as_str().to_string(),
            r.value.clone(),
            spec.model.kind.as_str().to_string(),
            r.seed.to_string(),
            r.win_rate.to_string(),
            r.mean_reward.to_string(),
            r.final_ema_reward.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(rows)
}

/// A per-seed CSV schema that `report` knows how to merge.
struct Table {
    file: &'static str,
    header: &'static [&'static str],
    keys: &'static [&'static str],
    values: &'static [&'static str],
    output: &'static str,
}

const TABLES: [Table; 4] = [
    Table {
        file: "grid.csv",
        header: &GRID_HEADER,
        keys: &["obs_sigma", "act_prob", "model"],
        values: &["win_rate", "mean_reward"],
        output: "report_grid.csv",
    },
    Table {
        file: "generalization.csv",
        header: &GENERALIZATION_HEADER,
        keys: &["test_id", "model"],
        values: &["win_rate", "mean_reward"],
        output: "report_generalization.csv",
    },
    Table {
        file: "eval.csv",
        header: &EVAL_HEADER,
        keys: &["env_id", "obs_sigma", "act_prob", "sticky_prob", "model"],
        values: &["win_rate", "mean_reward"],
        output: "report_eval.csv",
    },
    Table {
        file: "sweep.csv",
        header: &SWEEP_HEADER,
        keys: &["axis", "value", "model"],
        values: &["win_rate", "mean_reward", "final_ema_reward"],
        output: "report_sweep.csv",
    },
];

/// Mean and population std of every value column, per key.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedRow {
    pub key: Vec<String>,
    /// `(mean, std)` per value column.
    pub stats: Vec<(f64, f64)>,
    pub n: usize,
}

fn read_table(path: &Path, table: &Table) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let schema = |reason: String| Error::Schema {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| schema(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != table.header {
        return Err(schema(format!("expected header {:?}, found {header:?}", table.header)));
    }
    let col = |name: &str| table.header.iter().position(|h| *h == name).expect("known column");
    let key_cols: Vec<usize> = table.keys.iter().map(|k| col(k)).collect();
    let value_cols: Vec<usize> = table.values.iter().map(|v| col(v)).collect();
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| schema(e.to_string()))?;
        let key = key_cols.iter().map(|&c| rec[c].to_string()).collect();
        let values = value_cols
            .iter()
            .map(|&c| {
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| schema(format!("row {}: `{}` is not a number", n + 2, &rec[c])))
            })
            .collect::<Result<_>>()?;
        rows.push((key, values));
    }
    Ok(rows)
}

/// Groups rows by key in first-appearance order.
pub fn merge_rows(rows: &[(Vec<String>, Vec<f64>)]) -> Vec<MergedRow> {
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut groups: HashMap<Vec<String>, Vec<&Vec<f64>>> = HashMap::new();
    for (k, v) in rows {
        groups
            .entry(k.clone())
            .or_insert_with(|| {
                order.push(k.clone());
                Vec::new()
            })
            .push(v);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let width = members[0].len();
            let stats = (0..width).map(|i| mean_std(members.iter().map(|v| v[i]))).collect();
            MergedRow {
                n: members.len(),
                key,
                stats,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    /// Source file name to merged rows.
    pub tables: Vec<(String, Vec<MergedRow>)>,
    pub written: Vec<PathBuf>,
}

/// Merges the per-seed CSVs found directly in each of `run_dirs` into
/// mean/std tables in `out`, plus win-rate and difference matrices when grid
/// results are present.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    let mut summary = ReportSummary::default();
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    for table in &TABLES {
        let mut rows = Vec::new();
        let mut found = false;
        for dir in run_dirs {
            let path = dir.join(table.file);
            if path.is_file() {
                found = true;
                rows.extend(read_table(&path, table)?);
            }
        }
        if !found {
            continue;
        }
        let merged = merge_rows(&rows);
        let path = out.join(table.output);
        let file = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = table.keys.iter().map(|k| k.to_string()).collect();
        for v in table.values {
            header.push(format!("{v}_mean"));
            header.push(format!("{v}_std"));
        }
        header.push("n".into());
        w.write_record(&header)?;
        for m in &merged {
            let mut rec = m.key.clone();
            for (mean, std) in &m.stats {
                rec.push(mean.to_string());
                rec.push(std.to_string());
            }
            rec.push(m.n.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        summary.written.push(path);
        if table.file == "grid.csv" {
            summary.written.extend(grid_matrices(&merged, out)?);
        }
        summary.tables.push((table.file.to_string(), merged));
    }
    if summary.tables.is_empty() {
        return Err(Error::Usage(format!(
            "no result files ({}) in the given directories",
            TABLES.map(|t| t.file).join(", ")
        )));
    }
    Ok(summary)
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn grid_matrices(merged: &[MergedRow], out: &Path) -> Result<Vec<PathBuf>> {
    let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
    let rows = sorted_unique(merged.iter().map(|m| parse(&m.key[0])));
    let cols = sorted_unique(merged.iter().map(|m| parse(&m.key[1])));
    let mut models: Vec<&str> = Vec::new();
    for m in merged {
        if !models.contains(&m.key[2].as_str()) {
            models.push(&m.key[2]);
        }
    }
    let matrix = |model: &str| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                cols.iter()
                    .map(|&c| {
                        merged
                            .iter()
                            .find(|m| parse(&m.key[0]) == r && parse(&m.key[1]) == c && m.key[2] == model)
                            .map_or(f64::NAN, |m| m.stats[0].0)
                    })
                    .collect()
            })
            .collect()
    };
    let mut written = Vec::new();
    for m in &models {
        let path = out.join(format!("report_matrix_{m}.csv"));
        write_matrix(&path, &rows, &cols, &matrix(m))?;
        written.push(path);
    }
    for a in &models {
        for b in &models {
            if a != b {
                let (ma, mb) = (matrix(a), matrix(b));
                let diff: Vec<Vec<f64>> = ma
                    .iter()
                    .zip(&mb)
                    .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
                    .collect();
                let path = out.join(format!("report_diff_{a}_minus_{b}.csv"));
                write_matrix(&path, &rows, &cols, &diff)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
