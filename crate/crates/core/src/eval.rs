//! Greedy evaluation under observation and action noise, robustness grids
//! and generalization sweeps.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::key_values;
use crate::env::{Action, EnvConfig, Observation, Pong};
use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::qnet::QNetwork;
use crate::trainer::argmax;

pub const GRID_OBS_SIGMAS: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 5.0, 10.0];
pub const GRID_ACT_PROBS: [f64; 6] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.30];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub obs_sigma: f64,
    pub act_prob: f64,
    pub sticky_prob: f64,
    pub noise_seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            obs_sigma: 0.0,
            act_prob: 0.0,
            sticky_prob: 0.0,
            noise_seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn observation(obs_sigma: f64) -> Self {
        Self {
            obs_sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.obs_sigma >= 0.0 && self.obs_sigma.is_finite()) {
            return Err(Error::config("eval.obs_sigma", "must be finite and non-negative"));
        }
        for (field, p) in [("eval.act_prob", self.act_prob), ("eval.sticky_prob", self.sticky_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if self.act_prob > 0.0 && self.sticky_prob > 0.0 {
            return Err(Error::config(
                "eval.sticky_prob",
                "random replacement and sticky actions are separate conditions",
            ));
        }
        Ok(())
    }
}

/// Evaluation settings shared by every command that rolls out a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Episodes per seed and condition.
    pub episodes: usize,
    pub obs_sigma: f64,
    pub act_prob: f64,
    pub sticky_prob: f64,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            obs_sigma: 0.0,
            act_prob: 0.0,
            sticky_prob: 0.0,
            noise_seed: 0,
        }
    }
}

key_values!(EvalConfig, "eval", {
    "episodes" => episodes,
    "obs_sigma" => obs_sigma,
    "act_prob" => act_prob,
    "sticky_prob" => sticky_prob,
    "noise_seed" => noise_seed,
});

impl EvalConfig {
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            obs_sigma: self.obs_sigma,
            act_prob: self.act_prob,
            sticky_prob: self.sticky_prob,
            noise_seed: self.noise_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("eval.episodes", "must be positive"));
        }
        self.noise().validate()
    }
}

/// Copy of `obs` with independent Gaussian noise on every pixel, unclipped.
pub fn add_obs_noise<R: Rng + ?Sized>(obs: &Observation, sigma: f64, rng: &mut R) -> Observation {
    if sigma == 0.0 {
        return obs.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    obs.map(|v| (f64::from(v) + normal.sample(rng)) as f32)
}

/// Replaces `a` by a uniform draw over all actions with probability `p`.
pub fn perturb_action<R: Rng + ?Sized>(a: Action, p: f64, rng: &mut R) -> Action {
    if p > 0.0 && rng.gen::<f64>() < p {
        Action::ALL[rng.gen_range(0..Action::COUNT)]
    } else {
        a
    }
}

/// Repeats `prev` with probability `p`. Without a previous action, `a` stands.
pub fn sticky_action<R: Rng + ?Sized>(a: Action, prev: Option<Action>, p: f64, rng: &mut R) -> Action {
    match prev {
        Some(prev) if p > 0.0 && rng.gen::<f64>() < p => prev,
        _ => a,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub win_rate: f64,
    pub mean_reward: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub env_id: String,
    pub model: String,
    pub noise: NoiseSpec,
    pub per_seed: Vec<SeedResult>,
}

impl EvalReport {
    pub fn win_rate(&self) -> (f64, f64) {
        mean_std(self.per_seed.iter().map(|s| s.win_rate))
    }

    pub fn mean_reward(&self) -> (f64, f64) {
        mean_std(self.per_seed.iter().map(|s| s.mean_reward))
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn eval_episode_seed(seed: u64, episode: usize) -> u64 {
    (seed ^ 0xE7A1_0000_0000_0000).wrapping_mul(0x2545_F491_4F6C_DD1D) ^ episode as u64
}

fn noise_rng(noise: &NoiseSpec, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(noise.noise_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed)
}

/// Greedy rollouts of `net` for every seed. The network itself is untouched;
/// each seed runs on a copy with a fresh gate average.
pub fn evaluate(
    net: &QNetwork<f32>,
    env_cfg: &EnvConfig,
    noise: &NoiseSpec,
    episodes: usize,
    seeds: &[u64],
) -> Result<Vec<SeedResult>> {
    noise.validate()?;
    if episodes == 0 {
        return Err(Error::config("eval.episodes", "must be positive"));
    }
    if crate::qnet::InputShape::of_env(env_cfg) != net.input() {
        return Err(Error::Usage(format!(
            "network expects {:?} observations, environment produces {:?}",
            net.input(),
            crate::qnet::InputShape::of_env(env_cfg)
        )));
    }
    seeds
        .iter()
        .map(|&seed| {
            let mut net = net.clone();
            net.reset_gate();
            let mut env = Pong::new(env_cfg.clone())?;
            let mut rng = noise_rng(noise, seed);
            let (mut wins, mut total) = (0usize, 0.0);
            for ep in 0..episodes {
                let mut obs = env.reset(eval_episode_seed(seed, ep));
                let mut prev = None;
                loop {
                    let seen = add_obs_noise(&obs, noise.obs_sigma, &mut rng);
                    let q = net.q_values(&seen, GateMode::Advance)?;
                    let greedy = Action::from_index(argmax(&q)).expect("three action values");
                    let mut action = perturb_action(greedy, noise.act_prob, &mut rng);
                    action = sticky_action(action, prev, noise.sticky_prob, &mut rng);
                    prev = Some(action);
                    let res = env.step(action)?;
                    total += f64::from(res.reward);
                    obs = res.observation;
                    if res.done {
                        break;
                    }
                }
                wins += usize::from(env.agent_won());
            }
            Ok(SeedResult {
                seed,
                win_rate: wins as f64 / episodes as f64,
                mean_reward: total / episodes as f64,
                episodes,
            })
        })
        .collect()
}

/// A network under evaluation with the seeds it is rolled out on. Models
/// sharing a name pool their per-seed results into one report.
#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub net: QNetwork<f32>,
    pub seeds: Vec<u64>,
}

impl NamedModel {
    pub fn new(name: impl Into<String>, net: QNetwork<f32>, seeds: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            net,
            seeds,
        }
    }
}

/// Runs `evaluate` for every (model, condition) pair in parallel and merges
/// models that share a name, keeping first-appearance order.
fn evaluate_conditions(
    models: &[NamedModel],
    conditions: &[(String, EnvConfig, NoiseSpec)],
    episodes: usize,
) -> Result<Vec<EvalReport>> {
    if models.is_empty() {
        return Err(Error::Usage("evaluation needs at least one model".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..conditions.len())
        .flat_map(|c| (0..models.len()).map(move |m| (c, m)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, m)| {
            let (_, env, noise) = &conditions[c];
            evaluate(&models[m].net, env, noise, episodes, &models[m].seeds)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for (&(c, m), per_seed) in jobs.iter().zip(results) {
        let (env_id, _, noise) = &conditions[c];
        let name = &models[m].name;
        match reports
            .iter_mut()
            .find(|r| &r.model == name && &r.env_id == env_id && r.noise == *noise)
        {
            Some(r) => r.per_seed.extend(per_seed),
            None => reports.push(EvalReport {
                env_id: env_id.clone(),
                model: name.clone(),
                noise: *noise,
                per_seed,
            }),
        }
    }
    Ok(reports)
}

/// One noise condition on one environment for every model.
pub fn evaluate_models(
    models: &[NamedModel],
    env_id: &str,
    env_cfg: &EnvConfig,
    noise: &NoiseSpec,
    episodes: usize,
) -> Result<Vec<EvalReport>> {
    evaluate_conditions(models, &[(env_id.to_string(), env_cfg.clone(), *noise)], episodes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub obs_sigma: f64,
    pub act_prob: f64,
    pub report: EvalReport,
}

/// Every (observation noise, action noise) cell for every model.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub obs_sigmas: Vec<f64>,
    pub act_probs: Vec<f64>,
    pub cells: Vec<GridCell>,
}

impl Grid {
    pub fn cell(&self, model: &str, obs_sigma: f64, act_prob: f64) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.report.model == model && c.obs_sigma == obs_sigma && c.act_prob == act_prob)
    }

    pub fn models(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !names.contains(&c.report.model.as_str()) {
                names.push(&c.report.model);
            }
        }
        names
    }

    /// Mean win rate per cell, rows by observation noise.
    pub fn win_matrix(&self, model: &str) -> Result<Vec<Vec<f64>>> {
        self.obs_sigmas
            .iter()
            .map(|&o| {
                self.act_probs
                    .iter()
                    .map(|&a| {
                        self.cell(model, o, a)
                            .map(|c| c.report.win_rate().0)
                            .ok_or_else(|| Error::Usage(format!("no grid cell for model {model}")))
                    })
                    .collect()
            })
            .collect()
    }

    /// Cell-wise `a - b` of mean win rates.
    pub fn difference(&self, a: &str, b: &str) -> Result<Vec<Vec<f64>>> {
        let (ma, mb) = (self.win_matrix(a)?, self.win_matrix(b)?);
        Ok(ma
            .iter()
            .zip(&mb)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
            .collect())
    }
}

/// Robustness grid over explicit axes. Cells run in parallel.
pub fn robustness_grid_over(
    models: &[NamedModel],
    env_cfg: &EnvConfig,
    obs_sigmas: &[f64],
    act_probs: &[f64],
    episodes: usize,
    noise_seed: u64,
) -> Result<Grid> {
    let conditions: Vec<(String, EnvConfig, NoiseSpec)> = obs_sigmas
        .iter()
        .flat_map(|&obs_sigma| {
            act_probs.iter().map(move |&act_prob| {
                let noise = NoiseSpec {
                    obs_sigma,
                    act_prob,
                    sticky_prob: 0.0,
                    noise_seed,
                };
                ("train".to_string(), env_cfg.clone(), noise)
            })
        })
        .collect();
    let cells = evaluate_conditions(models, &conditions, episodes)?
        .into_iter()
        .map(|report| GridCell {
            obs_sigma: report.noise.obs_sigma,
            act_prob: report.noise.act_prob,
            report,
        })
        .collect();
    Ok(Grid {
        obs_sigmas: obs_sigmas.to_vec(),
        act_probs: act_probs.to_vec(),
        cells,
    })
}

/// The full 6 x 6 robustness grid.
pub fn robustness_grid(models: &[NamedModel], env_cfg: &EnvConfig, episodes: usize, noise_seed: u64) -> Result<Grid> {
    robustness_grid_over(models, env_cfg, &GRID_OBS_SIGMAS, &GRID_ACT_PROBS, episodes, noise_seed)
}

/// One row of the generalization table: ball speeds and the agent's paddle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizationTest {
    pub id: &'static str,
    pub ball_speed_x: f64,
    pub ball_speed_y: f64,
    pub paddle_height: f64,
    pub paddle_speed: f64,
}

const fn row(id: &'static str, bx: f64, by: f64, h: f64, s: f64) -> GeneralizationTest {
    GeneralizationTest {
        id,
        ball_speed_x: bx,
        ball_speed_y: by,
        paddle_height: h,
        paddle_speed: s,
    }
}

pub const GENERALIZATION_TESTS: [GeneralizationTest; 8] = [
    row("train", 12.0, 8.0, 80.0, 5.0),
    row("test1", 15.0, 10.0, 80.0, 5.0),
    row("test2", 18.0, 12.0, 80.0, 5.0),
    row("test3", 12.0, 8.0, 60.0, 5.0),
    row("test4", 12.0, 8.0, 20.0, 5.0),
    row("test5", 12.0, 8.0, 80.0, 2.0),
    row("test6", 12.0, 8.0, 80.0, 3.0),
    row("test7", 12.0, 8.0, 80.0, 4.0),
];

impl GeneralizationTest {
    /// `train` with this row's ball speeds and agent paddle. The opponent
    /// keeps the training paddle.
    pub fn apply(&self, train: &EnvConfig) -> EnvConfig {
        let mut cfg = train.clone();
        cfg.ball_speed_x = self.ball_speed_x;
        cfg.ball_speed_y = self.ball_speed_y;
        if self.paddle_height != train.paddle_height {
            cfg.opponent_paddle_height = Some(train.opponent_height());
            cfg.paddle_height = self.paddle_height;
        }
        if self.paddle_speed != train.paddle_speed {
            cfg.opponent_paddle_speed = Some(train.opponent_speed());
            cfg.paddle_speed = self.paddle_speed;
        }
        cfg
    }
}

/// Noise-free evaluation of every model on every generalization row.
pub fn generalization_sweep(models: &[NamedModel], train_env: &EnvConfig, episodes: usize) -> Result<Vec<EvalReport>> {
    let conditions: Vec<(String, EnvConfig, NoiseSpec)> = GENERALIZATION_TESTS
        .iter()
        .map(|t| (t.id.to_string(), t.apply(train_env), NoiseSpec::default()))
        .collect();
    evaluate_conditions(models, &conditions, episodes)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub const EVAL_HEADER: [&str; 8] = [
    "env_id",
    "obs_sigma",
    "act_prob",
    "sticky_prob",
    "model",
    "seed",
    "win_rate",
    "mean_reward",
];
pub const GRID_HEADER: [&str; 6] = ["obs_sigma", "act_prob", "model", "seed", "win_rate", "mean_reward"];
pub const PIVOT_HEADER: [&str; 8] = [
    "obs_sigma",
    "act_prob",
    "model",
    "win_mean",
    "win_std",
    "reward_mean",
    "reward_std",
    "seeds",
];
pub const GENERALIZATION_HEADER: [&str; 5] = ["test_id", "model", "seed", "win_rate", "mean_reward"];

pub fn write_eval_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(EVAL_HEADER)?;
    for r in reports {
        for s in &r.per_seed {
            w.write_record([
                r.env_id.clone(),
                r.noise.obs_sigma.to_string(),
                r.noise.act_prob.to_string(),
                r.noise.sticky_prob.to_string(),
                r.model.clone(),
                s.seed.to_string(),
                s.win_rate.to_string(),
                s.mean_reward.to_string(),
            ])?;
        }
    }
    finish(w, path)
}

pub fn write_generalization_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(GENERALIZATION_HEADER)?;
    for r in reports {
        for s in &r.per_seed {
            w.write_record([
                r.env_id.clone(),
                r.model.clone(),
                s.seed.to_string(),
                s.win_rate.to_string(),
                s.mean_reward.to_string(),
            ])?;
        }
    }
    finish(w, path)
}

/// Matrix file: header row of column values, then one row per row value.
pub fn write_matrix(path: &Path, rows: &[f64], cols: &[f64], values: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["obs_sigma\\act_prob".to_string()];
    header.extend(cols.iter().map(f64::to_string));
    w.write_record(&header)?;
    for (r, vals) in rows.iter().zip(values) {
        let mut line = vec![r.to_string()];
        line.extend(vals.iter().map(f64::to_string));
        w.write_record(&line)?;
    }
    finish(w, path)
}

/// Writes `grid.csv`, `grid_pivot.csv`, a win-rate matrix per model and a
/// difference matrix for every ordered model pair.
pub fn write_grid(dir: &Path, grid: &Grid) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join("grid.csv");
    let mut w = writer(&path)?;
    w.write_record(GRID_HEADER)?;
    for c in &grid.cells {
        for s in &c.report.per_seed {
            w.write_record([
                c.obs_sigma.to_string(),
                c.act_prob.to_string(),
                c.report.model.clone(),
                s.seed.to_string(),
                s.win_rate.to_string(),
                s.mean_reward.to_string(),
            ])?;
        }
    }
    finish(w, &path)?;

    let path = dir.join("grid_pivot.csv");
    let mut w = writer(&path)?;
    w.write_record(PIVOT_HEADER)?;
    for c in &grid.cells {
        let (wm, ws) = c.report.win_rate();
        let (rm, rs) = c.report.mean_reward();
        w.write_record([
            c.obs_sigma.to_string(),
            c.act_prob.to_string(),
            c.report.model.clone(),
            wm.to_string(),
            ws.to_string(),
            rm.to_string(),
            rs.to_string(),
            c.report.per_seed.len().to_string(),
        ])?;
    }
    finish(w, &path)?;

    let models = grid.models();
    for m in &models {
        let matrix = grid.win_matrix(m)?;
        write_matrix(&dir.join(format!("matrix_{m}.csv")), &grid.obs_sigmas, &grid.act_probs, &matrix)?;
    }
    for a in &models {
        for b in &models {
            if a != b {
                let diff = grid.difference(a, b)?;
                let path = dir.join(format!("diff_{a}_minus_{b}.csv"));
                write_matrix(&path, &grid.obs_sigmas, &grid.act_probs, &diff)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
