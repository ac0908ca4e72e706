//! Double DQN: replay, epsilon-greedy exploration, online and target
//! networks, TD loss, target synchronisation and reward smoothing.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::key_values;
use crate::env::{Action, EnvConfig, Observation, Pong, StepResult};
use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::nn::{clip_grad_norm, zero_grads, Adam, AdamConfig, Real, Tensor};
use crate::qnet::{batch_observations, InputShape, ModelConfig, ModelKind, QNetwork};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub num_episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Time constant of the exponential decay, in environment steps.
    pub eps_decay: f64,
    /// Gradient steps between hard target updates.
    pub target_update_freq: u64,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    /// Episodes between checkpoints.
    pub save_every: usize,
    pub grad_clip: f64,
    /// Smoothing coefficient of the episode reward average.
    pub reward_ema_alpha: f64,
    /// Environment steps per gradient step.
    pub train_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 64,
            num_episodes: 1500,
            eps_start: 1.0,
            eps_end: 0.01,
            eps_decay: 200_000.0,
            target_update_freq: 1000,
            learning_rate: 5e-7,
            replay_capacity: 100_000,
            save_every: 500,
            grad_clip: 10.0,
            reward_ema_alpha: 0.05,
            train_every: 1,
        }
    }
}

key_values!(TrainConfig, "train", {
    "gamma" => gamma,
    "batch_size" => batch_size,
    "num_episodes" => num_episodes,
    "eps_start" => eps_start,
    "eps_end" => eps_end,
    "eps_decay" => eps_decay,
    "target_update_freq" => target_update_freq,
    "learning_rate" => learning_rate,
    "replay_capacity" => replay_capacity,
    "save_every" => save_every,
    "grad_clip" => grad_clip,
    "reward_ema_alpha" => reward_ema_alpha,
    "train_every" => train_every,
});

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("train.gamma", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::config("train.eps_start", "epsilons must lie in [0, 1]"));
        }
        if self.eps_end > self.eps_start {
            return Err(Error::config("train.eps_end", "must not exceed eps_start"));
        }
        if !(self.eps_decay > 0.0) {
            return Err(Error::config("train.eps_decay", "must be positive"));
        }
        if self.target_update_freq == 0 {
            return Err(Error::config("train.target_update_freq", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::config("train.replay_capacity", "must hold at least one batch"));
        }
        if self.save_every == 0 {
            return Err(Error::config("train.save_every", "must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        if !(self.reward_ema_alpha > 0.0 && self.reward_ema_alpha <= 1.0) {
            return Err(Error::config("train.reward_ema_alpha", "must lie in (0, 1]"));
        }
        if self.train_every == 0 {
            return Err(Error::config("train.train_every", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Exploration rate after `step` environment steps.
pub fn epsilon(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.eps_end + (cfg.eps_start - cfg.eps_end) * (-(step as f64) / cfg.eps_decay).exp()
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(q: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over action values.
pub fn select_action<T: PartialOrd + Copy, R: Rng + ?Sized>(q: &[T], eps: f64, rng: &mut R) -> Action {
    if eps > 0.0 && rng.gen::<f64>() < eps {
        Action::ALL[rng.gen_range(0..Action::COUNT)]
    } else {
        Action::from_index(argmax(q)).expect("three action values")
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub s: Observation,
    pub a: Action,
    pub r: f32,
    pub s_next: Observation,
    /// True only when `s_next` is terminal; step-cap truncation still bootstraps.
    pub done: bool,
}

/// Fixed-capacity ring buffer overwriting the oldest transition.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Slot indices of a uniform sample without replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n > self.items.len() {
            return Err(Error::Usage(format!(
                "cannot sample {n} transitions from {}",
                self.items.len()
            )));
        }
        Ok(sample(rng, self.items.len(), n).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.items.get(slot)
    }
}

/// Double-Q targets from precomputed next-state values: the online values
/// pick the action, the target values price it.
pub fn double_q_targets<T: Real>(
    rewards: &[f32],
    dones: &[bool],
    q_online_next: &Tensor<T>,
    q_target_next: &Tensor<T>,
    gamma: f64,
) -> Vec<T> {
    rewards
        .iter()
        .zip(dones)
        .enumerate()
        .map(|(i, (&r, &done))| {
            let r = T::of(f64::from(r));
            if done {
                r
            } else {
                let best = argmax(q_online_next.row(i));
                r + T::of(gamma) * q_target_next.row(i)[best]
            }
        })
        .collect()
}

/// TD targets for a batch. Neither network records anything or moves its
/// gate average.
pub fn td_target<T: Real>(
    batch: &[&Transition],
    gamma: f64,
    online: &mut QNetwork<T>,
    target: &mut QNetwork<T>,
) -> Result<Vec<T>> {
    if batch.is_empty() {
        return Err(Error::Usage("td_target on an empty batch".into()));
    }
    let next: Vec<&Observation> = batch.iter().map(|t| &t.s_next).collect();
    let x = batch_observations::<T>(&next)?;
    let q_online = online.infer(&x, GateMode::Frozen)?;
    let q_target = target.infer(&x, GateMode::Frozen)?;
    let rewards: Vec<f32> = batch.iter().map(|t| t.r).collect();
    let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
    Ok(double_q_targets(&rewards, &dones, &q_online, &q_target, gamma))
}

/// Mean squared TD error and its gradient with respect to the action values.
pub fn squared_td_error<T: Real>(q: &Tensor<T>, actions: &[Action], y: &[T]) -> (f64, Tensor<T>) {
    let b = actions.len();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut loss = 0.0;
    let scale = T::of(2.0 / b as f64);
    for (i, (&a, &target)) in actions.iter().zip(y).enumerate() {
        let residual = q.row(i)[a.index()] - target;
        loss += residual.f64() * residual.f64();
        dq.data_mut()[i * Action::COUNT + a.index()] = scale * residual;
    }
    (loss / b.max(1) as f64, dq)
}

/// Forward and backward pass of the TD loss on `online`; returns the loss.
/// Gradients accumulate into the online network only.
pub fn td_loss<T: Real>(batch: &[&Transition], y: &[T], online: &mut QNetwork<T>) -> Result<f64> {
    let states: Vec<&Observation> = batch.iter().map(|t| &t.s).collect();
    let x = batch_observations::<T>(&states)?;
    let q = online.forward(&x, GateMode::Advance)?;
    let actions: Vec<Action> = batch.iter().map(|t| t.a).collect();
    let (loss, dq) = squared_td_error(&q, &actions, y);
    if !loss.is_finite() {
        online.clear_cache();
        return Err(Error::Numeric(format!("TD loss is {loss}")));
    }
    online.backward(&dq)?;
    Ok(loss)
}

/// Hard update of `target` when `grad_step` is a multiple of `every`.
pub fn sync_target<T: Real>(online: &QNetwork<T>, target: &mut QNetwork<T>, grad_step: u64, every: u64) -> bool {
    if every > 0 && grad_step % every == 0 {
        target.copy_from(online);
        true
    } else {
        false
    }
}

/// Exponential moving average of episode rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTracker {
    alpha: f64,
    ema: Option<f64>,
    history: Vec<f64>,
}

impl RewardTracker {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config("train.reward_ema_alpha", "must lie in (0, 1]"));
        }
        Ok(Self {
            alpha,
            ema: None,
            history: Vec::new(),
        })
    }

    pub fn update(&mut self, r: f64) -> f64 {
        let next = match self.ema {
            None => r,
            Some(prev) => self.alpha * r + (1.0 - self.alpha) * prev,
        };
        self.ema = Some(next);
        self.history.push(r);
        next
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

/// Smoothed series of `rewards`, one value per episode.
pub fn ema_series(rewards: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let mut t = RewardTracker::new(alpha)?;
    Ok(rewards.iter().map(|&r| t.update(r)).collect())
}

/// Anything the trainer can act in.
pub trait Environment {
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: Action) -> Result<StepResult>;
    fn input_shape(&self) -> InputShape;
    fn agent_won(&self) -> bool;
}

impl Environment for Pong {
    fn reset(&mut self, seed: u64) -> Observation {
        Pong::reset(self, seed)
    }

    fn step(&mut self, action: Action) -> Result<StepResult> {
        Pong::step(self, action)
    }

    fn input_shape(&self) -> InputShape {
        InputShape::of_env(self.config())
    }

    fn agent_won(&self) -> bool {
        Pong::agent_won(self)
    }
}

/// Two-state deterministic chain with one-hot observations.
///
/// From state 0, `Up` moves to state 1. In state 1, `Up` pays 1 and stays,
/// `NoOp` stays unpaid and `Down` returns to state 0. Every other move stays
/// in state 0 unpaid. Episodes are cut after `horizon` steps.
#[derive(Debug, Clone)]
pub struct ToyChain {
    pub state: usize,
    pub horizon: u64,
    steps: u64,
}

impl ToyChain {
    pub fn new(horizon: u64) -> Self {
        Self {
            state: 0,
            horizon,
            steps: 0,
        }
    }

    /// Deterministic `(next_state, reward)`.
    pub fn transition(state: usize, action: Action) -> (usize, f32) {
        match (state, action) {
            (0, Action::Up) => (1, 0.0),
            (0, _) => (0, 0.0),
            (_, Action::Up) => (1, 1.0),
            (_, Action::Down) => (0, 0.0),
            (_, Action::NoOp) => (1, 0.0),
        }
    }

    pub fn observe(state: usize) -> Observation {
        let one_hot = |on: bool| -> crate::env::Frame { vec![if on { 1.0 } else { 0.0 }].into() };
        Observation::new(1, vec![one_hot(state == 0), one_hot(state == 1)]).expect("two 1x1 frames")
    }
}

impl Environment for ToyChain {
    fn reset(&mut self, _seed: u64) -> Observation {
        self.state = 0;
        self.steps = 0;
        Self::observe(0)
    }

    fn step(&mut self, action: Action) -> Result<StepResult> {
        let (next, reward) = Self::transition(self.state, action);
        self.state = next;
        self.steps += 1;
        let cut = self.steps >= self.horizon;
        Ok(StepResult {
            observation: Self::observe(next),
            reward,
            done: cut,
            truncated: cut,
        })
    }

    fn input_shape(&self) -> InputShape {
        InputShape { channels: 2, side: 1 }
    }

    fn agent_won(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub step: u64,
    pub episode: usize,
    pub reward: f64,
    pub ema_reward: f64,
    /// Mean loss over the episode's gradient steps, if any.
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub global_gain: f64,
    pub won: bool,
}

pub const LOG_HEADER: [&str; 7] = ["step", "episode", "reward", "ema_reward", "loss", "epsilon", "global_gain"];

/// Online/target pair, optimizer, replay and exploration state.
pub struct Trainer<E> {
    pub env: E,
    pub online: QNetwork<f32>,
    pub target: QNetwork<f32>,
    pub config: TrainConfig,
    optimizer: Adam<f32>,
    replay: ReplayBuffer,
    rng: ChaCha8Rng,
    tracker: RewardTracker,
    seed: u64,
    env_steps: u64,
    grad_steps: u64,
    episodes: usize,
}

/// Seed of the environment for episode `episode` of a run seeded `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (episode as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl<E: Environment> Trainer<E> {
    pub fn new(env: E, model: ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::build(model, env.input_shape(), seed)?;
        let target = online.clone();
        Ok(Self {
            env,
            target,
            online,
            optimizer: Adam::new(config.adam()),
            replay: ReplayBuffer::new(config.replay_capacity),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_D00D),
            tracker: RewardTracker::new(config.reward_ema_alpha)?,
            config,
            seed,
            env_steps: 0,
            grad_steps: 0,
            episodes: 0,
        })
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn tracker(&self) -> &RewardTracker {
        &self.tracker
    }

    fn act(&mut self, obs: &Observation) -> Result<Action> {
        let eps = epsilon(self.env_steps, &self.config);
        if eps > 0.0 && self.rng.gen::<f64>() < eps {
            return Ok(Action::ALL[self.rng.gen_range(0..Action::COUNT)]);
        }
        let q = self.online.q_values(obs, GateMode::Advance)?;
        Ok(Action::from_index(argmax(&q)).expect("three action values"))
    }

    /// One gradient step on a replay batch; returns the loss.
    pub fn learn(&mut self) -> Result<f64> {
        let idx = self.replay.sample_indices(self.config.batch_size, &mut self.rng)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| &self.replay.items[i]).collect();
        let y = td_target(&batch, self.config.gamma, &mut self.online, &mut self.target)?;
        zero_grads(&mut self.online);
        let loss = td_loss(&batch, &y, &mut self.online)?;
        clip_grad_norm(&mut self.online, self.config.grad_clip);
        self.optimizer.step(&mut self.online)?;
        self.online.clear_cache();
        self.grad_steps += 1;
        sync_target(&self.online, &mut self.target, self.grad_steps, self.config.target_update_freq);
        Ok(loss)
    }

    /// Plays one training episode.
    pub fn run_episode(&mut self) -> Result<EpisodeLog> {
        let mut obs = self.env.reset(episode_seed(self.seed, self.episodes));
        let mut total = 0.0;
        let (mut loss_sum, mut loss_n) = (0.0, 0u64);
        let (mut gain_sum, mut gain_n) = (0.0, 0u64);
        loop {
            let action = self.act(&obs).map_err(|e| self.wrap(e))?;
            let res = self.env.step(action).map_err(|e| self.wrap(e))?;
            total += f64::from(res.reward);
            self.env_steps += 1;
            self.replay.push(Transition {
                s: obs,
                a: action,
                r: res.reward,
                s_next: res.observation.clone(),
                done: res.done && !res.truncated,
            });
            obs = res.observation;
            if self.replay.len() >= self.config.batch_size && self.env_steps % self.config.train_every == 0 {
                let loss = self.learn().map_err(|e| self.wrap(e))?;
                loss_sum += loss;
                loss_n += 1;
                gain_sum += self.online.global_gain();
                gain_n += 1;
            }
            if res.done {
                break;
            }
        }
        self.episodes += 1;
        let ema = self.tracker.update(total);
        Ok(EpisodeLog {
            step: self.env_steps,
            episode: self.episodes,
            reward: total,
            ema_reward: ema,
            loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            epsilon: epsilon(self.env_steps, &self.config),
            global_gain: if gain_n > 0 { gain_sum / gain_n as f64 } else { self.online.global_gain() },
            won: self.env.agent_won(),
        })
    }

    fn wrap(&self, e: Error) -> Error {
        Error::Training {
            step: self.env_steps,
            source: Box::new(e),
        }
    }
}

pub fn checkpoint_name(kind: ModelKind, seed: u64, episode: usize) -> String {
    format!("{kind}_seed{seed}_ep{episode}.ckpt")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub episodes: Vec<EpisodeLog>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

fn log_row(e: &EpisodeLog) -> [String; 7] {
    [
        e.step.to_string(),
        e.episode.to_string(),
        e.reward.to_string(),
        e.ema_reward.to_string(),
        e.loss.map_or_else(String::new, |l| l.to_string()),
        e.epsilon.to_string(),
        e.global_gain.to_string(),
    ]
}

/// Trains on Pong, writing `train_log.csv` and checkpoints into `out_dir`.
/// `on_episode` sees every finished episode.
pub fn train(
    env_cfg: &EnvConfig,
    train_cfg: &TrainConfig,
    model: &ModelConfig,
    seed: u64,
    out_dir: &Path,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let env = Pong::new(env_cfg.clone())?;
    let mut trainer = Trainer::new(env, model.clone(), train_cfg.clone(), seed)?;
    let log_path = out_dir.join("train_log.csv");
    let file = File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?;
    let mut log = csv::Writer::from_writer(file);
    log.write_record(LOG_HEADER)?;
    log.flush().map_err(|e| Error::io("writing training log", e))?;

    let kind = model.kind;
    let mut checkpoints = Vec::new();
    let mut episodes = Vec::with_capacity(train_cfg.num_episodes);
    for _ in 0..train_cfg.num_episodes {
        let ep = trainer.run_episode()?;
        log.write_record(log_row(&ep))?;
        log.flush().map_err(|e| Error::io("writing training log", e))?;
        log::info!(
            "{kind} seed {seed} episode {} reward {} ema {:.3} eps {:.3}",
            ep.episode,
            ep.reward,
            ep.ema_reward,
            ep.epsilon
        );
        on_episode(&ep);
        if ep.episode % train_cfg.save_every == 0 && ep.episode < train_cfg.num_episodes {
            let path = out_dir.join(checkpoint_name(kind, seed, ep.episode));
            trainer.online.save(&path)?;
            checkpoints.push(path);
        }
        episodes.push(ep);
    }
    let final_checkpoint = out_dir.join(checkpoint_name(kind, seed, train_cfg.num_episodes));
    trainer.online.save(&final_checkpoint)?;
    checkpoints.push(final_checkpoint.clone());
    Ok(TrainOutcome {
        episodes,
        checkpoints,
        final_checkpoint,
    })
}
