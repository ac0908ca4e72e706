//! Headless two-paddle Pong.
//!
//! The agent controls the left paddle, a ball-tracking controller drives the
//! right one. Geometry is in native field pixels with `y` growing downwards;
//! the ball position is its center and bounces off the top and bottom walls
//! as a point. Observations are stacks of grayscale frames rasterized
//! analytically (exact area averaging of the filled rectangles) onto an
//! `obs_side x obs_side` grid.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    NoOp = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Up, Action::Down, Action::NoOp];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::NoOp => "noop",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub field_width: f64,
    pub field_height: f64,
    pub ball_speed_x: f64,
    pub ball_speed_y: f64,
    /// Edge of the square ball.
    pub ball_size: f64,
    /// Agent paddle height; the opponent uses it too unless overridden.
    pub paddle_height: f64,
    pub paddle_width: f64,
    /// Agent paddle speed; the opponent uses it too unless overridden.
    pub paddle_speed: f64,
    /// Gap between each goal line and the back of its paddle.
    pub paddle_margin: f64,
    pub opponent_paddle_height: Option<f64>,
    pub opponent_paddle_speed: Option<f64>,
    pub max_score: u32,
    /// Nominal simulation rate. The simulator is never throttled; this is
    /// recorded for provenance only.
    pub frame_skip_fps: u32,
    pub stack_size: usize,
    pub obs_side: usize,
    pub rng_seed: u64,
    /// Hard cap on steps per episode, 0 disables it. Hitting the cap ends the
    /// episode as truncated, not terminal.
    pub max_steps: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            field_width: 640.0,
            field_height: 360.0,
            ball_speed_x: 12.0,
            ball_speed_y: 8.0,
            ball_size: 10.0,
            paddle_height: 80.0,
            paddle_width: 10.0,
            paddle_speed: 5.0,
            paddle_margin: 10.0,
            opponent_paddle_height: None,
            opponent_paddle_speed: None,
            max_score: 21,
            frame_skip_fps: 1920,
            stack_size: 4,
            obs_side: 84,
            rng_seed: 0,
            max_steps: 50_000,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be > 0, got {v}")))
            }
        }
        positive("field_width", self.field_width)?;
        positive("field_height", self.field_height)?;
        positive("ball_speed_x", self.ball_speed_x)?;
        positive("ball_speed_y", self.ball_speed_y)?;
        positive("ball_size", self.ball_size)?;
        positive("paddle_width", self.paddle_width)?;
        positive("paddle_height", self.paddle_height)?;
        positive("paddle_speed", self.paddle_speed)?;
        if let Some(v) = self.opponent_paddle_height {
            positive("opponent_paddle_height", v)?;
        }
        if let Some(v) = self.opponent_paddle_speed {
            positive("opponent_paddle_speed", v)?;
        }
        if !(self.paddle_margin >= 0.0) {
            return Err(Error::config("paddle_margin", "must be >= 0"));
        }
        if self.paddle_height >= self.field_height {
            return Err(Error::config(
                "paddle_height",
                format!(
                    "must be < field_height ({}), got {}",
                    self.field_height, self.paddle_height
                ),
            ));
        }
        if self.opponent_height() >= self.field_height {
            return Err(Error::config(
                "opponent_paddle_height",
                "must be < field_height",
            ));
        }
        if 2.0 * (self.paddle_margin + self.paddle_width) + self.ball_size >= self.field_width {
            return Err(Error::config("field_width", "too narrow for paddles and ball"));
        }
        if self.max_score < 1 {
            return Err(Error::config("max_score", "must be >= 1"));
        }
        if self.stack_size < 1 {
            return Err(Error::config("stack_size", "must be >= 1"));
        }
        if self.obs_side < 1 {
            return Err(Error::config("obs_side", "must be >= 1"));
        }
        Ok(())
    }

    pub fn opponent_height(&self) -> f64 {
        self.opponent_paddle_height.unwrap_or(self.paddle_height)
    }

    pub fn opponent_speed(&self) -> f64 {
        self.opponent_paddle_speed.unwrap_or(self.paddle_speed)
    }

    /// x of the agent paddle's front face.
    pub fn left_face(&self) -> f64 {
        self.paddle_margin + self.paddle_width
    }

    /// x of the opponent paddle's front face.
    pub fn right_face(&self) -> f64 {
        self.field_width - self.paddle_margin - self.paddle_width
    }
}

/// One grayscale frame, row-major `obs_side x obs_side`.
pub type Frame = Arc<[f32]>;

/// A stack of frames, oldest first. Frames are shared between consecutive
/// observations, so keeping many of them (e.g. in a replay buffer) costs
/// roughly one frame per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    side: usize,
    frames: Vec<Frame>,
}

impl Observation {
    pub fn new(side: usize, frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Usage("observation needs at least one frame".into()));
        }
        for f in &frames {
            if f.len() != side * side {
                return Err(Error::Shape {
                    op: "observation",
                    left: vec![side, side],
                    right: vec![f.len()],
                });
            }
        }
        Ok(Self { side, frames })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn stack_size(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// Number of scalars when flattened (`stack x side x side`).
    pub fn len(&self) -> usize {
        self.frames.len() * self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends the flattened stack (channel-major) to `out`.
    pub fn write_flat(&self, out: &mut Vec<f32>) {
        for f in &self.frames {
            out.extend_from_slice(f);
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.len());
        self.write_flat(&mut v);
        v
    }

    /// Builds an observation with every value mapped through `f`.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Observation {
        let frames = self
            .frames
            .iter()
            .map(|fr| fr.iter().map(|&v| f(v)).collect::<Vec<f32>>().into())
            .collect();
        Observation {
            side: self.side,
            frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub ball_pos: (f64, f64),
    pub ball_vel: (f64, f64),
    /// Top edge of the agent paddle.
    pub left_paddle_y: f64,
    /// Top edge of the opponent paddle.
    pub right_paddle_y: f64,
    pub score_left: u32,
    pub score_right: u32,
    pub step_count: u64,
    frame_history: VecDeque<Frame>,
    rng: ChaCha8Rng,
}

impl EnvState {
    pub fn frame_history(&self) -> impl Iterator<Item = &Frame> {
        self.frame_history.iter()
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f32,
    /// Episode over, either by score or by the step cap.
    pub done: bool,
    /// Ended by the step cap rather than by reaching `max_score`.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Pong {
    config: EnvConfig,
    state: EnvState,
}

impl Pong {
    /// Validates `config` and resets with `config.rng_seed`.
    pub fn new(config: EnvConfig) -> Result<Self> {
        let seed = config.rng_seed;
        let (state, _) = reset(&config, seed)?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Replaces the state wholesale. Intended for tests and scripted setups.
    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let (state, obs) = reset(&self.config, seed).expect("config validated in Pong::new");
        self.state = state;
        obs
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        step(&self.config, &mut self.state, action)
    }

    pub fn observation(&self) -> Observation {
        observation_of(&self.config, &self.state)
    }

    pub fn is_terminal(&self) -> bool {
        is_terminal(&self.config, &self.state)
    }

    pub fn agent_won(&self) -> bool {
        self.state.score_left >= self.config.max_score
    }
}

pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Observation)> {
    config.validate()?;
    let mut state = EnvState {
        ball_pos: (0.0, 0.0),
        ball_vel: (0.0, 0.0),
        left_paddle_y: 0.0,
        right_paddle_y: 0.0,
        score_left: 0,
        score_right: 0,
        step_count: 0,
        frame_history: VecDeque::with_capacity(config.stack_size),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    state.left_paddle_y = (config.field_height - config.paddle_height) / 2.0;
    state.right_paddle_y = (config.field_height - config.opponent_height()) / 2.0;
    // The opening serve heads towards the agent. Later serves leave the
    // paddles where they are.
    serve(config, &mut state, -1.0);
    let frame = rasterize(config, &state);
    for _ in 0..config.stack_size {
        state.frame_history.push_back(frame.clone());
    }
    let obs = observation_of(config, &state);
    Ok((state, obs))
}

pub fn is_terminal(config: &EnvConfig, state: &EnvState) -> bool {
    state.score_left >= config.max_score
        || state.score_right >= config.max_score
        || (config.max_steps > 0 && state.step_count >= config.max_steps)
}

fn serve(config: &EnvConfig, state: &mut EnvState, toward_x: f64) {
    state.ball_pos = (config.field_width / 2.0, config.field_height / 2.0);
    let vy_sign = if state.rng.gen::<bool>() { 1.0 } else { -1.0 };
    state.ball_vel = (
        toward_x.signum() * config.ball_speed_x,
        vy_sign * config.ball_speed_y,
    );
}

fn clamp_paddle(y: f64, height: f64, field_height: f64) -> f64 {
    y.clamp(0.0, field_height - height)
}

/// Built-in opponent: chase the ball's y at full speed, holding still while
/// the ball is within a quarter paddle of the paddle center.
fn opponent_move(config: &EnvConfig, state: &EnvState) -> f64 {
    let h = config.opponent_height();
    let center = state.right_paddle_y + h / 2.0;
    let dead_zone = h / 4.0;
    let by = state.ball_pos.1;
    let speed = config.opponent_speed();
    let y = if by < center - dead_zone {
        state.right_paddle_y - speed
    } else if by > center + dead_zone {
        state.right_paddle_y + speed
    } else {
        state.right_paddle_y
    };
    clamp_paddle(y, h, config.field_height)
}

fn overlaps_vertically(ball_y: f64, half: f64, paddle_y: f64, paddle_h: f64) -> bool {
    ball_y + half > paddle_y && ball_y - half < paddle_y + paddle_h
}

pub fn step(config: &EnvConfig, state: &mut EnvState, action: Action) -> Result<StepResult> {
    if is_terminal(config, state) {
        return Err(Error::Usage("step called on a terminal state".into()));
    }
    let w = config.field_width;
    let h = config.field_height;
    let half = config.ball_size / 2.0;

    let dy = match action {
        Action::Up => -config.paddle_speed,
        Action::Down => config.paddle_speed,
        Action::NoOp => 0.0,
    };
    state.left_paddle_y = clamp_paddle(state.left_paddle_y + dy, config.paddle_height, h);
    state.right_paddle_y = opponent_move(config, state);

    let (x, y) = state.ball_pos;
    let (mut vx, mut vy) = state.ball_vel;
    let mut nx = x + vx;
    let mut ny = y + vy;

    if ny < 0.0 {
        ny = -ny;
        vy = -vy;
    } else if ny > h {
        ny = 2.0 * h - ny;
        vy = -vy;
    }

    if vx < 0.0 {
        let face = config.left_face();
        if x - half >= face
            && nx - half < face
            && overlaps_vertically(ny, half, state.left_paddle_y, config.paddle_height)
        {
            nx = 2.0 * (face + half) - nx;
            vx = -vx;
        }
    } else {
        let face = config.right_face();
        if x + half <= face
            && nx + half > face
            && overlaps_vertically(ny, half, state.right_paddle_y, config.opponent_height())
        {
            nx = 2.0 * (face - half) - nx;
            vx = -vx;
        }
    }

    state.ball_pos = (nx, ny);
    state.ball_vel = (vx, vy);
    state.step_count += 1;

    let mut reward = 0.0;
    if nx <= 0.0 {
        state.score_right += 1;
        reward = -1.0;
        serve(config, state, -1.0);
    } else if nx >= w {
        state.score_left += 1;
        reward = 1.0;
        serve(config, state, 1.0);
    }

    let frame = rasterize(config, state);
    if state.frame_history.len() == config.stack_size {
        state.frame_history.pop_front();
    }
    state.frame_history.push_back(frame);

    let scored_out = state.score_left >= config.max_score || state.score_right >= config.max_score;
    let capped = config.max_steps > 0 && state.step_count >= config.max_steps;
    Ok(StepResult {
        observation: observation_of(config, state),
        reward,
        done: scored_out || capped,
        truncated: capped && !scored_out,
    })
}

fn observation_of(config: &EnvConfig, state: &EnvState) -> Observation {
    Observation {
        side: config.obs_side,
        frames: state.frame_history.iter().cloned().collect(),
    }
}

/// Axis-aligned rectangle in native pixels, half-open.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn clip(self, w: f64, h: f64) -> Option<Rect> {
        let r = Rect {
            x0: self.x0.max(0.0),
            y0: self.y0.max(0.0),
            x1: self.x1.min(w),
            y1: self.y1.min(h),
        };
        (r.x1 > r.x0 && r.y1 > r.y0).then_some(r)
    }

    fn intersect(self, o: Rect) -> Option<Rect> {
        let r = Rect {
            x0: self.x0.max(o.x0),
            y0: self.y0.max(o.y0),
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
        };
        (r.x1 > r.x0 && r.y1 > r.y0).then_some(r)
    }
}

/// Adds `sign * overlap_area / cell_area` of `r` to every cell of `frame`.
fn accumulate(frame: &mut [f64], side: usize, cw: f64, ch: f64, r: Rect, sign: f64) {
    let cell_area = cw * ch;
    let i0 = ((r.x0 / cw).floor() as usize).min(side - 1);
    let i1 = ((r.x1 / cw).ceil() as usize).min(side);
    let j0 = ((r.y0 / ch).floor() as usize).min(side - 1);
    let j1 = ((r.y1 / ch).ceil() as usize).min(side);
    for j in j0..j1 {
        let cy0 = j as f64 * ch;
        let oy = (r.y1.min(cy0 + ch) - r.y0.max(cy0)).max(0.0);
        if oy == 0.0 {
            continue;
        }
        for i in i0..i1 {
            let cx0 = i as f64 * cw;
            let ox = (r.x1.min(cx0 + cw) - r.x0.max(cx0)).max(0.0);
            frame[j * side + i] += sign * ox * oy / cell_area;
        }
    }
}

fn object_rects(config: &EnvConfig, state: &EnvState) -> (Rect, Rect, Rect) {
    let half = config.ball_size / 2.0;
    let (bx, by) = state.ball_pos;
    let ball = Rect {
        x0: bx - half,
        y0: by - half,
        x1: bx + half,
        y1: by + half,
    };
    let left = Rect {
        x0: config.paddle_margin,
        y0: state.left_paddle_y,
        x1: config.left_face(),
        y1: state.left_paddle_y + config.paddle_height,
    };
    let right = Rect {
        x0: config.right_face(),
        y0: state.right_paddle_y,
        x1: config.field_width - config.paddle_margin,
        y1: state.right_paddle_y + config.opponent_height(),
    };
    (ball, left, right)
}

/// Renders paddles and ball at intensity 1 on a black field and area-averages
/// the result down to `obs_side x obs_side`. Overlaps between the ball and a
/// paddle are counted once.
pub fn rasterize(config: &EnvConfig, state: &EnvState) -> Frame {
    let (ball, left, right) = object_rects(config, state);
    rasterize_rects(config, &[ball], &[left, right])
}

/// `ball_like` rectangles may overlap any of `solid`, which are pairwise
/// disjoint.
fn rasterize_rects(config: &EnvConfig, ball_like: &[Rect], solid: &[Rect]) -> Frame {
    let side = config.obs_side;
    let (w, h) = (config.field_width, config.field_height);
    let cw = w / side as f64;
    let ch = h / side as f64;
    let mut acc = vec![0.0f64; side * side];
    let solid: Vec<Rect> = solid.iter().filter_map(|r| r.clip(w, h)).collect();
    for r in &solid {
        accumulate(&mut acc, side, cw, ch, *r, 1.0);
    }
    for b in ball_like.iter().filter_map(|r| r.clip(w, h)) {
        accumulate(&mut acc, side, cw, ch, b, 1.0);
        for s in &solid {
            if let Some(i) = b.intersect(*s) {
                accumulate(&mut acc, side, cw, ch, i, -1.0);
            }
        }
    }
    acc.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()
}
