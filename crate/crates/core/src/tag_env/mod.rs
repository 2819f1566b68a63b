//! Predator–prey pursuit in a bounded 2-D arena.
//!
//! One prey (the agent) is chased by three scripted predators. Each predator
//! carries a hidden behaviour mode — CHASE steers at the prey, INTERCEPT
//! leads the prey's velocity — and flips mode stochastically only while close
//! to the prey. The mode never appears in the observation, so near-field
//! predator motion is genuinely bimodal from the agent's point of view.
//!
//! All randomness comes from a `ChaCha12` generator seeded at [`reset`];
//! identical seeds and actions reproduce trajectories exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub const NUM_PREDATORS: usize = 3;
pub const OBS_DIM: usize = 2 + 2 + 2 * NUM_PREDATORS + 2 * NUM_PREDATORS;
pub const ACTION_DIM: usize = 2;
pub const EPISODE_LENGTH: usize = 100;

/// Reward is `-collision_penalty` per predator overlapping the prey this step.
pub const COLLISION_PENALTY: f64 = 1.0;
/// Predators may flip mode only within this distance of the prey.
pub const TRIGGER_RADIUS: f64 = 0.5;
/// Per-step mode flip probability inside the trigger radius.
pub const P_SWITCH: f64 = 0.1;
/// INTERCEPT aims this many steps ahead of the prey's current velocity.
pub const LEAD_STEPS: f64 = 5.0;
pub const DAMPING: f64 = 0.25;
pub const ACCEL_GAIN: f64 = 0.15;
pub const PREDATOR_MAX_SPEED: f64 = 0.05;
/// Prey outruns predators 1.3x in open field; walls make pursuit viable.
pub const PREY_MAX_SPEED: f64 = 1.3 * PREDATOR_MAX_SPEED;
pub const PREY_RADIUS: f64 = 0.05;
pub const PREDATOR_RADIUS: f64 = 0.075;
/// Predators spawn at least this far from the prey.
pub const MIN_SPAWN_DIST: f64 = 0.5;
/// Arena is the square `[-ARENA_HALF, ARENA_HALF]²`.
pub const ARENA_HALF: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rescale to `max` if longer; zero stays zero.
    pub fn clamp_norm(self, max: f64) -> Self {
        let n = self.norm();
        if n > max {
            self * (max / n)
        } else {
            self
        }
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, c: f64) -> Vec2 {
        Vec2::new(self.x * c, self.y * c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredatorMode {
    Chase,
    Intercept,
}

impl PredatorMode {
    pub fn flipped(self) -> Self {
        match self {
            PredatorMode::Chase => PredatorMode::Intercept,
            PredatorMode::Intercept => PredatorMode::Chase,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PredatorMode::Chase => "CHASE",
            PredatorMode::Intercept => "INTERCEPT",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Body {
    pub pos: Vec2,
    pub vel: Vec2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Predator {
    pub body: Body,
    pub mode: PredatorMode,
}

/// Full simulator state. The RNG is part of the state: cloning the state and
/// replaying the same actions reproduces the same future.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub prey: Body,
    pub predators: [Predator; NUM_PREDATORS],
    pub step_index: usize,
    rng: ChaCha12Rng,
}

pub type Observation = [f64; OBS_DIM];

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("step() called on a finished episode")]
    EpisodeOver,
    #[error("predator index {0} out of range (< {NUM_PREDATORS})")]
    BadPredatorIndex(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub collisions: usize,
}

/// Fresh episode: prey at the origin, predators uniform in the arena but at
/// least [`MIN_SPAWN_DIST`] away, everyone at rest, all modes CHASE.
pub fn reset(seed: u64) -> (EnvState, Observation) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let predators = std::array::from_fn(|_| {
        let pos = loop {
            let p = Vec2::new(
                rng.gen_range(-ARENA_HALF..ARENA_HALF),
                rng.gen_range(-ARENA_HALF..ARENA_HALF),
            );
            if p.norm() >= MIN_SPAWN_DIST {
                break p;
            }
        };
        Predator { body: Body { pos, vel: Vec2::ZERO }, mode: PredatorMode::Chase }
    });
    let state = EnvState {
        prey: Body::default(),
        predators,
        step_index: 0,
        rng,
    };
    let obs = observe(&state);
    (state, obs)
}

/// What the agent sees: prey velocity, prey position, then each predator's
/// relative position and relative velocity. Modes are not observable.
pub fn observe(state: &EnvState) -> Observation {
    let mut obs = [0.0; OBS_DIM];
    obs[0] = state.prey.vel.x;
    obs[1] = state.prey.vel.y;
    obs[2] = state.prey.pos.x;
    obs[3] = state.prey.pos.y;
    for (i, p) in state.predators.iter().enumerate() {
        let rel_pos = p.body.pos - state.prey.pos;
        obs[4 + 2 * i] = rel_pos.x;
        obs[4 + 2 * i + 1] = rel_pos.y;
        let rel_vel = p.body.vel - state.prey.vel;
        obs[4 + 2 * NUM_PREDATORS + 2 * i] = rel_vel.x;
        obs[4 + 2 * NUM_PREDATORS + 2 * i + 1] = rel_vel.y;
    }
    obs
}

/// Decide predator `idx`'s acceleration command for this step, updating its
/// hidden mode. Inside [`TRIGGER_RADIUS`] the mode flips with [`P_SWITCH`]
/// (one RNG draw); outside it snaps back to CHASE without consuming
/// randomness. The returned command is clamped to unit norm.
pub fn predator_action(state: &mut EnvState, idx: usize) -> Result<Vec2, EnvError> {
    if idx >= NUM_PREDATORS {
        return Err(EnvError::BadPredatorIndex(idx));
    }
    let prey = state.prey;
    let dist = state.predators[idx].body.pos.dist(prey.pos);
    let mode = if dist > TRIGGER_RADIUS {
        PredatorMode::Chase
    } else {
        let flip: f64 = state.rng.gen();
        let m = state.predators[idx].mode;
        if flip < P_SWITCH {
            m.flipped()
        } else {
            m
        }
    };
    state.predators[idx].mode = mode;
    let target = match mode {
        PredatorMode::Chase => prey.pos,
        PredatorMode::Intercept => prey.pos + prey.vel * LEAD_STEPS,
    };
    Ok((target - state.predators[idx].body.pos).clamp_norm(1.0))
}

fn integrate(body: &mut Body, accel_cmd: Vec2, max_speed: f64) {
    body.vel = (body.vel * (1.0 - DAMPING) + accel_cmd * ACCEL_GAIN).clamp_norm(max_speed);
    body.pos = body.pos + body.vel;
    // Hard walls: clamp the position and zero the velocity on any axis that
    // hit, so nobody "slides along the outside".
    if body.pos.x.abs() > ARENA_HALF {
        body.pos.x = body.pos.x.clamp(-ARENA_HALF, ARENA_HALF);
        body.vel.x = 0.0;
    }
    if body.pos.y.abs() > ARENA_HALF {
        body.pos.y = body.pos.y.clamp(-ARENA_HALF, ARENA_HALF);
        body.vel.y = 0.0;
    }
}

/// Advance one step. Predator decisions and the prey action are simultaneous:
/// all of them see the pre-step state. Action components are clamped to
/// `[-1, 1]`.
pub fn step(state: &mut EnvState, action: Vec2) -> Result<StepResult, EnvError> {
    if state.step_index >= EPISODE_LENGTH {
        return Err(EnvError::EpisodeOver);
    }
    let action = Vec2::new(action.x.clamp(-1.0, 1.0), action.y.clamp(-1.0, 1.0));

    let mut accels = [Vec2::ZERO; NUM_PREDATORS];
    for (i, a) in accels.iter_mut().enumerate() {
        *a = predator_action(state, i).expect("index in range");
    }

    integrate(&mut state.prey, action, PREY_MAX_SPEED);
    for (p, &a) in state.predators.iter_mut().zip(&accels) {
        integrate(&mut p.body, a, PREDATOR_MAX_SPEED);
    }
    state.step_index += 1;

    let contact = PREY_RADIUS + PREDATOR_RADIUS;
    let collisions = state
        .predators
        .iter()
        .filter(|p| p.body.pos.dist(state.prey.pos) < contact)
        .count();
    Ok(StepResult {
        observation: observe(state),
        reward: -(collisions as f64) * COLLISION_PENALTY,
        done: state.step_index == EPISODE_LENGTH,
        collisions,
    })
}

/// Hand-written flee policy: run straight away from the nearest predator
/// (ties broken by lowest index). Used as a sanity baseline.
pub fn scripted_prey_baseline(state: &EnvState) -> Vec2 {
    let nearest = state
        .predators
        .iter()
        .map(|p| p.body.pos.dist(state.prey.pos))
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("distances are finite"))
        .map(|(i, _)| i)
        .unwrap();
    let away = state.prey.pos - state.predators[nearest].body.pos;
    let n = away.norm();
    if n == 0.0 {
        Vec2::ZERO
    } else {
        away * (1.0 / n)
    }
}

/// Episode trace for offline inspection; serializes to CSV.
#[derive(Default)]
pub struct TrajectoryLog {
    rows: Vec<String>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, state: &EnvState, reward: f64) {
        let mut row = format!("{},{},{}", state.step_index, state.prey.pos.x, state.prey.pos.y);
        for p in &state.predators {
            row.push_str(&format!(",{},{},{}", p.body.pos.x, p.body.pos.y, p.mode.as_str()));
        }
        row.push_str(&format!(",{reward}"));
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,prey_x,prey_y,pred0_x,pred0_y,pred0_mode,pred1_x,pred1_y,pred1_mode,pred2_x,pred2_y,pred2_mode,reward\n",
        );
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
