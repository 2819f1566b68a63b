//! The training loop: collect real steps into replay, fit the world model,
//! optimize the actor-critic inside imagination, evaluate on a fixed episode
//! suite, and log everything deterministically.
//!
//! Determinism contract: every random draw in a run descends from
//! `TrainConfig::seed` through tagged streams (or, for evaluation, from the
//! published episode seeds alone), so a (config, seed) pair reproduces its
//! metrics byte for byte.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::actor_critic::{actor_loss, critic_loss, lambda_returns, Critic, Policy, ReturnScale};
use crate::imagination::{
    imagine_rollout, ImaginationConfig, ImaginationError, PruneMode, RolloutRngs, RolloutStart,
};
use crate::numerics::{checkpoint, rng, Adam, NumericsError, Scalar, Tape, Tensor};
use crate::tag_env::{self, EnvState, Observation, ACTION_DIM, OBS_DIM};
use crate::world_model::{
    LatentTensors, SequenceBatch, WorldModel, WorldModelConfig, WorldModelError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config field `{field}`: {msg}")]
    Invalid { field: &'static str, msg: String },
}

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
    #[error(transparent)]
    Imagination(#[from] ImaginationError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("replay buffer holds no window of length {0}")]
    BufferTooSmall(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Every knob of a run, loadable from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: String,
    pub seed: u64,
    pub iterations: usize,
    pub collect_steps: usize,
    pub imagined_steps_per_iteration: usize,
    pub warmup_episodes: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub beta: f64,
    pub prune_mode: PruneMode,
    pub temperature: f64,
    pub wm_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
    pub target_ema: f64,
    pub return_scale_decay: f64,
    pub e_ens: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub free_bits: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: "ProbDreamer".into(),
            seed: 0,
            iterations: 50,
            collect_steps: 1000,
            imagined_steps_per_iteration: 20_000,
            warmup_episodes: 5,
            buffer_capacity: 100_000,
            batch_size: 16,
            sequence_length: 16,
            k: 1,
            n: 1,
            t: 16,
            beta: 0.1,
            prune_mode: PruneMode::TopK,
            temperature: 1.0,
            wm_lr: 3e-4,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            gamma: 0.985,
            lambda: 0.95,
            eta: 3e-4,
            target_ema: 0.02,
            return_scale_decay: 0.99,
            e_ens: 5,
            d_h: 128,
            d_z: 16,
            embed_dim: 32,
            hidden_dim: 64,
            free_bits: 1.0,
            beta_dyn: 1.0,
            beta_rep: 0.1,
            eval_episodes: 100,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    /// Parse a flat `key = value` file. Lines may be blank or `#` comments.
    /// Unknown and duplicate keys are rejected with the offending line.
    pub fn parse(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                msg: format!("expected `key = value`, got {stripped:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|s| s == key) {
                return Err(ConfigError::Parse { line, msg: format!("duplicate key `{key}`") });
            }
            seen.push(key.to_string());
            cfg.apply(key, value).map_err(|msg| ConfigError::Parse { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn int(key: &str, v: &str) -> Result<usize, String> {
            v.parse().map_err(|_| format!("key `{key}`: expected integer, got {v:?}"))
        }
        fn uint64(key: &str, v: &str) -> Result<u64, String> {
            v.parse().map_err(|_| format!("key `{key}`: expected integer, got {v:?}"))
        }
        fn real(key: &str, v: &str) -> Result<f64, String> {
            v.parse().map_err(|_| format!("key `{key}`: expected number, got {v:?}"))
        }
        match key {
            "model" => self.model = value.to_string(),
            "seed" => self.seed = uint64(key, value)?,
            "iterations" => self.iterations = int(key, value)?,
            "collect_steps" => self.collect_steps = int(key, value)?,
            "imagined_steps_per_iteration" => {
                self.imagined_steps_per_iteration = int(key, value)?
            }
            "warmup_episodes" => self.warmup_episodes = int(key, value)?,
            "buffer_capacity" => self.buffer_capacity = int(key, value)?,
            "batch_size" => self.batch_size = int(key, value)?,
            "sequence_length" => self.sequence_length = int(key, value)?,
            "k" => self.k = int(key, value)?,
            "n" => self.n = int(key, value)?,
            "t" => self.t = int(key, value)?,
            "beta" => self.beta = real(key, value)?,
            "prune_mode" => {
                self.prune_mode = match value {
                    "topk" => PruneMode::TopK,
                    "soft_resample" => PruneMode::SoftResample,
                    other => {
                        return Err(format!(
                            "key `prune_mode`: expected `topk` or `soft_resample`, got {other:?}"
                        ))
                    }
                }
            }
            "temperature" => self.temperature = real(key, value)?,
            "wm_lr" => self.wm_lr = real(key, value)?,
            "actor_lr" => self.actor_lr = real(key, value)?,
            "critic_lr" => self.critic_lr = real(key, value)?,
            "gamma" => self.gamma = real(key, value)?,
            "lambda" => self.lambda = real(key, value)?,
            "eta" => self.eta = real(key, value)?,
            "target_ema" => self.target_ema = real(key, value)?,
            "return_scale_decay" => self.return_scale_decay = real(key, value)?,
            "e_ens" => self.e_ens = int(key, value)?,
            "d_h" => self.d_h = int(key, value)?,
            "d_z" => self.d_z = int(key, value)?,
            "embed_dim" => self.embed_dim = int(key, value)?,
            "hidden_dim" => self.hidden_dim = int(key, value)?,
            "free_bits" => self.free_bits = real(key, value)?,
            "beta_dyn" => self.beta_dyn = real(key, value)?,
            "beta_rep" => self.beta_rep = real(key, value)?,
            "eval_episodes" => self.eval_episodes = int(key, value)?,
            "checkpoint_every" => self.checkpoint_every = int(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &'static str, msg: impl Into<String>) -> ConfigError {
            ConfigError::Invalid { field, msg: msg.into() }
        }
        self.imagination().validate().map_err(|e| {
            let field = match e {
                ImaginationError::BadParticleCount(_) => "k",
                ImaginationError::BadBranchCount(_) => "n",
                ImaginationError::BadHorizon(_) => "t",
                ImaginationError::BadBeta(_) => "beta",
                _ => "temperature",
            };
            bad(field, e.to_string())
        })?;
        if self.model.is_empty() {
            return Err(bad("model", "must be non-empty"));
        }
        if self.iterations < 1 {
            return Err(bad("iterations", "must be >= 1"));
        }
        if self.collect_steps < 1 {
            return Err(bad("collect_steps", "must be >= 1"));
        }
        if self.imagined_steps_per_iteration < 1 {
            return Err(bad("imagined_steps_per_iteration", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.sequence_length < 2 {
            return Err(bad("sequence_length", "must be >= 2"));
        }
        if self.buffer_capacity < tag_env::EPISODE_LENGTH {
            return Err(bad("buffer_capacity", "must hold at least one episode"));
        }
        for (field, v) in [
            ("wm_lr", self.wm_lr),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(
                    match field {
                        "wm_lr" => "wm_lr",
                        "actor_lr" => "actor_lr",
                        _ => "critic_lr",
                    },
                    "must be a positive number",
                ));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(bad("gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(bad("lambda", "must lie in [0, 1]"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(bad("eta", "must be >= 0"));
        }
        if !(self.target_ema > 0.0 && self.target_ema <= 1.0) {
            return Err(bad("target_ema", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.return_scale_decay) {
            return Err(bad("return_scale_decay", "must lie in [0, 1)"));
        }
        if self.e_ens < 2 {
            return Err(bad("e_ens", "disagreement needs an ensemble of >= 2"));
        }
        for (field, v) in [
            ("d_h", self.d_h),
            ("d_z", self.d_z),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v < 1 {
                return Err(bad(
                    match field {
                        "d_h" => "d_h",
                        "d_z" => "d_z",
                        "embed_dim" => "embed_dim",
                        _ => "hidden_dim",
                    },
                    "must be >= 1",
                ));
            }
        }
        if !(self.free_bits.is_finite() && self.free_bits >= 0.0) {
            return Err(bad("free_bits", "must be >= 0"));
        }
        if !(self.beta_dyn.is_finite() && self.beta_dyn >= 0.0) {
            return Err(bad("beta_dyn", "must be >= 0"));
        }
        if !(self.beta_rep.is_finite() && self.beta_rep >= 0.0) {
            return Err(bad("beta_rep", "must be >= 0"));
        }
        if self.eval_episodes < 1 {
            return Err(bad("eval_episodes", "must be >= 1"));
        }
        if self.checkpoint_every < 1 {
            return Err(bad("checkpoint_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "collect_steps = {}", self.collect_steps);
        let _ = writeln!(
            s,
            "imagined_steps_per_iteration = {}",
            self.imagined_steps_per_iteration
        );
        let _ = writeln!(s, "warmup_episodes = {}", self.warmup_episodes);
        let _ = writeln!(s, "buffer_capacity = {}", self.buffer_capacity);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "sequence_length = {}", self.sequence_length);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "t = {}", self.t);
        let _ = writeln!(s, "beta = {}", self.beta);
        let mode = match self.prune_mode {
            PruneMode::TopK => "topk",
            PruneMode::SoftResample => "soft_resample",
        };
        let _ = writeln!(s, "prune_mode = {mode}");
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "wm_lr = {}", self.wm_lr);
        let _ = writeln!(s, "actor_lr = {}", self.actor_lr);
        let _ = writeln!(s, "critic_lr = {}", self.critic_lr);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "eta = {}", self.eta);
        let _ = writeln!(s, "target_ema = {}", self.target_ema);
        let _ = writeln!(s, "return_scale_decay = {}", self.return_scale_decay);
        let _ = writeln!(s, "e_ens = {}", self.e_ens);
        let _ = writeln!(s, "d_h = {}", self.d_h);
        let _ = writeln!(s, "d_z = {}", self.d_z);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "free_bits = {}", self.free_bits);
        let _ = writeln!(s, "beta_dyn = {}", self.beta_dyn);
        let _ = writeln!(s, "beta_rep = {}", self.beta_rep);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn world_model(&self) -> WorldModelConfig {
        WorldModelConfig {
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            d_h: self.d_h,
            d_z: self.d_z,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            e_ens: self.e_ens,
            beta_dyn: self.beta_dyn,
            beta_rep: self.beta_rep,
            free_bits: self.free_bits,
        }
    }

    pub fn imagination(&self) -> ImaginationConfig {
        ImaginationConfig {
            k: self.k,
            n: self.n,
            t: self.t,
            beta: self.beta,
            prune_mode: self.prune_mode,
            temperature: self.temperature,
        }
    }

    /// Imagined state-steps per update is B·K·T; an iteration runs enough
    /// updates to reach the per-iteration imagination budget.
    pub fn updates_per_iteration(&self) -> usize {
        let per_update = self.batch_size * self.k * self.t;
        self.imagined_steps_per_iteration.div_ceil(per_update)
    }
}

/// One complete episode in replay layout: arrays of length `steps + 1` where
/// index l pairs obs[l] with the action/reward that led *into* it. Entry 0
/// carries the zero action and zero reward; the last entry has continue 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub observations: Vec<Observation>,
    pub actions_in: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub continues: Vec<f64>,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.observations.len() - 1
    }

    pub fn entries(&self) -> usize {
        self.observations.len()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Ring of whole episodes capped by total environment steps. Eviction always
/// removes the oldest episode in full, so sampled windows never straddle an
/// episode boundary by construction.
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity_steps: usize,
    total_steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize) -> Self {
        ReplayBuffer { episodes: VecDeque::new(), capacity_steps, total_steps: 0 }
    }

    pub fn push(&mut self, episode: Episode) {
        assert!(episode.entries() >= 2, "episode must contain at least one step");
        self.total_steps += episode.steps();
        self.episodes.push_back(episode);
        while self.total_steps > self.capacity_steps && self.episodes.len() > 1 {
            let evicted = self.episodes.pop_front().expect("non-empty");
            self.total_steps -= evicted.steps();
        }
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Uniform over all (episode, start) windows of `l` consecutive entries.
    pub fn sample_batch<S: Scalar>(
        &self,
        b: usize,
        l: usize,
        rng: &mut impl Rng,
    ) -> Result<SequenceBatch<S>, TrainerError> {
        let windows: Vec<usize> = self
            .episodes
            .iter()
            .map(|e| if e.entries() >= l { e.entries() - l + 1 } else { 0 })
            .collect();
        let total: usize = windows.iter().sum();
        if total == 0 {
            return Err(TrainerError::BufferTooSmall(l));
        }
        let mut rows: Vec<(&Episode, usize)> = Vec::with_capacity(b);
        for _ in 0..b {
            let mut w = rng.gen_range(0..total);
            let mut chosen = None;
            for (ep, &count) in self.episodes.iter().zip(&windows) {
                if w < count {
                    chosen = Some((ep, w));
                    break;
                }
                w -= count;
            }
            rows.push(chosen.expect("window index within total"));
        }
        let mut obs = Vec::with_capacity(l);
        let mut act = Vec::with_capacity(l);
        let mut rew = Vec::with_capacity(l);
        let mut cont = Vec::with_capacity(l);
        for step in 0..l {
            let mut o = Vec::with_capacity(b * OBS_DIM);
            let mut a = Vec::with_capacity(b * ACTION_DIM);
            let mut r = Vec::with_capacity(b);
            let mut c = Vec::with_capacity(b);
            for &(ep, start) in &rows {
                let idx = start + step;
                o.extend(ep.observations[idx].iter().map(|&x| S::from_f64(x)));
                a.extend(ep.actions_in[idx].iter().map(|&x| S::from_f64(x)));
                r.push(S::from_f64(ep.rewards[idx]));
                c.push(S::from_f64(ep.continues[idx]));
            }
            obs.push(Tensor::new(vec![b, OBS_DIM], o));
            act.push(Tensor::new(vec![b, ACTION_DIM], a));
            rew.push(Tensor::new(vec![b, 1], r));
            cont.push(Tensor::new(vec![b, 1], c));
        }
        Ok(SequenceBatch::new(obs, act, rew, cont)?)
    }
}

/// Deterministic per-iteration log row (wall-clock lives in timing.csv so the
/// metrics file stays byte-reproducible).
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub imagined_steps: usize,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_dynamics: f64,
    pub loss_representation: f64,
    pub loss_reward: f64,
    pub loss_continue: f64,
    pub loss_ensemble: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub disagreement_mean: f64,
    pub disagreement_min: f64,
    pub disagreement_max: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "iteration,env_steps,imagined_steps,loss_total,loss_recon,\
        loss_dynamics,loss_representation,loss_reward,loss_continue,loss_ensemble,actor_loss,\
        critic_loss,disagreement_mean,disagreement_min,disagreement_max,eval_return_mean,\
        eval_return_std";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.imagined_steps,
            self.loss_total,
            self.loss_recon,
            self.loss_dynamics,
            self.loss_representation,
            self.loss_reward,
            self.loss_continue,
            self.loss_ensemble,
            self.actor_loss,
            self.critic_loss,
            self.disagreement_mean,
            self.disagreement_min,
            self.disagreement_max,
            self.eval_return_mean,
            self.eval_return_std,
        )
    }
}

pub struct IterationOutput {
    pub metrics: MetricsRow,
    /// Mean branch disagreement of each update, in update order.
    pub update_disagreements: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

struct ActiveEpisode<S: Scalar> {
    env: EnvState,
    latent: LatentTensors<S>,
    filter_rng: ChaCha12Rng,
    action_rng: ChaCha12Rng,
    observations: Vec<Observation>,
    actions_in: Vec<[f64; ACTION_DIM]>,
    rewards: Vec<f64>,
    continues: Vec<f64>,
}

const INIT_WM: u64 = 0x01;
const INIT_POLICY: u64 = 0x02;
const INIT_CRITIC: u64 = 0x03;
const COLLECT: u64 = 0x10;
const UPDATE: u64 = 0x20;
const EVAL_FILTER: u64 = 0xE7A1;

pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub wm: WorldModel<S>,
    pub policy: Policy<S>,
    pub critic: Critic<S>,
    pub buffer: ReplayBuffer,
    pub return_scale: ReturnScale,
    wm_opt: Adam<S>,
    actor_opt: Adam<S>,
    critic_opt: Adam<S>,
    active: Option<ActiveEpisode<S>>,
    episode_counter: u64,
    update_counter: u64,
    pub iteration: usize,
    pub env_steps: usize,
    pub imagined_steps: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainerError> {
        cfg.validate()?;
        let wm = WorldModel::new(cfg.world_model(), &mut rng::stream(cfg.seed, INIT_WM));
        let feat = cfg.d_h + cfg.d_z;
        let policy =
            Policy::new(feat, cfg.hidden_dim, ACTION_DIM, &mut rng::stream(cfg.seed, INIT_POLICY));
        let critic = Critic::new(feat, cfg.hidden_dim, &mut rng::stream(cfg.seed, INIT_CRITIC));
        let wm_opt = Adam::new(&wm.store, cfg.wm_lr);
        let actor_opt = Adam::new(&policy.store, cfg.actor_lr);
        let critic_opt = Adam::new(&critic.store, cfg.critic_lr);
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        let return_scale = ReturnScale::new(cfg.return_scale_decay);
        Ok(Trainer {
            cfg,
            wm,
            policy,
            critic,
            buffer,
            return_scale,
            wm_opt,
            actor_opt,
            critic_opt,
            active: None,
            episode_counter: 0,
            update_counter: 0,
            iteration: 0,
            env_steps: 0,
            imagined_steps: 0,
        })
    }

    fn features_row(&self, latent: &LatentTensors<S>) -> Tensor<S> {
        let mut data = Vec::with_capacity(self.cfg.d_h + self.cfg.d_z);
        data.extend_from_slice(latent.h.data());
        data.extend_from_slice(latent.z.data());
        Tensor::new(vec![1, self.cfg.d_h + self.cfg.d_z], data)
    }

    fn obs_tensor(&self, obs: &Observation) -> Tensor<S> {
        Tensor::new(vec![1, OBS_DIM], obs.iter().map(|&x| S::from_f64(x)).collect())
    }

    fn begin_episode(&mut self) -> ActiveEpisode<S> {
        let ep_seed = rng::derive_seed(rng::derive_seed(self.cfg.seed, COLLECT), self.episode_counter);
        self.episode_counter += 1;
        let (env, obs0) = tag_env::reset(rng::derive_seed(ep_seed, 0));
        let mut filter_rng = rng::stream(ep_seed, 1);
        let action_rng = rng::stream(ep_seed, 2);
        let zero_action = Tensor::zeros(vec![1, ACTION_DIM]);
        let obs_t = self.obs_tensor(&obs0);
        let init = self.wm.initial_state_tensors(1);
        let latent = self.wm.filter_step(&init, &zero_action, &obs_t, &mut filter_rng);
        ActiveEpisode {
            env,
            latent,
            filter_rng,
            action_rng,
            observations: vec![obs0],
            actions_in: vec![[0.0; ACTION_DIM]],
            rewards: vec![0.0],
            continues: vec![1.0],
        }
    }

    /// Take exactly `n_steps` environment transitions, filtering the latent
    /// online and pushing each episode into replay as it completes. Acts
    /// uniformly at random until the buffer holds the warm-up episode count.
    pub fn collect(&mut self, n_steps: usize) {
        for _ in 0..n_steps {
            let mut active = match self.active.take() {
                Some(a) => a,
                None => self.begin_episode(),
            };
            let action = if self.buffer.n_episodes() < self.cfg.warmup_episodes {
                [
                    active.action_rng.gen_range(-1.0..1.0),
                    active.action_rng.gen_range(-1.0..1.0),
                ]
            } else {
                let feats = self.features_row(&active.latent);
                let a = self.policy.act_sampled(&feats, &mut active.action_rng);
                [a.data()[0].to_f64(), a.data()[1].to_f64()]
            };
            let result = tag_env::step(
                &mut active.env,
                tag_env::Vec2::new(action[0], action[1]),
            )
            .expect("active episode is never stepped past its end");
            let action_t =
                Tensor::new(vec![1, ACTION_DIM], action.iter().map(|&x| S::from_f64(x)).collect());
            let obs_t = self.obs_tensor(&result.observation);
            active.latent =
                self.wm.filter_step(&active.latent, &action_t, &obs_t, &mut active.filter_rng);
            active.observations.push(result.observation);
            active.actions_in.push(action);
            active.rewards.push(result.reward);
            active.continues.push(if result.done { 0.0 } else { 1.0 });
            self.env_steps += 1;
            if result.done {
                self.buffer.push(Episode {
                    observations: active.observations,
                    actions_in: active.actions_in,
                    rewards: active.rewards,
                    continues: active.continues,
                });
            } else {
                self.active = Some(active);
            }
        }
    }

    /// One gradient update: world model (model + ensemble losses jointly),
    /// then the actor against imagined λ-returns, then the critic towards
    /// the same targets, then the target-network EMA.
    pub fn update(&mut self) -> Result<UpdateStats, TrainerError> {
        let useed = rng::derive_seed(rng::derive_seed(self.cfg.seed, UPDATE), self.update_counter);
        self.update_counter += 1;

        let mut batch_rng = rng::stream(useed, 0);
        let batch =
            self.buffer
                .sample_batch::<S>(self.cfg.batch_size, self.cfg.sequence_length, &mut batch_rng)?;

        // World-model phase.
        let mut tape = Tape::new();
        let mut post_rng = rng::stream(useed, 1);
        let wm_out = self.wm.world_model_loss(&mut tape, &batch, &mut post_rng)?;
        let combined = tape.add(wm_out.total, wm_out.ensemble);
        let grads = tape.backward(combined);
        self.wm_opt.step(&mut self.wm.store, &grads)?;

        // Imagination phase, seeded from the batch's final posterior states.
        let mut tape = Tape::new();
        let start = RolloutStart { state: wm_out.final_state, posterior: wm_out.final_posterior };
        let img = self.cfg.imagination();
        let mut rolls = RolloutRngs::from_master(rng::derive_seed(useed, 2));
        let traj =
            imagine_rollout(&mut tape, &self.wm, &self.policy, &self.critic, &start, &img, &mut rolls)?;
        let aligned = traj.aligned(&mut tape);
        let returns = lambda_returns(
            &mut tape,
            &aligned.rewards,
            &aligned.values,
            &aligned.cont_probs,
            self.cfg.gamma,
            self.cfg.lambda,
        );

        // Actor phase: scale targets by the running return spread.
        let flat: Vec<f64> = returns
            .iter()
            .flat_map(|&r| tape.value(r).data().iter().map(|&x| x.to_f64()).collect::<Vec<_>>())
            .collect();
        let scale = self.return_scale.update(&flat);
        let a_loss = actor_loss(&mut tape, &returns, &aligned.entropies, scale, self.cfg.eta);
        let a_grads = tape.backward(a_loss);
        self.actor_opt.step(&mut self.policy.store, &a_grads)?;

        // Critic phase: regress online values on detached states toward the
        // (detached) λ-targets, then track with the EMA target.
        let mut v_online = Vec::with_capacity(traj.horizon());
        for &(h, z) in &aligned.states {
            let hd = tape.detach(h);
            let zd = tape.detach(z);
            let feats = tape.concat_cols(hd, zd);
            v_online.push(self.critic.value_online(&mut tape, feats));
        }
        let c_loss = critic_loss(&mut tape, &v_online, &returns);
        let c_grads = tape.backward(c_loss);
        self.critic_opt.step(&mut self.critic.store, &c_grads)?;
        self.critic.ema_update(self.cfg.target_ema);

        self.imagined_steps += self.cfg.batch_size * self.cfg.k * self.cfg.t;

        let mut d_min = f64::INFINITY;
        let mut d_max = f64::NEG_INFINITY;
        let mut d_sum = 0.0;
        let mut d_count = 0usize;
        for step in &traj.disagreements {
            for &d in step {
                d_min = d_min.min(d);
                d_max = d_max.max(d);
                d_sum += d;
                d_count += 1;
            }
        }
        Ok(UpdateStats {
            components: wm_out.components,
            actor_loss: tape.value(a_loss).data()[0].to_f64(),
            critic_loss: tape.value(c_loss).data()[0].to_f64(),
            disagreement_mean: d_sum / d_count as f64,
            disagreement_min: d_min,
            disagreement_max: d_max,
        })
    }

    /// One outer-loop iteration: collect, update until the imagination budget
    /// is met, evaluate, and report.
    pub fn train_iteration(&mut self) -> Result<IterationOutput, TrainerError> {
        let started = Instant::now();
        self.iteration += 1;
        self.collect(self.cfg.collect_steps);
        let updates = self.cfg.updates_per_iteration();
        let mut stats = Vec::with_capacity(updates);
        for _ in 0..updates {
            stats.push(self.update()?);
        }
        let eval = self.evaluate();
        let n = stats.len() as f64;
        let avg = |f: &dyn Fn(&UpdateStats) -> f64| stats.iter().map(|s| f(s)).sum::<f64>() / n;
        let metrics = MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            imagined_steps: self.imagined_steps,
            loss_total: avg(&|s| s.components.total),
            loss_recon: avg(&|s| s.components.recon),
            loss_dynamics: avg(&|s| s.components.dynamics),
            loss_representation: avg(&|s| s.components.representation),
            loss_reward: avg(&|s| s.components.reward),
            loss_continue: avg(&|s| s.components.cont),
            loss_ensemble: avg(&|s| s.components.ensemble),
            actor_loss: avg(&|s| s.actor_loss),
            critic_loss: avg(&|s| s.critic_loss),
            disagreement_mean: avg(&|s| s.disagreement_mean),
            disagreement_min: stats.iter().map(|s| s.disagreement_min).fold(f64::INFINITY, f64::min),
            disagreement_max: stats
                .iter()
                .map(|s| s.disagreement_max)
                .fold(f64::NEG_INFINITY, f64::max),
            eval_return_mean: eval.mean,
            eval_return_std: eval.std,
        };
        Ok(IterationOutput {
            metrics,
            update_disagreements: stats.iter().map(|s| s.disagreement_mean).collect(),
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Deterministic evaluation: the fixed episode suite (seeds 0..episodes)
    /// with zero-noise actions; the latent filter draws from a stream derived
    /// from the episode seed alone, so identical parameters always reproduce
    /// identical returns.
    pub fn evaluate(&self) -> EvalSummary {
        let returns: Vec<f64> =
            (0..self.cfg.eval_episodes as u64).map(|ep| self.eval_episode(ep)).collect();
        let (mean, std) = mean_std(&returns);
        EvalSummary { returns, mean, std }
    }

    pub fn eval_episode(&self, episode_seed: u64) -> f64 {
        let (mut env, obs0) = tag_env::reset(episode_seed);
        let mut filter_rng = rng::stream(rng::derive_seed(EVAL_FILTER, episode_seed), 0);
        let zero_action = Tensor::zeros(vec![1, ACTION_DIM]);
        let obs_t = self.obs_tensor(&obs0);
        let init = self.wm.initial_state_tensors(1);
        let mut latent = self.wm.filter_step(&init, &zero_action, &obs_t, &mut filter_rng);
        let mut total = 0.0;
        loop {
            let feats = self.features_row(&latent);
            let a = self.policy.act_mode(&feats);
            let action = [a.data()[0].to_f64(), a.data()[1].to_f64()];
            let result = tag_env::step(&mut env, tag_env::Vec2::new(action[0], action[1]))
                .expect("loop stops at the episode end");
            total += result.reward;
            if result.done {
                break;
            }
            let action_t =
                Tensor::new(vec![1, ACTION_DIM], action.iter().map(|&x| S::from_f64(x)).collect());
            let obs_t = self.obs_tensor(&result.observation);
            latent = self.wm.filter_step(&latent, &action_t, &obs_t, &mut filter_rng);
        }
        total
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainerError> {
        checkpoint::save(
            path,
            &[
                ("world_model", &self.wm.store),
                ("policy", &self.policy.store),
                ("critic", &self.critic.store),
                ("critic_target", &self.critic.target_store),
            ],
        )?;
        Ok(())
    }

    pub fn restore_checkpoint(&mut self, path: &Path) -> Result<(), TrainerError> {
        let entries = checkpoint::load(path)?;
        checkpoint::assign(&mut self.wm.store, "world_model", &entries)?;
        checkpoint::assign(&mut self.policy.store, "policy", &entries)?;
        checkpoint::assign(&mut self.critic.store, "critic", &entries)?;
        checkpoint::assign(&mut self.critic.target_store, "critic_target", &entries)?;
        Ok(())
    }

    /// Full run with artifacts: config snapshot, metrics/timing/disagreement
    /// CSVs, periodic and final checkpoints.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunSummary, TrainerError> {
        fs::create_dir_all(out_dir)?;
        fs::create_dir_all(out_dir.join("checkpoints"))?;
        fs::write(out_dir.join("config.cfg"), self.cfg.to_text())?;
        let mut metrics = fs::File::create(out_dir.join("metrics.csv"))?;
        writeln!(metrics, "{}", MetricsRow::HEADER)?;
        let mut timing = fs::File::create(out_dir.join("timing.csv"))?;
        writeln!(timing, "iteration,seconds")?;
        let mut disagreement = fs::File::create(out_dir.join("disagreement.csv"))?;
        writeln!(disagreement, "update,iteration,disagreement_mean")?;
        let mut update_idx = 0usize;
        let mut last_eval = EvalSummary { returns: vec![], mean: f64::NAN, std: f64::NAN };
        for it in 1..=self.cfg.iterations {
            let out = self.train_iteration()?;
            writeln!(metrics, "{}", out.metrics.to_csv())?;
            metrics.flush()?;
            writeln!(timing, "{},{:.3}", it, out.seconds)?;
            timing.flush()?;
            for d in &out.update_disagreements {
                writeln!(disagreement, "{},{},{}", update_idx, it, d)?;
                update_idx += 1;
            }
            disagreement.flush()?;
            last_eval = EvalSummary {
                returns: vec![],
                mean: out.metrics.eval_return_mean,
                std: out.metrics.eval_return_std,
            };
            if it % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint(&out_dir.join("checkpoints").join(format!("iter_{it:04}.ckpt")))?;
            }
        }
        self.save_checkpoint(&out_dir.join("checkpoints").join("final.ckpt"))?;
        Ok(RunSummary {
            out_dir: out_dir.to_path_buf(),
            final_eval_mean: last_eval.mean,
            final_eval_std: last_eval.std,
        })
    }
}

pub struct UpdateStats {
    pub components: crate::world_model::LossComponents,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub disagreement_mean: f64,
    pub disagreement_min: f64,
    pub disagreement_max: f64,
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub final_eval_mean: f64,
    pub final_eval_std: f64,
}

/// One comparison-table row: a model trained over several seeds.
#[derive(Clone, Debug)]
pub struct TableRow {
    pub model: String,
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub mean: f64,
    pub std: f64,
}

pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,k,n,t,performance_mean,performance_std\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.model, r.k, r.n, r.t, r.mean, r.std);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let headers = ["Model", "K", "N", "T", "Performance"];
        let mut cells: Vec<[String; 5]> = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            cells.push([
                r.model.clone(),
                r.k.to_string(),
                r.n.to_string(),
                r.t.to_string(),
                format!("{:.2} ± {:.2}", r.mean, r.std),
            ]);
        }
        let mut widths = headers.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let fmt_row = |cols: &[String; 5], widths: &[usize; 5]| -> String {
            let mut line = String::new();
            for (i, (c, w)) in cols.iter().zip(widths).enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                let _ = write!(line, "{c:<w$}", w = *w);
            }
            line.trim_end().to_string()
        };
        let header_cells = headers.map(String::from);
        let _ = writeln!(s, "{}", fmt_row(&header_cells, &widths));
        for row in &cells {
            let _ = writeln!(s, "{}", fmt_row(row, &widths));
        }
        s
    }
}

/// Train every config over every seed (sequentially), evaluate, and emit the
/// comparison table. Config validation failures abort before any training.
pub fn run_experiment<S: Scalar>(
    configs: &[TrainConfig],
    seeds: &[u64],
    out_root: &Path,
) -> Result<ComparisonTable, TrainerError> {
    for cfg in configs {
        cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut finals = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            let mut trainer: Trainer<S> = Trainer::new(run_cfg)?;
            let dir = out_root.join(format!("{}_seed{}", sanitize(&cfg.model), seed));
            let summary = trainer.run(&dir)?;
            finals.push(summary.final_eval_mean);
        }
        let (mean, std) = mean_std(&finals);
        rows.push(TableRow { model: cfg.model.clone(), k: cfg.k, n: cfg.n, t: cfg.t, mean, std });
    }
    Ok(ComparisonTable { rows })
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
