//! K-particle latent rollouts with N-way action branching, free-energy
//! scoring, and per-step pruning.
//!
//! Each step turns K particles into K·N branches (N policy samples per
//! particle, each advanced one prior step), scores every branch with
//! `F = value + β·σ²_ens`, and keeps exactly K survivors — either the top-K
//! by score or a systematic resample with weights ∝ exp(F/τ). Selection is a
//! hard index choice: gradients flow through the gathered tensors, never
//! through the selection itself. Particles carry no weights between prunes.
//!
//! RNG discipline: one dedicated stream per concern (action sampling, latent
//! sampling, resampling), so a K=1, N=1 rollout consumes the action and
//! latent streams in exactly the order the plain single-trajectory path
//! does, making the two bitwise identical.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::actor_critic::{Critic, Policy};
use crate::numerics::{rng, Gaussian, Scalar, Tape, Value};
use crate::world_model::{LatentState, LatentTensors, WorldModel, WorldModelError};
use crate::numerics::GaussianTensors;

#[derive(Debug, Error)]
pub enum ImaginationError {
    #[error("particle count K must be >= 1, got {0}")]
    BadParticleCount(usize),
    #[error("branch count N must be >= 1, got {0}")]
    BadBranchCount(usize),
    #[error("horizon T must be >= 1, got {0}")]
    BadHorizon(usize),
    #[error("beta must be finite and >= 0, got {0}")]
    BadBeta(f64),
    #[error("temperature must be finite and > 0, got {0}")]
    BadTemperature(f64),
    #[error("prune needs at least K={k} branches, got {got}")]
    TooFewBranches { k: usize, got: usize },
    #[error("resample weights must sum to 1 (±1e-6), got {0}")]
    UnnormalizedWeights(f64),
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
}

/// How survivors are chosen from the scored branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneMode {
    TopK,
    SoftResample,
}

#[derive(Clone, Debug)]
pub struct ImaginationConfig {
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub beta: f64,
    pub prune_mode: PruneMode,
    /// Softmax temperature; only read in `SoftResample` mode.
    pub temperature: f64,
}

impl Default for ImaginationConfig {
    fn default() -> Self {
        ImaginationConfig {
            k: 1,
            n: 1,
            t: 16,
            beta: 0.1,
            prune_mode: PruneMode::TopK,
            temperature: 1.0,
        }
    }
}

impl ImaginationConfig {
    pub fn validate(&self) -> Result<(), ImaginationError> {
        if self.k < 1 {
            return Err(ImaginationError::BadParticleCount(self.k));
        }
        if self.n < 1 {
            return Err(ImaginationError::BadBranchCount(self.n));
        }
        if self.t < 1 {
            return Err(ImaginationError::BadHorizon(self.t));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(ImaginationError::BadBeta(self.beta));
        }
        if self.prune_mode == PruneMode::SoftResample
            && !(self.temperature.is_finite() && self.temperature > 0.0)
        {
            return Err(ImaginationError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Where a rollout begins: filtered states (their `h`) plus the posterior
/// that produced them; particles re-draw `z` from that posterior.
pub struct RolloutStart<S: Scalar> {
    pub state: LatentTensors<S>,
    pub posterior: GaussianTensors<S>,
}

/// The three per-concern streams. Deriving them from one master seed keeps a
/// whole rollout reproducible from a single number.
pub struct RolloutRngs {
    pub actions: ChaCha12Rng,
    pub latents: ChaCha12Rng,
    pub resample: ChaCha12Rng,
}

const ACTION_STREAM: u64 = 0xAC71;
const LATENT_STREAM: u64 = 0x1A7E;
const RESAMPLE_STREAM: u64 = 0x5A3F;

impl RolloutRngs {
    pub fn from_master(master: u64) -> Self {
        RolloutRngs {
            actions: rng::stream(master, ACTION_STREAM),
            latents: rng::stream(master, LATENT_STREAM),
            resample: rng::stream(master, RESAMPLE_STREAM),
        }
    }
}

/// Everything recorded during a rollout. All per-step tensors share the row
/// layout `row = b·K + k` (replay start b, particle k); with B = 1 the
/// leading dims are `[T, K]`. Per-step entries describe the *post-transition*
/// state of each survivor: the state reached at time t+1, the action that
/// reached it, and that state's reward/continue/value/disagreement.
pub struct ImaginedTrajectory<S: Scalar> {
    pub b: usize,
    pub k: usize,
    pub n: usize,
    /// Target-critic value of the K·B starting particles (pre-rollout).
    pub initial_values: Value,
    pub initial_state: LatentState,
    pub states: Vec<LatentState>,
    pub actions: Vec<Value>,
    pub log_probs: Vec<Value>,
    pub entropies: Vec<Value>,
    pub rewards: Vec<Value>,
    pub cont_probs: Vec<Value>,
    pub values: Vec<Value>,
    /// `parents[t][r]`: the particle row (in step t−1's arrays, or in the
    /// initial particles for t = 0) this survivor branched from.
    pub parents: Vec<Vec<u32>>,
    /// Originating replay row of each survivor (diagnostics).
    pub lineages: Vec<Vec<u32>>,
    pub disagreements: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
    pub branches_formed: usize,
    _marker: std::marker::PhantomData<S>,
}

/// The same trajectory re-indexed so row r of every array describes the
/// single rolled-out trajectory that ends in survivor r: ancestors are
/// followed through the pruning genealogy. Gradients flow through the
/// gathers; the index maps themselves are constants.
pub struct AlignedTrajectory {
    pub rewards: Vec<Value>,
    pub cont_probs: Vec<Value>,
    /// T+1 entries; `values[0]` is the pre-rollout state's value (unused by
    /// the λ-recursion), `values[T]` the bootstrap.
    pub values: Vec<Value>,
    pub log_probs: Vec<Value>,
    pub entropies: Vec<Value>,
    /// Pre-transition states s_0 .. s_{T−1}, one per recursion target.
    pub states: Vec<(Value, Value)>,
}

impl<S: Scalar> ImaginedTrajectory<S> {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn aligned(&self, tape: &mut Tape<S>) -> AlignedTrajectory {
        let t_len = self.horizon();
        let m = self.b * self.k;
        let identity: Vec<u32> = (0..m as u32).collect();
        // sel[t][r] = row in step t's arrays of final-trajectory r's ancestor.
        let mut sel = vec![identity; t_len];
        for t in (0..t_len.saturating_sub(1)).rev() {
            sel[t] = sel[t + 1]
                .iter()
                .map(|&r| self.parents[t + 1][r as usize])
                .collect();
        }
        let ancestors0: Vec<u32> = sel[0].iter().map(|&r| self.parents[0][r as usize]).collect();

        let mut values = Vec::with_capacity(t_len + 1);
        values.push(tape.gather_rows(self.initial_values, &ancestors0));
        for t in 0..t_len {
            values.push(tape.gather_rows(self.values[t], &sel[t]));
        }

        let mut states = Vec::with_capacity(t_len);
        states.push((
            tape.gather_rows(self.initial_state.h, &ancestors0),
            tape.gather_rows(self.initial_state.z, &ancestors0),
        ));
        for t in 0..t_len.saturating_sub(1) {
            states.push((
                tape.gather_rows(self.states[t].h, &sel[t]),
                tape.gather_rows(self.states[t].z, &sel[t]),
            ));
        }

        let gather_all = |tape: &mut Tape<S>, xs: &[Value]| -> Vec<Value> {
            xs.iter()
                .enumerate()
                .map(|(t, &x)| tape.gather_rows(x, &sel[t]))
                .collect()
        };
        AlignedTrajectory {
            rewards: gather_all(tape, &self.rewards),
            cont_probs: gather_all(tape, &self.cont_probs),
            log_probs: gather_all(tape, &self.log_probs),
            entropies: gather_all(tape, &self.entropies),
            values,
            states,
        }
    }
}

/// Replicate each start K times: `h` copied, `z` drawn fresh per particle
/// from the start's posterior. Returns the particle state plus each
/// particle's originating replay row.
pub fn init_particles<S: Scalar>(
    tape: &mut Tape<S>,
    start: &RolloutStart<S>,
    k: usize,
    latents: &mut impl Rng,
) -> Result<(LatentState, Vec<u32>), ImaginationError> {
    if k < 1 {
        return Err(ImaginationError::BadParticleCount(k));
    }
    let b = start.state.rows();
    let h0 = tape.constant(start.state.h.clone());
    let h = tape.repeat_rows(h0, k);
    let post = start.posterior.to_tape(tape);
    let mean = tape.repeat_rows(post.mean, k);
    let log_std = tape.repeat_rows(post.log_std, k);
    let z = Gaussian { mean, log_std }.sample(tape, latents);
    let lineage = (0..b * k).map(|r| (r / k) as u32).collect();
    Ok((LatentState { h, z }, lineage))
}

/// Branch score: `F = value + β·σ²_ens`, computed in f64 so the recorded
/// decomposition is exact.
pub fn score(value: f64, disagreement: f64, beta: f64) -> f64 {
    value + beta * disagreement
}

/// Survivor selection among one particle group's branches. Returns exactly
/// `k` branch indices in ascending order (so N = 1 is the identity map).
///
/// TopK: the K highest scores, ties broken toward the lowest index.
/// SoftResample: systematic resampling with weights ∝ exp(F/τ).
pub fn prune(
    scores: &[f64],
    k: usize,
    mode: PruneMode,
    temperature: f64,
    resample: &mut impl Rng,
) -> Result<Vec<u32>, ImaginationError> {
    if scores.len() < k {
        return Err(ImaginationError::TooFewBranches { k, got: scores.len() });
    }
    match mode {
        PruneMode::TopK => {
            let mut order: Vec<u32> = (0..scores.len() as u32).collect();
            order.sort_by(|&a, &b| {
                scores[b as usize]
                    .partial_cmp(&scores[a as usize])
                    .expect("branch scores must not be NaN")
                    .then(a.cmp(&b))
            });
            let mut keep = order[..k].to_vec();
            keep.sort_unstable();
            Ok(keep)
        }
        PruneMode::SoftResample => {
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&f| ((f - max) / temperature).exp()).collect();
            let total: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|&e| e / total).collect();
            systematic_resample(&weights, k, resample)
        }
    }
}

/// Low-variance systematic resampling: one uniform offset u ~ U[0, 1/K),
/// selections at the cumulative-weight crossings of u + j/K. Output indices
/// are non-decreasing by construction.
pub fn systematic_resample(
    weights: &[f64],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u32>, ImaginationError> {
    let sum: f64 = weights.iter().sum();
    if !((sum - 1.0).abs() <= 1e-6) {
        return Err(ImaginationError::UnnormalizedWeights(sum));
    }
    debug_assert!(weights.iter().all(|&w| w >= 0.0), "negative resampling weight");
    assert!(k >= 1, "cannot resample zero particles");
    let u = rng.gen::<f64>() / k as f64;
    let mut out = Vec::with_capacity(k);
    let mut cum = 0.0;
    let mut j = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        cum += w;
        while j < k && u + j as f64 / (k as f64) < cum {
            out.push(i as u32);
            j += 1;
        }
    }
    // Rounding at the top of the CDF can starve the final crossings.
    while out.len() < k {
        out.push((weights.len() - 1) as u32);
    }
    Ok(out)
}

struct StepEval {
    state: LatentState,
    action: Value,
    log_prob: Value,
    entropy: Value,
    reward: Value,
    cont_prob: Value,
    value: Value,
    disagreement: Vec<f64>,
    scores: Vec<f64>,
}

/// Advance `prev` by one policy sample + prior step and evaluate everything
/// the scorer and the trajectory record need. Shared verbatim by the beam
/// path and the single path, so their tape math and RNG order are identical.
fn eval_step<S: Scalar>(
    tape: &mut Tape<S>,
    wm: &WorldModel<S>,
    policy: &Policy<S>,
    critic: &Critic<S>,
    prev: &LatentState,
    beta: f64,
    rngs: &mut RolloutRngs,
) -> Result<StepEval, ImaginationError> {
    let feats = wm.features(tape, prev);
    let sample = policy.sample(tape, feats, &mut rngs.actions);
    let (state, _prior) = wm.imagine_step(tape, prev, sample.action, &mut rngs.latents);
    let next_feats = wm.features(tape, &state);
    let value = critic.value_target(tape, next_feats);
    let reward = wm.reward_pred(tape, &state);
    let logit = wm.continue_logit(tape, &state);
    let cont_prob = tape.sigmoid(logit);
    let h_next = tape.value(state.h).clone();
    let disagreement = wm.ensemble_disagreement_rows(&h_next)?;
    let scores: Vec<f64> = tape
        .value(value)
        .data()
        .iter()
        .zip(&disagreement)
        .map(|(&v, &d)| score(v.to_f64(), d, beta))
        .collect();
    Ok(StepEval {
        state,
        action: sample.action,
        log_prob: sample.log_prob,
        entropy: sample.entropy,
        reward,
        cont_prob,
        value,
        disagreement,
        scores,
    })
}

/// The full beam rollout: loop T times over branch → score → prune.
pub fn imagine_rollout<S: Scalar>(
    tape: &mut Tape<S>,
    wm: &WorldModel<S>,
    policy: &Policy<S>,
    critic: &Critic<S>,
    start: &RolloutStart<S>,
    cfg: &ImaginationConfig,
    rngs: &mut RolloutRngs,
) -> Result<ImaginedTrajectory<S>, ImaginationError> {
    cfg.validate()?;
    let (init, mut lineage) = init_particles(tape, start, cfg.k, &mut rngs.latents)?;
    let b = start.state.rows();
    let m = b * cfg.k;
    let init_feats = wm.features(tape, &init);
    let initial_values = critic.value_target(tape, init_feats);

    let mut traj = ImaginedTrajectory {
        b,
        k: cfg.k,
        n: cfg.n,
        initial_values,
        initial_state: init,
        states: Vec::with_capacity(cfg.t),
        actions: Vec::with_capacity(cfg.t),
        log_probs: Vec::with_capacity(cfg.t),
        entropies: Vec::with_capacity(cfg.t),
        rewards: Vec::with_capacity(cfg.t),
        cont_probs: Vec::with_capacity(cfg.t),
        values: Vec::with_capacity(cfg.t),
        parents: Vec::with_capacity(cfg.t),
        lineages: Vec::with_capacity(cfg.t),
        disagreements: Vec::with_capacity(cfg.t),
        scores: Vec::with_capacity(cfg.t),
        branches_formed: 0,
        _marker: std::marker::PhantomData,
    };

    let mut particles = init;
    for _ in 0..cfg.t {
        // K·N branches per replay row: row (b·K + k)·N + n.
        let rep = LatentState {
            h: tape.repeat_rows(particles.h, cfg.n),
            z: tape.repeat_rows(particles.z, cfg.n),
        };
        let eval = eval_step(tape, wm, policy, critic, &rep, cfg.beta, rngs)?;
        traj.branches_formed += m * cfg.n;

        // Prune per replay group: each start's K·N branches compete only
        // with each other.
        let group = cfg.k * cfg.n;
        let mut survivors: Vec<u32> = Vec::with_capacity(m);
        for g in 0..b {
            let local = &eval.scores[g * group..(g + 1) * group];
            let keep = prune(local, cfg.k, cfg.prune_mode, cfg.temperature, &mut rngs.resample)?;
            survivors.extend(keep.iter().map(|&i| (g * group) as u32 + i));
        }

        let parents: Vec<u32> = survivors.iter().map(|&s| s / cfg.n as u32).collect();
        lineage = parents.iter().map(|&p| lineage[p as usize]).collect();

        let state = LatentState {
            h: tape.gather_rows(eval.state.h, &survivors),
            z: tape.gather_rows(eval.state.z, &survivors),
        };
        traj.states.push(state);
        traj.actions.push(tape.gather_rows(eval.action, &survivors));
        traj.log_probs.push(tape.gather_rows(eval.log_prob, &survivors));
        traj.entropies.push(tape.gather_rows(eval.entropy, &survivors));
        traj.rewards.push(tape.gather_rows(eval.reward, &survivors));
        traj.cont_probs.push(tape.gather_rows(eval.cont_prob, &survivors));
        traj.values.push(tape.gather_rows(eval.value, &survivors));
        traj.parents.push(parents);
        traj.lineages.push(lineage.clone());
        traj.disagreements.push(survivors.iter().map(|&s| eval.disagreement[s as usize]).collect());
        traj.scores.push(survivors.iter().map(|&s| eval.scores[s as usize]).collect());
        particles = state;
    }
    Ok(traj)
}

/// The dedicated single-trajectory path: no branching, no pruning machinery,
/// no gathers — one particle per start, propagated straight through. With
/// K = 1, N = 1 and the same rng streams, `imagine_rollout` must reproduce
/// this bitwise.
pub fn rollout_single<S: Scalar>(
    tape: &mut Tape<S>,
    wm: &WorldModel<S>,
    policy: &Policy<S>,
    critic: &Critic<S>,
    start: &RolloutStart<S>,
    horizon: usize,
    beta: f64,
    rngs: &mut RolloutRngs,
) -> Result<ImaginedTrajectory<S>, ImaginationError> {
    if horizon < 1 {
        return Err(ImaginationError::BadHorizon(horizon));
    }
    let b = start.state.rows();
    let h0 = tape.constant(start.state.h.clone());
    let post = start.posterior.to_tape(tape);
    let z0 = Gaussian { mean: post.mean, log_std: post.log_std }.sample(tape, &mut rngs.latents);
    let init = LatentState { h: h0, z: z0 };
    let init_feats = wm.features(tape, &init);
    let initial_values = critic.value_target(tape, init_feats);
    let identity: Vec<u32> = (0..b as u32).collect();

    let mut traj = ImaginedTrajectory {
        b,
        k: 1,
        n: 1,
        initial_values,
        initial_state: init,
        states: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        log_probs: Vec::with_capacity(horizon),
        entropies: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        cont_probs: Vec::with_capacity(horizon),
        values: Vec::with_capacity(horizon),
        parents: Vec::with_capacity(horizon),
        lineages: Vec::with_capacity(horizon),
        disagreements: Vec::with_capacity(horizon),
        scores: Vec::with_capacity(horizon),
        branches_formed: 0,
        _marker: std::marker::PhantomData,
    };

    let mut state = init;
    for _ in 0..horizon {
        let eval = eval_step(tape, wm, policy, critic, &state, beta, rngs)?;
        traj.branches_formed += b;
        state = eval.state;
        traj.states.push(eval.state);
        traj.actions.push(eval.action);
        traj.log_probs.push(eval.log_prob);
        traj.entropies.push(eval.entropy);
        traj.rewards.push(eval.reward);
        traj.cont_probs.push(eval.cont_prob);
        traj.values.push(eval.value);
        traj.parents.push(identity.clone());
        traj.lineages.push(identity.clone());
        traj.disagreements.push(eval.disagreement);
        traj.scores.push(eval.scores);
    }
    Ok(traj)
}
