//! Policy and value learning on imagined trajectories.
//!
//! The policy is a tanh-squashed Gaussian over the 2-D action; its log-prob
//! carries the change-of-variables correction, its entropy bonus uses the
//! pre-squash Gaussian's closed form. The critic keeps an online network and
//! an EMA target; the target is read inside the λ-return bootstrap and the
//! branch scores, the online network only inside its own regression loss.
//! Actor updates flow straight through the learned dynamics and the
//! reparameterized samples (no score-function terms).

use rand::Rng;

use crate::numerics::{tanh_log_det, Gaussian, ParamStore, Scalar, Tape, Tensor, Value};
use crate::world_model::{GaussianHead, Mlp};

/// Tanh-squashed Gaussian policy over `features = (h, z)`.
pub struct Policy<S: Scalar> {
    pub store: ParamStore<S>,
    head: GaussianHead,
    pub action_dim: usize,
}

/// One reparameterized draw: the squashed action plus the statistics the
/// losses need. All rows batched, `[M, A]` / `[M]`.
pub struct PolicySample {
    pub action: Value,
    pub pre_tanh: Value,
    pub log_prob: Value,
    pub entropy: Value,
}

impl<S: Scalar> Policy<S> {
    pub fn new(feat_dim: usize, hidden: usize, action_dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let head = GaussianHead::new(&mut store, "pi", feat_dim, hidden, action_dim, rng);
        Policy { store, head, action_dim }
    }

    /// Pre-squash action distribution.
    pub fn distribution(&self, tape: &mut Tape<S>, features: Value) -> Gaussian {
        self.head.forward(tape, &self.store, features)
    }

    pub fn sample(&self, tape: &mut Tape<S>, features: Value, rng: &mut impl Rng) -> PolicySample {
        let dist = self.distribution(tape, features);
        let pre_tanh = dist.sample(tape, rng);
        let action = tape.tanh(pre_tanh);
        let base_lp = dist.log_prob(tape, pre_tanh);
        let correction = tanh_log_det(tape, pre_tanh);
        let log_prob = tape.sub(base_lp, correction);
        let entropy = dist.entropy(tape);
        PolicySample { action, pre_tanh, log_prob, entropy }
    }

    /// Zero-noise action for evaluation: `tanh(mean)`.
    pub fn mode(&self, tape: &mut Tape<S>, features: Value) -> Value {
        let dist = self.distribution(tape, features);
        let mean = dist.mode();
        tape.tanh(mean)
    }

    /// Off-tape sampling for environment interaction.
    pub fn act_sampled(&self, features: &Tensor<S>, rng: &mut impl Rng) -> Tensor<S> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let s = self.sample(&mut tape, f, rng);
        tape.value(s.action).clone()
    }

    /// Off-tape deterministic action for evaluation.
    pub fn act_mode(&self, features: &Tensor<S>) -> Tensor<S> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let a = self.mode(&mut tape, f);
        tape.value(a).clone()
    }
}

/// Value function with an online network and a slow EMA target copy.
pub struct Critic<S: Scalar> {
    pub store: ParamStore<S>,
    pub target_store: ParamStore<S>,
    net: Mlp,
    target_net: Mlp,
}

impl<S: Scalar> Critic<S> {
    pub fn new(feat_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "v", &[feat_dim, hidden, 1], rng);
        let target_store = store.clone_detached();
        let target_net = net.rebound(&target_store);
        Critic { store, target_store, net, target_net }
    }

    /// `[M, 1]` values from the learning network.
    pub fn value_online(&self, tape: &mut Tape<S>, features: Value) -> Value {
        self.net.forward(tape, &self.store, features)
    }

    /// `[M, 1]` values from the EMA target network.
    pub fn value_target(&self, tape: &mut Tape<S>, features: Value) -> Value {
        self.target_net.forward(tape, &self.target_store, features)
    }

    /// `target ← (1 − rate)·target + rate·online`.
    pub fn ema_update(&mut self, rate: f64) {
        self.target_store.ema_from(&self.store, rate);
    }
}

/// λ-returns over a batch of imagined trajectories.
///
/// `rewards[t]`, `continues[t]`: `[M, 1]` for t = 0..T; `values` has T+1
/// entries where `values[t]` is the critic's view of the state reached at
/// step t (`values[0]` belongs to the pre-rollout state and is not consumed
/// by the recursion; `values[T]` is the bootstrap). Output: T targets,
/// `R_t = r_t + γ·c_t·((1−λ)·v_{t+1} + λ·R_{t+1})`, seeded with `R_T = v_T`.
pub fn lambda_returns<S: Scalar>(
    tape: &mut Tape<S>,
    rewards: &[Value],
    values: &[Value],
    continues: &[Value],
    gamma: f64,
    lambda: f64,
) -> Vec<Value> {
    let t_len = rewards.len();
    assert!(t_len >= 1, "need at least one step");
    assert_eq!(values.len(), t_len + 1, "values must include the bootstrap row");
    assert_eq!(continues.len(), t_len, "continues/rewards length mismatch");
    assert!(gamma > 0.0 && gamma <= 1.0, "gamma out of (0, 1]");
    assert!((0.0..=1.0).contains(&lambda), "lambda out of [0, 1]");
    let shape = tape.shape(rewards[0]).to_vec();
    for &v in rewards.iter().chain(values).chain(continues) {
        assert_eq!(tape.shape(v), &shape[..], "per-step shapes must agree");
    }

    let mut out = vec![rewards[0]; t_len];
    let mut ret_next = values[t_len];
    for t in (0..t_len).rev() {
        let blend_v = tape.scale(values[t + 1], 1.0 - lambda);
        let blend_r = tape.scale(ret_next, lambda);
        let blend = tape.add(blend_v, blend_r);
        let gated = tape.mul(continues[t], blend);
        let discounted = tape.scale(gated, gamma);
        let ret = tape.add(rewards[t], discounted);
        out[t] = ret;
        ret_next = ret;
    }
    out
}

/// Running percentile-range normalizer for actor targets: an EMA of the
/// 5th–95th percentile spread, floored at 1 when dividing.
pub struct ReturnScale {
    ema: Option<f64>,
    decay: f64,
}

impl ReturnScale {
    pub fn new(decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay));
        ReturnScale { ema: None, decay }
    }

    /// Fold one batch of return samples into the running range and report
    /// the divisor to use for this update.
    pub fn update(&mut self, returns: &[f64]) -> f64 {
        assert!(!returns.is_empty());
        let range = percentile(returns, 95.0) - percentile(returns, 5.0);
        let ema = match self.ema {
            None => range,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * range,
        };
        self.ema = Some(ema);
        self.divisor()
    }

    pub fn divisor(&self) -> f64 {
        self.ema.unwrap_or(1.0).max(1.0)
    }
}

fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `−mean(targets / scale) − η·mean(entropy)` over every step and row.
/// Gradients reach the policy through the dynamics and the reparameterized
/// samples behind `targets`; `scale` is a plain number, never a tape value.
pub fn actor_loss<S: Scalar>(
    tape: &mut Tape<S>,
    targets: &[Value],
    entropies: &[Value],
    scale: f64,
    eta: f64,
) -> Value {
    assert_eq!(targets.len(), entropies.len());
    assert!(scale >= 1.0, "scale is floored at 1");
    let t_len = targets.len() as f64;
    let rows = tape.value(targets[0]).rows() as f64;
    let target_sums: Vec<Value> = targets.iter().map(|&v| tape.sum_all(v)).collect();
    let target_total = tape.sum_values(&target_sums);
    let return_term = tape.scale(target_total, -1.0 / (scale * t_len * rows));
    let ent_sums: Vec<Value> = entropies.iter().map(|&v| tape.sum_all(v)).collect();
    let ent_total = tape.sum_values(&ent_sums);
    let ent_term = tape.scale(ent_total, -eta / (t_len * rows));
    tape.add(return_term, ent_term)
}

/// MSE between online critic values and detached λ-targets, averaged over
/// every step and row. Detaching here keeps the regression from steering
/// the target side no matter what the caller passes in.
pub fn critic_loss<S: Scalar>(tape: &mut Tape<S>, values: &[Value], targets: &[Value]) -> Value {
    assert_eq!(values.len(), targets.len());
    assert!(!values.is_empty());
    let t_len = values.len() as f64;
    let rows = tape.value(values[0]).rows() as f64;
    let mut terms = Vec::with_capacity(values.len());
    for (&v, &tgt) in values.iter().zip(targets) {
        let tgt_sg = tape.detach(tgt);
        let d = tape.sub(v, tgt_sg);
        let sq = tape.mul(d, d);
        terms.push(tape.sum_all(sq));
    }
    let total = tape.sum_values(&terms);
    tape.scale(total, 1.0 / (t_len * rows))
}
