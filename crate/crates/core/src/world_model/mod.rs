//! Gaussian-latent recurrent state-space world model.
//!
//! The model factors into a deterministic GRU path `h` and a stochastic
//! latent `z`. A posterior head reads `(h, encoded obs)` during training;
//! an ensemble of prior heads reads `h` alone, with member 0 acting as the
//! canonical prior that drives imagination and both KL losses. Decoder,
//! reward, and continue heads all read the concatenated `(h, z)` features.
//!
//! Training minimizes reconstruction + KL(sg(posterior) ‖ prior) +
//! KL(posterior ‖ sg(prior)) + reward MSE + continue BCE, with a free-bits
//! floor on the aggregated KL means. Every ensemble member additionally
//! fits the posterior through its own KL term on a detached `h`.

mod nets;

pub use nets::{GaussianHead, GruCell, Linear, Mlp};

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Gaussian, GaussianTensors, ParamStore, Scalar, Tape, Tensor, Value};

#[derive(Debug, Error)]
pub enum WorldModelError {
    #[error("sequence length must be at least 2, got {0}")]
    SequenceTooShort(usize),
    #[error("batch field `{field}` has a bad shape at step {step}")]
    ShapeMismatch { field: &'static str, step: usize },
    #[error("continue flags must be 0 or 1, found {0}")]
    BadContinue(f64),
    #[error("ensemble disagreement needs at least 2 heads, got {0}")]
    EnsembleTooSmall(usize),
}

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub e_ens: usize,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    pub free_bits: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            obs_dim: crate::tag_env::OBS_DIM,
            action_dim: crate::tag_env::ACTION_DIM,
            d_h: 128,
            d_z: 16,
            embed_dim: 32,
            hidden_dim: 64,
            e_ens: 5,
            beta_dyn: 1.0,
            beta_rep: 0.1,
            free_bits: 1.0,
        }
    }
}

/// On-tape latent state: both halves live on the current tape.
#[derive(Clone, Copy)]
pub struct LatentState {
    pub h: Value,
    pub z: Value,
}

/// Off-tape latent state, used to carry states between tapes (online
/// filtering, imagination starts, evaluation).
#[derive(Clone, Debug)]
pub struct LatentTensors<S> {
    pub h: Tensor<S>,
    pub z: Tensor<S>,
}

impl<S: Scalar> LatentTensors<S> {
    pub fn to_tape(&self, tape: &mut Tape<S>) -> LatentState {
        LatentState {
            h: tape.constant(self.h.clone()),
            z: tape.constant(self.z.clone()),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.rows()
    }
}

/// A replay slice: one tensor per step, each holding the whole batch.
/// `observations[l]: [B, obs]`, `actions[l]: [B, act]` (the action that led
/// into observation `l`), `rewards[l]`/`continues[l]`: `[B, 1]`.
pub struct SequenceBatch<S> {
    pub observations: Vec<Tensor<S>>,
    pub actions: Vec<Tensor<S>>,
    pub rewards: Vec<Tensor<S>>,
    pub continues: Vec<Tensor<S>>,
}

impl<S: Scalar> SequenceBatch<S> {
    pub fn new(
        observations: Vec<Tensor<S>>,
        actions: Vec<Tensor<S>>,
        rewards: Vec<Tensor<S>>,
        continues: Vec<Tensor<S>>,
    ) -> Result<Self, WorldModelError> {
        let l = observations.len();
        if l < 2 {
            return Err(WorldModelError::SequenceTooShort(l));
        }
        let b = observations[0].rows();
        for (step, t) in observations.iter().enumerate() {
            if t.rows() != b {
                return Err(WorldModelError::ShapeMismatch { field: "observations", step });
            }
        }
        for (field, v) in [("actions", &actions), ("rewards", &rewards), ("continues", &continues)] {
            if v.len() != l {
                return Err(WorldModelError::ShapeMismatch { field, step: v.len() });
            }
            for (step, t) in v.iter().enumerate() {
                if t.rows() != b {
                    return Err(WorldModelError::ShapeMismatch { field, step });
                }
            }
        }
        for t in &continues {
            for &c in t.data() {
                let c = c.to_f64();
                if c != 0.0 && c != 1.0 {
                    return Err(WorldModelError::BadContinue(c));
                }
            }
        }
        Ok(SequenceBatch { observations, actions, rewards, continues })
    }

    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    pub fn batch_size(&self) -> usize {
        self.observations[0].rows()
    }
}

/// Scalar snapshots of every loss term. `dynamics`/`representation` are the
/// free-bits-clamped values that enter the total; the `_raw` twins are the
/// unclamped KL means.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub recon: f64,
    pub dynamics: f64,
    pub dynamics_raw: f64,
    pub representation: f64,
    pub representation_raw: f64,
    pub reward: f64,
    pub cont: f64,
    pub ensemble: f64,
    pub total: f64,
}

/// Everything `world_model_loss` produces in one unrolled pass.
pub struct WorldModelLoss<S: Scalar> {
    /// recon + β_dyn·dyn + β_rep·rep + reward + continue.
    pub total: Value,
    /// Summed per-head ensemble KL; kept separate so callers decide whether
    /// to fold it into the same backward pass.
    pub ensemble: Value,
    pub components: LossComponents,
    /// Posterior state after the last step, for seeding imagination.
    pub final_state: LatentTensors<S>,
    /// The posterior that produced `final_state.z`.
    pub final_posterior: GaussianTensors<S>,
}

pub struct WorldModel<S: Scalar> {
    pub cfg: WorldModelConfig,
    pub store: ParamStore<S>,
    encoder: Mlp,
    posterior: GaussianHead,
    priors: Vec<GaussianHead>,
    gru: GruCell,
    decoder: Mlp,
    reward: Mlp,
    cont: Mlp,
}

impl<S: Scalar> WorldModel<S> {
    pub fn new(cfg: WorldModelConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.e_ens >= 1, "need at least one prior head");
        let mut store = ParamStore::new();
        let encoder = Mlp::new(&mut store, "enc", &[cfg.obs_dim, cfg.hidden_dim, cfg.embed_dim], rng);
        let posterior = GaussianHead::new(
            &mut store,
            "post",
            cfg.d_h + cfg.embed_dim,
            cfg.hidden_dim,
            cfg.d_z,
            rng,
        );
        let priors = (0..cfg.e_ens)
            .map(|e| GaussianHead::new(&mut store, &format!("prior{e}"), cfg.d_h, cfg.hidden_dim, cfg.d_z, rng))
            .collect();
        let gru = GruCell::new(&mut store, "gru", cfg.d_z + cfg.action_dim, cfg.d_h, rng);
        let feat = cfg.d_h + cfg.d_z;
        let decoder = Mlp::new(&mut store, "dec", &[feat, cfg.hidden_dim, cfg.obs_dim], rng);
        let reward = Mlp::new(&mut store, "rew", &[feat, cfg.hidden_dim, 1], rng);
        let cont = Mlp::new(&mut store, "cont", &[feat, cfg.hidden_dim, 1], rng);
        WorldModel { cfg, store, encoder, posterior, priors, gru, decoder, reward, cont }
    }

    /// All-zero initial state for `rows` parallel sequences.
    pub fn initial_state(&self, tape: &mut Tape<S>, rows: usize) -> LatentState {
        LatentState {
            h: tape.constant(Tensor::zeros(vec![rows, self.cfg.d_h])),
            z: tape.constant(Tensor::zeros(vec![rows, self.cfg.d_z])),
        }
    }

    pub fn initial_state_tensors(&self, rows: usize) -> LatentTensors<S> {
        LatentTensors {
            h: Tensor::zeros(vec![rows, self.cfg.d_h]),
            z: Tensor::zeros(vec![rows, self.cfg.d_z]),
        }
    }

    pub fn encode(&self, tape: &mut Tape<S>, obs: Value) -> Value {
        self.encoder.forward(tape, &self.store, obs)
    }

    /// `(h, z)` concatenated, the input to decoder/reward/continue heads.
    pub fn features(&self, tape: &mut Tape<S>, state: &LatentState) -> Value {
        tape.concat_cols(state.h, state.z)
    }

    fn transition(&self, tape: &mut Tape<S>, prev: &LatentState, action: Value) -> Value {
        let input = tape.concat_cols(prev.z, action);
        self.gru.forward(tape, &self.store, input, prev.h)
    }

    /// One filtering step: advance `h`, read the observation, sample the
    /// posterior. Returns the new state plus (posterior, prior) for losses.
    pub fn observe_step(
        &self,
        tape: &mut Tape<S>,
        prev: &LatentState,
        action: Value,
        obs: Value,
        rng: &mut impl Rng,
    ) -> (LatentState, Gaussian, Gaussian) {
        let h = self.transition(tape, prev, action);
        let prior = self.priors[0].forward(tape, &self.store, h);
        let emb = self.encode(tape, obs);
        let post_in = tape.concat_cols(h, emb);
        let post = self.posterior.forward(tape, &self.store, post_in);
        let z = post.sample(tape, rng);
        (LatentState { h, z }, post, prior)
    }

    /// One dreaming step: advance `h`, sample the canonical prior. Consumes
    /// no observation.
    pub fn imagine_step(
        &self,
        tape: &mut Tape<S>,
        prev: &LatentState,
        action: Value,
        rng: &mut impl Rng,
    ) -> (LatentState, Gaussian) {
        let h = self.transition(tape, prev, action);
        let prior = self.priors[0].forward(tape, &self.store, h);
        let z = prior.sample(tape, rng);
        (LatentState { h, z }, prior)
    }

    /// Off-tape convenience wrapper around `observe_step` for online
    /// filtering during collection and evaluation.
    pub fn filter_step(
        &self,
        prev: &LatentTensors<S>,
        action: &Tensor<S>,
        obs: &Tensor<S>,
        rng: &mut impl Rng,
    ) -> LatentTensors<S> {
        let mut tape = Tape::new();
        let prev_t = prev.to_tape(&mut tape);
        let a = tape.constant(action.clone());
        let o = tape.constant(obs.clone());
        let (state, _, _) = self.observe_step(&mut tape, &prev_t, a, o, rng);
        LatentTensors {
            h: tape.value(state.h).clone(),
            z: tape.value(state.z).clone(),
        }
    }

    pub fn prior_head(&self, tape: &mut Tape<S>, head: usize, h: Value) -> Gaussian {
        self.priors[head].forward(tape, &self.store, h)
    }

    pub fn decode(&self, tape: &mut Tape<S>, state: &LatentState) -> Value {
        let feat = self.features(tape, state);
        self.decoder.forward(tape, &self.store, feat)
    }

    pub fn reward_pred(&self, tape: &mut Tape<S>, state: &LatentState) -> Value {
        let feat = self.features(tape, state);
        self.reward.forward(tape, &self.store, feat)
    }

    pub fn continue_logit(&self, tape: &mut Tape<S>, state: &LatentState) -> Value {
        let feat = self.features(tape, state);
        self.cont.forward(tape, &self.store, feat)
    }

    /// Per-row ensemble disagreement σ²_ens: population variance of the
    /// prior-head means across the ensemble, averaged over latent dims.
    /// Runs on a scratch tape; this is a diagnostic, not a loss term.
    pub fn ensemble_disagreement_rows(&self, h: &Tensor<S>) -> Result<Vec<f64>, WorldModelError> {
        let e = self.cfg.e_ens;
        if e < 2 {
            return Err(WorldModelError::EnsembleTooSmall(e));
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let means: Vec<Tensor<S>> = self
            .priors
            .iter()
            .map(|p| {
                let m = p.mean_only(&mut tape, &self.store, hv);
                tape.value(m).clone()
            })
            .collect();
        let rows = h.rows();
        let d = self.cfg.d_z;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = 0.0;
            for j in 0..d {
                let vals: Vec<f64> = means.iter().map(|m| m.at2(r, j).to_f64()).collect();
                let mean = vals.iter().sum::<f64>() / e as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
                acc += var;
            }
            out.push(acc / d as f64);
        }
        Ok(out)
    }

    /// Scalar disagreement for a single hidden state (`[d_h]` or `[1, d_h]`).
    pub fn ensemble_disagreement(&self, h: &Tensor<S>) -> Result<f64, WorldModelError> {
        let h2 = if h.rank() == 1 {
            Tensor::new(vec![1, h.len()], h.data().to_vec())
        } else {
            h.clone()
        };
        Ok(self.ensemble_disagreement_rows(&h2)?[0])
    }

    /// The full training objective over a replay slice. One unrolled pass
    /// produces the model loss, the ensemble loss, scalar components, and
    /// the final posterior state for seeding imagination.
    pub fn world_model_loss(
        &self,
        tape: &mut Tape<S>,
        batch: &SequenceBatch<S>,
        rng: &mut impl Rng,
    ) -> Result<WorldModelLoss<S>, WorldModelError> {
        let l_steps = batch.steps();
        if l_steps < 2 {
            return Err(WorldModelError::SequenceTooShort(l_steps));
        }
        let b = batch.batch_size();
        let scale_bl = 1.0 / ((b * l_steps) as f64);

        let mut state = self.initial_state(tape, b);
        let mut last_post: Option<Gaussian> = None;
        let mut recon_terms = Vec::with_capacity(l_steps);
        let mut reward_terms = Vec::with_capacity(l_steps);
        let mut cont_terms = Vec::with_capacity(l_steps);
        let mut dyn_terms = Vec::with_capacity(l_steps);
        let mut rep_terms = Vec::with_capacity(l_steps);
        let mut ens_terms: Vec<Vec<Value>> = vec![Vec::with_capacity(l_steps); self.cfg.e_ens];

        for l in 0..l_steps {
            let action = tape.constant(batch.actions[l].clone());
            let obs = tape.constant(batch.observations[l].clone());
            let (next, post, prior) = self.observe_step(tape, &state, action, obs, rng);
            state = next;

            let post_sg = Gaussian {
                mean: tape.detach(post.mean),
                log_std: tape.detach(post.log_std),
            };
            let prior_sg = Gaussian {
                mean: tape.detach(prior.mean),
                log_std: tape.detach(prior.log_std),
            };
            let kl_dyn = Gaussian::kl(tape, &post_sg, &prior);
            let kl_rep = Gaussian::kl(tape, &post, &prior_sg);
            dyn_terms.push(tape.sum_all(kl_dyn));
            rep_terms.push(tape.sum_all(kl_rep));

            let dec = self.decode(tape, &state);
            let diff = tape.sub(dec, obs);
            let sq = tape.mul(diff, diff);
            recon_terms.push(tape.sum_all(sq));

            let rp = self.reward_pred(tape, &state);
            let rt = tape.constant(batch.rewards[l].clone());
            let rd = tape.sub(rp, rt);
            let rsq = tape.mul(rd, rd);
            reward_terms.push(tape.sum_all(rsq));

            let cl = self.continue_logit(tape, &state);
            let ct = tape.constant(batch.continues[l].clone());
            let bce = tape.bce_with_logits(cl, ct);
            cont_terms.push(tape.sum_all(bce));

            // Each ensemble member fits the posterior on its own; h is
            // detached so only head parameters receive this signal.
            let h_sg = tape.detach(state.h);
            for (e, head) in self.priors.iter().enumerate() {
                let pe = head.forward(tape, &self.store, h_sg);
                let kle = Gaussian::kl(tape, &post_sg, &pe);
                ens_terms[e].push(tape.sum_all(kle));
            }

            last_post = Some(post);
        }

        // Unit-variance Gaussian reconstruction NLL: ½·squared error, summed
        // over observation dims, averaged over B·L.
        let recon_sum = tape.sum_values(&recon_terms);
        let recon = tape.scale(recon_sum, 0.5 * scale_bl);

        let dyn_sum = tape.sum_values(&dyn_terms);
        let dyn_raw = tape.scale(dyn_sum, scale_bl);
        let dyn_clamped = tape.max_scalar(dyn_raw, self.cfg.free_bits);
        let rep_sum = tape.sum_values(&rep_terms);
        let rep_raw = tape.scale(rep_sum, scale_bl);
        let rep_clamped = tape.max_scalar(rep_raw, self.cfg.free_bits);

        let reward_sum = tape.sum_values(&reward_terms);
        let reward = tape.scale(reward_sum, scale_bl);
        let cont_sum = tape.sum_values(&cont_terms);
        let cont = tape.scale(cont_sum, scale_bl);

        let dyn_w = tape.scale(dyn_clamped, self.cfg.beta_dyn);
        let rep_w = tape.scale(rep_clamped, self.cfg.beta_rep);
        let total = tape.sum_values(&[recon, dyn_w, rep_w, reward, cont]);

        let head_losses: Vec<Value> = ens_terms
            .iter()
            .map(|terms| {
                let s = tape.sum_values(terms);
                tape.scale(s, scale_bl)
            })
            .collect();
        let ensemble = tape.sum_values(&head_losses);

        let scalar = |tape: &Tape<S>, v: Value| tape.value(v).item().to_f64();
        let components = LossComponents {
            recon: scalar(tape, recon),
            dynamics: scalar(tape, dyn_clamped),
            dynamics_raw: scalar(tape, dyn_raw),
            representation: scalar(tape, rep_clamped),
            representation_raw: scalar(tape, rep_raw),
            reward: scalar(tape, reward),
            cont: scalar(tape, cont),
            ensemble: scalar(tape, ensemble),
            total: scalar(tape, total),
        };

        let post = last_post.expect("L >= 2 guarantees at least one step");
        Ok(WorldModelLoss {
            total,
            ensemble,
            components,
            final_state: LatentTensors {
                h: tape.value(state.h).clone(),
                z: tape.value(state.z).clone(),
            },
            final_posterior: GaussianTensors::from_tape(tape, &post),
        })
    }

    /// Standalone ensemble objective: identical to the `ensemble` value of
    /// `world_model_loss` (same posterior pass, same rng consumption).
    pub fn train_ensemble_loss(
        &self,
        tape: &mut Tape<S>,
        batch: &SequenceBatch<S>,
        rng: &mut impl Rng,
    ) -> Result<Value, WorldModelError> {
        Ok(self.world_model_loss(tape, batch, rng)?.ensemble)
    }
}
