//! Criterion 2, composite half: central finite differences of the two
//! objectives the optimizers actually differentiate — the world-model loss
//! with its ensemble term folded in, and the actor loss through a full
//! imagined rollout.
//!
//! Both pipelines contain stop-gradients (the balanced-KL detaches and the
//! ensemble's detached hidden state). A stop-gradient makes naive central
//! differences measure a *total* derivative where the backward pass reports
//! a *partial* one, so each check rebuilds the loss with every detached
//! quantity replaced by a constant frozen at its unperturbed value. At the
//! base point the frozen build reproduces the shipped loss value exactly
//! (asserted per instance); under perturbation its difference quotient
//! measures precisely the derivative the shipped backward pass computes.

use probdreamer::actor_critic::{actor_loss, lambda_returns, Critic, Policy};
use probdreamer::imagination::{
    imagine_rollout, ImaginationConfig, PruneMode, RolloutRngs, RolloutStart,
};
use probdreamer::numerics::{rng, Gaussian, GaussianTensors, Scalar, Tape, Tensor};
use probdreamer::world_model::{LatentTensors, SequenceBatch, WorldModel, WorldModelConfig};
use rand::Rng;

const H: f64 = 1e-5;
const WM_INSTANCES: usize = 100;
const ACTOR_INSTANCES: usize = 100;

pub struct CompositeFd {
    pub worst: f64,
    pub instances: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data)
}

fn tiny_wm_config() -> WorldModelConfig {
    WorldModelConfig {
        obs_dim: 5,
        action_dim: 2,
        d_h: 4,
        d_z: 2,
        embed_dim: 3,
        hidden_dim: 3,
        e_ens: 2,
        beta_dyn: 1.0,
        beta_rep: 0.1,
        // Keep the free-bits clamp strictly inactive so the composite stays
        // away from its kink; the clamp op itself is covered on both sides
        // in the elementary-op half.
        free_bits: 0.0,
    }
}

// ---------------------------------------------------------------------------
// World-model composite.
// ---------------------------------------------------------------------------

struct FrozenWm {
    post: Vec<GaussianTensors<f64>>,
    prior: Vec<GaussianTensors<f64>>,
    h: Vec<Tensor<f64>>,
}

/// The shipped loss assembly with the three detach sites replaced by
/// constants. With `frozen: None` the constants are captured from the live
/// forward values (value-identical to the shipped loss); with `Some` they
/// stay pinned while parameters move.
fn frozen_wm_loss(
    wm: &WorldModel<f64>,
    batch: &SequenceBatch<f64>,
    seed: u64,
    frozen: Option<&FrozenWm>,
) -> (f64, FrozenWm) {
    let mut tape = Tape::new();
    let mut post_rng = rng::stream(seed, 0);
    let l_steps = batch.steps();
    let b = batch.batch_size();
    let scale_bl = 1.0 / ((b * l_steps) as f64);

    let mut state = wm.initial_state(&mut tape, b);
    let mut captured = FrozenWm { post: Vec::new(), prior: Vec::new(), h: Vec::new() };
    let mut recon_terms = Vec::new();
    let mut reward_terms = Vec::new();
    let mut cont_terms = Vec::new();
    let mut dyn_terms = Vec::new();
    let mut rep_terms = Vec::new();
    let mut ens_terms: Vec<Vec<_>> = vec![Vec::new(); wm.cfg.e_ens];

    for l in 0..l_steps {
        let action = tape.constant(batch.actions[l].clone());
        let obs = tape.constant(batch.observations[l].clone());
        let (next, post, prior) = wm.observe_step(&mut tape, &state, action, obs, &mut post_rng);
        state = next;

        let (post_c, prior_c, h_c) = match frozen {
            Some(f) => (f.post[l].clone(), f.prior[l].clone(), f.h[l].clone()),
            None => (
                GaussianTensors::from_tape(&tape, &post),
                GaussianTensors::from_tape(&tape, &prior),
                tape.value(state.h).clone(),
            ),
        };
        captured.post.push(post_c.clone());
        captured.prior.push(prior_c.clone());
        captured.h.push(h_c.clone());

        let post_sg = post_c.to_tape(&mut tape);
        let prior_sg = prior_c.to_tape(&mut tape);
        let kl_dyn = Gaussian::kl(&mut tape, &post_sg, &prior);
        let kl_rep = Gaussian::kl(&mut tape, &post, &prior_sg);
        dyn_terms.push(tape.sum_all(kl_dyn));
        rep_terms.push(tape.sum_all(kl_rep));

        let dec = wm.decode(&mut tape, &state);
        let diff = tape.sub(dec, obs);
        let sq = tape.mul(diff, diff);
        recon_terms.push(tape.sum_all(sq));

        let rp = wm.reward_pred(&mut tape, &state);
        let rt = tape.constant(batch.rewards[l].clone());
        let rd = tape.sub(rp, rt);
        let rsq = tape.mul(rd, rd);
        reward_terms.push(tape.sum_all(rsq));

        let cl = wm.continue_logit(&mut tape, &state);
        let ct = tape.constant(batch.continues[l].clone());
        let bce = tape.bce_with_logits(cl, ct);
        cont_terms.push(tape.sum_all(bce));

        let h_sg = tape.constant(h_c);
        for (e, terms) in ens_terms.iter_mut().enumerate() {
            let pe = wm.prior_head(&mut tape, e, h_sg);
            let kle = Gaussian::kl(&mut tape, &post_sg, &pe);
            terms.push(tape.sum_all(kle));
        }
    }

    let recon_sum = tape.sum_values(&recon_terms);
    let recon = tape.scale(recon_sum, 0.5 * scale_bl);
    let dyn_sum = tape.sum_values(&dyn_terms);
    let dyn_raw = tape.scale(dyn_sum, scale_bl);
    let dyn_clamped = tape.max_scalar(dyn_raw, wm.cfg.free_bits);
    let rep_sum = tape.sum_values(&rep_terms);
    let rep_raw = tape.scale(rep_sum, scale_bl);
    let rep_clamped = tape.max_scalar(rep_raw, wm.cfg.free_bits);
    let reward_sum = tape.sum_values(&reward_terms);
    let reward = tape.scale(reward_sum, scale_bl);
    let cont_sum = tape.sum_values(&cont_terms);
    let cont = tape.scale(cont_sum, scale_bl);
    let dyn_w = tape.scale(dyn_clamped, wm.cfg.beta_dyn);
    let rep_w = tape.scale(rep_clamped, wm.cfg.beta_rep);
    let total = tape.sum_values(&[recon, dyn_w, rep_w, reward, cont]);
    let head_losses: Vec<_> = ens_terms
        .iter()
        .map(|terms| {
            let s = tape.sum_values(terms);
            tape.scale(s, scale_bl)
        })
        .collect();
    let ensemble = tape.sum_values(&head_losses);
    let combined = tape.add(total, ensemble);
    (tape.value(combined).item().to_f64(), captured)
}

fn random_batch(rng: &mut impl Rng, cfg: &WorldModelConfig, b: usize, l: usize) -> SequenceBatch<f64> {
    let obs = (0..l).map(|_| rand_tensor(rng, vec![b, cfg.obs_dim], -1.0, 1.0)).collect();
    let actions = (0..l).map(|_| rand_tensor(rng, vec![b, cfg.action_dim], -1.0, 1.0)).collect();
    let rewards = (0..l).map(|_| rand_tensor(rng, vec![b, 1], -1.0, 1.0)).collect();
    // Hard 0/1 targets as the batch contract demands; the BCE term stays
    // smooth in the logit either way.
    let continues = (0..l)
        .map(|_| {
            let data: Vec<f64> = (0..b).map(|_| f64::from(rng.gen_bool(0.8))).collect();
            Tensor::new(vec![b, 1], data)
        })
        .collect();
    SequenceBatch::new(obs, actions, rewards, continues).expect("valid batch")
}

fn wm_composite_fd() -> (f64, usize) {
    let mut worst = 0.0_f64;
    for inst in 0..WM_INSTANCES {
        let mut setup = rng::stream(0xC0_5E_ED ^ inst as u64, 0);
        let cfg = tiny_wm_config();
        let mut wm = WorldModel::<f64>::new(cfg.clone(), &mut setup);
        let batch = random_batch(&mut setup, &cfg, 2, 3);
        let sample_seed = 0x5EED_0000 + inst as u64;

        // Capture pass, then pin it against the shipped loss.
        let (frozen_val, frozen) = frozen_wm_loss(&wm, &batch, sample_seed, None);
        let mut tape = Tape::new();
        let mut post_rng = rng::stream(sample_seed, 0);
        let shipped = wm
            .world_model_loss(&mut tape, &batch, &mut post_rng)
            .expect("loss on a valid batch");
        let combined = tape.add(shipped.total, shipped.ensemble);
        let shipped_val = tape.value(combined).item().to_f64();
        assert!(
            (shipped_val - frozen_val).abs() <= 1e-9 * (1.0 + shipped_val.abs()),
            "frozen rebuild drifted from the shipped loss: {frozen_val} vs {shipped_val}"
        );
        let grads = tape.backward(combined);

        let keys: Vec<_> = wm.store.keys().collect();
        for key in keys {
            let n = wm.store.get(key).len();
            for i in 0..n {
                let orig = wm.store.get(key).data()[i];
                wm.store.get_mut(key).data_mut()[i] = orig + H;
                let (lp, _) = frozen_wm_loss(&wm, &batch, sample_seed, Some(&frozen));
                wm.store.get_mut(key).data_mut()[i] = orig - H;
                let (lm, _) = frozen_wm_loss(&wm, &batch, sample_seed, Some(&frozen));
                wm.store.get_mut(key).data_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * H);
                let analytic = grads.get(key).map(|g| g.data()[i]).unwrap_or(0.0);
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }
    (worst, WM_INSTANCES)
}

// ---------------------------------------------------------------------------
// Actor composite: rollout -> genealogy alignment -> lambda-returns -> loss.
// ---------------------------------------------------------------------------

const GAMMA: f64 = 0.985;
const LAMBDA: f64 = 0.95;
const ETA: f64 = 3e-4;
// The running return normalizer is a plain number outside the graph; the
// backward pass treats it as a constant, so the check holds it fixed too.
const SCALE: f64 = 1.0;

/// With N = 1 every branch survives pruning, so the pipeline is free of both
/// stop-gradients and data-dependent selection: plain central differences
/// measure exactly what the tape differentiates. The rollout RNG streams are
/// rebuilt from the same master each call, pinning the sampled noise.
fn actor_pipeline_loss(
    wm: &WorldModel<f64>,
    policy: &Policy<f64>,
    critic: &Critic<f64>,
    start: &RolloutStart<f64>,
    img: &ImaginationConfig,
    master: u64,
) -> f64 {
    let mut tape = Tape::new();
    let mut rolls = RolloutRngs::from_master(master);
    let traj = imagine_rollout(&mut tape, wm, policy, critic, start, img, &mut rolls)
        .expect("valid rollout");
    let aligned = traj.aligned(&mut tape);
    let returns = lambda_returns(
        &mut tape,
        &aligned.rewards,
        &aligned.values,
        &aligned.cont_probs,
        GAMMA,
        LAMBDA,
    );
    let loss = actor_loss(&mut tape, &returns, &aligned.entropies, SCALE, ETA);
    tape.value(loss).item().to_f64()
}

fn actor_composite_fd() -> (f64, usize) {
    let mut worst = 0.0_f64;
    for inst in 0..ACTOR_INSTANCES {
        let mut setup = rng::stream(0xAC_70_12 ^ inst as u64, 0);
        let cfg = tiny_wm_config();
        let feat = cfg.d_h + cfg.d_z;
        let mut wm = WorldModel::<f64>::new(cfg.clone(), &mut setup);
        let mut policy = Policy::<f64>::new(feat, 3, cfg.action_dim, &mut setup);
        let mut critic = Critic::<f64>::new(feat, 3, &mut setup);
        let b = 2;
        let start = RolloutStart {
            state: LatentTensors {
                h: rand_tensor(&mut setup, vec![b, cfg.d_h], -0.5, 0.5),
                z: rand_tensor(&mut setup, vec![b, cfg.d_z], -0.5, 0.5),
            },
            posterior: GaussianTensors {
                mean: rand_tensor(&mut setup, vec![b, cfg.d_z], -0.5, 0.5),
                log_std: rand_tensor(&mut setup, vec![b, cfg.d_z], -0.7, -0.2),
            },
        };
        let img = ImaginationConfig {
            k: 2,
            n: 1,
            t: 3,
            beta: 0.1,
            prune_mode: PruneMode::TopK,
            temperature: 1.0,
        };
        let master = 0xB00_7000 + inst as u64;

        let base = {
            let mut tape = Tape::new();
            let mut rolls = RolloutRngs::from_master(master);
            let traj = imagine_rollout(&mut tape, &wm, &policy, &critic, &start, &img, &mut rolls)
                .expect("valid rollout");
            let aligned = traj.aligned(&mut tape);
            let returns = lambda_returns(
                &mut tape,
                &aligned.rewards,
                &aligned.values,
                &aligned.cont_probs,
                GAMMA,
                LAMBDA,
            );
            let loss = actor_loss(&mut tape, &returns, &aligned.entropies, SCALE, ETA);
            (tape.value(loss).item().to_f64(), tape.backward(loss))
        };
        let (base_val, grads) = base;
        let replay = actor_pipeline_loss(&wm, &policy, &critic, &start, &img, master);
        assert!(
            (replay - base_val).abs() <= 1e-12 * (1.0 + base_val.abs()),
            "pinned RNG failed to reproduce the rollout: {replay} vs {base_val}"
        );

        // Gradient flows into the policy, the dynamics (through imagined
        // transitions), and the EMA target critic (through bootstraps);
        // parameters off that path must differentiate to exactly zero.
        let mut checks: Vec<(&str, Vec<_>)> = Vec::new();
        checks.push(("policy", policy.store.keys().collect()));
        checks.push(("wm", wm.store.keys().collect()));
        checks.push(("target", critic.target_store.keys().collect()));
        for (which, keys) in checks {
            for key in keys {
                let n = match which {
                    "policy" => policy.store.get(key).len(),
                    "wm" => wm.store.get(key).len(),
                    _ => critic.target_store.get(key).len(),
                };
                for i in 0..n {
                    let read = |pol: &Policy<f64>, w: &WorldModel<f64>, c: &Critic<f64>| match which {
                        "policy" => pol.store.get(key).data()[i],
                        "wm" => w.store.get(key).data()[i],
                        _ => c.target_store.get(key).data()[i],
                    };
                    let orig = read(&policy, &wm, &critic);
                    let write = |pol: &mut Policy<f64>,
                                     w: &mut WorldModel<f64>,
                                     c: &mut Critic<f64>,
                                     v: f64| match which {
                        "policy" => pol.store.get_mut(key).data_mut()[i] = v,
                        "wm" => w.store.get_mut(key).data_mut()[i] = v,
                        _ => c.target_store.get_mut(key).data_mut()[i] = v,
                    };
                    write(&mut policy, &mut wm, &mut critic, orig + H);
                    let lp = actor_pipeline_loss(&wm, &policy, &critic, &start, &img, master);
                    write(&mut policy, &mut wm, &mut critic, orig - H);
                    let lm = actor_pipeline_loss(&wm, &policy, &critic, &start, &img, master);
                    write(&mut policy, &mut wm, &mut critic, orig);
                    let numeric = (lp - lm) / (2.0 * H);
                    let analytic = grads.get(key).map(|g| g.data()[i]).unwrap_or(0.0);
                    worst = worst.max(rel_err(analytic, numeric));
                }
            }
        }
    }
    (worst, ACTOR_INSTANCES)
}

pub fn composite_losses_fd() -> CompositeFd {
    let (wm_worst, wm_n) = wm_composite_fd();
    let (actor_worst, actor_n) = actor_composite_fd();
    CompositeFd { worst: wm_worst.max(actor_worst), instances: wm_n + actor_n }
}
