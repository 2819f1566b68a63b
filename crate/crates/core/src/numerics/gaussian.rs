use rand::Rng;
use rand_distr::StandardNormal;

use super::scalar::Scalar;
use super::tape::{Tape, Value};
use super::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal Gaussian over the rows of a rank-2 value: `mean` and `log_std`
/// share shape `[rows, dim]`. All per-distribution reductions sum over the
/// last axis and return a `[rows]` value.
#[derive(Clone, Copy)]
pub struct Gaussian {
    pub mean: Value,
    pub log_std: Value,
}

impl Gaussian {
    /// Build from a raw (unclamped) log-std head output, applying the hard
    /// clamp that keeps scales in a sane range.
    pub fn clamped<S: Scalar>(tape: &mut Tape<S>, mean: Value, raw_log_std: Value) -> Self {
        let log_std = tape.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
        Gaussian { mean, log_std }
    }

    pub fn dim<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        tape.shape(self.mean)[1]
    }

    /// Reparameterized sample `mean + exp(log_std) * eps`; the noise enters as
    /// a constant so gradients flow into `mean` and `log_std`.
    pub fn sample<S: Scalar>(&self, tape: &mut Tape<S>, rng: &mut impl Rng) -> Value {
        let shape = tape.shape(self.mean).to_vec();
        let n = tape.value(self.mean).len();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let eps = tape.constant(Tensor::from_f64(shape, &eps));
        let std = tape.exp(self.log_std);
        let noise = tape.mul(std, eps);
        tape.add(self.mean, noise)
    }

    /// Distribution mode (= mean); used by deterministic evaluation.
    pub fn mode(&self) -> Value {
        self.mean
    }

    /// `KL(q ‖ p)` for diagonal Gaussians, summed over the last axis:
    ///
    /// `log σp - log σq + (σq² + (μq-μp)²) / (2 σp²) - ½` per dimension.
    pub fn kl<S: Scalar>(tape: &mut Tape<S>, q: &Gaussian, p: &Gaussian) -> Value {
        let log_ratio = tape.sub(p.log_std, q.log_std);
        // σq²/σp² = exp(2(lq - lp))
        let two_dl = tape.scale(log_ratio, -2.0);
        let var_ratio = tape.exp(two_dl);
        let var_term = tape.scale(var_ratio, 0.5);
        let dmean = tape.sub(q.mean, p.mean);
        let dmean2 = tape.mul(dmean, dmean);
        let neg_two_lp = tape.scale(p.log_std, -2.0);
        let inv_var_p = tape.exp(neg_two_lp);
        let maha = tape.mul(dmean2, inv_var_p);
        let maha_term = tape.scale(maha, 0.5);
        let a = tape.add(log_ratio, var_term);
        let b = tape.add_scalar(maha_term, -0.5);
        let per_dim = tape.add(a, b);
        tape.sum_cols(per_dim)
    }

    /// Log density of `x` under the distribution, summed over the last axis.
    pub fn log_prob<S: Scalar>(&self, tape: &mut Tape<S>, x: Value) -> Value {
        let d = tape.sub(x, self.mean);
        let d2 = tape.mul(d, d);
        let neg_two_l = tape.scale(self.log_std, -2.0);
        let inv_var = tape.exp(neg_two_l);
        let quad = tape.mul(d2, inv_var);
        let quad_term = tape.scale(quad, -0.5);
        let with_scale = tape.sub(quad_term, self.log_std);
        let per_dim = tape.add_scalar(with_scale, -0.5 * LN_2PI);
        tape.sum_cols(per_dim)
    }

    /// Differential entropy per row: `Σ log σ + D/2 (1 + ln 2π)`.
    pub fn entropy<S: Scalar>(&self, tape: &mut Tape<S>) -> Value {
        let d = self.dim(tape) as f64;
        let s = tape.sum_cols(self.log_std);
        tape.add_scalar(s, 0.5 * d * (1.0 + LN_2PI))
    }
}

/// Off-tape Gaussian parameters, used to carry posterior statistics between
/// training phases without keeping the originating tape alive.
#[derive(Clone, Debug)]
pub struct GaussianTensors<S> {
    pub mean: Tensor<S>,
    pub log_std: Tensor<S>,
}

impl<S: Scalar> GaussianTensors<S> {
    pub fn from_tape(tape: &Tape<S>, g: &Gaussian) -> Self {
        GaussianTensors { mean: tape.value(g.mean).clone(), log_std: tape.value(g.log_std).clone() }
    }

    /// Re-enter a tape as constants (no gradient into the stored stats).
    pub fn to_tape(&self, tape: &mut Tape<S>) -> Gaussian {
        let mean = tape.constant(self.mean.clone());
        let log_std = tape.constant(self.log_std.clone());
        Gaussian { mean, log_std }
    }
}

/// Log |det ∂tanh(u)/∂u| summed over the last axis, computed stably as
/// `Σ 2 (ln 2 - u - softplus(-2u))`.
pub fn tanh_log_det<S: Scalar>(tape: &mut Tape<S>, pre_tanh: Value) -> Value {
    let neg2u = tape.scale(pre_tanh, -2.0);
    let sp = tape.softplus(neg2u);
    let inner = tape.add(pre_tanh, sp);
    let flipped = tape.neg(inner);
    let shifted = tape.add_scalar(flipped, std::f64::consts::LN_2);
    let per_dim = tape.scale(shifted, 2.0);
    tape.sum_cols(per_dim)
}
