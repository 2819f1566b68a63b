//! Network building blocks: linear layers, small tanh MLPs, Gaussian output
//! heads, and a GRU cell, all expressed as tape operations over a shared
//! parameter store.

use rand::Rng;

use crate::numerics::{Gaussian, ParamKey, ParamStore, Scalar, Tape, Value};

/// Affine layer `y = x W + b` with `W: [in, out]`, `b: [out]`.
pub struct Linear {
    pub w: ParamKey,
    pub b: ParamKey,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_xavier(&format!("{name}.w"), in_dim, out_dim, rng);
        let b = store.add_zeros(&format!("{name}.b"), vec![out_dim]);
        Linear { w, b }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Value) -> Value {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }

    /// The same layer addressed into a structurally identical store.
    pub fn rebound<S: Scalar>(&self, store: &ParamStore<S>) -> Linear {
        Linear { w: store.rekey(self.w), b: store.rekey(self.b) }
    }
}

/// Fully connected stack with tanh between layers and a linear final layer.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every layer width including input and output,
    /// e.g. `[14, 64, 32]` is one hidden layer of 64 units.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Value) -> Value {
        let mut out = x;
        for (i, layer) in self.layers.iter().enumerate() {
            out = layer.forward(tape, store, out);
            if i + 1 < self.layers.len() {
                out = tape.tanh(out);
            }
        }
        out
    }

    /// The same stack addressed into a structurally identical store.
    pub fn rebound<S: Scalar>(&self, store: &ParamStore<S>) -> Mlp {
        Mlp { layers: self.layers.iter().map(|l| l.rebound(store)).collect() }
    }
}

/// Tanh trunk feeding separate mean and log-std projections; log-std is
/// clamped inside `Gaussian::clamped`.
pub struct GaussianHead {
    trunk: Linear,
    mean: Linear,
    log_std: Linear,
}

impl GaussianHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GaussianHead {
            trunk: Linear::new(store, &format!("{name}.trunk"), in_dim, hidden, rng),
            mean: Linear::new(store, &format!("{name}.mean"), hidden, out_dim, rng),
            log_std: Linear::new(store, &format!("{name}.logstd"), hidden, out_dim, rng),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Value,
    ) -> Gaussian {
        let t = self.trunk.forward(tape, store, x);
        let t = tape.tanh(t);
        let mean = self.mean.forward(tape, store, t);
        let raw = self.log_std.forward(tape, store, t);
        Gaussian::clamped(tape, mean, raw)
    }

    /// Just the mean projection; used for ensemble-disagreement statistics
    /// where the spread of the log-std outputs is not part of the measure.
    pub fn mean_only<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Value,
    ) -> Value {
        let t = self.trunk.forward(tape, store, x);
        let t = tape.tanh(t);
        self.mean.forward(tape, store, t)
    }
}

/// Single GRU cell. With all-zero parameters both gates sit at 1/2 and the
/// candidate at 0, so `h' = h/2` — a fixed point the tests rely on.
pub struct GruCell {
    w_gates: ParamKey,
    b_gates: ParamKey,
    w_cand: ParamKey,
    b_cand: ParamKey,
    d_h: usize,
}

impl GruCell {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GruCell {
            w_gates: store.add_xavier(&format!("{name}.wg"), in_dim + d_h, 2 * d_h, rng),
            b_gates: store.add_zeros(&format!("{name}.bg"), vec![2 * d_h]),
            w_cand: store.add_xavier(&format!("{name}.wc"), in_dim + d_h, d_h, rng),
            b_cand: store.add_zeros(&format!("{name}.bc"), vec![d_h]),
            d_h,
        }
    }

    /// `x: [M, in]`, `h: [M, d_h]` → `h': [M, d_h]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Value,
        h: Value,
    ) -> Value {
        let wg = tape.param(store, self.w_gates);
        let bg = tape.param(store, self.b_gates);
        let wc = tape.param(store, self.w_cand);
        let bc = tape.param(store, self.b_cand);

        let xh = tape.concat_cols(x, h);
        let pre = tape.matmul(xh, wg);
        let pre = tape.add_bias(pre, bg);
        let gates = tape.sigmoid(pre);
        let update = tape.slice_cols(gates, 0, self.d_h);
        let reset = tape.slice_cols(gates, self.d_h, self.d_h);

        let rh = tape.mul(reset, h);
        let xrh = tape.concat_cols(x, rh);
        let pre_c = tape.matmul(xrh, wc);
        let pre_c = tape.add_bias(pre_c, bc);
        let cand = tape.tanh(pre_c);

        // h' = u ⊙ h + (1 − u) ⊙ c
        let keep = tape.mul(update, h);
        let one_minus_u = tape.scale(update, -1.0);
        let one_minus_u = tape.add_scalar(one_minus_u, 1.0);
        let new = tape.mul(one_minus_u, cand);
        tape.add(keep, new)
    }
}
