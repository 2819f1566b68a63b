//! Criterion 2: reverse-mode gradients match central finite differences in
//! f64 (relative error < 1e-4) over at least 100 random instances per
//! differentiable operation and for both composite training losses.

use probdreamer::numerics::gradcheck::{check, GradCheckReport};
use probdreamer::numerics::{tanh_log_det, Gaussian, ParamStore, Tape, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data)
}

/// Random tensor that stays at least `margin` away from every kink point.
fn rand_tensor_avoiding(
    rng: &mut ChaCha12Rng,
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let x = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > margin) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Loss = sum(out ⊙ w) for a random fixed weight tensor: linear in the op
/// output but with distinct per-element weights, so transposed or misrouted
/// backward rules cannot cancel out.
fn weighted_sum(tape: &mut Tape<f64>, out: Value, weights: &Tensor<f64>) -> Value {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w);
    tape.sum_all(prod)
}

pub struct OpResult {
    pub name: &'static str,
    pub worst: f64,
}

fn run_op<F>(name: &'static str, seed: u64, mut build: F) -> OpResult
where
    F: FnMut(&mut ChaCha12Rng) -> (ParamStore<f64>, Box<dyn FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Value>),
{
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let (mut store, mut f) = build(&mut rng);
        let report: GradCheckReport = check(&mut store, &mut f, H);
        assert!(
            report.max_err < TOL,
            "{name} instance {i}: rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            report.max_err,
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric
        );
        worst = worst.max(report.max_err);
    }
    OpResult { name, worst }
}

fn dims(rng: &mut ChaCha12Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

type Builder = Box<dyn FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Value>;

pub fn elementary_ops() -> Vec<OpResult> {
    let mut out = Vec::new();
    let mut push = |r: OpResult| out.push(r);

    push(run_op("matmul", 0x10, |rng| {
        let (m, k, n) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, k], -2.0, 2.0));
        let kb = s.add("b", rand_tensor(rng, vec![k, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let b = tape.param(s, kb);
            let o = tape.matmul(a, b);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("add", 0x11, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let kb = s.add("b", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let b = tape.param(s, kb);
            let o = tape.add(a, b);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("sub", 0x12, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let kb = s.add("b", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let b = tape.param(s, kb);
            let o = tape.sub(a, b);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("mul", 0x13, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let kb = s.add("b", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let b = tape.param(s, kb);
            let o = tape.mul(a, b);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("add_bias", 0x14, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let kb = s.add("b", rand_tensor(rng, vec![n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let b = tape.param(s, kb);
            let o = tape.add_bias(a, b);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("scale_and_add_scalar", 0x15, |rng| {
        let (m, n, _) = dims(rng);
        let c = rng.gen_range(-3.0..3.0);
        let d = rng.gen_range(-3.0..3.0);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let sc = tape.scale(a, c);
            let o = tape.add_scalar(sc, d);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("concat_cols", 0x16, |rng| {
        let (m, p, q) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, p], -2.0, 2.0));
        let kb = s.add("b", rand_tensor(rng, vec![m, q], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, p + q], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let b = tape.param(s, kb);
            let o = tape.concat_cols(a, b);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("slice_cols", 0x17, |rng| {
        let (m, _, _) = dims(rng);
        let n = rng.gen_range(2..6);
        let start = rng.gen_range(0..n - 1);
        let len = rng.gen_range(1..=n - start);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, len], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.slice_cols(a, start, len);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("tanh", 0x18, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -3.0, 3.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.tanh(a);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("sigmoid", 0x19, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -4.0, 4.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.sigmoid(a);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("softplus", 0x1a, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -4.0, 4.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.softplus(a);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("exp", 0x1b, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.exp(a);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("sum_all", 0x1c, |rng| {
        let (m, n, _) = dims(rng);
        let c = rng.gen_range(0.5..2.0);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.sum_all(a);
            tape.scale(o, c)
        });
        (s, f)
    }));

    push(run_op("mean_all", 0x1d, |rng| {
        let (m, n, _) = dims(rng);
        let c = rng.gen_range(0.5..2.0);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.mean_all(a);
            tape.scale(o, c)
        });
        (s, f)
    }));

    push(run_op("sum_cols", 0x1e, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.sum_cols(a);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("clamp", 0x1f, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        // Keep samples clear of the clamp bounds so FD never straddles a kink.
        let ka = s.add("a", rand_tensor_avoiding(rng, vec![m, n], -2.0, 2.0, &[-1.0, 1.0], 1e-3));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.clamp(a, -1.0, 1.0);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("max_scalar", 0x20, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor_avoiding(rng, vec![m, n], -2.0, 2.0, &[0.3], 1e-3));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.max_scalar(a, 0.3);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("gather_rows", 0x21, |rng| {
        let (m, n, _) = dims(rng);
        let k = rng.gen_range(1..7);
        let idx: Vec<u32> = (0..k).map(|_| rng.gen_range(0..m as u32)).collect();
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![k, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.gather_rows(a, &idx);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("repeat_rows", 0x22, |rng| {
        let (m, n, _) = dims(rng);
        let times = rng.gen_range(1..4);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m * times, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let o = tape.repeat_rows(a, times);
            weighted_sum(tape, o, &w)
        });
        (s, f)
    }));

    push(run_op("mse", 0x23, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("a", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let kb = s.add("b", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let b = tape.param(s, kb);
            tape.mse(a, b)
        });
        (s, f)
    }));

    push(run_op("bce_with_logits", 0x24, |rng| {
        let (m, n, _) = dims(rng);
        let targets: Vec<f64> = (0..m * n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let t = Tensor::new(vec![m, n], targets);
        let mut s = ParamStore::new();
        let ka = s.add("logits", rand_tensor(rng, vec![m, n], -3.0, 3.0));
        let f: Builder = Box::new(move |tape, s| {
            let a = tape.param(s, ka);
            let tt = tape.constant(t.clone());
            tape.bce_with_logits(a, tt)
        });
        (s, f)
    }));

    push(run_op("gaussian_sample", 0x25, |rng| {
        let (m, n, _) = dims(rng);
        let eps_seed: u64 = rng.gen();
        let mut s = ParamStore::new();
        let km = s.add("mean", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let kl = s.add("log_std", rand_tensor(rng, vec![m, n], -1.5, 1.0));
        let w = rand_tensor(rng, vec![m, n], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let mean = tape.param(s, km);
            let log_std = tape.param(s, kl);
            let g = Gaussian { mean, log_std };
            let mut eps_rng = ChaCha12Rng::seed_from_u64(eps_seed);
            let z = g.sample(tape, &mut eps_rng);
            weighted_sum(tape, z, &w)
        });
        (s, f)
    }));

    push(run_op("gaussian_kl", 0x26, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let kmq = s.add("mean_q", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let klq = s.add("log_std_q", rand_tensor(rng, vec![m, n], -1.5, 1.0));
        let kmp = s.add("mean_p", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let klp = s.add("log_std_p", rand_tensor(rng, vec![m, n], -1.5, 1.0));
        let w = rand_tensor(rng, vec![m], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let q = Gaussian { mean: tape.param(s, kmq), log_std: tape.param(s, klq) };
            let p = Gaussian { mean: tape.param(s, kmp), log_std: tape.param(s, klp) };
            let kl = Gaussian::kl(tape, &q, &p);
            weighted_sum(tape, kl, &w)
        });
        (s, f)
    }));

    push(run_op("gaussian_log_prob", 0x27, |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_tensor(rng, vec![m, n], -2.0, 2.0);
        let mut s = ParamStore::new();
        let km = s.add("mean", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let kl = s.add("log_std", rand_tensor(rng, vec![m, n], -1.5, 1.0));
        let w = rand_tensor(rng, vec![m], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let g = Gaussian { mean: tape.param(s, km), log_std: tape.param(s, kl) };
            let xx = tape.constant(x.clone());
            let lp = g.log_prob(tape, xx);
            weighted_sum(tape, lp, &w)
        });
        (s, f)
    }));

    push(run_op("gaussian_entropy", 0x28, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let kl = s.add("log_std", rand_tensor(rng, vec![m, n], -1.5, 1.0));
        let w = rand_tensor(rng, vec![m], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let mean = tape.constant(Tensor::zeros(vec![m, n]));
            let g = Gaussian { mean, log_std: tape.param(s, kl) };
            let h = g.entropy(tape);
            weighted_sum(tape, h, &w)
        });
        (s, f)
    }));

    push(run_op("tanh_log_det", 0x29, |rng| {
        let (m, n, _) = dims(rng);
        let mut s = ParamStore::new();
        let ka = s.add("pre_tanh", rand_tensor(rng, vec![m, n], -2.0, 2.0));
        let w = rand_tensor(rng, vec![m], -1.0, 1.0);
        let f: Builder = Box::new(move |tape, s| {
            let u = tape.param(s, ka);
            let ld = tanh_log_det(tape, u);
            weighted_sum(tape, ld, &w)
        });
        (s, f)
    }));

    out
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let results = elementary_ops();
    let mut worst = 0.0_f64;
    let mut worst_op = "none";
    for r in &results {
        if r.worst > worst {
            worst = r.worst;
            worst_op = r.name;
        }
    }
    let composite = super::composite_losses_fd();
    let pass = worst < TOL && composite.worst < TOL;
    super::verdict(
        "criterion-2 gradient-check",
        pass,
        &format!(
            "{} ops x {INSTANCES} instances + {} composite instances, worst rel err {:.3e} (ops, {worst_op}) / {:.3e} (composite losses), tol {TOL:.0e}, {:.1}s",
            results.len(),
            composite.instances,
            worst,
            composite.worst,
            start.elapsed().as_secs_f64()
        ),
    );
}
