use std::collections::HashMap;

use super::scalar::Scalar;
use super::store::{ParamKey, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value(u32);

/// Reverse-mode autodiff tape (Wengert list).
///
/// Every operation appends a node holding its output tensor; nodes only
/// reference earlier nodes, so a single reverse sweep in creation order
/// accumulates each gradient exactly once. Tapes are cheap to create and are
/// meant to live for one forward/backward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    param_cache: HashMap<ParamKey, Value>,
}

struct Node<S> {
    out: Tensor<S>,
    op: Op,
}

enum Op {
    Leaf { param: Option<ParamKey> },
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    AddBias(Value, Value),
    Scale(Value, f64),
    AddScalar(Value),
    ConcatCols(Value, Value),
    SliceCols(Value, usize),
    Tanh(Value),
    Sigmoid(Value),
    Softplus(Value),
    Exp(Value),
    SumAll(Value),
    MeanAll(Value),
    SumCols(Value),
    Clamp(Value, f64, f64),
    MaxScalar(Value, f64),
    GatherRows(Value, Vec<u32>),
    RepeatRows(Value, usize),
}

/// Parameter gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    map: HashMap<ParamKey, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor<S>> {
        self.map.get(&key)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Merge another gradient set into this one, summing overlaps.
    pub fn merge(&mut self, other: Gradients<S>) {
        for (key, grad) in other.map {
            match self.map.get_mut(&key) {
                Some(acc) => acc.add_scaled(&grad, S::one()),
                None => {
                    self.map.insert(key, grad);
                }
            }
        }
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus_stable<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + exp(-|x|)) never overflows.
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_cache: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, out: Tensor<S>, op: Op) -> Value {
        let id = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node { out, op });
        Value(id)
    }

    pub fn value(&self, v: Value) -> &Tensor<S> {
        &self.nodes[v.0 as usize].out
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.value(v).shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Value {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, x: f64) -> Value {
        self.constant(Tensor::scalar(S::from_f64(x)))
    }

    /// Differentiable leaf backed by a store parameter. Repeated calls with
    /// the same key reuse the existing node.
    pub fn param(&mut self, store: &ParamStore<S>, key: ParamKey) -> Value {
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.push(store.get(key).clone(), Op::Leaf { param: Some(key) });
        self.param_cache.insert(key, v);
        v
    }

    /// Copy of `v`'s output as a fresh constant: gradients stop here.
    pub fn detach(&mut self, v: Value) -> Value {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Row-broadcast add: `a [m,n] + b [n]`.
    pub fn add_bias(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2, "add_bias lhs must be rank 2");
        assert_eq!(tb.shape(), &[ta.shape()[1]], "bias shape mismatch");
        let n = ta.shape()[1];
        let mut out = ta.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x + tb.data()[i % n];
        }
        self.push(out, Op::AddBias(a, b))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let s = S::from_f64(c);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let s = S::from_f64(c);
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.scale(a, -1.0)
    }

    /// Concatenate rank-2 tensors along the last axis.
    pub fn concat_cols(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tb.rank(), 2);
        assert_eq!(ta.shape()[0], tb.shape()[0], "concat_cols row mismatch");
        let (m, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        self.push(Tensor::new(vec![m, p + q], data), Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, len: usize) -> Value {
        let ta = self.value(a);
        assert_eq!(ta.rank(), 2);
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        assert!(start + len <= n, "slice_cols {start}+{len} out of {n}");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols(a, start))
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let out = self.value(a).map(sigmoid_stable);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Value) -> Value {
        let out = self.value(a).map(softplus_stable);
        self.push(out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a))
    }

    pub fn sum_all(&mut self, a: Value) -> Value {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean over empty tensor");
        let s: S = t.data().iter().copied().sum();
        let m = s / S::from_f64(t.len() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    /// Sum over the last axis: `[m,n] -> [m]`.
    pub fn sum_cols(&mut self, a: Value) -> Value {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "sum_cols needs rank 2");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let data: Vec<S> = (0..m).map(|i| t.row(i).iter().copied().sum()).collect();
        let _ = n;
        self.push(Tensor::new(vec![m], data), Op::SumCols(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the bounds'
    /// closed interval (hard clamp).
    pub fn clamp(&mut self, a: Value, lo: f64, hi: f64) -> Value {
        assert!(lo <= hi);
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let out = self.value(a).map(|x| x.min(h).max(l));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// `max(a, c)` elementwise; used for free-bits floors.
    pub fn max_scalar(&mut self, a: Value, c: f64) -> Value {
        let cs = S::from_f64(c);
        let out = self.value(a).map(|x| x.max(cs));
        self.push(out, Op::MaxScalar(a, c))
    }

    /// Select rows by index; backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: Value, idx: &[u32]) -> Value {
        let t = self.value(a);
        let rows = t.rows();
        let out = match t.rank() {
            2 => {
                let n = t.shape()[1];
                let mut data = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    assert!((i as usize) < rows, "gather index {i} out of {rows} rows");
                    data.extend_from_slice(t.row(i as usize));
                }
                Tensor::new(vec![idx.len(), n], data)
            }
            1 => {
                let data: Vec<S> = idx
                    .iter()
                    .map(|&i| {
                        assert!((i as usize) < t.len(), "gather index {i} out of {}", t.len());
                        t.data()[i as usize]
                    })
                    .collect();
                Tensor::new(vec![idx.len()], data)
            }
            r => panic!("gather_rows on rank-{r} tensor"),
        };
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Repeat each row `times` consecutively: `[m,n] -> [m*times, n]`.
    pub fn repeat_rows(&mut self, a: Value, times: usize) -> Value {
        assert!(times >= 1);
        let t = self.value(a);
        let out = match t.rank() {
            2 => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut data = Vec::with_capacity(m * times * n);
                for i in 0..m {
                    for _ in 0..times {
                        data.extend_from_slice(t.row(i));
                    }
                }
                Tensor::new(vec![m * times, n], data)
            }
            1 => {
                let mut data = Vec::with_capacity(t.len() * times);
                for &x in t.data() {
                    data.extend(std::iter::repeat(x).take(times));
                }
                Tensor::new(vec![t.len() * times], data)
            }
            r => panic!("repeat_rows on rank-{r} tensor"),
        };
        self.push(out, Op::RepeatRows(a, times))
    }

    /// Mean squared error between two same-shape values, a rank-0 result.
    pub fn mse(&mut self, a: Value, b: Value) -> Value {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Numerically stable binary cross-entropy from logits, averaged over all
    /// elements: `softplus(x) - x*t`.
    pub fn bce_with_logits(&mut self, logits: Value, targets: Value) -> Value {
        let sp = self.softplus(logits);
        let xt = self.mul(logits, targets);
        let per = self.sub(sp, xt);
        self.mean_all(per)
    }

    /// Sum a non-empty list of same-shape values.
    pub fn sum_values(&mut self, vs: &[Value]) -> Value {
        assert!(!vs.is_empty());
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Reverse sweep from a scalar loss; returns gradients for every
    /// parameter leaf that influences it.
    pub fn backward(&self, loss: Value) -> Gradients<S> {
        let loss_t = self.value(loss);
        assert_eq!(loss_t.len(), 1, "backward needs a scalar loss");
        debug_assert!(loss_t.all_finite(), "non-finite loss");

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0 as usize] = Some(Tensor::full(loss_t.shape().to_vec(), S::one()));
        let mut by_param: HashMap<ParamKey, Tensor<S>> = HashMap::new();

        for i in (0..=loss.0 as usize).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(key) = param {
                        match by_param.get_mut(key) {
                            Some(acc) => acc.add_scaled(&g, S::one()),
                            None => {
                                by_param.insert(*key, g);
                            }
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let n = self.value(*b).len();
                    let mut gb = Tensor::zeros(vec![n]);
                    for (i, &x) in g.data().iter().enumerate() {
                        gb.data_mut()[i % n] = gb.data_mut()[i % n] + x;
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let s = S::from_f64(*c);
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::ConcatCols(a, b) => {
                    let p = self.value(*a).shape()[1];
                    let q = self.value(*b).shape()[1];
                    let m = g.shape()[0];
                    let mut ga = Vec::with_capacity(m * p);
                    let mut gb = Vec::with_capacity(m * q);
                    for i in 0..m {
                        ga.extend_from_slice(&g.row(i)[..p]);
                        gb.extend_from_slice(&g.row(i)[p..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![m, p], ga));
                    accumulate(&mut grads, *b, Tensor::new(vec![m, q], gb));
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.shape().to_vec());
                    let (m, len, n) = (g.shape()[0], g.shape()[1], src.shape()[1]);
                    for i in 0..m {
                        let dst = &mut ga.data_mut()[i * n + start..i * n + start + len];
                        for (d, &x) in dst.iter_mut().zip(g.row(i)) {
                            *d = *d + x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.out, |gy, y| gy * (S::one() - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.out, |gy, y| gy * y * (S::one() - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |gy, x| gy * sigmoid_stable(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.out, |gy, y| gy * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let src = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::full(src.shape().to_vec(), g.item()));
                }
                Op::MeanAll(a) => {
                    let src = self.value(*a);
                    let s = g.item() / S::from_f64(src.len() as f64);
                    accumulate(&mut grads, *a, Tensor::full(src.shape().to_vec(), s));
                }
                Op::SumCols(a) => {
                    let src = self.value(*a);
                    let (m, n) = (src.shape()[0], src.shape()[1]);
                    let mut ga = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let gi = g.data()[i];
                        for x in &mut ga.data_mut()[i * n..(i + 1) * n] {
                            *x = gi;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                    let ga = g.zip_map(self.value(*a), |gy, x| {
                        if x >= l && x <= h {
                            gy
                        } else {
                            S::zero()
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaxScalar(a, c) => {
                    let cs = S::from_f64(*c);
                    let ga = g.zip_map(self.value(*a), |gy, x| if x >= cs { gy } else { S::zero() });
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.shape().to_vec());
                    let n = if src.rank() == 2 { src.shape()[1] } else { 1 };
                    for (out_row, &i) in idx.iter().enumerate() {
                        let dst = &mut ga.data_mut()[i as usize * n..(i as usize + 1) * n];
                        let srcg = &g.data()[out_row * n..(out_row + 1) * n];
                        for (d, &x) in dst.iter_mut().zip(srcg) {
                            *d = *d + x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RepeatRows(a, times) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.shape().to_vec());
                    let n = if src.rank() == 2 { src.shape()[1] } else { 1 };
                    let m = if src.rank() == 2 { src.shape()[0] } else { src.len() };
                    for i in 0..m {
                        let dst = &mut ga.data_mut()[i * n..(i + 1) * n];
                        for r in 0..*times {
                            let row = (i * times + r) * n;
                            for (d, &x) in dst.iter_mut().zip(&g.data()[row..row + n]) {
                                *d = *d + x;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { map: by_param }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Value, t: Tensor<S>) {
    match &mut grads[v.0 as usize] {
        Some(acc) => acc.add_scaled(&t, S::one()),
        slot @ None => *slot = Some(t),
    }
}
