use super::store::ParamStore;
use super::tape::{Tape, Value};

/// Worst discrepancy found by [`check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

/// Compare reverse-mode gradients against central finite differences for
/// every element of every parameter in `store`.
///
/// `f` must rebuild the same scalar loss on a fresh tape each call (seed any
/// internal randomness from a fixed seed). The reported error for one element
/// is `|a - n| / max(|a| + |n|, 1e-4)`: relative for healthy gradients, an
/// absolute bound of 1e-8 for vanishing ones, which is far above the f64
/// central-difference noise floor at h = 1e-5.
pub fn check<F>(store: &mut ParamStore<f64>, mut f: F, h: f64) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Value,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss);

    let mut report = GradCheckReport {
        max_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        n_checked: 0,
    };

    for key in store.keys().collect::<Vec<_>>() {
        let analytic = grads.get(key).cloned();
        for i in 0..store.get(key).len() {
            let orig = store.get(key).data()[i];

            store.get_mut(key).data_mut()[i] = orig + h;
            let up = eval(&mut f, store);
            store.get_mut(key).data_mut()[i] = orig - h;
            let down = eval(&mut f, store);
            store.get_mut(key).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            report.n_checked += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst_param = store.name(key).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

fn eval<F>(f: &mut F, store: &ParamStore<f64>) -> f64
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Value,
{
    let mut tape = Tape::new();
    let v = f(&mut tape, store);
    tape.value(v).item()
}
