//! Criteria 5–7 share one set of full desk-scale training runs:
//!
//! 5. Trend: Base (K=1, N=1, T=16) vs Lite (K=2, N=1, T=10), 50 iterations,
//!    3 seeds each — Lite mean final return >= Base mean and Lite cross-seed
//!    std <= Base std; on a first-draw miss, extend to 5 seeds and accept a
//!    one-sided sign test at p < 0.25 (>= 4/5 seed-wise wins).
//! 6. Ensemble collapse: the 100-update moving average of the logged
//!    disagreement at the end of a 50-iteration run is < 25% of its value at
//!    the end of iteration 1.
//! 7. Determinism and step accounting: rerunning a (config, seed) pair
//!    reproduces metrics.csv byte for byte, and env_steps advances by
//!    exactly 1000 per iteration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use probdreamer::trainer::{TrainConfig, Trainer};

const SEEDS: [u64; 3] = [0, 1, 2];
const FALLBACK_SEEDS: [u64; 2] = [3, 4];

fn base_config() -> TrainConfig {
    TrainConfig { model: "BaseDreamer".into(), k: 1, n: 1, t: 16, ..TrainConfig::default() }
}

fn lite_config() -> TrainConfig {
    TrainConfig { model: "ProbDreamer-Lite".into(), k: 2, n: 1, t: 10, ..TrainConfig::default() }
}

fn train_one(cfg: &TrainConfig, seed: u64, root: &Path, tag: &str) -> (PathBuf, f64) {
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    let mut trainer: Trainer<f32> = Trainer::new(run_cfg).expect("valid config");
    let dir = root.join(format!("{tag}_seed{seed}"));
    let summary = trainer.run(&dir).expect("training run");
    (dir, summary.final_eval_mean)
}

struct Runs {
    root: PathBuf,
    base: Vec<(u64, f64)>,
    lite: Vec<(u64, f64)>,
}

static RUNS: OnceLock<Runs> = OnceLock::new();

fn runs() -> &'static Runs {
    RUNS.get_or_init(|| {
        let root =
            std::env::temp_dir().join(format!("probdreamer-acceptance-{}", std::process::id()));
        fs::create_dir_all(&root).expect("create acceptance scratch dir");
        let base = SEEDS
            .iter()
            .map(|&s| (s, train_one(&base_config(), s, &root, "base").1))
            .collect();
        let lite = SEEDS
            .iter()
            .map(|&s| (s, train_one(&lite_config(), s, &root, "lite").1))
            .collect();
        Runs { root, base, lite }
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn criterion_5_lite_matches_or_beats_base_at_desk_scale() {
    let r = runs();
    let base: Vec<f64> = r.base.iter().map(|&(_, m)| m).collect();
    let lite: Vec<f64> = r.lite.iter().map(|&(_, m)| m).collect();
    let (bm, bs) = mean_std(&base);
    let (lm, ls) = mean_std(&lite);
    let first_draw = lm >= bm && ls <= bs;

    if first_draw {
        super::verdict(
            "criterion-5 desk-scale-trend",
            true,
            &format!(
                "3 seeds: Lite {lm:.2} ± {ls:.2} vs Base {bm:.2} ± {bs:.2} (mean >= and std <=)"
            ),
        );
        return;
    }

    // First draw missed; extend both models to 5 seeds and fall back to the
    // seed-wise sign test. If Base already took 2 of the first 3 seeds the
    // test cannot reach 4/5 no matter how the extension lands, so the extra
    // runs would only restate the failure.
    let early_losses = r
        .base
        .iter()
        .zip(&r.lite)
        .filter(|((_, b), (_, l))| l <= b)
        .count();
    if early_losses >= 2 {
        super::verdict(
            "criterion-5 desk-scale-trend",
            false,
            &format!(
                "3 seeds: Lite {lm:.2} ± {ls:.2} vs Base {bm:.2} ± {bs:.2}; Base won \
                 {early_losses}/3 seeds, so the 5-seed sign test (needs >= 4/5) is already out of reach"
            ),
        );
        return;
    }
    let mut base5: Vec<(u64, f64)> = r.base.clone();
    let mut lite5: Vec<(u64, f64)> = r.lite.clone();
    for &s in &FALLBACK_SEEDS {
        base5.push((s, train_one(&base_config(), s, &r.root, "base").1));
        lite5.push((s, train_one(&lite_config(), s, &r.root, "lite").1));
    }
    let wins = base5
        .iter()
        .zip(&lite5)
        .filter(|((sb, b), (sl, l))| {
            assert_eq!(sb, sl);
            l > b
        })
        .count();
    let per_seed: Vec<String> = base5
        .iter()
        .zip(&lite5)
        .map(|((s, b), (_, l))| format!("seed {s}: {l:.1} vs {b:.1}"))
        .collect();
    let pass = wins >= 4;
    super::verdict(
        "criterion-5 desk-scale-trend",
        pass,
        &format!(
            "3-seed draw missed (Lite {lm:.2} ± {ls:.2} vs Base {bm:.2} ± {bs:.2}); \
             5-seed sign test: Lite won {wins}/5 (need >= 4; {})",
            per_seed.join(", ")
        ),
    );
}

fn disagreement_series(dir: &Path) -> Vec<(usize, f64)> {
    let text = fs::read_to_string(dir.join("disagreement.csv")).expect("disagreement log");
    text.lines()
        .skip(1)
        .map(|line| {
            let mut cols = line.split(',');
            let _update: usize = cols.next().unwrap().parse().unwrap();
            let iteration: usize = cols.next().unwrap().parse().unwrap();
            let d: f64 = cols.next().unwrap().parse().unwrap();
            (iteration, d)
        })
        .collect()
}

/// Moving average over the last `window` entries ending at index `end`
/// (inclusive), truncated at the start of the series.
fn moving_average(xs: &[f64], end: usize, window: usize) -> f64 {
    let lo = (end + 1).saturating_sub(window);
    let slice = &xs[lo..=end];
    slice.iter().sum::<f64>() / slice.len() as f64
}

#[test]
fn criterion_6_ensemble_disagreement_collapses() {
    let r = runs();
    let rows = disagreement_series(&r.root.join("base_seed0"));
    let values: Vec<f64> = rows.iter().map(|&(_, d)| d).collect();
    let iter1_end = rows
        .iter()
        .rposition(|&(it, _)| it == 1)
        .expect("iteration 1 logged");
    let early = moving_average(&values, iter1_end, 100);
    let late = moving_average(&values, values.len() - 1, 100);
    let ratio = late / early;
    let pass = ratio < 0.25;
    super::verdict(
        "criterion-6 ensemble-collapse",
        pass,
        &format!(
            "100-update MA of ensemble disagreement: {early:.5} at iteration 1 -> {late:.5} at iteration 50 \
             ({:.1}% of the early value, need < 25%)",
            100.0 * ratio
        ),
    );
}

#[test]
fn criterion_7_runs_are_deterministic_and_account_steps() {
    let r = runs();
    let first = fs::read(r.root.join("base_seed0").join("metrics.csv")).expect("first metrics");
    let (rerun_dir, _) = train_one(&base_config(), 0, &r.root, "rerun_base");
    let second = fs::read(rerun_dir.join("metrics.csv")).expect("rerun metrics");
    let identical = first == second;

    let text = String::from_utf8(first).expect("utf-8 csv");
    let mut steps_exact = true;
    let mut rows = 0usize;
    for line in text.lines().skip(1) {
        let mut cols = line.split(',');
        let iteration: usize = cols.next().unwrap().parse().unwrap();
        let env_steps: usize = cols.next().unwrap().parse().unwrap();
        steps_exact &= env_steps == 1000 * iteration;
        rows += 1;
    }
    let pass = identical && steps_exact && rows == base_config().iterations;
    super::verdict(
        "criterion-7 determinism-and-step-accounting",
        pass,
        &format!(
            "rerun metrics byte-identical: {identical}; env_steps == 1000 x iteration on all {rows} rows: {steps_exact}"
        ),
    );
}
