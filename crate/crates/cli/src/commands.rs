use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use probdreamer::trainer::{
    run_experiment, ConfigError, TrainConfig, Trainer, TrainerError,
};

use crate::chart;
use crate::Series;

/// Failures that are the operator's fault: bad flags, bad config, occupied
/// or missing paths. They exit 2; everything else exits 1.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() || err.downcast_ref::<ConfigError>().is_some() {
        2
    } else {
        1
    }
}

/// Keep a `ConfigError` downcastable through the anyhow chain so it still
/// maps to exit 2 when it surfaces from deep inside the trainer.
fn train_err(e: TrainerError) -> anyhow::Error {
    match e {
        TrainerError::Config(c) => anyhow::Error::new(c),
        other => anyhow::Error::new(other),
    }
}

fn out_root() -> PathBuf {
    std::env::var_os("PBDR_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Run directories are create-once: never touch an existing one.
fn claim_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(usage(format!(
            "output directory {} already exists; refusing to touch it",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = TrainConfig::parse(&text).map_err(anyhow::Error::new)?;
    Ok(cfg)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_manifest(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    let started =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = format!(
        "code_version = {}\nmodel = {}\nseed = {}\nstarted_unix = {}\nconfig = config.cfg\n\
         metrics = metrics.csv\ntiming = timing.csv\ndisagreement = disagreement.csv\n\
         checkpoints = checkpoints/\n",
        env!("CARGO_PKG_VERSION"),
        cfg.model,
        cfg.seed,
        started,
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out.unwrap_or_else(|| {
        out_root().join(format!("{}_seed{}", sanitize(&cfg.model), cfg.seed))
    });
    claim_dir(&dir)?;
    write_manifest(&dir, &cfg)?;
    let mut trainer: Trainer<f32> = Trainer::new(cfg).map_err(train_err)?;
    let summary = trainer.run(&dir).map_err(train_err)?;
    println!(
        "training complete: eval return {:.2} ± {:.2}",
        summary.final_eval_mean, summary.final_eval_std
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, episodes: usize, out: Option<PathBuf>) -> Result<()> {
    if episodes < 1 {
        return Err(usage("--episodes must be >= 1"));
    }
    if !checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let cfg_path = checkpoint
        .parent()
        .map(|p| p.join("config.cfg"))
        .filter(|p| p.is_file())
        .or_else(|| {
            checkpoint
                .parent()
                .and_then(Path::parent)
                .map(|p| p.join("config.cfg"))
                .filter(|p| p.is_file())
        })
        .ok_or_else(|| {
            usage(format!(
                "no config.cfg found next to {} (or one directory up)",
                checkpoint.display()
            ))
        })?;
    let mut cfg = load_config(&cfg_path)?;
    cfg.eval_episodes = episodes;
    let model = sanitize(&cfg.model);
    let mut trainer: Trainer<f32> = Trainer::new(cfg).map_err(train_err)?;
    trainer
        .restore_checkpoint(checkpoint)
        .map_err(|e| usage(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let eval = trainer.evaluate();

    let dir = out.unwrap_or_else(|| out_root().join(format!("eval_{model}_{episodes}ep")));
    claim_dir(&dir)?;
    let mut csv = String::from("episode,seed,return\n");
    for (i, r) in eval.returns.iter().enumerate() {
        csv.push_str(&format!("{i},{i},{r}\n"));
    }
    fs::write(dir.join("eval.csv"), csv)?;
    let summary = format!("{:.4} ± {:.4}", eval.mean, eval.std);
    fs::write(dir.join("summary.txt"), format!("{summary}\n"))?;
    println!("{summary}");
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn compare(configs: &[PathBuf], seeds: &[u64], out: Option<PathBuf>) -> Result<()> {
    // Parse everything first: validation failures must abort before any
    // training starts.
    let mut parsed = Vec::with_capacity(configs.len());
    for path in configs {
        parsed.push(load_config(path)?);
    }
    let dir = out.unwrap_or_else(|| out_root().join("comparison"));
    claim_dir(&dir)?;
    let table = run_experiment::<f32>(&parsed, seeds, &dir).map_err(train_err)?;
    fs::write(dir.join("comparison.csv"), table.to_csv())?;
    fs::write(dir.join("comparison.txt"), table.to_text())?;
    print!("{}", table.to_text());
    println!("artifacts in {}", dir.display());
    Ok(())
}

/// Minimal CSV reader for our own artifacts: header + unquoted cells.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| usage(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(usage(format!(
                "{} row {}: expected {} cells, got {}",
                path.display(),
                i + 2,
                header.len(),
                cells.len()
            )));
        }
        rows.push(cells);
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| usage(format!("{} has no column {name:?}", path.display())))
}

fn numeric(cell: &str, name: &str, path: &Path) -> Result<f64> {
    cell.parse::<f64>()
        .map_err(|_| usage(format!("{}: column {name:?} holds non-numeric {cell:?}", path.display())))
}

fn series_from(
    path: &Path,
    x_col: &str,
    y_cols: &[&str],
) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let (header, rows) = read_csv(path)?;
    if rows.is_empty() {
        return Err(usage(format!("{} has no data rows to plot", path.display())));
    }
    let xi = column(&header, x_col, path)?;
    let mut out = Vec::with_capacity(y_cols.len());
    for &name in y_cols {
        let yi = column(&header, name, path)?;
        let mut points = Vec::with_capacity(rows.len());
        for row in &rows {
            points.push((numeric(&row[xi], x_col, path)?, numeric(&row[yi], name, path)?));
        }
        out.push((name.to_string(), points));
    }
    Ok(out)
}

fn csv_slice(path: &Path, cols: &[&str]) -> Result<String> {
    let (header, rows) = read_csv(path)?;
    let idx: Vec<usize> =
        cols.iter().map(|c| column(&header, c, path)).collect::<Result<_>>()?;
    let mut s = cols.join(",");
    s.push('\n');
    for row in &rows {
        let cells: Vec<&str> = idx.iter().map(|&i| row[i].as_str()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn plot(run: &Path, what: Series) -> Result<()> {
    let metrics = run.join("metrics.csv");
    if !metrics.is_file() {
        return Err(usage(format!("no metrics.csv in {}", run.display())));
    }
    let (name, title, x_label, source, cols): (&str, &str, &str, PathBuf, Vec<&str>) = match what {
        Series::Losses => (
            "losses",
            "World-model training losses",
            "iteration",
            metrics.clone(),
            vec![
                "loss_total",
                "loss_recon",
                "loss_dynamics",
                "loss_representation",
                "loss_reward",
                "loss_continue",
            ],
        ),
        Series::Disagreement => {
            let d = run.join("disagreement.csv");
            if !d.is_file() {
                return Err(usage(format!("no disagreement.csv in {}", run.display())));
            }
            ("disagreement", "Ensemble disagreement per update", "update", d, vec![
                "disagreement_mean",
            ])
        }
        Series::Returns => (
            "returns",
            "Evaluation return per iteration",
            "iteration",
            metrics.clone(),
            vec!["eval_return_mean"],
        ),
    };
    let x_col = x_label;
    let series = series_from(&source, x_col, &cols)?;
    let svg = chart::line_chart(title, x_label, &series);

    // Plots are derived views; they live in their own subdirectory and are
    // regenerated in place without touching run data.
    let plots = run.join("plots");
    fs::create_dir_all(&plots)?;
    let mut slice_cols = vec![x_col];
    slice_cols.extend(cols.iter().copied());
    if matches!(what, Series::Returns) {
        slice_cols.push("eval_return_std");
    }
    fs::write(plots.join(format!("{name}.csv")), csv_slice(&source, &slice_cols)?)?;
    let svg_path = plots.join(format!("{name}.svg"));
    fs::write(&svg_path, svg)?;
    println!("wrote {}", svg_path.display());
    Ok(())
}
