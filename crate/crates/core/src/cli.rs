//! `exmem` command line: data generation, training, evaluation, ablation
//! grid and one-parameter sweeps.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datagen::{
    generate, read_dataset, read_json, write_dataset, write_json_pretty, GenConfig,
};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, write_eval, EvalResult};
use crate::trainer::{train, write_metrics, Checkpoint, EvalSplit, Mode, TrainConfig, TrainData};

pub const SEED_ENV: &str = "ECN_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "exmem",
    version,
    about = "Exemplar-memory domain adaptation on synthetic re-ID data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-domain dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write metrics.csv and checkpoint.json.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the query/gallery split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every mode for several seeds.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Vary one hyper-parameter.
    Sweep {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Lambda,
    K,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved_config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix: u64,
    pub outputs: Vec<PathBuf>,
}

fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json_pretty(&out.join(MANIFEST_FILE), manifest)
}

/// Read a config file, or the resolved config of a previous run's
/// manifest, or the defaults when no path is given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let direct = read_json::<T>(p);
    if direct.is_ok() {
        return direct;
    }
    if let Ok(manifest) = read_json::<serde_json::Value>(p) {
        if let Some(resolved) = manifest.get("resolved_config") {
            return serde_json::from_value(resolved.clone()).map_err(|e| Error::Schema {
                path: p.to_path_buf(),
                line: 0,
                message: format!("resolved_config: {e}"),
            });
        }
    }
    direct
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg: TrainConfig = load_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: flag, then `ECN_SEED`, then the config file.
fn apply_overrides(cfg: &mut TrainConfig, mode: Option<&str>, seed: Option<u64>) -> Result<()> {
    if let Some(m) = mode {
        cfg.mode = m.parse()?;
    }
    if let Some(s) = seed.or(env_seed()?) {
        cfg.seed = s;
    }
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: GenConfig = load_config(config)?;
    cfg.validate()?;
    write_manifest(
        out,
        &RunManifest {
            command: "gen-data".into(),
            config_path: config.map(Path::to_path_buf),
            resolved_config: to_value(&cfg),
            seed: Some(cfg.seed),
            version: version_string(),
            started_unix: now_unix(),
            outputs: vec![out.to_path_buf()],
        },
    )?;
    let bundle = generate(&cfg)?;
    write_dataset(&bundle, out)
}

/// Train one configuration; returns the outcome's evaluation on the
/// query/gallery split when ground truth is available.
fn train_and_write(cfg: &TrainConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let bundle = read_dataset(data_dir)?;
    let eval = bundle
        .ground_truth
        .as_ref()
        .map(|_| EvalSplit::from_bundle(&bundle));
    let outcome = train(cfg, TrainData::from_bundle(&bundle), eval)?;
    write_metrics(&outcome.logs, out)?;
    Checkpoint::from_outcome(&outcome).save(&out.join("checkpoint.json"))
}

pub fn cmd_train(args: &TrainArgs, mode: Option<&str>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_train_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, mode, seed)?;
    let cfg = cfg.resolved();
    write_manifest(
        &args.out,
        &RunManifest {
            command: "train".into(),
            config_path: args.config.clone(),
            resolved_config: to_value(&cfg),
            seed: Some(cfg.seed),
            version: version_string(),
            started_unix: now_unix(),
            outputs: ["metrics.csv", "timing.csv", "checkpoint.json"]
                .iter()
                .map(|f| args.out.join(f))
                .collect(),
        },
    )?;
    train_and_write(&cfg, &args.data, &args.out)
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    write_manifest(
        out,
        &RunManifest {
            command: "eval".into(),
            config_path: Some(checkpoint.to_path_buf()),
            resolved_config: serde_json::Value::Null,
            seed: None,
            version: version_string(),
            started_unix: now_unix(),
            outputs: vec![out.join("eval.json"), out.join("eval.csv")],
        },
    )?;
    let ck = Checkpoint::load(checkpoint)?;
    let bundle = read_dataset(data)?;
    if ck.net.input_dim() != bundle.config.obs_dim {
        return Err(Error::DimensionMismatch {
            what: "checkpoint input vs dataset obs_dim",
            expected: ck.net.input_dim(),
            found: bundle.config.obs_dim,
        });
    }
    let result = evaluate(&ck.net, &bundle.target_query, &bundle.target_gallery)?;
    write_eval(&result, out)
}

fn run_cell(cfg: &TrainConfig, bundle: &crate::datagen::DatasetBundle) -> Result<EvalResult> {
    let outcome = train(cfg, TrainData::from_bundle(bundle), None)?;
    evaluate(&outcome.net, &bundle.target_query, &bundle.target_gallery)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub seed: u64,
    /// `(map, cmc1, cmc5)`, or the error message of a failed cell.
    pub outcome: std::result::Result<(f64, f64, f64), String>,
}

pub fn cmd_ablate(args: &TrainArgs, seeds: u64) -> Result<Vec<AblationRow>> {
    let mut base = load_train_config(args.config.as_deref())?;
    apply_overrides(&mut base, None, None)?;
    write_manifest(
        &args.out,
        &RunManifest {
            command: "ablate".into(),
            config_path: args.config.clone(),
            resolved_config: to_value(&base),
            seed: Some(base.seed),
            version: version_string(),
            started_unix: now_unix(),
            outputs: vec![
                args.out.join("ablation.csv"),
                args.out.join("ablation_summary.csv"),
            ],
        },
    )?;
    let bundle = read_dataset(&args.data)?;

    let mut rows = Vec::new();
    for mode in Mode::ALL {
        for s in 0..seeds {
            let seed = base.seed.wrapping_add(s);
            let cfg = TrainConfig {
                mode,
                seed,
                ..base.clone()
            };
            let outcome = run_cell(&cfg, &bundle)
                .map(|r| (r.map, r.cmc_at(1), r.cmc_at(5)))
                .map_err(|e| e.to_string());
            rows.push(AblationRow {
                mode,
                seed,
                outcome,
            });
        }
    }

    let lines: Vec<String> = rows
        .iter()
        .map(|r| match &r.outcome {
            Ok((map, c1, c5)) => format!("{},{},{map},{c1},{c5},ok", r.mode, r.seed),
            Err(msg) => format!(
                "{},{},,,,failed: {}",
                r.mode,
                r.seed,
                msg.replace([',', '\n'], ";")
            ),
        })
        .collect();
    write_csv(
        &args.out.join("ablation.csv"),
        "mode,seed,map,cmc1,cmc5,status",
        &lines,
    )?;

    let summary: Vec<String> = Mode::ALL
        .iter()
        .map(|&mode| {
            let ok: Vec<(f64, f64, f64)> = rows
                .iter()
                .filter(|r| r.mode == mode)
                .filter_map(|r| r.outcome.clone().ok())
                .collect();
            let cell = |f: fn(&(f64, f64, f64)) -> f64| {
                median(&ok.iter().map(f).collect::<Vec<_>>())
                    .map_or(String::new(), |m| m.to_string())
            };
            format!(
                "{mode},{},{},{},{}",
                cell(|r| r.0),
                cell(|r| r.1),
                cell(|r| r.2),
                ok.len()
            )
        })
        .collect();
    write_csv(
        &args.out.join("ablation_summary.csv"),
        "mode,median_map,median_cmc1,median_cmc5,n_ok",
        &summary,
    )?;
    Ok(rows)
}

fn apply_sweep_value(cfg: &mut TrainConfig, param: SweepParam, raw: &str) -> Result<()> {
    let bad = |what: &str| Error::config(what, format!("cannot parse sweep value `{raw}`"));
    match param {
        SweepParam::Beta => cfg.beta = raw.trim().parse().map_err(|_| bad("beta"))?,
        SweepParam::Lambda => cfg.lambda = raw.trim().parse().map_err(|_| bad("lambda"))?,
        SweepParam::K => cfg.k = raw.trim().parse().map_err(|_| bad("k"))?,
    }
    cfg.validate()
}

pub fn cmd_sweep(
    args: &TrainArgs,
    param: SweepParam,
    values: &[String],
    mode: Option<&str>,
    seed: Option<u64>,
) -> Result<Vec<(String, EvalResult)>> {
    let mut base = load_train_config(args.config.as_deref())?;
    apply_overrides(&mut base, mode, seed)?;
    let cells: Vec<TrainConfig> = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            apply_sweep_value(&mut c, param, v)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    write_manifest(
        &args.out,
        &RunManifest {
            command: format!("sweep --param {}", to_value(&param).as_str().unwrap_or("?")),
            config_path: args.config.clone(),
            resolved_config: to_value(&base),
            seed: Some(base.seed),
            version: version_string(),
            started_unix: now_unix(),
            outputs: vec![args.out.join("sweep.csv")],
        },
    )?;
    let bundle = read_dataset(&args.data)?;
    let mut results = Vec::new();
    let mut lines = Vec::new();
    for (raw, cfg) in values.iter().zip(&cells) {
        let r = run_cell(cfg, &bundle)?;
        lines.push(format!("{},{},{}", raw.trim(), r.map, r.cmc_at(1)));
        results.push((raw.trim().to_string(), r));
    }
    write_csv(&args.out.join("sweep.csv"), "value,map,cmc1", &lines)?;
    Ok(results)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => cmd_gen_data(config.as_deref(), &out),
        Command::Train { common, mode, seed } => cmd_train(&common, mode.as_deref(), seed),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, &out),
        Command::Ablate { common, seeds } => cmd_ablate(&common, seeds).map(|_| ()),
        Command::Sweep {
            common,
            param,
            values,
            mode,
            seed,
        } => cmd_sweep(&common, param, &values, mode.as_deref(), seed).map(|_| ()),
    }
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn sweep_values_are_validated() {
        let mut cfg = TrainConfig::default();
        apply_sweep_value(&mut cfg, SweepParam::Lambda, " 0.5").unwrap();
        assert_eq!(cfg.lambda, 0.5);
        apply_sweep_value(&mut cfg, SweepParam::K, "8").unwrap();
        assert_eq!(cfg.k, 8);
        assert!(apply_sweep_value(&mut cfg, SweepParam::Beta, "0").is_err());
        assert!(apply_sweep_value(&mut cfg, SweepParam::K, "1.5").is_err());
    }
}
