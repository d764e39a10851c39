//! Command-line front end: dataset generation, selection runs, seed sweeps,
//! the exhaustive-search oracle, and the HTTP service.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, read_schema, write_schema, Dataset, Recipe, SyntheticSpec};
use crate::error::{Error, Result};
use crate::oracle::{agreement, exhaustive_search, OracleConfig};
use crate::selector::{aggregate, run_selection, write_text, ImportanceReport, SelectionRequest, TrajectoryExport};
use crate::trainer::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "cvs", version, about = "Conditional variable selection with learnable feature masks")]
pub struct Cli {
    /// JSON file with defaults for any of the flags below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Zero every timestamp so identical inputs give identical output files.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (CSV plus schema JSON).
    Generate(GenerateArgs),
    /// Train once and write the importance report.
    Select(SelectArgs),
    /// Run `select` for several seeds and aggregate.
    Sweep(SweepArgs),
    /// Score every k-subset of candidates with the plain task network.
    Oracle(OracleArgs),
    /// Serve the HTTP job API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// eq7 (default), eq7-redundant, eq7-duplicate or grouped.
    #[arg(long)]
    pub recipe: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Number of input variables.
    #[arg(long)]
    pub variables: Option<usize>,
    /// Output directory; defaults to the current one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Comma-separated preselected variables; pass "" for none. Defaults to
    /// the schema's preselected columns.
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `a..b` (inclusive) or a comma list.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Compare the best subset against this report's top-k.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub max_subsets: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Persist datasets and reports here.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Training workers; defaults to cores − 1 (at least 1).
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Contents of `--config`: every flag, plus a full training config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunFile {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub condition: Option<Vec<String>>,
    pub k: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub train: Option<TrainConfig>,
    pub oracle: Option<OracleConfig>,
    pub recipe: Option<String>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub noise: Option<f64>,
    pub variables: Option<usize>,
}

/// One per command invocation, written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// `(path, sha256)` of every input file.
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
    pub started_at: u64,
    pub finished_at: u64,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

struct Context {
    file: RunFile,
    deterministic: bool,
    started_at: u64,
}

impl Context {
    fn now(&self) -> u64 {
        if self.deterministic {
            0
        } else {
            unix_now()
        }
    }

    fn manifest(&self, command: &str, config: serde_json::Value, inputs: &[&Path], outputs: &[PathBuf]) -> Result<RunManifest> {
        Ok(RunManifest {
            command: command.to_string(),
            config,
            inputs: inputs
                .iter()
                .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
                .collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_at: self.started_at,
            finished_at: self.now(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            failures: Vec::new(),
        })
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
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

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => RunFile::default(),
    };
    let ctx = Context {
        file,
        deterministic: cli.deterministic,
        started_at: if cli.deterministic { 0 } else { unix_now() },
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Select(a) => cmd_select(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Oracle(a) => cmd_oracle(&ctx, a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn cmd_generate(ctx: &Context, a: GenerateArgs) -> Result<()> {
    let f = &ctx.file;
    let recipe = Recipe::parse(a.recipe.as_deref().or(f.recipe.as_deref()).unwrap_or("eq7"))?;
    let defaults = SyntheticSpec::default();
    let base = SyntheticSpec {
        n_samples: a.n.or(f.n).unwrap_or(defaults.n_samples),
        n_variables: a.variables.or(f.variables).unwrap_or(defaults.n_variables),
        noise_std: a.noise.or(f.noise).unwrap_or(defaults.noise_std),
        seed: a.seed.or(f.seed).unwrap_or(1),
        ..defaults
    };
    let ds = recipe.generate(base.clone())?;
    let out = a.out.or_else(|| f.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let data = out.join(format!("{}.csv", recipe.name()));
    let schema = out.join(format!("{}.schema.json", recipe.name()));
    ds.save_csv(&data)?;
    write_schema(&ds.schema(), &schema)?;
    let outputs = vec![data.clone(), schema.clone()];
    let cfg = serde_json::json!({ "recipe": recipe.name(), "spec": recipe.spec(base) });
    let manifest = ctx.manifest("generate", cfg, &[], &outputs)?;
    write_manifest(&out, &manifest)?;
    println!("wrote {} rows to {}", ds.len(), data.display());
    Ok(())
}

struct Resolved {
    data: PathBuf,
    schema: PathBuf,
    ds: Dataset,
    request: SelectionRequest,
    out: PathBuf,
}

fn resolve(ctx: &Context, a: &RunArgs) -> Result<Resolved> {
    let f = &ctx.file;
    let data = a
        .data
        .clone()
        .or_else(|| f.data.clone())
        .ok_or_else(|| Error::config("--data is required"))?;
    let schema = a
        .schema
        .clone()
        .or_else(|| f.schema.clone())
        .ok_or_else(|| Error::config("--schema is required"))?;
    let ds = load_csv(&data, &read_schema(&schema)?)?;
    let condition = match &a.condition {
        Some(list) => split_list(list),
        None => f.condition.clone().unwrap_or_else(|| ds.preselected_names()),
    };
    let mut config = f.train.clone().unwrap_or_default();
    if let Some(seed) = a.seed {
        config.seed = seed;
    } else if f.train.is_none() {
        config.seed = 1;
    }
    if let Some(e) = a.epochs {
        config.max_epochs = e;
    }
    if let Some(b) = a.batch {
        config.batch_size = b;
    }
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    let k = a.k.or(f.k).unwrap_or(5);
    let out = a.out.clone().or_else(|| f.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(Resolved {
        data,
        schema,
        ds,
        request: SelectionRequest { condition, k, config },
        out,
    })
}

fn split_list(list: &str) -> Vec<String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// `a..b` (inclusive) or `a,b,c`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("cannot parse seeds {text:?}; use a..b or a,b,c"));
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let seeds: Vec<u64> = split_list(text)
        .iter()
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(manifest)?)
}

fn write_selection(out: &Path, prefix: &str, report: &ImportanceReport, traj: &TrajectoryExport) -> Result<Vec<PathBuf>> {
    let report_path = out.join(format!("{prefix}report.json"));
    let traj_path = out.join(format!("{prefix}trajectory.json"));
    let scores_path = out.join(format!("{prefix}scores.csv"));
    let mut report = report.clone();
    let traj_name = traj_path.file_name().map(|n| n.to_string_lossy().into_owned());
    report.trajectory_ref = traj_name.clone();
    report.losses_ref = traj_name;
    report.save_json(&report_path)?;
    write_text(&traj_path, &traj.to_json()?)?;
    report.save_scores_csv(&scores_path)?;
    Ok(vec![report_path, traj_path, scores_path])
}

fn cmd_select(ctx: &Context, a: SelectArgs) -> Result<()> {
    let r = resolve(ctx, &a.run)?;
    let sel = run_selection(&r.ds, &r.request)?;
    let traj = TrajectoryExport::new(&sel.report, &sel.record, ctx.deterministic);
    let outputs = write_selection(&r.out, "", &sel.report, &traj)?;
    let manifest = ctx.manifest(
        "select",
        serde_json::to_value(&r.request)?,
        &[&r.data, &r.schema],
        &outputs,
    )?;
    write_manifest(&r.out, &manifest)?;
    println!("top-{}: {}", r.request.k, sel.report.top_k.join(", "));
    Ok(())
}

fn cmd_sweep(ctx: &Context, a: SweepArgs) -> Result<()> {
    let r = resolve(ctx, &a.run)?;
    let seeds = match &a.seeds {
        Some(text) => parse_seeds(text)?,
        None => ctx.file.seeds.clone().unwrap_or_else(|| (1..=5).collect()),
    };
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut last_err = None;
    for &seed in &seeds {
        let mut req = r.request.clone();
        req.config.seed = seed;
        match run_selection(&r.ds, &req) {
            Ok(sel) => {
                let traj = TrajectoryExport::new(&sel.report, &sel.record, ctx.deterministic);
                outputs.extend(write_selection(&r.out, &format!("seed-{seed}-"), &sel.report, &traj)?);
                reports.push(sel.report);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push(format!("seed {seed}: {e}"));
                last_err = Some(e);
            }
        }
    }
    if reports.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::config("no seeds given")));
    }
    let agg = aggregate(reports)?;
    let agg_path = r.out.join("aggregate.json");
    write_text(&agg_path, &agg.to_json()?)?;
    outputs.push(agg_path);
    let mut cfg = serde_json::to_value(&r.request)?;
    cfg["seeds"] = serde_json::to_value(&seeds)?;
    let mut manifest = ctx.manifest("sweep", cfg, &[&r.data, &r.schema], &outputs)?;
    manifest.failures = failures;
    write_manifest(&r.out, &manifest)?;
    for (name, freq) in agg.candidates.iter().zip(&agg.frequency) {
        if *freq > 0.0 {
            println!("{name}: top-{} in {:.0}% of seeds", r.request.k, freq * 100.0);
        }
    }
    Ok(())
}

fn cmd_oracle(ctx: &Context, a: OracleArgs) -> Result<()> {
    let r = resolve(ctx, &a.run)?;
    let mut cfg = ctx.file.oracle.clone().unwrap_or_default();
    cfg.seed = r.request.config.seed;
    cfg.feature_scaling = r.request.config.feature_scaling;
    if let Some(e) = a.run.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.run.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.run.lr {
        cfg.learning_rate = lr;
    }
    if let Some(cap) = a.max_subsets {
        cfg.max_subsets = cap;
    }
    let table = exhaustive_search(&r.ds, &r.request.condition, r.request.k, &cfg)?;
    let json = r.out.join("oracle.json");
    let csv = r.out.join("oracle.csv");
    table.save(&json, &csv)?;
    let mut outputs = vec![json, csv];
    let mut inputs: Vec<&Path> = vec![&r.data, &r.schema];
    if let Some(path) = &a.report {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: ImportanceReport = serde_json::from_str(&text)?;
        let score = agreement(&report, &table, r.request.k)?;
        let best = table.best().map(|b| b.subset.clone()).unwrap_or_default();
        let out = r.out.join("agreement.json");
        let body = serde_json::json!({
            "k": r.request.k,
            "cvs_top_k": report.top_k,
            "oracle_best": best,
            "agreement": score,
        });
        write_text(&out, &serde_json::to_string_pretty(&body)?)?;
        outputs.push(out);
        inputs.push(path);
        println!("agreement with report: {score}");
    }
    let manifest = ctx.manifest("oracle", serde_json::to_value(&cfg)?, &inputs, &outputs)?;
    write_manifest(&r.out, &manifest)?;
    if let Some(best) = table.best() {
        println!("best subset: {} (val mse {:.4})", best.subset.join(", "), best.val_mse.unwrap_or(f64::NAN));
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let workers = a.workers.unwrap_or_else(crate::service::default_workers);
    let opts = crate::service::ServiceOptions {
        workers,
        data_dir: a.data_dir,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(crate::service::serve(([0, 0, 0, 0], a.port).into(), opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("3,7").unwrap(), vec![3, 7]);
        assert_eq!(parse_seeds("4..4").unwrap(), vec![4]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn condition_lists() {
        assert_eq!(split_list("v1, v2"), ["v1", "v2"]);
        assert!(split_list("").is_empty());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(main_with_args(["cvs", "frobnicate"]), 2);
        assert_eq!(main_with_args(["cvs", "generate", "--recipe", "eq9", "--out", "/nonexistent-dir-for-test"]), 2);
    }
}
