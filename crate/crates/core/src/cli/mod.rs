//! Command-line front end.
//!
//! Every artifact-producing verb writes into its own run directory together
//! with a `manifest.json` holding the effective configuration and content
//! hashes of all inputs, so `cpft replay <manifest>` can redo the run.

mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{LossConfig, TrainConfig};
use crate::conformal::{split_cp, write_audit};
use crate::data::{generate_synthetic, ingest, read_dataset, write_dataset, write_vocabulary, Dataset, LogFormat, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, DEFAULT_KS};
use crate::model::{read_checkpoint, write_checkpoint, ModelParams};
use crate::training::{finetune, pretrain, write_trace, EpochTrace};

pub use manifest::{FileHash, Manifest};

/// Environment variable naming the parent of per-run output directories.
pub const OUTPUT_DIR_ENV: &str = "CPFT_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "cpft", version, about = "Conformal fine-tuning for next-item recommenders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic Markov-chain interaction dataset.
    Synth(SynthArgs),
    /// Read a raw (user, item, timestamp) log into a dataset.
    Ingest(IngestArgs),
    /// Train with cross-entropy only.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint with the configured loss terms.
    Finetune(ModelArgs),
    /// Split conformal audit of a frozen checkpoint.
    Calibrate(ModelArgs),
    /// Leave-one-out ranking metrics plus conformal diagnostics.
    Evaluate(ModelArgs),
    /// Fine-tune and evaluate every ablation loss configuration.
    Ablate(ModelArgs),
    /// Fine-tune and evaluate one-at-a-time over hyperparameter grids.
    Sensitivity(SensitivityArgs),
    /// Re-run a previous run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML file with flat `key = value` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (default: a timestamped directory under $CPFT_OUTPUT_DIR or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().n_users)]
    pub users: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_items)]
    pub items: usize,
    #[arg(long, default_value_t = SynthSpec::default().min_len)]
    pub min_len: usize,
    #[arg(long, default_value_t = SynthSpec::default().max_len)]
    pub max_len: usize,
    #[arg(long, default_value_t = SynthSpec::default().transition_concentration)]
    pub concentration: f64,
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    pub seed: u64,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Tsv,
    Csv,
}

#[derive(Args, Debug, Clone)]
pub struct IngestArgs {
    /// Raw interaction log.
    #[arg(long)]
    pub input: PathBuf,
    /// Log format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Warm-start checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub base: ModelArgs,
    /// `key=v1,v2,...`; repeatable, each axis is swept with the others held at their configured values.
    #[arg(long, required = true, value_name = "KEY=V1,V2,...")]
    pub grid: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 usage, 2 data, 3 divergence.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, recorded, None, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::DivergenceDetected { .. } => 3,
        _ => 2,
    }
}

/// State shared by a single run: resolved config, run directory and the
/// manifest being assembled.
struct RunContext {
    cfg: TrainConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl RunContext {
    fn create(
        verb: &str,
        argv: Vec<String>,
        cfg: TrainConfig,
        seed: u64,
        out: Option<&Path>,
        inputs: &[&Path],
        expected: Option<&[FileHash]>,
    ) -> Result<Self> {
        let mut hashes = Vec::with_capacity(inputs.len());
        for path in inputs {
            let h = FileHash::of_file(path)?;
            if let Some(exp) = expected {
                match exp.iter().find(|e| e.path == h.path) {
                    Some(e) if e.sha256 == h.sha256 => {}
                    Some(_) => {
                        return Err(Error::Format {
                            path: path.to_path_buf(),
                            reason: "content hash differs from the manifest".into(),
                        })
                    }
                    None => {
                        return Err(Error::Format {
                            path: path.to_path_buf(),
                            reason: "input not recorded in the manifest".into(),
                        })
                    }
                }
            }
            hashes.push(h);
        }
        let dir = make_run_dir(verb, out)?;
        let manifest = Manifest::new(verb, argv, cfg.to_map(), seed, hashes, &dir);
        Ok(Self { cfg, dir, manifest })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.manifest.outputs.push(FileHash::of_bytes(name, bytes));
        Ok(())
    }

    fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn write_traces(&mut self, name: &str, traces: &[EpochTrace]) -> Result<()> {
        let mut buf = Vec::new();
        write_trace(&mut buf, traces)?;
        self.write(name, &buf)
    }

    fn write_model(&mut self, name: &str, params: &ModelParams) -> Result<()> {
        let path = self.dir.join(name);
        write_checkpoint(params, &path)?;
        self.manifest.outputs.push(FileHash::of_file_named(&path, name)?);
        Ok(())
    }

    fn write_dataset(&mut self, name: &str, ds: &Dataset) -> Result<()> {
        let path = self.dir.join(name);
        write_dataset(ds, &path)?;
        self.manifest.outputs.push(FileHash::of_file_named(&path, name)?);
        Ok(())
    }

    fn finish(self, stdout: &mut dyn Write) -> Result<()> {
        self.manifest.write(&self.dir.join(MANIFEST_FILE))?;
        writeln!(stdout, "run directory: {}", self.dir.display())?;
        Ok(())
    }
}

fn make_run_dir(verb: &str, out: Option<&Path>) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
            let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f");
            let base = root.join(format!("{verb}-{stamp}"));
            let mut candidate = base.clone();
            let mut n = 1;
            while candidate.exists() {
                candidate = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            candidate
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn resolve_config(common: &CommonArgs, replayed: Option<&BTreeMap<String, String>>) -> Result<TrainConfig> {
    let cfg = match replayed {
        Some(map) => TrainConfig::from_map(map)?,
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &common.config {
                cfg.merge_file(path)?;
            }
            for kv in &common.set {
                cfg.apply_override(kv)?;
            }
            cfg
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A manifest being replayed: its config and recorded input hashes.
struct Replayed<'a> {
    config: &'a BTreeMap<String, String>,
    inputs: &'a [FileHash],
    out: Option<&'a Path>,
}

fn dispatch(cmd: Command, argv: Vec<String>, replay: Option<Replayed<'_>>, stdout: &mut dyn Write) -> Result<()> {
    let replayed_cfg = replay.as_ref().map(|r| r.config);
    let expected = replay.as_ref().map(|r| r.inputs);
    let out_override = |common: &CommonArgs| -> Option<PathBuf> {
        match &replay {
            Some(r) => r.out.map(Path::to_path_buf),
            None => common.out.clone(),
        }
    };
    match cmd {
        Command::Synth(a) => {
            let cfg = resolve_config(&a.common, replayed_cfg)?;
            let spec = SynthSpec {
                n_users: a.users,
                n_items: a.items,
                min_len: a.min_len,
                max_len: a.max_len,
                transition_concentration: a.concentration,
                seed: a.seed,
            };
            spec.validate()?;
            let out = out_override(&a.common);
            let mut ctx = RunContext::create("synth", argv, cfg, a.seed, out.as_deref(), &[], expected)?;
            let ds = generate_synthetic(&spec)?;
            print_stats(stdout, &ds)?;
            ctx.write_dataset("dataset.bin", &ds)?;
            ctx.write_json("synth.json", &spec)?;
            ctx.finish(stdout)
        }
        Command::Ingest(a) => {
            let cfg = resolve_config(&a.common, replayed_cfg)?;
            let format = match a.format {
                Some(FormatArg::Tsv) => LogFormat::Tsv,
                Some(FormatArg::Csv) => LogFormat::Csv,
                None if a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => LogFormat::Csv,
                None => LogFormat::Tsv,
            };
            let out = out_override(&a.common);
            let seed = cfg.seed;
            let mut ctx = RunContext::create("ingest", argv, cfg, seed, out.as_deref(), &[&a.input], expected)?;
            let (ds, vocab) = ingest(&a.input, format)?;
            print_stats(stdout, &ds)?;
            ctx.write_dataset("dataset.bin", &ds)?;
            let mut buf = Vec::new();
            write_vocabulary(&mut buf, &vocab)?;
            ctx.write("vocab.tsv", &buf)?;
            ctx.finish(stdout)
        }
        Command::Pretrain(a) => {
            let cfg = resolve_config(&a.common, replayed_cfg)?;
            let mut inputs: Vec<&Path> = vec![&a.data];
            if let Some(m) = &a.model {
                inputs.push(m);
            }
            let out = out_override(&a.common);
            let seed = cfg.seed;
            let mut ctx = RunContext::create("pretrain", argv, cfg, seed, out.as_deref(), &inputs, expected)?;
            let ds = read_dataset(&a.data)?;
            let init = match &a.model {
                Some(m) => load_model(m, &ds)?,
                None => ModelParams::init(ctx.cfg.encoder, ds.catalog_size(), ctx.cfg.d, ctx.cfg.seed),
            };
            let (params, traces) = pretrain(init, &ds, &ctx.cfg)?;
            print_last_trace(stdout, &traces)?;
            ctx.write_model("model.ckpt", &params)?;
            ctx.write_traces("trace.jsonl", &traces)?;
            ctx.finish(stdout)
        }
        Command::Finetune(a) => {
            let mut ctx = model_context("finetune", &a, argv, replayed_cfg, expected, out_override(&a.common))?;
            let (ds, params) = load_pair(&a)?;
            let (params, traces) = finetune(params, &ds, &ctx.cfg)?;
            print_last_trace(stdout, &traces)?;
            ctx.write_model("model.ckpt", &params)?;
            ctx.write_traces("trace.jsonl", &traces)?;
            ctx.finish(stdout)
        }
        Command::Calibrate(a) => {
            let mut ctx = model_context("calibrate", &a, argv, replayed_cfg, expected, out_override(&a.common))?;
            let (ds, params) = load_pair(&a)?;
            let outcome = split_cp(&params, &ds.validation_pairs(), &ds.test_pairs(), ctx.cfg.alpha)?;
            let mut buf = Vec::new();
            write_audit(&mut buf, &outcome.audit_records())?;
            ctx.write("audit.jsonl", &buf)?;
            let summary = CalibrationSummary {
                alpha: outcome.threshold.alpha,
                n_calibration: outcome.threshold.n,
                q_hat: outcome.threshold.q_hat,
                coverage: outcome.coverage,
                mean_set_size: outcome.mean_set_size,
            };
            ctx.write_json("calibration.json", &summary)?;
            writeln!(stdout, "q_hat={}", summary.q_hat)?;
            writeln!(stdout, "coverage={}", summary.coverage)?;
            writeln!(stdout, "mean_set_size={}", summary.mean_set_size)?;
            ctx.finish(stdout)
        }
        Command::Evaluate(a) => {
            let mut ctx = model_context("evaluate", &a, argv, replayed_cfg, expected, out_override(&a.common))?;
            let (ds, params) = load_pair(&a)?;
            let report = evaluate(&params, &ds, ctx.cfg.alpha, &DEFAULT_KS, ctx.cfg.mask_history)?;
            write!(stdout, "{}", report.to_table())?;
            ctx.write_json("report.json", &report)?;
            ctx.finish(stdout)
        }
        Command::Ablate(a) => {
            let mut ctx = model_context("ablate", &a, argv, replayed_cfg, expected, out_override(&a.common))?;
            let (ds, base) = load_pair(&a)?;
            let mut rows = Vec::new();
            for (i, lc) in LossConfig::ABLATIONS.iter().enumerate() {
                let cfg = TrainConfig { loss_config: *lc, ..ctx.cfg.clone() };
                log::info!("ablation {} {lc}", i + 1);
                let (params, traces) = finetune(base.clone(), &ds, &cfg)?;
                let report = evaluate(&params, &ds, cfg.alpha, &DEFAULT_KS, cfg.mask_history)?;
                let stem = format!("{}_{}", i + 1, lc.label().to_ascii_lowercase().replace(',', "_"));
                ctx.write_traces(&format!("trace_{stem}.jsonl"), &traces)?;
                ctx.write_json(&format!("report_{stem}.json"), &report)?;
                rows.push(SummaryRow { label: lc.to_string(), report });
            }
            let table = summary_table("config", &rows);
            write!(stdout, "{table}")?;
            ctx.write("summary.tsv", table.as_bytes())?;
            ctx.finish(stdout)
        }
        Command::Sensitivity(s) => {
            let a = &s.base;
            let mut ctx = model_context("sensitivity", a, argv, replayed_cfg, expected, out_override(&a.common))?;
            let grid = parse_grid(&s.grid)?;
            // fail on a bad value before any training starts
            for (key, values) in &grid {
                for v in values {
                    let mut cfg = ctx.cfg.clone();
                    cfg.set(key, v)?;
                    cfg.validate()?;
                }
            }
            let (ds, base) = load_pair(a)?;
            let mut rows = Vec::new();
            for (key, values) in &grid {
                for v in values {
                    let mut cfg = ctx.cfg.clone();
                    cfg.set(key, v)?;
                    log::info!("sensitivity {key}={v}");
                    let (params, traces) = finetune(base.clone(), &ds, &cfg)?;
                    let report = evaluate(&params, &ds, cfg.alpha, &DEFAULT_KS, cfg.mask_history)?;
                    let stem = format!("{key}_{v}");
                    ctx.write_traces(&format!("trace_{stem}.jsonl"), &traces)?;
                    ctx.write_json(&format!("report_{stem}.json"), &report)?;
                    rows.push(SummaryRow { label: format!("{key}={v}"), report });
                }
            }
            let table = summary_table("setting", &rows);
            write!(stdout, "{table}")?;
            ctx.write("summary.tsv", table.as_bytes())?;
            ctx.finish(stdout)
        }
        Command::Replay(r) => {
            if replay.is_some() {
                return Err(Error::Config("a manifest cannot replay a replay".into()));
            }
            let m = Manifest::read(&r.manifest)?;
            let mut args = vec![OsString::from("cpft")];
            args.extend(m.argv.iter().map(OsString::from));
            let cli = Cli::try_parse_from(&args)
                .map_err(|e| Error::Config(format!("manifest argv does not parse: {e}")))?;
            if matches!(cli.command, Command::Replay(_)) {
                return Err(Error::Config("a manifest cannot replay a replay".into()));
            }
            let replayed = Replayed {
                config: &m.config,
                inputs: &m.inputs,
                out: r.out.as_deref(),
            };
            // a replay without --out gets a fresh timestamped directory
            let cmd = if r.out.is_none() { strip_out(cli.command) } else { cli.command };
            dispatch(cmd, m.argv.clone(), Some(replayed), stdout)
        }
    }
}

fn strip_out(mut cmd: Command) -> Command {
    let common = match &mut cmd {
        Command::Synth(a) => &mut a.common,
        Command::Ingest(a) => &mut a.common,
        Command::Pretrain(a) => &mut a.common,
        Command::Finetune(a) | Command::Calibrate(a) | Command::Evaluate(a) | Command::Ablate(a) => &mut a.common,
        Command::Sensitivity(s) => &mut s.base.common,
        Command::Replay(_) => return cmd,
    };
    common.out = None;
    cmd
}

fn model_context(
    verb: &str,
    a: &ModelArgs,
    argv: Vec<String>,
    replayed_cfg: Option<&BTreeMap<String, String>>,
    expected: Option<&[FileHash]>,
    out: Option<PathBuf>,
) -> Result<RunContext> {
    let cfg = resolve_config(&a.common, replayed_cfg)?;
    let seed = cfg.seed;
    RunContext::create(verb, argv, cfg, seed, out.as_deref(), &[&a.data, &a.model], expected)
}

fn load_model(path: &Path, ds: &Dataset) -> Result<ModelParams> {
    let params = read_checkpoint(path)?;
    if params.catalog_size() != ds.catalog_size() {
        return Err(Error::ShapeMismatch {
            expected: ds.catalog_size(),
            got: params.catalog_size(),
        });
    }
    Ok(params)
}

fn load_pair(a: &ModelArgs) -> Result<(Dataset, ModelParams)> {
    let ds = read_dataset(&a.data)?;
    let params = load_model(&a.model, &ds)?;
    Ok((ds, params))
}

/// Parses `key=v1,v2` grid axes, keeping their order.
pub fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    specs
        .iter()
        .map(|s| {
            let (k, vs) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis {s:?} is not key=v1,v2,...")))?;
            let values: Vec<String> = vs
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect();
            if values.is_empty() {
                return Err(Error::Config(format!("grid axis {k:?} has no values")));
            }
            Ok((k.trim().to_string(), values))
        })
        .collect()
}

#[derive(serde::Serialize)]
struct CalibrationSummary {
    alpha: f64,
    n_calibration: usize,
    q_hat: f64,
    coverage: f64,
    mean_set_size: f64,
}

struct SummaryRow {
    label: String,
    report: MetricReport,
}

fn summary_table(head: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!("{head}\trecall@10\tndcg@10\trecall@50\tndcg@50\tcoverage\tmean_set_size\n");
    for r in rows {
        let m = &r.report;
        s.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\n",
            r.label,
            m.recall(10),
            m.ndcg(10),
            m.recall(50),
            m.ndcg(50),
            m.coverage,
            m.mean_set_size
        ));
    }
    s
}

fn print_stats(out: &mut dyn Write, ds: &Dataset) -> Result<()> {
    let s = ds.stats();
    writeln!(
        out,
        "users={} items={} interactions={} avg_per_user={:.2} avg_per_item={:.2} dropped_users={}",
        s.users, s.items, s.interactions, s.avg_per_user, s.avg_per_item, s.dropped_users
    )?;
    Ok(())
}

fn print_last_trace(out: &mut dyn Write, traces: &[EpochTrace]) -> Result<()> {
    if let Some(t) = traces.last() {
        writeln!(
            out,
            "epochs={} ce={:.4} coverage={:.4} mean_set_size={:.2}",
            t.epoch, t.ce, t.coverage, t.mean_set_size
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid(&["alpha=0.1, 0.3,0.5".into(), "beta=1".into()]).unwrap();
        assert_eq!(g[0], ("alpha".into(), vec!["0.1".into(), "0.3".into(), "0.5".into()]));
        assert_eq!(g[1].1, vec!["1".to_string()]);
        assert!(parse_grid(&["alpha".into()]).is_err());
        assert!(parse_grid(&["alpha=".into()]).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut out = Vec::new();
        assert_eq!(run(["cpft", "frobnicate"], &mut out), 1);
        assert_eq!(run(["cpft", "evaluate"], &mut out), 1);
        assert_eq!(run(["cpft", "--help"], &mut out), 0);
    }

    #[test]
    fn unknown_override_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Vec::new();
        let code = run(
            [
                "cpft",
                "synth",
                "--users",
                "5",
                "--set",
                "nope=1",
                "--out",
                dir.path().to_str().unwrap(),
            ],
            &mut out,
        );
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_data_is_data_error() {
        let mut out = Vec::new();
        let code = run(
            ["cpft", "evaluate", "--data", "/nonexistent/d.bin", "--model", "/nonexistent/m.ckpt"],
            &mut out,
        );
        assert_eq!(code, 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::EmptySequence), 2);
        assert_eq!(exit_code(&Error::DivergenceDetected { epoch: 1, what: "x" }), 3);
    }
}
