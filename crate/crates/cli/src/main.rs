use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use occloff::autograd::Real;
use occloff::synthdata::Split;
use occloff::trainer::{
    count_fusion_work, evaluate, generate_dataset, read_header, run_gradcheck, train, viz, Checkpoint, Dataset, EpochRecord, GradcheckOptions, Metrics,
    ModelPlan, Precision, RunConfig, METRICS_FILE,
};

/// Entropy-masked sparse camera-LiDAR occupancy prediction on synthetic scenes.
#[derive(Parser)]
#[command(name = "occloff", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a preset configuration as TOML.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing one checkpoint and one metrics line per epoch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a checkpoint that predicts the ground truth (evaluation fixture).
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every combination of the grid's settings on shared data and seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key=v1,v2,...`; repeat for a cross-product. Flags take on/off,
        /// `scale` takes small/base/dense, other keys are dotted config paths.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
    },
    /// Render ground-truth, prediction and entropy-mask slices as PNG.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sequence index within the split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Height level of the fine grid; defaults to the busiest one.
        #[arg(long)]
        z: Option<usize>,
        /// Pixels per voxel.
        #[arg(long, default_value_t = 8)]
        cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable operation, the proxy
    /// loss and the full pipeline.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run the end-to-end check at 32-bit precision (looser tolerance).
        #[arg(long)]
        no_f64: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the sign of one operation's backward pass.
        #[arg(long, value_name = "OP")]
        inject_sign_error: Option<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no --config is given.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

/// Bad arguments detected after parsing; exit code 1 like clap's own.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| usage(format!("expected KEY=VALUE, got `{s}`")))
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => preset(self.preset),
        };
        for s in &self.set {
            let (k, v) = split_kv(s)?;
            cfg.set_key(k, v)?;
        }
        Ok(cfg)
    }
}

fn preset(p: Preset) -> RunConfig {
    match p {
        Preset::Default => RunConfig::default(),
        Preset::Tiny => RunConfig::tiny(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for c in e.chain() {
        let m = c.to_string();
        if !out.contains(&m) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&m);
        }
    }
    out
}

/// 1 for usage and configuration errors, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| c.is::<Usage>() || matches!(c.downcast_ref::<occloff::Error>(), Some(occloff::Error::Config(_))));
    if config {
        1
    } else {
        2
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Config { preset: p, out } => {
            let text = preset(p).to_toml();
            match out {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Cmd::Gen { config, out } => {
            let cfg = config.load()?;
            let index = generate_dataset(&cfg, &out)?;
            println!("wrote {} sequences to {}", index.sequences.len(), out.display());
        }
        Cmd::Train { config, data, out, resume } => {
            let cfg = config.load()?;
            let data = Dataset::load(&data)?;
            match cfg.model.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, &data, &out, resume.as_deref())?,
                Precision::F64 => train_cmd::<f64>(&cfg, &data, &out, resume.as_deref())?,
            }
        }
        Cmd::Eval { checkpoint, data, split, out } => {
            let data = Dataset::load(&data)?;
            let m = match stored_precision(&checkpoint)? {
                Precision::F32 => evaluate(&Checkpoint::<f32>::load(&checkpoint)?, &data, split.into())?,
                Precision::F64 => evaluate(&Checkpoint::<f64>::load(&checkpoint)?, &data, split.into())?,
            };
            print!("{}", metrics_table(&[(checkpoint.display().to_string(), &m)]));
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Cmd::Oracle { config, out } => {
            let cfg = config.load()?;
            Checkpoint::<f32>::oracle(&cfg).save(&out)?;
            println!("wrote oracle checkpoint {}", out.display());
        }
        Cmd::Ablate { config, data, out, grid } => {
            let cfg = config.load()?;
            let axes = parse_grid(&grid)?;
            let data = Dataset::load(&data)?;
            let rows = ablate(&cfg, &axes, &data, &out)?;
            let table = ablation_table(&rows);
            print!("{table}");
            fs::write(out.join("ablation.txt"), &table).with_context(|| format!("writing {}", out.display()))?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
        }
        Cmd::Viz { checkpoint, data, sample, split, z, cell, out } => {
            let data = Dataset::load(&data)?;
            let seqs = data.split(split.into());
            let seq = seqs.get(sample).ok_or_else(|| usage(format!("sample {sample} out of range: the split has {} sequences", seqs.len())))?;
            let files = match stored_precision(&checkpoint)? {
                Precision::F32 => viz::render_sample(&Checkpoint::<f32>::load(&checkpoint)?, &seq.frames, sample, z, cell, &out)?,
                Precision::F64 => viz::render_sample(&Checkpoint::<f64>::load(&checkpoint)?, &seq.frames, sample, z, cell, &out)?,
            };
            for f in files {
                println!("{}", f.display());
            }
        }
        Cmd::Gradcheck { config, no_f64, seed, inject_sign_error, out } => {
            let mut cfg = config.load()?;
            cfg.model.precision = if no_f64 { Precision::F32 } else { Precision::F64 };
            let opts = GradcheckOptions { seed, inject_sign_error, ..GradcheckOptions::default() };
            let report = run_gradcheck(&cfg, &opts)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.render());
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
            }
            if !report.passed() {
                let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn stored_precision(path: &Path) -> Result<Precision> {
    match read_header(path)?.dtype.as_str() {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => bail!("{}: unknown dtype {other}", path.display()),
    }
}

fn print_epoch(r: &EpochRecord) {
    let train = r.train.as_ref().map_or("-".to_string(), |t| format!("{:.4}", t.total));
    println!(
        "epoch {:>3}  train {train:>8}  val {:.4}  val_ce {:.4}  IoU {:.4}  mIoU {:.4}  participants {:>3}  {:.1}s",
        r.epoch, r.val.total, r.val.ce, r.metrics.iou, r.metrics.miou, r.participants, r.wall_time_s
    );
}

fn train_cmd<T: Real>(cfg: &RunConfig, data: &Dataset, out: &Path, resume: Option<&Path>) -> Result<()> {
    let resume = resume.map(Checkpoint::<T>::load).transpose()?;
    let o = train::<T>(cfg, data, out, resume, print_epoch)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&o.report)?)?;
    println!("metrics: {}", out.join(METRICS_FILE).display());
    Ok(())
}

fn parse_grid(grid: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    grid.iter()
        .map(|g| {
            let (k, vs) = split_kv(g)?;
            let vals: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if k.is_empty() || vals.is_empty() {
                return Err(usage(format!("--grid `{g}` needs a key and at least one value")));
            }
            Ok((k.to_string(), vals))
        })
        .collect()
}

#[derive(serde::Serialize)]
struct AblationRow {
    setting: String,
    metrics: Metrics,
    rare_miou: Option<f64>,
    /// Attention calls per forward pass, summed over fusion layers.
    attention_calls: usize,
    train_time_s: f64,
    fusion_time_s: f64,
}

fn ablate(base: &RunConfig, axes: &[(String, Vec<String>)], data: &Dataset, out: &Path) -> Result<Vec<AblationRow>> {
    let mut settings: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vals) in axes {
        settings = settings.iter().flat_map(|s| vals.iter().map(move |v| [s.clone(), vec![(k.clone(), v.clone())]].concat())).collect();
    }
    let mut configs = Vec::new();
    for s in &settings {
        let mut cfg = base.clone();
        for (k, v) in s {
            cfg.set_key(k, v)?;
        }
        configs.push(cfg);
    }
    let mut rows = Vec::new();
    for (i, (s, cfg)) in settings.iter().zip(&configs).enumerate() {
        let label = s.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        eprintln!("[{}/{}] {label}", i + 1, settings.len());
        let dir = out.join(format!("run_{i:02}"));
        let row = match cfg.model.precision {
            Precision::F32 => ablation_row::<f32>(cfg, data, &dir, label)?,
            Precision::F64 => ablation_row::<f64>(cfg, data, &dir, label)?,
        };
        rows.push(row);
    }
    Ok(rows)
}

fn ablation_row<T: Real>(cfg: &RunConfig, data: &Dataset, dir: &Path, setting: String) -> Result<AblationRow> {
    let o = train::<T>(cfg, data, dir, None, |_| {})?;
    let last = o.report.last().ok_or_else(|| anyhow!("no epochs recorded"))?;
    let eff = cfg.effective();
    let model = o.checkpoint.header.model.as_ref().ok_or_else(|| anyhow!("trained checkpoint has no model"))?;
    let frames = &data.val.first().or(data.train.first()).ok_or_else(|| anyhow!("empty dataset"))?.frames;
    let counts = count_fusion_work(model, &o.checkpoint.params, &ModelPlan::<T>::new(&eff)?, &eff, frames)?;
    let trained = o.report.records.iter().filter(|r| r.epoch > 0);
    Ok(AblationRow {
        setting,
        rare_miou: last.metrics.mean_over(&cfg.data.rarest_categories(3)),
        metrics: last.metrics.clone(),
        attention_calls: counts.iter().map(|c| c.attention_calls()).sum(),
        train_time_s: trained.clone().map(|r| r.wall_time_s).sum(),
        fusion_time_s: trained.map(|r| r.fusion_time_s).sum(),
    })
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
    let base = rows.first().map_or(0.0, |r| r.metrics.miou);
    let mut s = format!("{:<w$}  {:>7}  {:>7}  {:>7}  {:>8}  {:>10}  {:>8}  {:>8}\n", "setting", "mIoU", "dmIoU", "IoU", "rare", "attn_calls", "train_s", "fusion_s");
    for r in rows {
        let rare = r.rare_miou.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(
            s,
            "{:<w$}  {:>7.2}  {:>+7.2}  {:>7.2}  {:>8}  {:>10}  {:>8.1}  {:>8.1}",
            r.setting,
            100.0 * r.metrics.miou,
            100.0 * (r.metrics.miou - base),
            100.0 * r.metrics.iou,
            rare,
            r.attention_calls,
            r.train_time_s,
            r.fusion_time_s
        );
    }
    s
}

fn metrics_table(rows: &[(String, &Metrics)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(10);
    let mut s = format!("{:<w$}  {:>7}  {:>7}  per-category IoU (1..)\n", "checkpoint", "IoU", "mIoU");
    for (name, m) in rows {
        let per: Vec<String> = m.per_class_iou.iter().skip(1).map(|v| v.map_or("-".to_string(), |v| format!("{v:.4}"))).collect();
        let _ = writeln!(s, "{name:<w$}  {:>7.4}  {:>7.4}  {}", m.iou, m.miou, per.join(" "));
    }
    s
}
