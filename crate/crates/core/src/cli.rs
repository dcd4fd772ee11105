//! Command-line front end.
//!
//! Every subcommand resolves a [`TrainConfig`] from an optional `key = value`
//! file plus flags (flags win), writes its outputs under `--out`, and finishes
//! with `manifest.txt` listing every file it wrote.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::error::{L4qError, Result};
use crate::inference::{bench, export, write_bench_csv, BenchConfig, Checkpoint};
use crate::qinit::InitScheme;
use crate::trainer::{evaluate_checkpoint, make_task, train, train_model, Precision, ToyModel, TrainConfig};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "l4q", version, about = "Quantization-aware low-rank fine-tuning on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write its loss curves, summary and checkpoint.
    Train(Common),
    /// Compare quantizer initialization schemes before and after training.
    InitCompare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scheme names, or `all`.
        #[arg(long, default_value = "all")]
        schemes: String,
    },
    /// Train, then write a packed checkpoint.
    Export {
        #[command(flatten)]
        common: Common,
        /// Refuse anything but a single packed integer tensor per layer.
        #[arg(long)]
        fully_quantized: bool,
    },
    /// Time the fully-quantized and mixed inference paths.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to time; without it an untrained export of the config is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Timed repetitions per batch size.
        #[arg(long, default_value_t = 7)]
        reps: usize,
    },
    /// Held-out loss of a checkpoint on the configured task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "l4q-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Keep quantization biases at their initial values.
    #[arg(long)]
    freeze_bias: bool,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, config: &mut TrainConfig) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| L4qError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        config.set(key.trim(), value.trim())?;
    }
    Ok(())
}

/// `key = value` snapshot that [`parse_config_text`] reads back to the same config.
pub fn config_snapshot(config: &TrainConfig) -> String {
    config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| L4qError::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_config_text(&text, &mut c)?;
        }
        let mut set = |key: &str, value: Option<String>| match value {
            Some(v) => c.set(key, &v),
            None => Ok(()),
        };
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("method", self.method.clone())?;
        set("bits", self.bits.map(|v| v.to_string()))?;
        set("group_size", self.group_size.map(|v| v.to_string()))?;
        set("rank", self.rank.map(|v| v.to_string()))?;
        set("alpha", self.alpha.map(|v| v.to_string()))?;
        set("init", self.init.clone())?;
        set("steps", self.steps.map(|v| v.to_string()))?;
        set("lr", self.lr.map(|v| v.to_string()))?;
        if self.freeze_bias {
            c.freeze_bias = true;
        }
        c.validate().map_err(|e| match e {
            L4qError::Config(_) => e,
            other => L4qError::Config(other.to_string()),
        })?;
        Ok(c)
    }
}

/// Files written by one invocation, in order.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, bool)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.put(name, bytes, false)
    }

    /// Wall-clock output: listed in the manifest without a hash.
    fn write_timing(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.put(name, bytes, true)
    }

    fn put(&mut self, name: &str, bytes: &[u8], timing: bool) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push((name.to_string(), timing));
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let mut manifest = String::new();
        for (name, timing) in &self.files {
            let digest = if *timing {
                "timing".to_string()
            } else {
                let bytes = fs::read(self.dir.join(name))?;
                Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
            };
            manifest.push_str(&format!("{digest}  {name}\n"));
        }
        fs::write(self.dir.join("manifest.txt"), manifest)?;
        Ok(())
    }
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn eval_curve_csv(curve: &[(usize, f64)]) -> Result<Vec<u8>> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["step", "eval_loss"])?;
        for (step, loss) in curve {
            w.write_record([step.to_string(), format!("{loss:e}")])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn cmd_train(common: &Common) -> Result<()> {
    let config = common.resolve()?;
    let mut out = Outputs::new(&common.out)?;
    out.write("resolved_config.txt", config_snapshot(&config).as_bytes())?;
    let report = train(&config)?;
    out.write("steps.csv", &csv_bytes(|b| report.write_steps_csv(b))?)?;
    out.write("eval.csv", &eval_curve_csv(&report.eval_curve)?)?;
    out.write("summary.txt", report.summary().as_bytes())?;
    if let Some(ckpt) = &report.checkpoint {
        out.write("checkpoint.l4q", &ckpt.to_bytes()?)?;
    }
    print!("{}", report.summary());
    out.finish()
}

fn parse_schemes(s: &str) -> Result<Vec<InitScheme>> {
    if s.trim() == "all" {
        return Ok(InitScheme::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn cmd_init_compare(common: &Common, schemes: &str) -> Result<()> {
    let schemes = parse_schemes(schemes)?;
    let base = common.resolve()?;
    if !base.method.is_quantized() {
        return Err(L4qError::Config(format!("method {} has no quantizer to initialize", base.method)));
    }
    let mut out = Outputs::new(&common.out)?;
    out.write("resolved_config.txt", config_snapshot(&base).as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scheme",
        "init_quant_error",
        "init_clip_error",
        "post_quant_error",
        "post_clip_error",
    ])?;
    for scheme in schemes {
        let config = TrainConfig { init: scheme, ..base.clone() };
        let report = train(&config)?;
        let (init, post) = match (report.init_quant, report.post_quant) {
            (Some(i), Some(p)) => (i, p),
            _ => return Err(L4qError::Config("run reported no quantizer metrics".into())),
        };
        w.write_record([
            scheme.name().to_string(),
            format!("{:e}", init.quant_error),
            format!("{:e}", init.clip_error),
            format!("{:e}", post.quant_error),
            format!("{:e}", post.clip_error),
        ])?;
        println!(
            "{:>6}: init clip {:.4e} quant {:.4e} | post clip {:.4e} quant {:.4e}",
            scheme.name(),
            init.clip_error,
            init.quant_error,
            post.clip_error,
            post.quant_error
        );
    }
    let bytes = w.into_inner().map_err(|e| L4qError::Io(e.into_error()))?;
    out.write("init_compare.csv", &bytes)?;
    out.finish()
}

fn trained_export(config: &TrainConfig, fully_quantized: bool) -> Result<Checkpoint> {
    let task = make_task(config.task, config.shape, config.seed)?;
    match config.precision {
        Precision::F32 => {
            // fail before training when the method cannot be exported this way
            export(&ToyModel::<f32>::build(config, &task)?, fully_quantized)?;
            export(&train_model::<f32>(config, &task)?.0, fully_quantized)
        }
        Precision::F64 => {
            export(&ToyModel::<f64>::build(config, &task)?, fully_quantized)?;
            export(&train_model::<f64>(config, &task)?.0, fully_quantized)
        }
    }
}

fn cmd_export(common: &Common, fully_quantized: bool) -> Result<()> {
    let config = common.resolve()?;
    let mut out = Outputs::new(&common.out)?;
    out.write("resolved_config.txt", config_snapshot(&config).as_bytes())?;
    let ckpt = trained_export(&config, fully_quantized)?;
    out.write("checkpoint.l4q", &ckpt.to_bytes()?)?;
    let form = if ckpt.is_fully_quantized() { "fully quantized" } else { "mixed precision" };
    println!("wrote {} ({form})", common.out.join("checkpoint.l4q").display());
    out.finish()
}

fn cmd_bench(common: &Common, checkpoint: Option<&Path>, reps: usize) -> Result<()> {
    let config = common.resolve()?;
    let ckpt = match checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => trained_export(&TrainConfig { steps: 0, ..config.clone() }, false)?,
    };
    let mut out = Outputs::new(&common.out)?;
    out.write("resolved_config.txt", config_snapshot(&config).as_bytes())?;
    let cfg = BenchConfig {
        reps,
        rank: config.rank.max(1),
        seed: config.seed,
        ..Default::default()
    };
    let rows = bench(&ckpt, &cfg)?;
    out.write_timing("bench.csv", &csv_bytes(|b| write_bench_csv(&rows, b))?)?;
    for r in &rows {
        println!(
            "{:>15} batch {:>3}: {:.3e} tokens/s, {} MACs",
            r.path, r.batch, r.tokens_per_sec, r.cost.macs
        );
    }
    out.finish()
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let config = common.resolve()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let task = make_task(config.task, config.shape, config.seed)?;
    if ckpt.in_dim() != config.shape.width || ckpt.out_dim() != config.shape.out_dim {
        return Err(L4qError::Config(format!(
            "checkpoint is {} -> {}, task is {} -> {}",
            ckpt.in_dim(),
            ckpt.out_dim(),
            config.shape.width,
            config.shape.out_dim
        )));
    }
    let loss = evaluate_checkpoint(&ckpt, &task.eval)?;
    let mut out = Outputs::new(&common.out)?;
    out.write("resolved_config.txt", config_snapshot(&config).as_bytes())?;
    let text = format!("eval_loss = {loss:e}\n");
    out.write("eval.txt", text.as_bytes())?;
    print!("{text}");
    out.finish()
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("L4Q_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| L4qError::Config(format!("L4Q_THREADS must be a positive integer, got `{v}`")))?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::InitCompare { common, schemes } => cmd_init_compare(common, schemes),
        Command::Export { common, fully_quantized } => cmd_export(common, *fully_quantized),
        Command::Bench {
            common,
            checkpoint,
            reps,
        } => cmd_bench(common, checkpoint.as_deref(), *reps),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                L4qError::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
