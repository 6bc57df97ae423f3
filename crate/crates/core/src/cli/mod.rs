//! Command-line front end: `generate`, `train-fpn`, `train-count`, `predict`,
//! `evaluate` and `saliency`.
//!
//! Every command resolves a [`RunConfig`] from built-in defaults, an optional config
//! file and `-s key=value` overrides, prints it as `# key = value` lines, then writes
//! its results to stdout as `key=value` lines.

mod config;
mod pipeline;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, Settings, Stage};
pub use pipeline::{
    cmd_evaluate, cmd_generate, cmd_predict, cmd_saliency, cmd_train_count, cmd_train_fpn,
    counter_hw, counter_input, image_tensor, load_counter, load_fpn, load_split, mask_target,
    predict_image, segment, Evaluation, Failure, Prediction, Split, F,
};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "cellcount",
    version,
    about = "Cell counting with aleatoric uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `-s fpn.epochs=10`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset into `data.dir`.
    Generate(ConfigArgs),
    /// Train the segmentation network.
    TrainFpn(ConfigArgs),
    /// Train the counter on masks from the trained segmenter.
    TrainCount(ConfigArgs),
    /// Count the cells in one PGM image.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        image: PathBuf,
    },
    /// Score the test split and list samples outside their interval.
    Evaluate(ConfigArgs),
    /// Export input, mask, uncertainty and saliency panels for one image.
    Saliency {
        #[command(flatten)]
        config: ConfigArgs,
        image: PathBuf,
        /// True count, required when `saliency.target = loss`.
        #[arg(long)]
        truth: Option<f64>,
    },
}

impl Command {
    pub fn config_args(&self) -> &ConfigArgs {
        match self {
            Command::Generate(c)
            | Command::TrainFpn(c)
            | Command::TrainCount(c)
            | Command::Evaluate(c) => c,
            Command::Predict { config, .. } | Command::Saliency { config, .. } => config,
        }
    }
}

pub fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn set_threads(n: usize) {
    if n > 0 {
        // The global pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

/// Runs one parsed command, writing the config header and result lines to `out`.
pub fn run(command: &Command, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(command.config_args())?;
    let s = cfg.settings()?;
    out.write_all(cfg.header().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    set_threads(s.threads);
    match command {
        Command::Generate(_) => {
            let m = cmd_generate(&s)?;
            let masks = m
                .entries
                .iter()
                .filter(|e| e.mask_filename.is_some())
                .count();
            emit(
                out,
                format!(
                    "images={} masks={} dir={}",
                    m.entries.len(),
                    masks,
                    s.data_dir.display()
                ),
            )
        }
        Command::TrainFpn(_) => {
            let r = cmd_train_fpn(&s)?;
            emit(
                out,
                format!(
                    "best_epoch={} best_val={:.6} checkpoint={}",
                    r.best_epoch,
                    r.best_val,
                    s.fpn_stage.checkpoint.display()
                ),
            )
        }
        Command::TrainCount(_) => {
            let r = cmd_train_count(&s)?;
            emit(
                out,
                format!(
                    "best_epoch={} best_val={:.6} checkpoint={}",
                    r.best_epoch,
                    r.best_val,
                    s.count_stage.checkpoint.display()
                ),
            )?;
            match r.final_metrics {
                Some(m) => emit(out, m.kv_line()),
                None => Ok(()),
            }
        }
        Command::Predict { image, .. } => {
            let p = cmd_predict(&s, image)?;
            emit(out, p.result_line())
        }
        Command::Evaluate(_) => {
            let e = cmd_evaluate(&s)?;
            emit(out, e.metrics.kv_line())?;
            emit(out, format!("failures={}", e.failures.len()))
        }
        Command::Saliency { image, truth, .. } => {
            let (p, sal, paths) = cmd_saliency(&s, image, *truth)?;
            emit(out, p.result_line())?;
            emit(out, format!("saliency_max={:e}", sal.max_raw))?;
            for path in paths {
                emit(out, format!("wrote={}", path.display()))?;
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the process exit
/// code: 0 on success, 1 for invalid input, 2 for I/O failures.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
