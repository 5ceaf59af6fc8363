//! Command-line pipeline: teacher → score → prune → distill → eval → report,
//! each stage communicating only through files in one run directory.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::CliError;
pub use manifest::RunManifest;
pub use stages::{Run, RunReport};

use config::CriterionChoice;

/// Environment variable naming the root for relative run directories.
pub const RUN_ROOT_ENV: &str = "AMP_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "amp", version, about = "Adaptive MLP pruning for toy vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config; the bundled toy profile when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory, relative paths resolved under $AMP_RUN_ROOT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed for initialisation, shuffling and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long = "delta-e", global = true, allow_negative_numbers = true)]
    pub delta_e: Option<f64>,
    #[arg(long = "t-max", global = true)]
    pub t_max: Option<usize>,
    /// prune: also run the threshold sweep. report: also write dense
    /// entropy curves.
    #[arg(long, global = true)]
    pub sweep: bool,
    /// Recompute stages whose outputs already exist.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train (or load) the unpruned model.
    Teacher,
    /// Neuron importance on the pruning set.
    Score,
    /// Per-block hidden-size search and surgery.
    Prune,
    /// Distill the teacher into the pruned model.
    Distill,
    /// kNN accuracy, cost and throughput of teacher and student.
    Eval,
    /// Collect curves, sweeps and deltas into report/.
    Report,
    /// Print the effective config.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Entropy,
    Xent,
}

impl From<CriterionArg> for CriterionChoice {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Entropy => CriterionChoice::Entropy,
            CriterionArg::Xent => CriterionChoice::CrossEntropy,
        }
    }
}

impl Cli {
    /// The config file (or toy profile) with flag overrides applied.
    pub fn effective_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds.master = seed;
            cfg.teacher.train.seed = cfg.seeds.teacher_shuffle();
            cfg.distill.seed = cfg.seeds.distill_shuffle();
        }
        if let Some(c) = self.criterion {
            cfg.criterion.kind = c.into();
        }
        if let Some(d) = self.delta_e {
            cfg.criterion.delta_e = d;
        }
        if let Some(t) = self.t_max {
            cfg.criterion.t_max = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn resolve_run_dir(out: &std::path::Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = cli.effective_config()?;
    if cli.command == Command::ShowConfig {
        println!("{}", config.to_json());
        return Ok(());
    }
    let dir = resolve_run_dir(&config.out);
    std::fs::create_dir_all(&dir).map_err(|e| amp_core::AmpError::Io {
        path: dir.clone(),
        source: e,
    })?;
    let manifest = RunManifest::load_or_new(&dir, &config)?;
    amp_core::io::write_json(dir.join("config.json"), &config)?;
    let mut run = Run {
        criterion: config.criterion.kind,
        config,
        dir,
        manifest,
        force: cli.force,
    };
    match cli.command {
        Command::Teacher => run.teacher(),
        Command::Score => run.score(),
        Command::Prune => {
            run.prune()?;
            if cli.sweep {
                run.sweep()?;
            }
            Ok(())
        }
        Command::Distill => run.distill(),
        Command::Eval => run.eval(),
        Command::Report => run.report(cli.sweep).map(|_| ()),
        Command::ShowConfig => unreachable!("handled above"),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("amp: {e}");
            e.exit_code()
        }
    }
}
