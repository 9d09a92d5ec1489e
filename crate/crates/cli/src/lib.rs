//! Command-line front end for the `alfa` binary.

use std::fs;
use std::path::{Path, PathBuf};

use alfa_core::datasets::write_image_dir;
use alfa_core::eval::EmbeddingSource;
use alfa_core::harness::{
    export_embeddings, load_dataset, metrics_csv, read_metrics, report, resolve_domain, run_ablation, run_lodo,
    run_target, DataSource, ExperimentConfig,
};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "alfa",
    version,
    about = "Domain generalization with self-supervised, invariant and specific feature extractors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic stain-shift dataset as an image directory.
    Synth(ExpArgs),
    /// Train and evaluate with a single held-out domain.
    Train(ExpArgs),
    /// Leave-one-domain-out over every domain.
    Lodo(ExpArgs),
    /// Seven-way extractor ablation.
    Ablate {
        #[command(flatten)]
        exp: ExpArgs,
        /// Held-out domains (names or indices); all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
    },
    /// Export 2-D PCA embeddings from a trained run directory.
    Embed {
        /// Directory written by `train` (or one target of `lodo`).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "all")]
        extractor: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Aggregate metrics CSVs into a summary table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Library defaults.
    Default,
    /// Small images and a short schedule; minutes per run on one core.
    Desk,
}

#[derive(Args, Debug)]
struct ExpArgs {
    /// Plain-text file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// alfa or erm.
    #[arg(long)]
    method: Option<String>,
    /// Active extractors, e.g. `abg` or `bg`.
    #[arg(long)]
    mask: Option<String>,
    /// Held-out domain by name or index.
    #[arg(long)]
    target: Option<String>,
    /// Read images from a directory instead of generating them.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

/// Distinguishes bad input (exit 2) from failures while running (exit 1).
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn config_err<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

impl ExpArgs {
    fn build(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match self.preset {
            Preset::Default => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            if text.lines().any(|l| l.trim_start().starts_with("data_dir")) {
                cfg.data = DataSource::Dir(PathBuf::new());
            }
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        if let Some(dir) = &self.data_dir {
            cfg.data = DataSource::Dir(dir.clone());
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("method", self.method.clone()),
            ("mask", self.mask.clone()),
            ("target", self.target.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = config_err(args.build())?;
            if !matches!(cfg.data, DataSource::Synth(_)) {
                return Err(Failure::Config(anyhow::anyhow!(
                    "synth needs synthetic data settings, not data_dir"
                )));
            }
            let ds = load_dataset(&cfg.data)?;
            write_image_dir(&ds, &args.out)?;
            fs::write(args.out.join("config.txt"), cfg.to_text())?;
            println!("wrote {} domains to {}", ds.n_domains(), args.out.display());
        }
        Command::Train(args) => {
            let cfg = config_err(args.build())?;
            let Some(key) = cfg.target.clone() else {
                return Err(Failure::Config(anyhow::anyhow!("train needs --target (name or index)")));
            };
            let ds = load_dataset(&cfg.data)?;
            let target = config_err(resolve_domain(&ds, &key).map_err(Into::into))?;
            let r = run_target(&ds, &cfg, target, &args.out)?;
            print!("{}", metrics_csv(std::slice::from_ref(&r.metrics)));
        }
        Command::Lodo(args) => {
            let cfg = config_err(args.build())?;
            let ds = load_dataset(&cfg.data)?;
            let rows = run_lodo(&ds, &cfg, &args.out)?;
            print!("{}", metrics_csv(&rows));
        }
        Command::Ablate { exp, targets } => {
            let cfg = config_err(exp.build())?;
            let ds = load_dataset(&cfg.data)?;
            let targets: Vec<usize> = if targets.is_empty() {
                (0..ds.n_domains()).collect()
            } else {
                config_err(
                    targets
                        .iter()
                        .map(|t| resolve_domain(&ds, t).map_err(Into::into))
                        .collect(),
                )?
            };
            let rows = run_ablation(&ds, &cfg, &targets, &exp.out)?;
            let table = report(&rows)?;
            fs::write(exp.out.join("table.csv"), &table)?;
            print!("{table}");
        }
        Command::Embed { run, extractor, out } => {
            let source = config_err(EmbeddingSource::parse(&extractor).map_err(Into::into))?;
            let dump = export_embeddings(&run, source, &out)?;
            println!("wrote {} points to {}", dump.coords.len(), out.display());
        }
        Command::Report { inputs, out } => {
            let mut rows = Vec::new();
            for p in &inputs {
                rows.extend(read_metrics(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let table = report(&rows)?;
            match out {
                Some(path) => write_file(&path, &table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 for usage or
/// configuration errors, 1 for failures during a run.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
