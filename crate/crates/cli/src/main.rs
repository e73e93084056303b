mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use config::{env_layer, file_layer, parse_scalar, resolve, set_path, CliConfig};
use error::{CliError, EXIT_OK, EXIT_USAGE};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("HYPERPLANES_GIT_DESCRIBE"), ")");

/// One-shot adaptation of plane-conditioned radiance fields.
///
/// Settings resolve from built-in profile defaults, then --config, then
/// HYPERPLANES_* environment variables (`__` separates table levels), then
/// flags.
#[derive(Debug, Parser)]
#[command(name = "hyperplanes", version = VERSION)]
struct Cli {
    /// TOML file mirroring the resolved config written to each run directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in defaults: shapenet128, shapenet200, desk, micro.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Worker threads for data-parallel loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override any config key, e.g. --set train.delta_adam.lr=3e-4.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic primitive distribution to a dataset directory.
    GenSynthetic(GenArgs),
    /// Meta-train the decoder and hypernetwork.
    Train(TrainArgs),
    /// Adapt to held-out objects at several fine-tuning budgets.
    Adapt(AdaptArgs),
    /// Render query views of adapted objects to PNG and float sidecars.
    Render(RenderArgs),
    /// Score adapted renders; writes metrics.json and metrics.csv.
    Eval(EvalArgs),
    /// Sweep one configuration axis over seeds; writes long-format CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; receives run.toml before anything else.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Dataset root to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    test_objects: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// nerf, multiplane or pointmultiplane.
    #[arg(long)]
    arch: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalSelection {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to the run directory's latest checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fine-tuning iterations, comma separated.
    #[arg(long, value_delimiter = ',')]
    ft_iters: Option<Vec<usize>>,
    /// Query views per object.
    #[arg(long)]
    views: Option<usize>,
    /// train or test.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[command(flatten)]
    sel: EvalSelection,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    sel: EvalSelection,
    /// Object ids, comma separated; all objects of the split when omitted.
    #[arg(long, value_delimiter = ',')]
    objects: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    sel: EvalSelection,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// architecture, k, n, update-mask or hypernet-inputs.
    #[arg(long)]
    axis: Option<String>,
    /// Settings along the axis, comma separated.
    #[arg(long, value_delimiter = ',')]
    settings: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Training steps per run.
    #[arg(long)]
    steps: Option<u64>,
}

struct Layer(Value);

impl Layer {
    fn put(&mut self, key: &str, value: Option<impl Into<Value>>) -> Result<(), CliError> {
        match value {
            Some(v) => set_path(&mut self.0, key, v.into()),
            None => Ok(()),
        }
    }

    fn path(&mut self, key: &str, value: &Option<PathBuf>) -> Result<(), CliError> {
        self.put(key, value.as_ref().map(|p| p.to_string_lossy().into_owned()))
    }

    fn count(&mut self, key: &str, value: Option<impl TryInto<i64>>) -> Result<(), CliError> {
        let v = value
            .map(|v| {
                v.try_into()
                    .map_err(|_| CliError::Usage(format!("{key} is out of range")))
            })
            .transpose()?;
        self.put(key, v)
    }

    fn list<T: Clone + Into<Value>>(&mut self, key: &str, value: &Option<Vec<T>>) -> Result<(), CliError> {
        self.put(
            key,
            value
                .clone()
                .map(|v| Value::Array(v.into_iter().map(Into::into).collect())),
        )
    }

    fn run(&mut self, a: &RunArgs) -> Result<(), CliError> {
        self.path("data", &a.data)?;
        self.path("run_dir", &a.run_dir)
    }

    fn selection(&mut self, s: &EvalSelection) -> Result<(), CliError> {
        self.run(&s.run)?;
        self.path("checkpoint", &s.checkpoint)?;
        let ft: Option<Vec<i64>> = s.ft_iters.as_ref().map(|v| v.iter().map(|&x| x as i64).collect());
        self.list("ft_iters", &ft)?;
        self.count("views", s.views)?;
        self.put("split", s.split.clone())
    }
}

fn cli_layer(cli: &Cli) -> Result<Value, CliError> {
    let mut l = Layer(Value::Table(Default::default()));
    l.put("profile", cli.profile.clone())?;
    l.count("threads", cli.threads)?;
    if cli.deterministic {
        l.put("deterministic", Some(true))?;
    }
    match &cli.command {
        Command::GenSynthetic(a) => {
            l.path("data", &a.out)?;
            l.path("run_dir", &a.run_dir)?;
            l.count("synthetic.objects", a.objects)?;
            l.count("synthetic.test_objects", a.test_objects)?;
            l.count("synthetic.views", a.views)?;
            l.count("synthetic.resolution", a.resolution)?;
            l.count("synthetic.seed", a.seed)?;
        }
        Command::Train(a) => {
            l.run(&a.run)?;
            l.count("train.steps", a.steps)?;
            l.count("train.seed", a.seed)?;
            l.put("train.target.arch", a.arch.clone())?;
            l.path("checkpoint", &a.resume)?;
        }
        Command::Adapt(a) => l.selection(&a.sel)?,
        Command::Eval(a) => l.selection(&a.sel)?,
        Command::Render(a) => {
            l.selection(&a.sel)?;
            l.list("objects", &a.objects)?;
        }
        Command::Ablate(a) => {
            l.run(&a.run)?;
            l.put("ablate.axis", a.axis.clone())?;
            l.list("ablate.settings", &a.settings)?;
            let seeds: Option<Vec<i64>> = a.seeds.as_ref().map(|v| v.iter().map(|&x| x as i64).collect());
            l.list("ablate.seeds", &seeds)?;
            l.count("ablate.steps", a.steps)?;
        }
    }
    // generic overrides win over the dedicated flags
    for kv in &cli.set {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set_path(&mut l.0, key.trim(), parse_scalar(raw.trim()))?;
    }
    Ok(l.0)
}

fn resolve_config(cli: &Cli) -> Result<CliConfig, CliError> {
    let file = cli.config.as_deref().map(file_layer).transpose()?;
    let env = env_layer(std::env::vars())?;
    resolve(file, env, cli_layer(cli)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    if cfg.deterministic {
        hyperplanes::par::configure_threads(1);
    } else if let Some(n) = cfg.threads {
        hyperplanes::par::configure_threads(n);
    }
    match &cli.command {
        Command::GenSynthetic(_) => commands::gen_synthetic(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Adapt(_) => commands::adapt(&cfg),
        Command::Render(_) => commands::render(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HYPERPLANES_LOG", level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
