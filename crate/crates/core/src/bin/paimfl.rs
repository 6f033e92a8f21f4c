use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use paimfl::attack::{defense_report, AttackError, AttackMode, DefenseCondition, DefenseSetup};
use paimfl::config::{parse_config, parse_config_str, ConfigError, ExperimentConfig};
use paimfl::engine::{EngineError, Experiment, RunOptions, Scheme};
use paimfl::model::MlpModel;
use paimfl::seed::{derive_seed, Stream};
use paimfl::telemetry::{emit_results, parse_results_csv, scheme_comparison, RESULTS_FILE};

const OUT_DIR_ENV: &str = "PAIMFL_OUT_DIR";

#[derive(Parser)]
#[command(name = "paimfl", version, about = "Three-layer federated learning privacy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write results.csv and manifest.toml.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run every scheme on the same data and seed.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Comma-separated subset of pa-imfl, unidirectional-sample-baseline, no-defense-fedavg.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
    },
    /// Attack intercepted end-device uplinks with and without the pipeline.
    Attack {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize the result files under a directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to every key it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set gamma=0.15`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides the environment and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run end devices one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => CliError::Config(e.to_string()),
            EngineError::Data(paimfl::data::DataError::Io { .. }) => CliError::Io(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Engine(inner) => inner.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

impl Common {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig, CliError> {
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        Ok(match &self.config {
            Some(path) => parse_config(path, &overrides)?,
            None => parse_config_str("", &overrides)?,
        })
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| config.output_dir.clone())
    }

    fn options(&self) -> RunOptions {
        RunOptions { parallel: !self.sequential, ..RunOptions::default() }
    }
}

fn run(common: &Common) -> Result<(), CliError> {
    let config = common.load(&[])?;
    let out = common.out_dir(&config);
    let (results, ledger) = Experiment::prepare(&config)?.run(common.options())?;
    emit_results(&results, &config, &out).map_err(io_err(&out))?;
    let total = ledger.cumulative();
    if let Some(last) = results.last() {
        println!(
            "{} rounds, final loss {:.4}, accuracy {:.4}, bytes up {} down {}",
            results.len(),
            last.train_loss,
            last.test_accuracy,
            total.uplink(),
            total.downlink()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn compare(common: &Common, seed: u64, schemes: &[String]) -> Result<(), CliError> {
    let config = common.load(&[format!("master_seed={seed}")])?;
    let schemes: Vec<Scheme> = if schemes.is_empty() {
        Scheme::ALL.to_vec()
    } else {
        schemes
            .iter()
            .map(|s| {
                Scheme::ALL
                    .into_iter()
                    .find(|k| k.name() == s.trim())
                    .ok_or_else(|| CliError::Config(format!("invalid `schemes`: unknown scheme `{s}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let out = common.out_dir(&config);
    let (table, runs) = scheme_comparison(&config, &schemes, common.options())?;
    for (scheme, results) in &runs {
        let cfg = ExperimentConfig { scheme: *scheme, ..config.clone() };
        let dir = out.join(scheme.name());
        emit_results(results, &cfg, &dir).map_err(io_err(&dir))?;
    }
    let path = out.join("comparison.csv");
    fs::write(&path, table.to_csv()).map_err(io_err(&path))?;
    print!("{}", table.to_csv());
    Ok(())
}

fn attack(common: &Common) -> Result<(), CliError> {
    let config = common.load(&[])?;
    let out = common.out_dir(&config);
    let (train, _) = config.load_datasets().map_err(EngineError::from)?;
    let dims = config.layer_dims_for(train.feature_dim(), train.classes());
    let victim = MlpModel::init(dims, derive_seed(config.master_seed, &[Stream::ModelInit as u64]))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let setup = DefenseSetup::new(victim, &train, config.attack_targets, config.attack_config(), config.master_seed)?;
    let conditions = [
        DefenseCondition::undefended(AttackMode::Analytic),
        DefenseCondition::undefended(AttackMode::Iterative),
        DefenseCondition::defended(config.privacy_params(), AttackMode::Analytic),
        DefenseCondition::defended(config.privacy_params(), AttackMode::Iterative),
    ];
    info!("attacking {} targets under {} conditions", setup.targets.len(), conditions.len());
    let report = defense_report(&setup, &conditions)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let path = out.join("defense.csv");
    fs::write(&path, report.to_csv()).map_err(io_err(&path))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn report(dir: &Path) -> Result<(), CliError> {
    let mut found = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                pending.push(path);
            } else if path.file_name().is_some_and(|n| n == RESULTS_FILE) {
                found.push(path);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CliError::Io(format!("{}: no {RESULTS_FILE} found", dir.display())));
    }
    println!("run,rounds,final_loss,final_accuracy,total_bytes");
    for path in found {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let rows = parse_results_csv(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let total: u64 = rows.iter().map(|r| r.bytes.total()).sum();
        let name = path.parent().and_then(|p| p.strip_prefix(dir).ok()).map(|p| p.display().to_string());
        let name = name.filter(|n| !n.is_empty()).unwrap_or_else(|| ".".into());
        match rows.last() {
            Some(last) => println!("{name},{},{},{},{total}", rows.len(), last.loss, last.accuracy),
            None => println!("{name},0,,,0"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { common } => run(common),
        Command::Compare { common, seed, schemes } => compare(common, *seed, schemes),
        Command::Attack { common } => attack(common),
        Command::Report { dir } => report(dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.message());
            ExitCode::from(e.code())
        }
    }
}
