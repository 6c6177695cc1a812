use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdscale::config::TraceSource;
use pdscale::experiment::{self, ProfileJob, ABLATION_STEPS, DEFAULT_FACTORS};
use pdscale::metrics::{emit_report, summary_json, SimReport};
use pdscale::{Error, ExperimentConfig, Millis};

#[derive(Parser)]
#[command(name = "pdscale", version, about = "Autoscaling simulator for prefill/decode-disaggregated LLM serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replay this CSV trace instead of the config's trace source.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its reports.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several policies on the same trace and seed.
    Compare {
        /// Repeat once per policy config.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the B, B+P, B+P+D, Full ladder from an rps/rps base config.
    Ablate {
        /// Experiment config using the rps policy for both stages.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Burstiness report for a trace.
    Analyze {
        /// Take the trace from this config; --trace still overrides its source.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Running-average window.
        #[arg(long, default_value_t = 60_000)]
        window_ms: Millis,
        /// Overprovisioning factors to report excess shares for.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FACTORS)]
        factors: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Profile velocities for a performance model and write a profile file.
    Profile {
        /// Profile job (TOML) with `[perf]`, `[targets]`, `[profiler]`.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
}

fn load_config(path: &Path, common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = &common.trace {
        cfg.trace = TraceSource::file(absolute(t));
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(absolute(o));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> PathBuf {
    common.out.clone().or_else(|| cfg.and_then(|c| c.output_dir())).unwrap_or_else(|| PathBuf::from("out"))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn emit_many(dir: &Path, reports: &[SimReport]) -> Result<(), Error> {
    for (i, r) in reports.iter().enumerate() {
        emit_report(r, &dir.join(format!("{i:02}-{}", slug(&r.policy))))?;
    }
    let table = experiment::comparison_table(reports);
    write(&dir.join("comparison.txt"), &table)?;
    let summaries: Vec<_> = reports.iter().map(|r| r.summary()).collect();
    let json = serde_json::to_string_pretty(&summaries).expect("summaries serialize") + "\n";
    write(&dir.join("comparison.json"), &json)?;
    print!("{table}");
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, common } => {
            let cfg = load_config(&config, &common)?;
            let report = experiment::run(&cfg)?;
            let dir = out_dir(&common, Some(&cfg));
            emit_report(&report, &dir)?;
            print!("{}", summary_json(&report.summary()));
        }
        Command::Compare { configs, common } => {
            let cfgs = configs.iter().map(|c| load_config(c, &common)).collect::<Result<Vec<_>, _>>()?;
            let reports = experiment::compare(&cfgs)?;
            emit_many(&out_dir(&common, cfgs.first()), &reports)?;
        }
        Command::Ablate { config, common } => {
            let cfg = load_config(&config, &common)?;
            let reports = experiment::ablate(&cfg)?;
            debug_assert_eq!(reports.len(), ABLATION_STEPS.len());
            emit_many(&out_dir(&common, Some(&cfg)), &reports)?;
        }
        Command::Analyze { config, window_ms, factors, common } => {
            let (report, cfg) = match (config, &common.trace) {
                (Some(c), _) => {
                    let cfg = load_config(&c, &common)?;
                    let (_, records) = cfg.load_inputs()?;
                    (experiment::analyze_records(&records, window_ms, &factors)?, Some(cfg))
                }
                (None, Some(t)) => (experiment::analyze(t, window_ms, &factors)?, None),
                (None, None) => return Err(pdscale::ConfigError::new("analyze needs --trace or --config").into()),
            };
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write(&out_dir(&common, cfg.as_ref()).join("burst.json"), &json)?;
            print!("{json}");
        }
        Command::Profile { config, common } => {
            let job = ProfileJob::load(&config)?;
            let profile = job.run()?;
            let path = out_dir(&common, None).join("profile.json");
            write(&path, &profile.to_json())?;
            print!("{}", profile.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
