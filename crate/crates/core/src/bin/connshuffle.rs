use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;

use connshuffle::config::{parse_config, ConfigError, RunConfig};
use connshuffle::experiment::{
    cmd_attack, cmd_report, cmd_simulate, tpr_table, ExperimentError, ExperimentSpec,
};
use connshuffle::harness::{write_traces_csv, GeneratorParams, Profile, DEFAULT_FEATURE_WINDOW};
use connshuffle::proxy::{
    serve_egress, serve_ingress, Role, TcpAcceptor, TcpDialer, TraceRecorder,
};

#[derive(Parser)]
#[command(
    name = "connshuffle",
    version,
    about = "Connection-shuffling proxy pair and evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ingress or egress proxy.
    Run(ConfigArgs),
    /// Simulate a workload through the 1:1 baseline and the obfuscating
    /// relay and write an experiment directory.
    Simulate(SimulateArgs),
    /// Run the correlation attack on an experiment directory.
    Attack {
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FEATURE_WINDOW.as_millis() as u64)]
        window_ms: u64,
    },
    /// Print the overhead and ROC summary of an experiment directory.
    Report { dir: PathBuf },
}

/// Values given here override the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    role: Option<String>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    peer: Option<String>,
    #[arg(long)]
    service: Option<String>,
    /// `obfuscate` or `direct`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    shuffle_threshold: Option<String>,
    #[arg(long)]
    m_min: Option<String>,
    #[arg(long)]
    remap_interval_ms: Option<String>,
    #[arg(long)]
    base_connections: Option<String>,
    #[arg(long)]
    trace_output: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "browsing")]
    profile: Profile,
    #[arg(long, default_value_t = 50)]
    flows: usize,
    #[arg(long, default_value_t = 60)]
    duration_secs: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Largest application write in bytes.
    #[arg(long, default_value_t = GeneratorParams::default().segment)]
    segment: u32,
    #[arg(long, default_value_t = DEFAULT_FEATURE_WINDOW.as_millis() as u64)]
    window_ms: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(err: ConfigError) -> Self {
        Failure::Config(err.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(err: ExperimentError) -> Self {
        Failure::Runtime(err.to_string())
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let text = match &self.config {
            Some(path) => Some(
                std::fs::read_to_string(path)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
            ),
            None => None,
        };
        let flags = [
            ("role", &self.role),
            ("listen", &self.listen),
            ("peer", &self.peer),
            ("service", &self.service),
            ("strategy", &self.strategy),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("shuffle_threshold", &self.shuffle_threshold),
            ("m_min", &self.m_min),
            ("remap_interval_ms", &self.remap_interval_ms),
            ("base_connections", &self.base_connections),
            ("trace_output", &self.trace_output),
        ];
        let overrides: Vec<(String, String)> = flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        Ok(parse_config(text.as_deref(), &overrides)?)
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Attack { dir, window_ms } => attack(&dir, window_ms),
        Command::Report { dir } => cmd_report(&dir)
            .map(|r| print!("{r}"))
            .map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(args: &ConfigArgs) -> Result<(), Failure> {
    let config = args.load()?;
    let (role, listen, target) = config.require_addresses()?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    let recorder = config.trace_output.as_ref().map(|_| TraceRecorder::new());
    let served = runtime.block_on(async {
        let listener = TcpListener::bind(listen).await?;
        eprintln!("{role:?} proxy listening on {}", listener.local_addr()?);
        let acceptor = TcpAcceptor(listener);
        let dialer = Arc::new(TcpDialer(target));
        let serve = async {
            match role {
                Role::Ingress => {
                    serve_ingress(
                        config.strategy(),
                        acceptor,
                        dialer,
                        config.base_connections,
                        recorder.clone(),
                    )
                    .await
                }
                Role::Egress => {
                    serve_egress(config.strategy(), acceptor, dialer, recorder.clone()).await
                }
            }
        };
        tokio::select! {
            res = serve => res,
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    });
    if let (Some(path), Some(recorder)) = (&config.trace_output, &recorder) {
        let file = std::fs::File::create(path)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        write_traces_csv(&recorder.traces(), std::io::BufWriter::new(file))
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    served.map_err(|e| Failure::Runtime(e.to_string()))
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let config = args.config.load()?;
    if args.flows == 0 {
        return Err(Failure::Config("--flows must be at least 1".into()));
    }
    if args.segment == 0 {
        return Err(Failure::Config("--segment must be at least 1".into()));
    }
    let spec = ExperimentSpec {
        profile: args.profile,
        n_flows: args.flows,
        duration: Duration::from_secs(args.duration_secs),
        seed: args.seed,
        obfuscation: config.obfuscation.clone(),
        base_connections: config.base_connections,
        generator: GeneratorParams {
            segment: args.segment,
            ..GeneratorParams::default()
        },
        window: Duration::from_millis(args.window_ms.max(1)),
    };
    let summary = cmd_simulate(&spec, &args.out)?;
    print!("{}", summary.overhead.render());
    println!("baseline attack:");
    print!("{}", tpr_table(&summary.baseline));
    println!("obfuscated attack:");
    print!("{}", tpr_table(&summary.obfuscated));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn attack(dir: &Path, window_ms: u64) -> Result<(), Failure> {
    let outcome = cmd_attack(dir, Duration::from_millis(window_ms.max(1)))?;
    println!(
        "{} ingress x {} egress flows",
        outcome.ingress_ids.len(),
        outcome.egress_ids.len()
    );
    print!("{}", tpr_table(&outcome));
    Ok(())
}
