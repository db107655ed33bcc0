use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedharness::data::DatasetName;
use fedharness::monitor::{serve_metrics, start_sampler, MetricsEndpoint, Registry, SamplerConfig};
use fedharness::partition::{self, Distribution, PartitionSpec};
use fedharness::protocol::{
    run_client, run_server, simulate, ClientOptions, NetworkPool, ServerConfig, ServerOptions, SimMode,
};
use fedharness::storage::{render_report, DatasetConfig, Experiment, ExperimentConfig, SyntheticParams};
use fedharness::Result;

/// Federated-learning experiment harness.
#[derive(Debug, Parser)]
#[command(name = "fedharness", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Directory holding experiment folders.
    #[arg(long, env = "FH_ROOT", default_value = "experiments", global = true)]
    root: PathBuf,
    /// Directory with the raw datasets (fmnist/, cifar-10-batches-bin/, cifar-100-binary/).
    #[arg(long, env = "FH_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    /// Serve resource and round gauges at http://<addr>/metrics.
    #[arg(long, env = "FH_METRICS_ADDR", global = true)]
    metrics_addr: Option<SocketAddr>,
    /// Master seed; replaces every seed in the configuration.
    #[arg(long, env = "FH_SEED", global = true)]
    seed: Option<u64>,
    /// Resource sampling interval in seconds.
    #[arg(long, env = "FH_SAMPLE_INTERVAL", default_value_t = 10.0, global = true)]
    sample_interval: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Partition a dataset. With --config the experiment folder is created
    /// (or reused) under --root; otherwise the partition described by the
    /// flags is printed as JSON.
    Partition(PartitionArgs),
    /// Run the server for the experiment in a config file.
    Serve {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run one client against a server.
    Client {
        /// Server address, host:port.
        #[arg(long)]
        server: String,
        /// Client index into the experiment's partition.
        #[arg(long)]
        id: u32,
        /// Experiment folder created by the server.
        #[arg(long)]
        experiment: PathBuf,
    },
    /// Run server and clients in this process.
    Simulate {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Number of clients; must match the configured partition.
        #[arg(long)]
        clients: usize,
        /// det: sequential and bit-reproducible; conc: one thread per client.
        #[arg(long, value_enum, default_value_t = Mode::Det)]
        mode: Mode,
        /// Keep every client's fit result and each global vector under logs/params.
        #[arg(long)]
        dump_params: bool,
    },
    /// Render a finished run as CSV (clients.csv and server.csv).
    Report {
        /// Run directory, e.g. experiments/exp1/runs/run-0.
        run: PathBuf,
        /// Output directory [default: reports/<experiment>-<run>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Det,
    Conc,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    /// Experiment configuration; when given, the other partition flags are ignored.
    #[arg(long, conflicts_with_all = ["dataset", "clients", "dist"])]
    config: Option<PathBuf>,
    /// fmnist, cifar10, cifar100 or synthetic.
    #[arg(long, required_unless_present = "config")]
    dataset: Option<DatasetName>,
    /// Number of clients.
    #[arg(long, required_unless_present = "config")]
    clients: Option<usize>,
    /// Equal client sizes.
    #[arg(long)]
    balance: bool,
    /// Label-skewed partition; requires --dist.
    #[arg(long, requires = "dist")]
    non_iid: bool,
    /// none, pat:<k> or dir:<alpha>.
    #[arg(long)]
    dist: Option<Distribution>,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Synthetic data: classes.
    #[arg(long, default_value_t = 4)]
    synthetic_classes: usize,
    /// Synthetic data: samples per class.
    #[arg(long, default_value_t = 500)]
    synthetic_per_class: usize,
    /// Synthetic data: feature dimension.
    #[arg(long, default_value_t = 64)]
    synthetic_dim: usize,
}

fn load_config(path: &Path, global: &Global) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::read(path)?;
    if let Some(seed) = global.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn init_experiment(cfg: ExperimentConfig, global: &Global) -> Result<Experiment> {
    let dataset = cfg.dataset.clone();
    let data_dir = global.data_dir.clone();
    let (exp, outcome) = Experiment::init(&global.root, cfg, move || dataset.load(data_dir.as_deref()))?;
    if outcome.repartitioned {
        log::info!("partitioned data into {}", exp.path().join("data").display());
    } else {
        log::info!("reusing data in {}", exp.path().join("data").display());
    }
    Ok(exp)
}

fn metrics(global: &Global, registry: &Registry) -> Result<Option<MetricsEndpoint>> {
    global
        .metrics_addr
        .map(|addr| {
            let ep = serve_metrics(addr, registry.clone())?;
            log::info!("metrics on http://{}/metrics", ep.local_addr());
            Ok(ep)
        })
        .transpose()
}

fn sample_interval(global: &Global) -> Result<Duration> {
    Duration::try_from_secs_f64(global.sample_interval)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| fedharness::Error::InvalidServerConfig("--sample-interval must be positive".into()))
}

fn print_run(exp: &Experiment, run_id: u64, rounds: &[fedharness::storage::RoundRecord]) {
    for r in rounds {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "round {:>3}  accuracy {}  loss {}  participants {}",
            r.round,
            fmt(r.accuracy_distributed),
            fmt(r.loss_distributed),
            r.participants.len()
        );
    }
    println!("{}", exp.run_dir(run_id).display());
}

fn partition_cmd(args: PartitionArgs, global: &Global) -> Result<()> {
    if let Some(path) = &args.config {
        let exp = init_experiment(load_config(path, global)?, global)?;
        let record = exp.config().distribution.clone().expect("initialized experiment has a distribution");
        return emit(&record, args.out.as_deref());
    }
    let name = args.dataset.expect("clap enforces --dataset");
    let dataset = match name {
        DatasetName::Synthetic => DatasetConfig::synthetic(SyntheticParams {
            num_classes: args.synthetic_classes,
            samples_per_class: args.synthetic_per_class,
            feature_dim: args.synthetic_dim,
            seed: global.seed.unwrap_or(0),
        }),
        other => DatasetConfig::named(other),
    };
    let spec = PartitionSpec {
        num_clients: args.clients.expect("clap enforces --clients"),
        balance: args.balance,
        non_iid: args.non_iid,
        distribution: args.dist.unwrap_or(Distribution::None),
        seed: global.seed.unwrap_or(0),
    };
    let data = dataset.load(global.data_dir.as_deref())?;
    let result = partition::partition(&data, &spec)?;
    emit(&partition::describe(&result), args.out.as_deref())
}

fn emit(record: &partition::DistributionRecord, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(record)? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| fedharness::Error::PathIo {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let global = &cli.global;
    match cli.command {
        Command::Partition(args) => partition_cmd(args, global),
        Command::Serve { config, listen } => {
            let cfg = load_config(&config, global)?;
            let exp = init_experiment(cfg, global)?;
            let mut server_cfg = ServerConfig::from_experiment(exp.config());
            if let Some(addr) = listen {
                server_cfg.listen_address = addr;
            }
            let registry = Registry::new();
            let _endpoint = metrics(global, &registry)?;
            let opts = ServerOptions {
                registry: Some(registry),
                sample_interval: Some(sample_interval(global)?),
                ..ServerOptions::default()
            };
            let (mut pool, addr) = NetworkPool::listen(
                server_cfg.listen_address.as_str(),
                opts.traffic.clone(),
                exp.config().partition.num_clients,
            )?;
            log::info!("listening on {addr}");
            let summary = run_server(&server_cfg, &exp, &mut pool, &opts)?;
            print_run(&exp, summary.run_id, &summary.rounds);
            Ok(())
        }
        Command::Client { server, id, experiment } => {
            let registry = Registry::new();
            let _endpoint = metrics(global, &registry)?;
            let opts = ClientOptions::default();
            let _sampler = match global.metrics_addr {
                Some(_) => Some(start_sampler(SamplerConfig {
                    interval: sample_interval(global)?,
                    role: "client".into(),
                    id,
                    traffic: opts.traffic.clone(),
                    registry: Some(registry.clone()),
                    log: None,
                })?),
                None => None,
            };
            let node = run_client(&server, id, &experiment, &opts)?;
            log::info!("client {id} done after {} epoch records", node.epoch_records());
            Ok(())
        }
        Command::Simulate {
            config,
            clients,
            mode,
            dump_params,
        } => {
            let cfg = load_config(&config, global)?;
            let exp = init_experiment(cfg, global)?;
            let registry = Registry::new();
            let _endpoint = metrics(global, &registry)?;
            let opts = ServerOptions {
                registry: Some(registry),
                sample_interval: Some(sample_interval(global)?),
                dump_params,
                ..ServerOptions::default()
            };
            let mode = match mode {
                Mode::Det => SimMode::Deterministic,
                Mode::Conc => SimMode::Concurrent,
            };
            let summary = simulate(&exp, clients, mode, &opts)?;
            for c in summary.clients.values() {
                if let Some(e) = &c.error {
                    log::warn!("client {}: {e}", c.id);
                }
            }
            print_run(&exp, summary.run.run_id, &summary.run.rounds);
            Ok(())
        }
        Command::Report { run, out } => {
            let out = out.unwrap_or_else(|| default_report_dir(&run));
            let summary = render_report(&run, &out)?;
            if summary.skipped_lines > 0 {
                log::warn!("skipped {} malformed log lines", summary.skipped_lines);
            }
            println!(
                "{} epoch rows, {} round rows -> {}",
                summary.epoch_rows,
                summary.round_rows,
                out.display()
            );
            Ok(())
        }
    }
}

/// `reports/<experiment>-<run>` for `<root>/<experiment>/runs/<run>`.
fn default_report_dir(run: &Path) -> PathBuf {
    let run_name = run.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let experiment = run
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned());
    match experiment {
        Some(e) => PathBuf::from("reports").join(format!("{e}-{run_name}")),
        None => PathBuf::from("reports").join(run_name),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
