use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rungs::client::Client;
use rungs::export::{self, Format};
use rungs::journal::Journal;
use rungs::orchestrator::{ExperimentSpec, SpecError};
use rungs::service::{self, CreateRequest, Service, ServiceConfig};
use rungs::sim::{self, Objective, StragglerSetup, TrainingModel, Workload};
use rungs::tuner;

#[derive(Parser)]
#[command(name = "rungs", version, about = "Successive-halving hyperparameter tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ServerArg {
    /// Base URL of a running server.
    #[arg(long, env = "RUNGS_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the job server.
    Serve {
        #[arg(long, env = "RUNGS_DATA_DIR", default_value = "rungs-data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// GPUs shared between experiments.
        #[arg(long, default_value_t = 1024)]
        gpus: u64,
        /// Skip fsync after each journal append.
        #[arg(long)]
        no_fsync: bool,
    },
    /// Check a spec file and print the settings it resolves to.
    Validate { spec: PathBuf },
    /// Submit a spec file to a server.
    Submit {
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        kappa: u32,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Show one experiment, or list them all.
    Status {
        id: Option<String>,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Add configurations to a running experiment.
    Resume {
        id: String,
        #[arg(long, default_value_t = 0)]
        additional_n: u64,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Simulate a spec on a synthetic workload.
    Simulate {
        spec: PathBuf,
        #[arg(long, default_value_t = 25)]
        workers: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        drop_prob: f64,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        incremental: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Write the job trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the journal of the run.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Compare synchronous SHA and ASHA under stragglers and drops; prints CSV.
    Stragglers {
        #[arg(long, default_value_t = 25)]
        replications: u64,
        #[arg(long, default_value_t = 2560)]
        horizon: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export results from a journal file or a server.
    Export {
        /// Journal file to read.
        #[arg(long, conflicts_with = "id")]
        journal: Option<PathBuf>,
        /// Experiment on the server.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "csv")]
        format: String,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Check a journal's integrity and replay it.
    ReplayVerify { journal: PathBuf },
}

fn read_spec(path: &Path) -> Result<ExperimentSpec, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        ExperimentSpec::from_json_str(&text)
    } else {
        ExperimentSpec::from_toml_str(&text)
    };
    parsed.map_err(|e| e.to_string())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Serve { data_dir, host, port, gpus, no_fsync } => {
            let mut config = ServiceConfig::new(data_dir);
            config.capacity = gpus;
            config.fsync = !no_fsync;
            let svc = Service::load(config).map_err(|e| e.to_string())?;
            let addr: SocketAddr = format!("{host}:{port}").parse().map_err(|e| format!("bad address: {e}"))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                service::serve(svc, listener, shutdown).await
            })
            .map_err(|e| e.to_string())
        }
        Command::Validate { spec } => {
            let spec = read_spec(&spec)?;
            match spec.validate() {
                Ok(settings) => print_json(&settings),
                Err(SpecError::Invalid(fields)) => {
                    for f in &fields {
                        eprintln!("{f}");
                    }
                    Err(format!("{} problem(s) found", fields.len()))
                }
                Err(e) => Err(e.to_string()),
            }
        }
        Command::Submit { spec, kappa, weight, server } => {
            let spec = read_spec(&spec)?;
            let created = Client::new(&server.server)
                .submit(&CreateRequest { spec, kappa, weight })
                .map_err(|e| e.to_string())?;
            println!("{}", created.experiment_id);
            Ok(())
        }
        Command::Status { id, server } => {
            let client = Client::new(&server.server);
            match id {
                Some(id) => print_json(&client.status(&id).map_err(|e| e.to_string())?),
                None => print_json(&client.list().map_err(|e| e.to_string())?),
            }
        }
        Command::Resume { id, additional_n, server } => {
            let status = Client::new(&server.server).resume(&id, additional_n).map_err(|e| e.to_string())?;
            print_json(&status)
        }
        Command::Simulate { spec, workers, sigma, drop_prob, horizon, incremental, seed, noise, trace, journal } => {
            let spec = read_spec(&spec)?;
            let workload = Workload {
                workers,
                straggler_sigma: sigma,
                drop_prob,
                training: if incremental { TrainingModel::Incremental } else { TrainingModel::Restart },
                objective: Objective { seed, decay: 1.0, noise },
                seed,
            };
            let mut sim = sim::Simulation::new(spec, workload).map_err(|e| e.to_string())?;
            if trace.is_some() {
                sim = sim.keep_trace();
            }
            sim.run(horizon).map_err(|e| e.to_string())?;
            let report = sim.report();
            if let Some(path) = trace {
                let mut w = csv::Writer::from_path(&path).map_err(|e| e.to_string())?;
                for t in &report.trace {
                    w.serialize(t).map_err(|e| e.to_string())?;
                }
                w.flush().map_err(|e| e.to_string())?;
            }
            if let Some(path) = journal {
                sim.tuner().journal().write_to(&path).map_err(|e| e.to_string())?;
            }
            let summary = serde_json::json!({
                "configs_trained_to_max": report.configs_trained_to_max,
                "time_to_first_max": report.time_to_first_max,
                "end_time": report.end_time,
                "jobs_started": report.jobs_started,
                "jobs_dropped": report.jobs_dropped,
                "finished": report.finished,
                "incumbent": sim.tuner().experiment().incumbent(rungs::orchestrator::Accounting::ByRung),
            });
            print_json(&summary)
        }
        Command::Stragglers { replications, horizon, out } => {
            let setup = StragglerSetup { replications, horizon, ..StragglerSetup::default() };
            let cells = sim::straggler_grid(&setup).map_err(|e| e.to_string())?;
            match out {
                Some(path) => {
                    let f = fs::File::create(&path).map_err(|e| e.to_string())?;
                    sim::write_cells_csv(&cells, f).map_err(|e| e.to_string())
                }
                None => sim::write_cells_csv(&cells, io::stdout().lock()).map_err(|e| e.to_string()),
            }
        }
        Command::Export { journal, id, format, server } => match (journal, id) {
            (Some(path), _) => {
                let format: Format = format.parse()?;
                let events = Journal::load(&path).map_err(|e| e.to_string())?;
                let experiment = tuner::replay(&events).map_err(|e| e.to_string())?;
                export::export(&experiment, format, io::stdout().lock()).map_err(|e| e.to_string())
            }
            (None, Some(id)) => {
                let body = Client::new(&server.server).export(&id, &format).map_err(|e| e.to_string())?;
                io::stdout().write_all(body.as_bytes()).map_err(|e| e.to_string())
            }
            (None, None) => Err("pass --journal or --id".into()),
        },
        Command::ReplayVerify { journal } => {
            let events = Journal::load(&journal).map_err(|e| e.to_string())?;
            let experiment = tuner::replay(&events).map_err(|e| e.to_string())?;
            let mut status = experiment.status();
            status.sequence_no = events.last().map(|e| e.sequence_no);
            eprintln!("{} events replayed", events.len());
            print_json(&status)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("RUNGS_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
