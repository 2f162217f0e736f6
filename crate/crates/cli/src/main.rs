use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand, ValueEnum};
use forge_cli::{
    default_dataset, default_store, pairwise_service, report_from_store, resolve_config, server,
    single_service,
};
use forge_core::pipeline::{Run, RunOptions, Stage, StageOutcome, META_SEQUENCE};
use forge_core::review::{ReviewConfig, ReviewMode};

#[derive(Debug, Args)]
struct StageArgs {
    /// Run directory holding the stage files and manifest.
    #[arg(long)]
    run: PathBuf,
    /// Pipeline config (TOML). Defaults to <run>/config.toml when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overlap threshold override.
    #[arg(long)]
    theta: Option<f64>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Answer calls already in the run's call log from the log.
    #[arg(long)]
    replay: bool,
    /// Rerun even when config and inputs are unchanged.
    #[arg(long)]
    force: bool,
    /// Print outcomes as JSON lines.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Parser)]
struct ReviewCli {
    #[command(subcommand)]
    command: ReviewCommand,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Pairwise,
}

#[derive(Debug, Subcommand)]
enum ReviewCommand {
    /// Serve the review API and UI.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, value_enum, default_value = "single")]
        mode: ModeArg,
        /// Run directory; supplies the default dataset and judgment store.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Dataset for single mode (default <run>/retained.jsonl).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Pairwise systems as NAME=PATH, exactly two.
        #[arg(long = "system", value_parser = parse_system)]
        systems: Vec<(String, PathBuf)>,
        /// Directory for judgments.jsonl / pairwise.jsonl (default <run>/review).
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        sample_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Built review-board assets to serve at /.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Print aggregates from a judgment store.
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn parse_system(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    if name.is_empty() {
        return Err("system name is empty".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn cli() -> Command {
    let mut cmd = Command::new("forge")
        .about("Instruction-data pipeline: run stages over a run directory, or serve human review")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for stage in Stage::ALL {
        cmd = cmd.subcommand(StageArgs::augment_args(
            Command::new(stage.name()).about(format!("Run the {stage} stage")),
        ));
    }
    cmd.subcommand(StageArgs::augment_args(
        Command::new("all").about("Run every stage of the meta-training sequence in order"),
    ))
    .subcommand(ReviewCli::augment_args(
        Command::new("review")
            .about("Human review server and report")
            .subcommand_required(true),
    ))
}

fn print_outcome(o: &StageOutcome, json: bool) {
    if json {
        println!("{}", serde_json::to_string(o).expect("outcome serializes"));
        return;
    }
    let c = &o.counters;
    let state = if o.skipped { "up to date" } else { "done" };
    println!(
        "{}: {state} [{}] sampled={} generated={} parse_failed={} filtered={} gated_invalid={} retained={} in_flight={}",
        o.stage,
        o.outputs.join(", "),
        c.sampled,
        c.generated,
        c.parse_failed,
        c.filtered,
        c.gated_invalid,
        c.retained,
        c.in_flight
    );
}

fn run_stages(stages: &[Stage], m: &ArgMatches) -> Result<()> {
    let args = StageArgs::from_arg_matches(m)?;
    let (mut config, base) = resolve_config(&args.run, args.config.as_deref())?;
    if let Some(theta) = args.theta {
        config.filter.theta = theta;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let options = RunOptions {
        replay: args.replay,
        force: args.force,
    };
    let mut run = Run::open(&args.run, config, &base, options)?;
    for stage in stages {
        let outcome = run.run_stage(*stage)?;
        print_outcome(&outcome, args.json);
    }
    Ok(())
}

fn require_store(run: Option<&Path>, store: Option<PathBuf>) -> Result<PathBuf> {
    store
        .or_else(|| run.map(default_store))
        .context("pass --run or --store")
}

fn review(m: &ArgMatches) -> Result<()> {
    match ReviewCli::from_arg_matches(m)?.command {
        ReviewCommand::Serve {
            bind,
            mode,
            run,
            dataset,
            systems,
            store,
            sample_size,
            seed,
            ui,
        } => {
            let store = require_store(run.as_deref(), store)?;
            std::fs::create_dir_all(&store)
                .with_context(|| format!("cannot create {}", store.display()))?;
            let config = ReviewConfig {
                mode: ReviewMode::Single,
                sample_size,
                seed,
                store: Some(store.clone()),
            };
            let service = match mode {
                ModeArg::Single => {
                    let dataset = dataset
                        .or_else(|| run.as_deref().map(default_dataset))
                        .context("single mode needs --dataset or --run")?;
                    single_service(&dataset, config)?
                }
                ModeArg::Pairwise => {
                    let [(na, pa), (nb, pb)] = <[_; 2]>::try_from(systems).map_err(|s| {
                        anyhow::anyhow!(
                            "pairwise mode needs exactly two --system NAME=PATH, got {}",
                            s.len()
                        )
                    })?;
                    pairwise_service((&na, &pa), (&nb, &pb), config)?
                }
            };
            let app = server::router(Arc::new(service), ui);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(bind)
                    .await
                    .with_context(|| format!("cannot bind {bind}"))?;
                log::info!(
                    "review server on http://{}, store {}",
                    listener.local_addr()?,
                    store.display()
                );
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok(())
            })
        }
        ReviewCommand::Report { run, store, json } => {
            let store = require_store(run.as_deref(), store)?;
            let report = report_from_store(&store)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = match name {
        "review" => review(sub),
        "all" => run_stages(&META_SEQUENCE, sub),
        stage => {
            let stage: Stage = stage.parse().expect("subcommands are stage names");
            run_stages(&[stage], sub)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
