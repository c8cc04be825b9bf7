use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use muren_core::controller::Mode;
use muren_core::node::Node;
use muren_core::scenario::{Overrides, RunReport, ScenarioScript};
use muren_gateway::service::{Service, ServiceConfig, BIND_ENV, DEFAULT_BIND, DEFAULT_QUEUE};

/// Emulates a multi-radio edge node: batch runs with exported reports, or
/// an interactive service steered over TCP.
#[derive(Debug, Parser)]
#[command(name = "muren", version)]
struct Cli {
    /// Built-in scenario name (scenario-1, scenario-2) or path to a TOML file.
    #[arg(long, short)]
    scenario: String,

    /// Control mode; defaults to the scenario's own.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,

    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Report directory.
    #[arg(long, short, default_value = "report")]
    out: PathBuf,

    /// Virtual seconds per wall-clock second; 0 runs as fast as possible.
    /// Defaults to 0 for batch runs and 1 when serving.
    #[arg(long)]
    pace: Option<f64>,

    /// Serve the run interactively on ADDR. The run starts paused.
    #[arg(long, value_name = "ADDR", num_args = 0..=1, default_missing_value = "")]
    serve: Option<String>,

    /// Also write per-chart CSV series under OUT/plot.
    #[arg(long)]
    plot_data: bool,

    /// Frames a telemetry subscriber may lag before it is disconnected.
    #[arg(long, default_value_t = DEFAULT_QUEUE)]
    queue: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "manual" => Ok(Mode::Manual),
        "scripted" => Ok(Mode::Scripted),
        "automated" => Ok(Mode::Automated),
        "mixed" => Ok(Mode::Mixed),
        _ => Err(format!(
            "unknown mode {s:?} (manual, scripted, automated, mixed)"
        )),
    }
}

enum Failure {
    Config(String),
    Run(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("muren: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("muren: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<(), Failure> {
    let script = ScenarioScript::resolve(&cli.scenario)
        .map_err(|e| Failure::Config(e.to_string()))?
        .with_overrides(Overrides {
            mode: cli.mode,
            seed: cli.seed,
        });
    script
        .validate()
        .map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(p) = cli.pace {
        if !p.is_finite() || p < 0.0 {
            return Err(Failure::Config(format!(
                "--pace must be a finite number >= 0, got {p}"
            )));
        }
    }
    if script.mode == Mode::Manual && cli.serve.is_none() {
        return Err(Failure::Config(
            "manual mode takes its actions from an operator and needs --serve".into(),
        ));
    }
    if cli.serve.is_none() && cli.queue != DEFAULT_QUEUE {
        return Err(Failure::Config("--queue only applies with --serve".into()));
    }

    let report = match &cli.serve {
        Some(addr) => {
            let bind = if addr.is_empty() {
                std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.into())
            } else {
                addr.clone()
            };
            let config = ServiceConfig {
                bind,
                pace: cli.pace.unwrap_or(1.0),
                queue_capacity: cli.queue,
            };
            let service =
                Service::start(&script, &config).map_err(|e| Failure::Config(e.to_string()))?;
            println!("listening on {}", service.local_addr());
            service.join().map_err(|e| Failure::Run(e.to_string()))?
        }
        None => batch(&script, cli.pace.unwrap_or(0.0))?,
    };

    report
        .export(&cli.out)
        .map_err(|e| Failure::Run(e.to_string()))?;
    if cli.plot_data {
        muren_gateway::plot::export(&report, &cli.out.join("plot"))
            .map_err(|e| Failure::Run(format!("writing plot data: {e}")))?;
    }
    print_summary(&report, &cli.out);
    Ok(())
}

fn batch(script: &ScenarioScript, pace: f64) -> Result<RunReport, Failure> {
    let mut node = Node::new(script).map_err(|e| Failure::Config(e.to_string()))?;
    let result = if pace > 0.0 {
        node.run_paced_until(script.duration, pace)
    } else {
        node.run()
    };
    result.map_err(|e| Failure::Run(e.to_string()))?;
    Ok(RunReport::from_node(node))
}

fn print_summary(report: &RunReport, out: &std::path::Path) {
    let s = &report.summary;
    println!(
        "scenario  {} (seed {}, {} mode)",
        s.scenario, s.seed, s.mode
    );
    println!("ticks     {}", s.ticks);
    println!(
        "actions   {} applied, {} rejected",
        s.actions_applied, s.actions_rejected
    );
    for e in report.actions.iter().filter(|e| e.applied()) {
        println!("  t={:>7.3}  {}", e.time, e.action.kind());
    }
    match s.final_fraction_satisfied {
        Some(f) => println!("final SLA fraction satisfied {f}"),
        None => println!("final SLA fraction satisfied n/a"),
    }
    println!("report    {}", out.display());
}
