//! `bhfl`: run, compare and analyse blockchain-coordinated hierarchical FL simulations.
//!
//! Exit codes: 0 success, 1 invalid input, 2 failed run or infeasible problem.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bhfl::chain::{ChainCheck, Ledger};
use bhfl::hieavg::Aggregator;
use bhfl::latency::{optimize_k, theorem1_bound, theorem2_bound, EdgeFields, KProblem, KReport};
use bhfl::sim::{
    compare_aggregators, estimate_bounds, run_experiment, sweep, write_metrics, write_outputs, BoundEstimate,
    Comparison, ExperimentConfig, SweepAxis,
};
use clap::{Parser, Subcommand};

/// `println!` that propagates write errors, so a closed pipe ends the command quietly.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(
    name = "bhfl",
    version,
    about = "Hierarchical federated learning with HieAvg and a Raft-style ledger"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, summary and ledger.
    Run {
        config: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Workflow event log as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Run several aggregators on the same scenario and tabulate their losses.
    Compare {
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "hieavg,t_fedavg,d_fedavg,oracle_no_stragglers"
        )]
        aggregators: Vec<String>,
        /// Loss table (CSV); with --sweep, one file per point with the value appended.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parameter sweep such as `j=3,5,8` (axes: j, n, k, s, s_i).
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Choose the number of edge rounds K under the convergence and consensus constraints.
    OptimizeK {
        config: PathBuf,
        /// Machine-readable report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a convergence bound.
    Bound {
        config: PathBuf,
        #[arg(long, value_parser = ["1", "2"])]
        theorem: String,
        /// Edge rounds; defaults to the config value.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Check hashes and links of an exported ledger.
    VerifyLedger { file: PathBuf },
}

/// Input problems that map to exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn parse_aggregators(names: &[String]) -> anyhow::Result<Vec<Aggregator>> {
    Ok(names.iter().map(|n| n.trim().parse()).collect::<bhfl::Result<_>>()?)
}

fn parse_sweep(spec: &str) -> anyhow::Result<(SweepAxis, Vec<usize>)> {
    let (axis, values) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("sweep `{spec}` must look like axis=v1,v2")))?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| invalid(format!("sweep values: {e}")))?;
    Ok((axis.trim().parse()?, values))
}

fn print_comparison(c: &Comparison) -> anyhow::Result<()> {
    for r in &c.runs {
        out!(
            "{:<22} final loss {:.6}  accuracy {}",
            r.aggregator.name(),
            r.summary.final_loss,
            r.summary.final_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(())
}

fn cmd_run(
    config: &Path,
    metrics: Option<PathBuf>,
    summary: Option<PathBuf>,
    ledger: Option<PathBuf>,
    events: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load(config)?;
    cfg.output.metrics = metrics.or(cfg.output.metrics);
    cfg.output.summary = summary.or(cfg.output.summary);
    cfg.output.ledger = ledger.or(cfg.output.ledger);
    let out = run_experiment(&cfg)?;
    write_outputs(&cfg, &out)?;
    if cfg.output.metrics.is_none() {
        write_metrics(&out.records, std::io::stdout().lock())?;
    }
    if let Some(p) = events {
        let mut w = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        for e in &out.events {
            serde_json::to_writer(&mut w, e)?;
            std::io::Write::write_all(&mut w, b"\n")?;
        }
    }
    eprint!("{}", out.summary.to_toml());
    Ok(())
}

fn cmd_compare(
    config: &Path,
    aggregators: &[String],
    out: Option<PathBuf>,
    sweep_spec: Option<String>,
) -> anyhow::Result<()> {
    let cfg = load(config)?;
    let methods = parse_aggregators(aggregators)?;
    let Some(spec) = sweep_spec else {
        let c = compare_aggregators(&cfg, &methods)?;
        print_comparison(&c)?;
        match out {
            Some(p) => c.write_csv(File::create(&p).with_context(|| format!("creating {}", p.display()))?)?,
            None => c.write_csv(std::io::stdout().lock())?,
        }
        return Ok(());
    };
    let (axis, values) = parse_sweep(&spec)?;
    for point in sweep(&cfg, axis, &values, &methods)? {
        out!("-- {axis:?} = {}", point.value);
        print_comparison(&point.comparison)?;
        if let Some(p) = &out {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("compare");
            let path = p.with_file_name(format!("{stem}_{}.csv", point.value));
            point.comparison.write_csv(File::create(&path)?)?;
        }
    }
    Ok(())
}

/// Supplied bound constants, or an estimate from one calibration run.
/// The run is skipped when both the constants and `L_bc` are configured.
fn bounds(cfg: &ExperimentConfig) -> anyhow::Result<BoundEstimate> {
    let topo = cfg.topology()?;
    let Some(params) = cfg.bounds else {
        let mut est = estimate_bounds(cfg)?;
        est.consensus_latency = cfg.optimize.consensus_latency.unwrap_or(est.consensus_latency);
        return Ok(est);
    };
    let consensus_latency = match cfg.optimize.consensus_latency {
        Some(l) => l,
        None => estimate_bounds(cfg)?.consensus_latency,
    };
    Ok(BoundEstimate {
        params,
        edges: topo
            .devices_per_edge()
            .iter()
            .map(|&j| EdgeFields {
                stragglers: params.device_stragglers,
                devices: j,
            })
            .collect(),
        consensus_latency,
        max_device_latency: cfg.latency_profile()?.max_device_latency(&topo),
    })
}

fn print_k_report(r: &KReport) -> anyhow::Result<()> {
    out!(
        "{:>4} {:>14} {:>10} {:>12} {:>4} {:>4}",
        "K", "omega", "L_g", "latency", "C1", "C2"
    );
    for row in &r.rows {
        let omega = match (row.omega, row.inapplicable) {
            (Some(o), _) => format!("{o:.6}"),
            (None, Some(p)) => format!("n/a ({p:?})"),
            (None, None) => "n/a".into(),
        };
        let mark = |ok: bool| if ok { "ok" } else { "x" };
        out!(
            "{:>4} {:>14} {:>10.3} {:>12.2} {:>4} {:>4}",
            row.k,
            omega,
            row.waiting_period,
            row.total_latency,
            mark(row.convergence_ok),
            mark(row.latency_ok)
        );
    }
    let binding: Vec<String> = r.binding.iter().map(|c| c.to_string()).collect();
    out!(
        "K* = {}  binding: {}",
        r.k_star,
        if binding.is_empty() {
            "none".into()
        } else {
            binding.join(", ")
        }
    );
    Ok(())
}

fn cmd_optimize_k(config: &Path, report: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load(config)?;
    let omega_target = cfg
        .optimize
        .omega_target
        .ok_or_else(|| invalid(format!("{}: optimize.omega_target is required", config.display())))?;
    let est = bounds(&cfg)?;
    let topo = cfg.topology()?;
    let profile = cfg.latency_profile()?;
    let problem = KProblem {
        global_rounds: cfg.rounds.global,
        n_edges: topo.n_edges(),
        mean_devices: topo.mean_devices(),
        expectations: profile.expectations(&topo),
        max_device_latency: est.max_device_latency,
        bounds: est.params,
        omega_target,
        consensus_latency: est.consensus_latency,
        k_max: cfg.optimize.k_max,
    };
    out!(
        "L_bc = {:.4} s, max device latency = {:.4} s, omega target = {omega_target}",
        problem.consensus_latency, problem.max_device_latency
    );
    let r = optimize_k(&problem)?;
    print_k_report(&r)?;
    let json = serde_json::to_string_pretty(&r)?;
    match report {
        Some(p) => std::fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => out!("{json}"),
    }
    Ok(())
}

fn cmd_bound(config: &Path, theorem: &str, k: Option<usize>) -> anyhow::Result<()> {
    let cfg = load(config)?;
    let k = k.unwrap_or(cfg.rounds.edge);
    let est = bounds(&cfg)?;
    out!("{}", serde_json::to_string_pretty(&est.params)?);
    if theorem == "1" {
        let mut first_err = None;
        for (i, e) in est.edges.iter().enumerate() {
            match theorem1_bound(k, &est.params, e) {
                Ok(b) => out!(
                    "edge {i}: bound {:.6} (decay {:.6}, stragglers {:.6})",
                    b.value, b.decay_term, b.straggler_term
                ),
                Err(err) => {
                    out!("edge {i}: {err}");
                    first_err.get_or_insert(err);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e.into());
        }
    } else {
        let b = theorem2_bound(k, cfg.rounds.global, &est.params)?;
        out!(
            "omega {:.6} (decay {:.6}, stragglers {:.6})",
            b.value, b.decay_term, b.straggler_term
        );
    }
    Ok(())
}

fn cmd_verify(file: &Path) -> anyhow::Result<()> {
    let f = File::open(file).with_context(|| format!("opening {}", file.display()))?;
    let ledger = Ledger::import(BufReader::new(f))?;
    match ledger.verify_chain() {
        ChainCheck::Ok => {
            out!("ok: {} blocks, tip {}", ledger.len(), hex_tip(&ledger));
            Ok(())
        }
        ChainCheck::BadHeight(h) => bail!("ledger fails verification at height {h}"),
    }
}

fn hex_tip(ledger: &Ledger) -> String {
    ledger.tip_hash().iter().map(|b| format!("{b:02x}")).collect()
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        let io = e
            .downcast_ref::<std::io::Error>()
            .or_else(|| match e.downcast_ref::<bhfl::Error>() {
                Some(bhfl::Error::Io(io)) => Some(io),
                _ => None,
            });
        io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<bhfl::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            metrics,
            summary,
            ledger,
            events,
        } => cmd_run(&config, metrics, summary, ledger, events),
        Command::Compare {
            config,
            aggregators,
            out,
            sweep,
        } => cmd_compare(&config, &aggregators, out, sweep),
        Command::OptimizeK { config, report } => cmd_optimize_k(&config, report),
        Command::Bound { config, theorem, k } => cmd_bound(&config, &theorem, k),
        Command::VerifyLedger { file } => cmd_verify(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
