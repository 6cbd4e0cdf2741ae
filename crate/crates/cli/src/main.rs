//! Command-line front end: table and trace generation, one-shot planning,
//! iterative runs, report inspection and a raw solver oracle.
//!
//! Exit codes: 0 success, 1 invalid input (spec/config/usage), 2
//! infeasible plan (mandatory cost above budget), 3 I/O failure.
//! Diagnostics go to stderr; JSON results go to `--out` or stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use pruneplan::engine::{self, PruneConfig, SolverKind, StepOptions};
use pruneplan::grouping::GroupingOptions;
use pruneplan::importance;
use pruneplan::knapsack::{self, KnapsackInstance};
use pruneplan::latency::{self, LatencyTable, StaircaseConfig};
use pruneplan::netmodel::{self, ChannelAssignment, LayerId, NetworkSpec};
use pruneplan::trace_gen::{gen_trace, ToyNet, TraceGenOptions};
use pruneplan::Error;

#[derive(Parser)]
#[command(
    name = "pruneplan",
    version,
    about = "Latency-aware structured channel pruning planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Exact,
    Itemwise,
    Brute,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a staircase latency table for a network spec
    GenLut {
        /// Network spec JSON
        #[arg(long)]
        spec: PathBuf,
        /// Staircase generator parameters JSON
        #[arg(long)]
        params: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic importance trace for a spec
    GenTrace {
        #[arg(long)]
        spec: PathBuf,
        /// Number of snapshots to emit
        #[arg(long)]
        steps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parameter-walk amplitude between snapshots
        #[arg(long, default_value_t = 0.02)]
        amplitude: f64,
        /// Dataset samples behind each snapshot
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// Output JSON-lines path
        #[arg(long)]
        out: PathBuf,
        /// Also dump the generating toy net as JSON
        #[arg(long)]
        dump_net: Option<PathBuf>,
    },
    /// Solve one pruning plan at a fixed latency budget
    Plan {
        #[arg(long)]
        spec: PathBuf,
        /// Latency table CSV
        #[arg(long)]
        lut: PathBuf,
        /// Per-layer channel scores JSON ({"<layer_id>": [..]})
        #[arg(long)]
        scores: PathBuf,
        /// Budget in milliseconds
        #[arg(long, conflicts_with = "budget_fraction")]
        budget_ms: Option<f64>,
        /// Budget as a fraction of the dense latency
        #[arg(long)]
        budget_fraction: Option<f64>,
        #[arg(long, value_enum, default_value_t = SolverArg::Exact)]
        solver: SolverArg,
        /// Fixed group size overriding step detection
        #[arg(long)]
        group_size: Option<u32>,
        /// Output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the iterative pruning schedule from a config file
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's target fraction
        #[arg(long)]
        target_fraction: Option<f64>,
        /// Override the config's step count
        #[arg(long)]
        steps: Option<u32>,
        /// Override the config's window length
        #[arg(long)]
        window: Option<u32>,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a plan/report file
    Report {
        #[arg(long)]
        plan: PathBuf,
        /// Dump the embedded groups instead of the summary
        #[arg(long)]
        groups: bool,
    },
    /// Solve a raw knapsack instance from JSON
    Oracle {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = SolverArg::Exact)]
        solver: SolverArg,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(err) = dispatch(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(match err {
            Error::Validation(_) | Error::Parse(_) => 1,
            Error::Infeasible(_) => 2,
            Error::Io(_) => 3,
        });
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::GenLut { spec, params, out } => gen_lut(&spec, &params, &out),
        Command::GenTrace {
            spec,
            steps,
            seed,
            amplitude,
            samples,
            out,
            dump_net,
        } => gen_trace_cmd(&spec, steps, seed, amplitude, samples, &out, dump_net.as_deref()),
        Command::Plan {
            spec,
            lut,
            scores,
            budget_ms,
            budget_fraction,
            solver,
            group_size,
            out,
        } => plan(
            &spec,
            &lut,
            &scores,
            budget_ms,
            budget_fraction,
            solver,
            group_size,
            out.as_deref(),
        ),
        Command::Run {
            config,
            out,
            target_fraction,
            steps,
            window,
            seed,
        } => run(&config, out.as_deref(), target_fraction, steps, window, seed),
        Command::Report { plan, groups } => report(&plan, groups),
        Command::Oracle { instance, solver } => oracle(&instance, solver),
    }
}

fn load_spec(path: &Path) -> Result<NetworkSpec, Error> {
    let spec = NetworkSpec::from_json_path(path)?;
    netmodel::validate(&spec)?;
    Ok(spec)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_lut(spec_path: &Path, params_path: &Path, out: &Path) -> Result<(), Error> {
    let spec = load_spec(spec_path)?;
    let params: StaircaseConfig = serde_json::from_str(&std::fs::read_to_string(params_path)?)?;
    let table = latency::staircase_table(&spec, &params)?;
    table.write_csv_path(out)?;
    eprintln!("wrote latency table for {} layers to {}", spec.layers.len(), out.display());
    Ok(())
}

fn gen_trace_cmd(
    spec_path: &Path,
    steps: u32,
    seed: u64,
    amplitude: f64,
    samples: usize,
    out: &Path,
    dump_net: Option<&Path>,
) -> Result<(), Error> {
    let spec = load_spec(spec_path)?;
    let opts = TraceGenOptions {
        seed,
        steps,
        perturb_amplitude: amplitude,
        samples,
    };
    let trace = gen_trace(&spec, &opts)?;
    importance::write_trace_path(out, &trace)?;
    if let Some(path) = dump_net {
        let net = ToyNet::from_spec(&spec, seed, samples)?;
        let mut text = serde_json::to_string_pretty(&net)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }
    eprintln!("wrote {} snapshots to {}", trace.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn plan(
    spec_path: &Path,
    lut_path: &Path,
    scores_path: &Path,
    budget_ms: Option<f64>,
    budget_fraction: Option<f64>,
    solver: SolverArg,
    group_size: Option<u32>,
    out: Option<&Path>,
) -> Result<(), Error> {
    let spec = load_spec(spec_path)?;
    let table = LatencyTable::from_csv_path(lut_path)?;
    let scores: BTreeMap<LayerId, Vec<f64>> =
        serde_json::from_str(&std::fs::read_to_string(scores_path)?)?;
    let budget = match (budget_ms, budget_fraction) {
        (Some(ms), None) => ms,
        (None, Some(fraction)) => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::validation("budget fraction must be in (0, 1]"));
            }
            let dense = ChannelAssignment::dense(&spec);
            fraction * latency::network_latency(&spec, &dense, &table)?
        }
        _ => {
            return Err(Error::validation(
                "exactly one of --budget-ms / --budget-fraction is required",
            ))
        }
    };
    let solver = match solver {
        SolverArg::Exact => SolverKind::Exact,
        SolverArg::Itemwise => SolverKind::Itemwise,
        SolverArg::Brute => {
            return Err(Error::validation(
                "the brute-force solver is only available through `oracle`",
            ))
        }
    };
    let opts = StepOptions {
        solver,
        grouping: GroupingOptions {
            step_override: group_size,
            ..GroupingOptions::default()
        },
    };
    let (report, groups) = engine::plan_once(&spec, &table, &scores, budget, &opts)?;
    let mut value = serde_json::to_value(&report)?;
    value
        .as_object_mut()
        .expect("report serializes to an object")
        .insert("groups".into(), serde_json::to_value(&groups.groups)?);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    emit(out, &text)
}

fn run(
    config_path: &Path,
    out: Option<&Path>,
    target_fraction: Option<f64>,
    steps: Option<u32>,
    window: Option<u32>,
    seed: Option<u64>,
) -> Result<(), Error> {
    let mut config = PruneConfig::from_json(&std::fs::read_to_string(config_path)?)?;
    if let Some(v) = target_fraction {
        config.target_fraction = v;
    }
    if let Some(v) = steps {
        config.steps = v;
    }
    if let Some(v) = window {
        config.window = v;
    }
    if let Some(v) = seed {
        config.seed = v;
    }
    config.validate()?;
    let report = engine::run(&config)?;
    emit(out, &report.to_json_pretty()?)
}

fn report(plan_path: &Path, groups: bool) -> Result<(), Error> {
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(plan_path)?)?;
    let object = value
        .as_object()
        .ok_or_else(|| Error::parse("plan file is not a JSON object"))?;
    let output = if groups {
        object
            .get("groups")
            .cloned()
            .ok_or_else(|| Error::validation("plan file carries no groups dump"))?
    } else {
        let kept_total: u64 = object
            .get("kept_counts")
            .and_then(|v| v.as_object())
            .map(|counts| counts.values().filter_map(|v| v.as_u64()).sum())
            .unwrap_or(0);
        let mut summary = serde_json::Map::new();
        summary.insert("kept_neurons".into(), kept_total.into());
        for key in ["final", "milestones"] {
            if let Some(v) = object.get(key) {
                summary.insert(key.into(), v.clone());
            }
        }
        serde_json::Value::Object(summary)
    };
    let mut text = serde_json::to_string_pretty(&output)?;
    text.push('\n');
    emit(None, &text)
}

fn oracle(instance_path: &Path, solver: SolverArg) -> Result<(), Error> {
    let instance: KnapsackInstance =
        serde_json::from_str(&std::fs::read_to_string(instance_path)?)?;
    let solution = match solver {
        SolverArg::Exact => knapsack::solve_exact(&instance.items, instance.budget)?,
        SolverArg::Itemwise => knapsack::solve_itemwise(&instance.items, instance.budget)?,
        SolverArg::Brute => knapsack::brute_force(&instance.items, instance.budget)?,
    };
    let mut text = serde_json::to_string_pretty(&solution)?;
    text.push('\n');
    emit(None, &text)
}
