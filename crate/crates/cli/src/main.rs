//! Single binary exposing the verification engine: robustness checks,
//! concrete solving, trajectory-graph export, benchmarks, and generators
//! for test models and aggregation instances.
//!
//! Exit codes: 0 verified/success, 1 unknown, 2 falsified, 3 usage error,
//! 4 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use gains_core::bench;
use gains_core::graph::{branching_demo, build_graph, ModelStepper};
use gains_core::lcap::generate_lcap_instance;
use gains_core::math::Vector;
use gains_core::model::{
    load_model, random_model, save_model, OutputRole, RandomModelShape,
};
use gains_core::solver::{as_integrate, cas_integrate};
use gains_core::verifier::{
    empirical_soundness, verify, witness_search, Method, PropertyKind, RegressionTargets,
    RobustnessSpec, Status,
};

mod logging {
    /// Log level from the GAINS_LOG environment variable: off (default),
    /// info, or debug.
    pub fn level() -> u8 {
        match std::env::var("GAINS_LOG").as_deref() {
            Ok("debug") => 2,
            Ok("info") => 1,
            _ => 0,
        }
    }

    macro_rules! info {
        ($($arg:tt)*) => {
            if crate::logging::level() >= 1 {
                eprintln!("[info] {}", format!($($arg)*));
            }
        };
    }
    pub(crate) use info;
}

#[derive(Parser)]
#[command(
    name = "gains",
    about = "Certified robustness analysis for small neural ODEs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify a robustness property for every input row
    Verify(VerifyArgs),
    /// Integrate the dynamics for every input row and print the trajectory
    Solve(SolveArgs),
    /// Build the trajectory graph of an input region and export it as DOT
    Graph(GraphArgs),
    /// Benchmark suites emitting CSV
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Generators for models and aggregation instances
    #[command(subcommand)]
    Gen(GenCommand),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV of inputs, one row per sample; regression rows may append
    /// observed targets as columns of the form `m<index>=<value>`
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    epsilon: f64,
    /// Property: `cls:TARGET` or `reg:NU,DELTA`
    #[arg(long)]
    spec: String,
    #[arg(long, value_parser = parse_method, default_value = "gains")]
    method: Method,
    /// Random points per sample for the soundness probe and, on an
    /// inconclusive verdict, the counterexample search
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp perturbed inputs to `LO,HI`
    #[arg(long, value_parser = parse_pair)]
    clamp: Option<(f64, f64)>,
    /// Worker threads for batch verification (default: available cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Result CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "cas")]
    solver: String,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long, required_unless_present = "demo")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "demo")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, value_parser = parse_method, default_value = "box")]
    method: Method,
    /// DOT output path (stdout when omitted)
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Build the scripted demo graph instead of a model-driven one
    #[arg(long, default_value_t = false)]
    demo: bool,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Solver comparison over the tolerance sweep
    CasVsAs {
        #[arg(long, default_value_t = 200)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Constraint-aggregation comparison over dimensions
    Lcap {
        /// Comma-separated dimensions
        #[arg(long, value_delimiter = ',', default_value = "5,10,25,50,75,100")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 30)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenCommand {
    /// Random small model for testing
    Model {
        /// `state[,hidden[,outputs]]`
        #[arg(long, value_delimiter = ',', default_value = "3,4,2")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "classification")]
        output: String,
        /// Prepend a small feed-forward encoder
        #[arg(long, default_value_t = false)]
        encoder: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random constraint-aggregation instance
    Lcap {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "gains" => Ok(Method::Gains),
        "box" => Ok(Method::Box),
        "linear" => Ok(Method::Linear),
        other => Err(format!("unknown method {other:?} (gains|box|linear)")),
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected LO,HI".into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err("clamp lower bound exceeds upper bound".into());
    }
    Ok((lo, hi))
}

fn parse_spec(s: &str, epsilon: f64, clamp: Option<(f64, f64)>) -> Result<RobustnessSpec, String> {
    let kind = if let Some(rest) = s.strip_prefix("cls:") {
        let target: usize = rest
            .parse()
            .map_err(|_| format!("bad classification target {rest:?}"))?;
        PropertyKind::Classification { target }
    } else if let Some(rest) = s.strip_prefix("reg:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err("regression spec is reg:NU,DELTA".into());
        }
        let nu: f64 = parts[0].parse().map_err(|e| format!("bad nu: {e}"))?;
        let delta_tol: f64 = parts[1].parse().map_err(|e| format!("bad delta: {e}"))?;
        PropertyKind::Regression {
            nu,
            delta_tol,
            reference_mae: None,
        }
    } else {
        return Err(format!("unknown spec {s:?} (cls:TARGET or reg:NU,DELTA)"));
    };
    Ok(RobustnessSpec {
        kind,
        epsilon,
        clamp,
    })
}

/// One parsed input row: the input vector plus optional regression targets.
struct InputRow {
    x: Vector,
    targets: Option<RegressionTargets>,
}

fn parse_input_csv(text: &str) -> Result<Vec<InputRow>, String> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut values = Vec::new();
        let mut observed = Vec::new();
        for field in line.split(',') {
            let field = field.trim();
            if let Some(rest) = field.strip_prefix('m') {
                if let Some((idx, val)) = rest.split_once('=') {
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| format!("line {}: bad mask index {idx:?}", lineno + 1))?;
                    let val: f64 = val
                        .parse()
                        .map_err(|_| format!("line {}: bad target {val:?}", lineno + 1))?;
                    observed.push((idx, val));
                    continue;
                }
            }
            let v: f64 = field
                .parse()
                .map_err(|_| format!("line {}: bad number {field:?}", lineno + 1))?;
            values.push(v);
        }
        rows.push(InputRow {
            x: Vector(values),
            targets: if observed.is_empty() {
                None
            } else {
                Some(RegressionTargets { observed })
            },
        });
    }
    if rows.is_empty() {
        return Err("input CSV contains no rows".into());
    }
    Ok(rows)
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> std::io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, content),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// One verify-result row: id, status, certified quantity, graph stats,
/// and wall time.
type VerifyRow = (usize, String, f64, usize, usize, f64);

const EXIT_VERIFIED: u8 = 0;
const EXIT_UNKNOWN: u8 = 1;
const EXIT_FALSIFIED: u8 = 2;
const EXIT_USAGE: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version requests are successes, everything else is
            // a usage error
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::from(EXIT_VERIFIED);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(RunError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}

enum RunError {
    Usage(String),
    Internal(String),
}

impl From<gains_core::Error> for RunError {
    fn from(e: gains_core::Error) -> Self {
        use gains_core::Error;
        match e {
            Error::Io(_)
            | Error::Json(_)
            | Error::ModelParse { .. }
            | Error::MissingField(_)
            | Error::SpecMismatch(_)
            | Error::DimensionMismatch { .. } => RunError::Usage(e.to_string()),
            other => RunError::Internal(other.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<u8, RunError> {
    match cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Bench(cmd) => cmd_bench(cmd),
        Command::Gen(cmd) => cmd_gen(cmd),
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, RunError> {
    if args.epsilon < 0.0 {
        return Err(RunError::Usage("epsilon must be non-negative".into()));
    }
    let model = load_model(&args.model)?;
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| RunError::Usage(format!("cannot read {}: {e}", args.input.display())))?;
    let rows = parse_input_csv(&text).map_err(RunError::Usage)?;
    let spec = parse_spec(&args.spec, args.epsilon, args.clamp).map_err(RunError::Usage)?;

    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| RunError::Internal(e.to_string()))?;
    }
    logging::info!(
        "verifying {} rows with method {} at epsilon {}",
        rows.len(),
        args.method.name(),
        args.epsilon
    );

    let results: Vec<Result<VerifyRow, RunError>> = rows
        .par_iter()
        .enumerate()
        .map(|(id, row)| {
            let mut verdict = verify(&model, &row.x, row.targets.as_ref(), &spec, args.method)?;
            if args.samples > 0 {
                let probe = empirical_soundness(
                    &model,
                    &row.x,
                    &spec,
                    &verdict.output_bounds,
                    args.samples,
                    args.seed.wrapping_add(id as u64),
                )?;
                if probe.max_violation > 0.0 {
                    return Err(RunError::Internal(format!(
                        "row {id}: certified bounds violated by {} (witness {})",
                        probe.max_violation,
                        String::from_utf8_lossy(&probe.witness.unwrap_or_default())
                    )));
                }
                if verdict.status == Status::Unknown {
                    if let Some(witness) = witness_search(
                        &model,
                        &row.x,
                        row.targets.as_ref(),
                        &spec,
                        args.samples,
                        args.seed.wrapping_add(id as u64),
                    )? {
                        verdict.status =
                            Status::Falsified(serde_bytes(&witness).map_err(RunError::Internal)?);
                    }
                }
            }
            let status = match &verdict.status {
                Status::Verified => "verified",
                Status::Unknown => "unknown",
                Status::Falsified(_) => "falsified",
            };
            let quantity = verdict
                .mae_bound
                .or_else(|| {
                    verdict
                        .margins
                        .as_ref()
                        .map(|m| m.iter().cloned().fold(f64::INFINITY, f64::min))
                })
                .unwrap_or(f64::NAN);
            if let Some(witness) = verdict.witness() {
                logging::info!("row {id} falsified by input {:?}", witness.0);
            }
            Ok((
                id,
                status.to_string(),
                quantity,
                verdict.graph_nodes,
                verdict.graph_edges,
                verdict.millis,
            ))
        })
        .collect();

    let mut csv = String::from(
        "input_id,method,epsilon,status,margin_or_mae_bound,graph_nodes,graph_edges,millis\n",
    );
    let mut worst = EXIT_VERIFIED;
    for result in results {
        let (id, status, quantity, nodes, edges, millis) = result?;
        let code = match status.as_str() {
            "verified" => EXIT_VERIFIED,
            "unknown" => EXIT_UNKNOWN,
            _ => EXIT_FALSIFIED,
        };
        worst = worst.max(code);
        csv.push_str(&format!(
            "{id},{},{},{status},{quantity},{nodes},{edges},{millis:.3}\n",
            args.method.name(),
            args.epsilon
        ));
    }
    write_or_print(&args.out, &csv).map_err(|e| RunError::Internal(e.to_string()))?;
    Ok(worst)
}

fn serde_bytes(witness: &Vector) -> Result<Vec<u8>, String> {
    Ok(format!(
        "[{}]",
        witness
            .0
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    )
    .into_bytes())
}

fn cmd_solve(args: SolveArgs) -> Result<u8, RunError> {
    let model = load_model(&args.model)?;
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| RunError::Usage(format!("cannot read {}: {e}", args.input.display())))?;
    let rows = parse_input_csv(&text).map_err(RunError::Usage)?;
    for (id, row) in rows.iter().enumerate() {
        let z0 = gains_core::model::eval_layers(&model.encoder, &row.x, None)?;
        match args.solver.as_str() {
            "cas" => {
                let (z_end, trajectory) =
                    cas_integrate(&model.dynamics, &z0, &model.solver_cfg)?;
                let y = gains_core::model::eval_layers(&model.decoder, &z_end, None)?;
                println!("input {id}: output {:?}", y.0);
                let listing: Vec<String> =
                    trajectory.iter().map(|k| format!("({k})")).collect();
                println!("  trajectory: {}", listing.join(" -> "));
            }
            "as" => {
                let (z_end, steps) = as_integrate(&model.dynamics, &z0, &model.solver_cfg)?;
                let y = gains_core::model::eval_layers(&model.decoder, &z_end, None)?;
                println!("input {id}: output {:?} after {steps} attempted steps", y.0);
            }
            other => {
                return Err(RunError::Usage(format!(
                    "unknown solver {other:?} (cas|as)"
                )))
            }
        }
    }
    Ok(EXIT_VERIFIED)
}

fn cmd_graph(args: GraphArgs) -> Result<u8, RunError> {
    let dot = if args.demo {
        let (stepper, cfg) = branching_demo();
        let region = gains_core::math::IntervalBox::linf_ball(&Vector::zeros(1), 0.1);
        let graph = build_graph(&stepper, &region, &cfg)?;
        graph.export_dot()
    } else {
        let model = load_model(args.model.as_ref().expect("clap enforces presence"))?;
        let text = std::fs::read_to_string(args.input.as_ref().expect("clap enforces presence"))
            .map_err(|e| RunError::Usage(format!("cannot read input: {e}")))?;
        let rows = parse_input_csv(&text).map_err(RunError::Usage)?;
        let region0 = gains_core::verifier::input_region(&rows[0].x, args.epsilon, None);
        let mode = args.method.mode();
        let encoded = gains_core::domains::abstract_stack(&model.encoder, &region0, mode, None)?;
        let stepper = ModelStepper::new(&model, mode);
        let graph = build_graph(&stepper, &encoded.out_box, &model.solver_cfg)?;
        logging::info!(
            "graph has {} nodes and {} edges",
            graph.node_count(),
            graph.edge_count()
        );
        graph.export_dot()
    };
    write_or_print(&args.dot, &dot).map_err(|e| RunError::Internal(e.to_string()))?;
    Ok(EXIT_VERIFIED)
}

fn cmd_bench(cmd: BenchCommand) -> Result<u8, RunError> {
    match cmd {
        BenchCommand::CasVsAs { states, seed, out } => {
            let rows = bench::cas_vs_as(&bench::BENCH_TOLERANCES, states, seed)?;
            write_or_print(&out, &bench::cas_vs_as_csv(&rows))
                .map_err(|e| RunError::Internal(e.to_string()))?;
        }
        BenchCommand::Lcap {
            dims,
            m,
            seeds,
            out,
        } => {
            if m < 2 {
                return Err(RunError::Usage("m must be at least 2".into()));
            }
            let rows = bench::lcap_bench(&dims, m, seeds);
            write_or_print(&out, &bench::lcap_csv(&rows))
                .map_err(|e| RunError::Internal(e.to_string()))?;
        }
    }
    Ok(EXIT_VERIFIED)
}

fn cmd_gen(cmd: GenCommand) -> Result<u8, RunError> {
    match cmd {
        GenCommand::Model {
            dims,
            seed,
            output,
            encoder,
            out,
        } => {
            let shape = RandomModelShape {
                state_dim: *dims.first().unwrap_or(&3),
                hidden_dim: *dims.get(1).unwrap_or(&4),
                out_dim: *dims.get(2).unwrap_or(&2),
                with_encoder: encoder,
                output: match output.as_str() {
                    "classification" => OutputRole::Classification,
                    "regression" => OutputRole::Regression,
                    other => {
                        return Err(RunError::Usage(format!(
                            "unknown output role {other:?}"
                        )))
                    }
                },
            };
            let model = random_model(&shape, seed);
            match out {
                Some(path) => save_model(&model, &path)?,
                None => println!("{}", gains_core::model::model_to_json(&model)?),
            }
        }
        GenCommand::Lcap { d, m, seed, out } => {
            if d < 1 || m < 2 {
                return Err(RunError::Usage("need d >= 1 and m >= 2".into()));
            }
            let inst =
                generate_lcap_instance(d, m, seed).map_err(|e| RunError::Internal(e.to_string()))?;
            let mut text = String::from("# constraint rows: coefficients then offset\n");
            for i in 0..inst.set.len() {
                let c = inst.set.constraint(i);
                let coeffs: Vec<String> = c.coeffs.row(0).iter().map(f64::to_string).collect();
                text.push_str(&format!("{},{}\n", coeffs.join(","), c.offset.0[0]));
            }
            text.push_str("# region lower\n");
            let lower: Vec<String> = inst.set.region.lower.0.iter().map(f64::to_string).collect();
            text.push_str(&format!("{}\n# region upper\n", lower.join(",")));
            let upper: Vec<String> = inst.set.region.upper.0.iter().map(f64::to_string).collect();
            text.push_str(&format!("{}\n", upper.join(",")));
            write_or_print(&out, &text).map_err(|e| RunError::Internal(e.to_string()))?;
        }
    }
    Ok(EXIT_VERIFIED)
}
