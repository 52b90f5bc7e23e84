//! `pipeplan`: generate pipeline templates, select instantiation plans,
//! distribute batches, and replay availability traces.
//!
//! Every subcommand is a pure function of its input files and flags. On any
//! module error the process prints a machine-readable JSON object to stderr
//! and exits nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pipeplan::bundle::PlanBundle;
use pipeplan::plan::{distribute_batch, rank_plans, select_plan, JobConfig};
use pipeplan::profile::{load_profile, min_nodes, ClusterSpec};
use pipeplan::sim::{load_trace, run_sim};
use pipeplan::template::generate_template_set;
use pipeplan::Error;

/// Memory headroom left for activations and fragmentation when sizing the
/// smallest pipeline.
const MEM_UTILIZATION: f64 = 0.8;

#[derive(Parser)]
#[command(name = "pipeplan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pipeline-template set for a profile and cluster.
    Templates(TemplatesArgs),
    /// Select the throughput-optimal instantiation plan for a node count.
    Plan(PlanArgs),
    /// Distribute the global batch over an explicit pipeline-count vector.
    Batch(BatchArgs),
    /// Replay a node-availability trace and report throughput over time.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct TemplatesArgs {
    /// Layer profile JSON.
    #[arg(long)]
    profile: PathBuf,
    /// Cluster description JSON.
    #[arg(long)]
    cluster: PathBuf,
    /// Fault tolerance threshold.
    #[arg(long)]
    f: u32,
    /// Output template-bundle JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Template bundle produced by `templates`.
    #[arg(long)]
    templates: PathBuf,
    /// Node count to plan for.
    #[arg(long)]
    nodes: u32,
    /// Job JSON: {"f": .., "global_batch": .., "microbatch": ..}.
    #[arg(long)]
    job: PathBuf,
    /// Also list every feasible candidate with its throughput.
    #[arg(long)]
    all: bool,
    /// Output plan JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BatchArgs {
    /// Template bundle produced by `templates`.
    #[arg(long)]
    templates: PathBuf,
    /// Pipelines per template size, e.g. "1,1,2".
    #[arg(long)]
    counts: String,
    /// Job JSON.
    #[arg(long)]
    job: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Template bundle produced by `templates`.
    #[arg(long)]
    templates: PathBuf,
    /// JSON-lines trace of fail/join events.
    #[arg(long)]
    trace: PathBuf,
    /// Job JSON.
    #[arg(long)]
    job: PathBuf,
    /// Simulated seconds to run.
    #[arg(long = "horizon-s")]
    horizon_s: f64,
    /// Seed for random victim selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional throughput time-series CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Templates(args) => cmd_templates(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Batch(args) => cmd_batch(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let mut payload = json!({ "error": err.to_string() });
            if let Some(recommended) = err.recommended_global_batch() {
                payload["recommended_global_batch"] = json!(recommended);
            }
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_templates(args: TemplatesArgs) -> Result<(), Error> {
    let profile = load_profile(&args.profile)?;
    let cluster = ClusterSpec::load(&args.cluster)?;
    if cluster.gpus_per_node != profile.gpus_per_node {
        return Err(Error::InvalidCluster(format!(
            "cluster has {} GPUs per node, profile was measured with {}",
            cluster.gpus_per_node, profile.gpus_per_node
        )));
    }
    for warning in profile.non_monotonic_warnings() {
        eprintln!("{}", json!({ "warning": warning }));
    }
    let n0 = min_nodes(&profile, &cluster, MEM_UTILIZATION, 1)?;
    let ts = generate_template_set(&profile, cluster.nodes, args.f, n0)?;
    println!(
        "n0={} p={} sizes={:?}",
        ts.spec.n0, ts.spec.p, ts.spec.sizes
    );
    PlanBundle::new(&profile, &cluster, ts).save(&args.out)?;
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Result<(), Error> {
    let bundle = PlanBundle::load(&args.templates)?;
    let job = JobConfig::load(&args.job)?;
    let selected = select_plan(&bundle.templates, args.nodes, &job)?;
    let output = if args.all {
        let candidates = rank_plans(&bundle.templates, args.nodes, &job)?;
        serde_json::to_string_pretty(&json!({
            "selected": selected,
            "candidates": candidates,
        }))
        .expect("plan serializes")
    } else {
        serde_json::to_string_pretty(&selected).expect("plan serializes")
    };
    std::fs::write(&args.out, output + "\n")?;
    println!(
        "plan: counts={:?} iteration_ms={:.3} throughput_sps={:.3}",
        selected.counts, selected.iteration_ms, selected.throughput_sps
    );
    Ok(())
}

fn cmd_batch(args: BatchArgs) -> Result<(), Error> {
    let bundle = PlanBundle::load(&args.templates)?;
    let job = JobConfig::load(&args.job)?;
    let counts: Vec<u32> = args
        .counts
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map_err(|e| Error::InvalidArgument(format!("bad counts entry {part:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let sizes = &bundle.templates.spec.sizes;
    if counts.len() != sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "counts has {} entries, template set has {} sizes",
            counts.len(),
            sizes.len()
        )));
    }
    let mut times = Vec::new();
    for (&count, &size) in counts.iter().zip(sizes) {
        let template = bundle.templates.template(size)?;
        for _ in 0..count {
            times.push(template.slowest_stage_ms());
        }
    }
    let assignment = distribute_batch(&times, job.global_batch, job.microbatch)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&assignment).expect("assignment serializes")
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let bundle = PlanBundle::load(&args.templates)?;
    let job = JobConfig::load(&args.job)?;
    let trace = load_trace(&args.trace)?;
    let cfg = bundle.sim_config(job, args.horizon_s, args.seed)?;
    let report = run_sim(&cfg, &trace)?;
    let output = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&args.out, output + "\n")?;
    if let Some(csv_path) = &args.csv {
        std::fs::write(csv_path, report.series_csv())?;
    }
    println!(
        "avg_throughput_sps={:.3} training={:.4} reconfiguration={:.4} fallback={:.4}",
        report.avg_throughput_sps,
        report.breakdown.training,
        report.breakdown.reconfiguration,
        report.breakdown.fallback
    );
    Ok(())
}
