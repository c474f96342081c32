//! `divex`: build, run, fault-inject and analyze diversified replicas.
//!
//! Exit status: 0 clean, 10 semantic divergence, 11 structural PC
//! violation, 12 structural address violation, 13 stall, 14 slice budget
//! exhausted, 1 runtime error, 2 usage error, 3 failing layout certificate.

mod analyze;
mod build;
mod campaign;
mod config;
mod output;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use divex_core::diversifier::NopScope;
use divex_core::monitor::CheckPolicy;

use config::UsageError;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CERTIFICATE: u8 = 3;

#[derive(Parser)]
#[command(name = "divex", version, about = "Diversified replica execution with a layered divergence monitor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lay out N replicas of a program and write the image container and
    /// layout certificate.
    Build(BuildArgs),
    /// Run a container under the monitor; the exit status encodes the verdict.
    Run(RunArgs),
    /// Run one injection against the fault-free reference and classify it.
    Inject(InjectArgs),
    /// Execute a campaign spec file and write JSON, CSV and metadata.
    Campaign(CampaignArgs),
    /// Compute undetected-execution bounds, and compare them with a campaign.
    Analyze(AnalyzeArgs),
    /// Print the instruction-set reference as markdown.
    IsaDoc(IsaDocArgs),
    /// Render campaign or analysis outputs (JSON or CSV) as markdown.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    PairwiseStrict,
    AllEqualCollapse,
}

impl From<Policy> for CheckPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::PairwiseStrict => CheckPolicy::PairwiseStrict,
            Policy::AllEqualCollapse => CheckPolicy::AllEqualCollapse,
        }
    }
}

#[derive(Args)]
struct BuildArgs {
    /// Assembly file or `corpus:NAME`; overrides `program` in the config.
    program: Option<String>,
    /// TOML (or .json) run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short = 'n', long, value_parser = clap::value_parser!(u64).range(2..=divex_core::diversifier::MAX_STANDARD_REPLICAS as u64))]
    replicas: Option<u64>,
    /// NOP stride `l` in bytes; defaults to 4·N.
    #[arg(long)]
    stride: Option<u32>,
    /// Blocks larger than this many bytes are fragmented.
    #[arg(long)]
    critical_size: Option<u32>,
    /// `global`, `none`, or a comma-separated list of function names.
    #[arg(long)]
    nop_scope: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_layout_retries: Option<u32>,
    /// Directory for `image.json`, `certificate.json` and metadata.
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    /// TOML (or .json) run configuration; only monitor and output keys apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pc_policy: Option<Policy>,
    #[arg(long, value_enum)]
    addr_policy: Option<Policy>,
    #[arg(long)]
    max_steps_per_slice: Option<u32>,
    /// Slice budget for `run`; defaults to 4× the fault-free run when
    /// injecting. `inject` always uses 4×.
    #[arg(long)]
    max_slices: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// Image container written by `build`.
    container: PathBuf,
    #[command(flatten)]
    monitor: MonitorArgs,
    /// `SLICE:WHO:MUTATION`, WHO being `all` or `rK`. Repeat to give
    /// replicas different mutations at one slice.
    #[arg(long = "inject", value_name = "SPEC")]
    inject: Vec<String>,
    /// Write one JSON-lines canonical trace per replica to the output directory.
    #[arg(long)]
    dump_trace: bool,
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InjectArgs {
    container: PathBuf,
    #[command(flatten)]
    monitor: MonitorArgs,
    /// `SLICE:WHO:MUTATION`, as for `run --inject`.
    #[arg(required = true, value_name = "SPEC")]
    inject: Vec<String>,
}

#[derive(Args)]
struct CampaignArgs {
    /// Campaign spec (TOML or .json).
    spec: PathBuf,
    /// Worker threads; 0 uses one per core.
    #[arg(short, long, default_value_t = 0)]
    workers: usize,
    #[arg(short, long, default_value = ".")]
    out_dir: PathBuf,
    /// Also compare against the worst-case replica bound and embed the report.
    #[arg(long)]
    analyze: bool,
    #[arg(long, default_value_t = analyze::DEFAULT_K_MAX)]
    k_max: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Image container; optional when `--campaign` or `--synthetic` is given.
    container: Option<PathBuf>,
    /// Campaign result JSON; its build is replayed when no container is given.
    #[arg(long)]
    campaign: Option<PathBuf>,
    /// `SLOTS,EQUIVALENT`: analyze a synthetic image with those counts.
    #[arg(long, value_name = "SLOTS,EQUIVALENT", conflicts_with = "container")]
    synthetic: Option<String>,
    #[arg(long, default_value_t = analyze::DEFAULT_K_MAX)]
    k_max: usize,
    /// Print the JSON report instead of the text summary.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct IsaDocArgs {
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Campaign result JSON, campaign CSV or analysis JSON.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_nop_scope(s: &str) -> NopScope {
    match s {
        "global" => NopScope::Global,
        "none" => NopScope::None,
        list => NopScope::Functions(list.split(',').map(|f| f.trim().to_string()).filter(|f| !f.is_empty()).collect()),
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Build(a) => build::cmd_build(a),
        Command::Run(a) => run::cmd_run(a),
        Command::Inject(a) => run::cmd_inject(a),
        Command::Campaign(a) => campaign::cmd_campaign(a),
        Command::Analyze(a) => analyze::cmd_analyze(a),
        Command::IsaDoc(a) => {
            output::emit(a.output.as_deref(), &divex_core::isa::reference_markdown())?;
            Ok(0)
        }
        Command::Report(a) => report::cmd_report(a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("divex: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
