use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use parsepipe::cli::{self, CliError, SimInput};
use parsepipe::graph::GraphStage;
use parsepipe::layout::PipelinePlan;
use parsepipe::oracle::pcap::read_pcap;

#[derive(Parser)]
#[command(
    name = "parsepipe",
    version,
    about = "Compile streaming packet-parser pipelines and simulate them cycle-accurately"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CompileArgs {
    /// Parser specification (JSON)
    spec: PathBuf,
    /// Bus width in bits (multiple of 8)
    #[arg(long, default_value_t = 320)]
    bus: u32,
    /// Write the plan artifact here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Compiled plan artifact (JSON)
    plan: PathBuf,
    /// Parser specification; required with --packets
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of random packets to generate
    #[arg(long, default_value_t = 0)]
    packets: u64,
    /// Replay packets from a classic pcap file instead
    #[arg(long)]
    pcap: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the PHV stream (JSON lines) here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a cycle trace (CSV) here
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Parser specification (JSON)
    spec: PathBuf,
    /// Plan to check; compiled from the spec when omitted
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 320)]
    bus: u32,
    #[arg(short = 'n', long, default_value_t = 1000)]
    packets: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DotArgs {
    /// Parser specification (JSON)
    spec: PathBuf,
    /// original, reduced or balanced
    #[arg(long, default_value = "original")]
    stage: String,
}

#[derive(Args)]
struct StatsArgs {
    /// Compiled plan artifact (JSON)
    plan: PathBuf,
    /// Clock frequency for the throughput row
    #[arg(long)]
    clock_mhz: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a parser spec into a pipeline plan
    Compile(CompileArgs),
    /// Run packets through the simulated pipeline
    Simulate(SimulateArgs),
    /// Diff the pipeline against the sequential reference parser
    Compare(CompareArgs),
    /// Export a transformation stage as Graphviz DOT
    Dot(DotArgs),
    /// Print plan statistics
    Stats(StatsArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode, CliError> {
    match cmd {
        Cmd::Compile(a) => {
            let text = std::fs::read_to_string(&a.spec)?;
            let plan = cli::cmd_compile(&text, a.bus)?;
            if let Some(out) = &a.out {
                std::fs::write(out, plan.to_json())?;
            }
            print!("{}", cli::compile_report(&plan));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Simulate(a) => {
            let plan = PipelinePlan::from_json(&std::fs::read_to_string(&a.plan)?)?;
            let input = if let Some(pcap) = &a.pcap {
                let packets: Result<Vec<_>, _> = read_pcap(pcap)?.collect();
                SimInput::Packets(packets?.into_iter().map(|(bytes, _)| bytes).collect())
            } else if a.packets > 0 {
                let spec = a.spec.as_ref().ok_or_else(|| {
                    CliError::Usage("--packets needs --spec to generate from".into())
                })?;
                let g = cli::load_graph(&std::fs::read_to_string(spec)?)?;
                SimInput::Random {
                    graph: Box::new(g),
                    count: a.packets,
                    seed: a.seed,
                }
            } else {
                SimInput::Packets(Vec::new())
            };
            let out = cli::cmd_simulate(&plan, input, a.trace.is_some())?;
            if let Some(path) = &a.out {
                std::fs::write(path, &out.phv_jsonl)?;
            } else {
                print!("{}", out.phv_jsonl);
            }
            if let (Some(path), Some(csv)) = (&a.trace, &out.trace_csv) {
                std::fs::write(path, csv)?;
            }
            eprint!("{}", out.report());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare(a) => {
            let text = std::fs::read_to_string(&a.spec)?;
            let g = cli::load_graph(&text)?;
            let plan = match &a.plan {
                Some(p) => PipelinePlan::from_json(&std::fs::read_to_string(p)?)?,
                None => cli::cmd_compile(&text, a.bus)?,
            };
            let out = cli::cmd_compare(&g, &plan, a.packets, a.seed)?;
            if out.mismatches == 0 {
                println!("equivalent: {} packets, 0 mismatches", out.packets);
                Ok(ExitCode::SUCCESS)
            } else {
                println!(
                    "MISMATCH: {} of {} packets diverged",
                    out.mismatches, out.packets
                );
                if let Some(report) = &out.divergence_report {
                    print!("{report}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Cmd::Dot(a) => {
            let stage: GraphStage = a.stage.parse().map_err(CliError::Usage)?;
            let text = std::fs::read_to_string(&a.spec)?;
            print!("{}", cli::cmd_dot(&text, stage)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Stats(a) => {
            let plan = PipelinePlan::from_json(&std::fs::read_to_string(&a.plan)?)?;
            print!("{}", cli::cmd_stats(&plan, a.clock_mhz));
            Ok(ExitCode::SUCCESS)
        }
    }
}
