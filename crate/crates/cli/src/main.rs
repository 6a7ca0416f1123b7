use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Throughput, latency and memory-traffic models for pipelined world-model inference.
#[derive(Parser, Debug)]
#[command(name = "wmpipe", version, about, long_about = None)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory that relative output paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Output format. Defaults to the extension of the output file, else json.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pick the DiT/VAE device split with the highest predicted FPS.
    Allocate(AllocateArgs),
    /// Run the discrete-event pipeline simulator.
    Simulate(SimulateArgs),
    /// Replay a trace through a next-action predictor.
    Speculate(SpeculateArgs),
    /// Replay a trace through the latent extrapolation gate.
    Extrapolate(ExtrapolateArgs),
    /// Plan operator fusion for a graph and report HBM traffic.
    Fuse(FuseArgs),
    /// Execute a graph unfused and fused, and compare outputs.
    FuseExec(FuseExecArgs),
    /// Fit alpha and beta to measured DiT step times.
    Calibrate(CalibrateArgs),
    /// Compute the optimization-stage ladder for a scenario.
    Ablation(AblationArgs),
    /// Write a synthetic action trace.
    GenTrace(GenTraceArgs),
    /// Convert a saved report into plot data.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct AllocateArgs {
    /// Hardware and workload profile (JSON).
    #[arg(long)]
    pub profile: PathBuf,
    /// Total devices to split.
    #[arg(long, alias = "n-total", default_value_t = 8)]
    pub devices: u32,
    #[arg(long, default_value_t = 2)]
    pub min_dit: u32,
    #[arg(long, value_enum, default_value_t = ModelMode::Profiled)]
    pub mode: ModelMode,
    /// Include every feasible split in the JSON output.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelMode {
    Profiled,
    Analytic,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Simulation config (JSON). Overrides the stage flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    pub n_dit: Option<u32>,
    #[arg(long, required_unless_present = "config")]
    pub n_vae: Option<u32>,
    /// DiT step time per frame, ms.
    #[arg(long, required_unless_present = "config")]
    pub t_dit: Option<f64>,
    /// Single-worker decode time, ms.
    #[arg(long, required_unless_present = "config")]
    pub t_vae: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub transfer_ms: f64,
    /// Split every frame across all decode workers.
    #[arg(long)]
    pub spatial: bool,
    #[arg(long)]
    pub frames: Option<u64>,
    /// Action trace (JSONL).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Full report including per-frame records.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub gantt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpeculateArgs {
    /// Action trace (JSONL). Without it, a constant trace of `--frames` actions is used.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// markov:K, bernoulli:P, oracle or anti_oracle.
    #[arg(long, default_value = "markov:1")]
    pub predictor: String,
    /// Full-pipeline latency paid on a miss, ms.
    #[arg(long, default_value_t = 38.0)]
    pub t_sys: f64,
    #[arg(long, default_value_t = 0.1)]
    pub t_overhead: f64,
    /// Use only the first N frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Latency histogram (CSV).
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtrapolateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// constvel, or a path to a dynamics JSON document.
    #[arg(long, default_value = "constvel")]
    pub dynamics: String,
    /// Latent dimension for constvel.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Per-component velocity for constvel.
    #[arg(long, default_value_t = 0.1)]
    pub velocity: f64,
    /// Divergence threshold, or `auto`.
    #[arg(long, default_value = "auto")]
    pub tau: String,
    #[arg(long = "lambda", default_value_t = 1.0)]
    pub lam: f64,
    /// Action embedding table (JSON). Defaults to one-hot over the trace alphabet.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    /// Refresh the motion vector after extrapolated frames too.
    #[arg(long)]
    pub update_v_on_hit: bool,
    /// DiT interval, decode time and decoder count for a throughput estimate.
    #[arg(long, num_args = 3, value_names = ["T_DIT", "T_VAE", "N_VAE"])]
    pub pipeline: Option<Vec<f64>>,
    /// Full run including the trajectory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-frame decision and error series (CSV).
    #[arg(long)]
    pub errors: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// On-chip buffer budget, bytes.
    #[arg(long, default_value_t = 2_097_152)]
    pub sram: u64,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Per-group CSV report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Summary output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseExecArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Fusion plan (JSON). Planned from `--sram` when absent.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 2_097_152)]
    pub sram: u64,
    /// Exit with status 4 when outputs differ by more than `--rtol`.
    #[arg(long)]
    pub check: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Profile whose profiled DiT times are fitted.
    #[arg(long, required_unless_present = "sample")]
    pub profile: Option<PathBuf>,
    /// Measured step time as N:MS. Repeatable.
    #[arg(long)]
    pub sample: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the report path named in the scenario.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Overrides the waterfall path named in the scenario.
    #[arg(long)]
    pub waterfall: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenTraceArgs {
    /// Trace spec (JSON). Overrides the model flags below.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "forward,left,right,back")]
    pub alphabet: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub length: usize,
    #[arg(long, value_enum, default_value_t = TraceKind::Persistence)]
    pub model: TraceKind,
    /// Switch probability for the persistence model.
    #[arg(long, default_value_t = 0.07)]
    pub q: f64,
    /// Action cycle for the scripted model.
    #[arg(long, value_delimiter = ',')]
    pub script: Vec<String>,
    #[arg(long, default_value_t = 38.0)]
    pub interval_ms: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceKind {
    Persistence,
    Uniform,
    Scripted,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// waterfall, gantt or latency_hist.
    #[arg(long)]
    pub kind: String,
    /// Ablation report for waterfall, simulation report otherwise.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Shared output settings.
pub struct Ctx {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: Option<Format>,
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<wmpipe::Error>() {
            return match e {
                wmpipe::Error::Equivalence(_) => 4,
                e if e.is_config() => 2,
                e if e.is_infeasible() => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
        format: cli.format,
    };
    let result = match cli.command {
        Command::Allocate(a) => commands::allocate(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Speculate(a) => commands::speculate(&ctx, a),
        Command::Extrapolate(a) => commands::extrapolate(&ctx, a),
        Command::Fuse(a) => commands::fuse(&ctx, a),
        Command::FuseExec(a) => commands::fuse_exec(&ctx, a),
        Command::Calibrate(a) => commands::calibrate(&ctx, a),
        Command::Ablation(a) => commands::ablation(&ctx, a),
        Command::GenTrace(a) => commands::gen_trace(&ctx, a),
        Command::Export(a) => commands::export(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let status = |e: wmpipe::Error| exit_status(&anyhow::Error::from(e));
        assert_eq!(status(wmpipe::Error::Configuration("x".into())), 2);
        assert_eq!(
            status(wmpipe::Error::Schema {
                field: "hardware.bw_hbm".into(),
                message: "missing".into()
            }),
            2
        );
        assert_eq!(
            status(wmpipe::Error::NoFeasibleSplit {
                h_heads: 7,
                min_dit: 2,
                max_dit: 3
            }),
            3
        );
        assert_eq!(status(wmpipe::Error::Equivalence("x".into())), 4);
        let wrapped = anyhow::Error::from(wmpipe::Error::Fit("x".into())).context("calibrating");
        assert_eq!(exit_status(&wrapped), 3);
        assert_eq!(exit_status(&anyhow::anyhow!("other")), 1);
    }
}
