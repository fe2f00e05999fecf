//! `mx` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 malformed file, 4 training diverged.
//! Reports go to stdout as one JSON object per line; diagnostics go to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::block::{QuantConfig, DEFAULT_BLOCK_SIZE};
use crate::element::{ElementFormat, RoundingMode};
use crate::error::MxError;
use crate::flow::{demo_flow, gemm, train_demo, GemmOperand, DEMO_SEED, DEMO_STEPS};
use crate::io::{read_f32, read_mxt, write_f32, write_mxt, FileError};
use crate::linalg::compare_to_fp32;
use crate::metrics::ErrorReport;
use crate::tensor::{dequantize_tensor, quantize_tensor_with_stats, Fp32Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mx", version, about = "Microscaling (MX) format quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize an F32 tensor file into an MXT file and report the error.
    Quantize(QuantizeArgs),
    /// Expand an MXT file back into an F32 tensor file.
    Dequantize {
        input: PathBuf,
        output: PathBuf,
    },
    /// Multiply two F32 matrices through MX quantization.
    Gemm(GemmArgs),
    /// Train the demo MLP and write its loss trajectory as CSV.
    TrainDemo(TrainArgs),
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    input: PathBuf,
    output: PathBuf,
    /// mxint8, mxfp8_e4m3, mxfp8_e5m2, mxfp6_e2m3, mxfp6_e3m2 or mxfp4
    #[arg(long)]
    format: ElementFormat,
    /// Principal axis; defaults to the last one.
    #[arg(long)]
    axis: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    /// rne or rhaz
    #[arg(long, default_value = "rne")]
    rounding: RoundingMode,
}

/// An MX element format or `fp32` for no quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Precision(Option<ElementFormat>);

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("fp32") {
            Ok(Precision(None))
        } else {
            s.parse().map(|f| Precision(Some(f)))
        }
    }
}

#[derive(Debug, Args)]
struct GemmArgs {
    /// `[M, K]` F32 file
    a: PathBuf,
    /// `[K, N]` F32 file
    b: PathBuf,
    /// Output `[M, N]` F32 file
    output: PathBuf,
    /// Format for both operands unless overridden per operand.
    #[arg(long, default_value = "mxfp8_e4m3")]
    format: Precision,
    #[arg(long)]
    format_a: Option<Precision>,
    #[arg(long)]
    format_b: Option<Precision>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    #[arg(long, default_value = "rne")]
    rounding: RoundingMode,
    /// Compare against the unquantized FP32 product and print a report.
    #[arg(long)]
    reference: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "mxfp6_e3m2")]
    weight_format: Precision,
    #[arg(long, default_value = "mxfp6_e3m2")]
    act_format: Precision,
    /// Defaults to the activation format.
    #[arg(long)]
    grad_format: Option<Precision>,
    #[arg(long, default_value_t = DEMO_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEMO_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// A failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<FileError> for Failure {
    fn from(e: FileError) -> Self {
        Failure {
            code: if e.is_io() { EXIT_IO } else { EXIT_FORMAT },
            message: e.to_string(),
        }
    }
}

impl From<MxError> for Failure {
    fn from(e: MxError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
    };
    let result = match cli.command {
        Command::Quantize(args) => quantize(args, stdout),
        Command::Dequantize { input, output } => dequantize(input, output),
        Command::Gemm(args) => run_gemm(args, stdout),
        Command::TrainDemo(args) => run_train(args, stderr),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn print_report(stdout: &mut dyn Write, report: &ErrorReport) -> Result<(), Failure> {
    let line = serde_json::to_string(report).expect("report serializes");
    writeln!(stdout, "{line}")?;
    Ok(())
}

fn quantize(args: QuantizeArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let input = read_f32(&args.input)?;
    if input.rank() == 0 || input.is_empty() {
        return Err(Failure::usage(format!(
            "input tensor has empty dims {:?}",
            input.shape()
        )));
    }
    let axis = args.axis.unwrap_or(input.rank() - 1);
    if axis >= input.rank() {
        return Err(Failure::usage(format!(
            "--axis {axis} out of range for rank {}",
            input.rank()
        )));
    }
    let cfg = QuantConfig::new(args.format)
        .with_block_size(args.block_size)
        .with_rounding(args.rounding);
    cfg.validate().map_err(|e| Failure::usage(format!("--block-size: {e}")))?;
    let (mt, stats) = quantize_tensor_with_stats(&input, axis, &cfg)?;
    let restored = dequantize_tensor(&mt);
    write_mxt(&args.output, &mt)?;
    let mut report = compare_to_fp32(&restored, &input)?;
    report.clamped_lane_count = stats.clamped_lanes;
    report.nan_block_count = stats.nan_blocks;
    print_report(stdout, &report)?;
    Ok(EXIT_OK)
}

fn dequantize(input: PathBuf, output: PathBuf) -> Result<i32, Failure> {
    let mt = read_mxt(&input)?;
    write_f32(&output, &dequantize_tensor(&mt))?;
    Ok(EXIT_OK)
}

fn operand(t: &Fp32Tensor, axis: usize, p: Precision, block_size: usize, rounding: RoundingMode) -> Result<GemmOperand, Failure> {
    match p.0 {
        None => Ok(GemmOperand::Fp32(t.clone())),
        Some(fmt) => {
            let cfg = QuantConfig::new(fmt)
                .with_block_size(block_size)
                .with_rounding(rounding);
            cfg.validate().map_err(|e| Failure::usage(format!("--block-size: {e}")))?;
            Ok(GemmOperand::Mx(quantize_tensor_with_stats(t, axis, &cfg)?.0))
        }
    }
}

fn run_gemm(args: GemmArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let a = read_f32(&args.a)?;
    let b = read_f32(&args.b)?;
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] || a.is_empty() || b.is_empty() {
        return Err(Failure::usage(format!(
            "cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let qa = operand(&a, 1, args.format_a.unwrap_or(args.format), args.block_size, args.rounding)?;
    let qb = operand(&b, 0, args.format_b.unwrap_or(args.format), args.block_size, args.rounding)?;
    let out = gemm(&qa, &qb)?;
    write_f32(&args.output, &out)?;
    if args.reference {
        let reference = gemm(&GemmOperand::Fp32(a), &GemmOperand::Fp32(b))?;
        let mut report = compare_to_fp32(&out, &reference)?;
        report.nan_block_count = [&qa, &qb]
            .iter()
            .map(|op| match op {
                GemmOperand::Mx(mt) => mt.nan_block_count(),
                GemmOperand::Fp32(_) => 0,
            })
            .sum();
        print_report(stdout, &report)?;
    }
    Ok(EXIT_OK)
}

fn run_train(args: TrainArgs, stderr: &mut dyn Write) -> Result<i32, Failure> {
    let flow = demo_flow(args.weight_format.0, args.act_format.0, args.grad_format.map(|p| p.0));
    let outcome = train_demo(&flow, args.seed, args.steps)?;
    let mut csv = String::from("step,loss,grad_norm\n");
    for r in &outcome.records {
        let _ = writeln!(csv, "{},{},{}", r.step, r.loss, r.grad_norm);
    }
    std::fs::write(&args.out, csv)?;
    if outcome.diverged {
        let _ = writeln!(stderr, "training diverged at step {}", outcome.records.len() - 1);
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}
