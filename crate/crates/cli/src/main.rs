//! `peft`: quantize tensors, train toy adapters, audit gradients and score
//! summaries from the command line.
//!
//! Machine-readable JSON goes to stdout, human-readable text to stderr.
//! Exit codes: 0 ok, 2 bad file format, 64 usage, 65 bad data, 66 missing file.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use peft_core::metrics::{score_corpus, Document, Metric, TokenizerOptions};
use peft_core::quantize::{dequantize_with, AffineMode, Codec, QuantScheme, QuantizedTensor, DEFAULT_SUPER_BLOCK};
use peft_core::trainer::{compression_report, finite_difference_audit, train_model_with, write_checkpoint, RunConfig};
use peft_core::{Error, Exec, Matrix};

const EX_DATAERR_FORMAT: u8 = 2;
const EX_USAGE: u8 = 64;
const EX_DATAERR: u8 = 65;
const EX_NOINPUT: u8 = 66;

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Format(_) => EX_DATAERR_FORMAT,
            Error::Argument(_) => EX_USAGE,
            Error::Io(_) => EX_NOINPUT,
            Error::Shape { .. }
            | Error::Convergence { .. }
            | Error::UndefinedMetric(_)
            | Error::UnmatchedIds(_)
            | Error::Content(_)
            | Error::Divergence { .. } => EX_DATAERR,
        };
        fail(code, e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "peft", version, about = "Adapters, quantization and summary metrics")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a PFT1 tensor into a PFTQ file.
    Quantize(QuantizeArgs),
    /// Expand a PFTQ file back into a PFT1 tensor.
    Dequantize(DequantizeArgs),
    /// Train the toy attention model described by a run config.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients for a run config.
    AuditGrads(AuditArgs),
    /// Score candidates against references with any metric.
    Eval(EvalArgs),
    /// Score candidates with a ROUGE variant.
    EvalRouge(EvalRougeArgs),
    /// Word error rate of hypotheses against references.
    EvalWer(CorpusArgs),
    /// Storage and trainable-parameter table for a run config.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CodecArg {
    Int8,
    Int4,
    Nf4,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Sym,
    Asym,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    codec: CodecArg,
    /// Affine codecs only (default sym).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 64)]
    block: usize,
    #[arg(long)]
    double_quant: bool,
    #[arg(long, default_value_t = DEFAULT_SUPER_BLOCK)]
    super_block: usize,
}

#[derive(Args, Debug)]
struct DequantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Relative error above which the audit is reported as failed.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// Keep letter case when tokenizing.
    #[arg(long)]
    keep_case: bool,
    /// Keep punctuation attached to tokens.
    #[arg(long)]
    keep_punctuation: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Rouge1,
    Rouge2,
    #[value(name = "rougeL")]
    RougeL,
    #[value(name = "rougeS")]
    RougeS,
    Wer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RougeArg {
    Rouge1,
    Rouge2,
    #[value(name = "rougeL")]
    RougeL,
    #[value(name = "rougeS")]
    RougeS,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum)]
    metric: MetricArg,
}

#[derive(Args, Debug)]
struct EvalRougeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "rouge1")]
    metric: RougeArg,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| fail(EX_NOINPUT, format!("cannot open {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| fail(EX_NOINPUT, format!("cannot write {}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(EX_DATAERR, e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let bytes = read_file(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        fail(EX_USAGE, format!("invalid config at {at}: {}", e.inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(path: &Path) -> CliResult<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| fail(EX_NOINPUT, format!("cannot open {}: {e}", path.display())))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| fail(EX_DATAERR_FORMAT, format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| {
            fail(
                EX_DATAERR_FORMAT,
                format!("format error: {}:{}: {e}", path.display(), i + 1),
            )
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

fn cmd_quantize(a: &QuantizeArgs, exec: Exec) -> CliResult<()> {
    let codec = match a.codec {
        CodecArg::Int8 => Codec::AffineInt8,
        CodecArg::Int4 => Codec::AffineInt4,
        CodecArg::Nf4 => Codec::Nf4,
    };
    if codec == Codec::Nf4 && a.mode.is_some() {
        return Err(fail(EX_USAGE, "usage: --mode applies to affine codecs only, not nf4"));
    }
    if a.block == 0 || (a.double_quant && a.super_block == 0) {
        return Err(fail(EX_USAGE, "usage: --block and --super-block must be positive"));
    }
    let mode = match a.mode {
        Some(ModeArg::Asym) => AffineMode::Asymmetric,
        _ => AffineMode::Symmetric,
    };
    let m = Matrix::read_from(read_file(&a.input)?.as_slice())?;
    let scheme = QuantScheme {
        codec,
        mode,
        block_size: a.block,
        double_quant: a.double_quant.then_some(a.super_block),
    };
    let qt = scheme.apply_with(&m, exec)?;
    write_file(&a.out, &qt.to_bytes())?;
    let report = qt.storage_report();
    eprintln!(
        "{} {}x{} block {}: {} bytes (codes {}, constants {}), {:.3}x vs fp32",
        codec.name(),
        m.rows(),
        m.cols(),
        a.block,
        report.total_bytes,
        report.code_bytes,
        report.constant_bytes,
        report.compression_ratio
    );
    print_json(&report)
}

#[derive(Serialize)]
struct DequantizeOutput {
    rows: usize,
    cols: usize,
    codec: &'static str,
}

fn cmd_dequantize(a: &DequantizeArgs, exec: Exec) -> CliResult<()> {
    let qt = QuantizedTensor::from_bytes(&read_file(&a.input)?)?;
    let m = dequantize_with(&qt, exec)?;
    write_file(&a.out, &m.to_bytes())?;
    eprintln!("{}x{} tensor written to {}", m.rows(), m.cols(), a.out.display());
    print_json(&DequantizeOutput {
        rows: m.rows(),
        cols: m.cols(),
        codec: qt.codec().name(),
    })
}

fn cmd_train(a: &TrainArgs, exec: Exec) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let (report, model) = train_model_with(&cfg, exec)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| fail(EX_DATAERR, e.to_string()))?;
    if let Some(out) = &a.out {
        write_file(out, json.as_bytes())?;
    }
    if let Some(dir) = &a.checkpoint {
        let files = write_checkpoint(&model, dir)
            .map_err(|e| fail(EX_NOINPUT, format!("cannot write checkpoint {}: {e}", dir.display())))?;
        eprintln!("checkpoint: {} files in {}", files.len(), dir.display());
    }
    eprintln!(
        "{} steps, loss {:.6} -> {:.6} (validation {:.6}), {} trainable / {} total params, {:.3} ms/step",
        report.loss_curve.len(),
        report.initial_loss,
        report.final_loss,
        report.validation_loss,
        report.trainable_params,
        report.total_params,
        report.mean_step_ms
    );
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct AuditOutput {
    #[serde(flatten)]
    report: peft_core::trainer::AuditReport,
    tolerance: f64,
    passed: bool,
}

fn cmd_audit(a: &AuditArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let report = finite_difference_audit(&cfg, a.epsilon)?;
    let passed = report.max_rel_error <= a.tolerance;
    eprintln!(
        "{} parameters, max relative error {:.3e} ({})",
        report.params_checked,
        report.max_rel_error,
        if passed { "pass" } else { "FAIL" }
    );
    print_json(&AuditOutput {
        report,
        tolerance: a.tolerance,
        passed,
    })
}

fn cmd_eval(a: &CorpusArgs, metric: Metric, exec: Exec) -> CliResult<()> {
    let cands = load_corpus(&a.candidates)?;
    let refs = load_corpus(&a.references)?;
    let opts = TokenizerOptions {
        lowercase: !a.keep_case,
        strip_punctuation: !a.keep_punctuation,
    };
    let report = score_corpus(&cands, &refs, metric, &opts, exec)?;
    eprint!("{}", report.to_text());
    print_json(&report)
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let report = compression_report(&cfg)?;
    eprint!("{}", report.to_text());
    print_json(&report)
}

fn run(cli: Cli) -> CliResult<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, exec),
        Command::Dequantize(a) => cmd_dequantize(a, exec),
        Command::Train(a) => cmd_train(a, exec),
        Command::AuditGrads(a) => cmd_audit(a),
        Command::Eval(a) => {
            let metric = match a.metric {
                MetricArg::Rouge1 => Metric::Rouge1,
                MetricArg::Rouge2 => Metric::Rouge2,
                MetricArg::RougeL => Metric::RougeL,
                MetricArg::RougeS => Metric::RougeS,
                MetricArg::Wer => Metric::Wer,
            };
            cmd_eval(&a.corpus, metric, exec)
        }
        Command::EvalRouge(a) => {
            let metric = match a.metric {
                RougeArg::Rouge1 => Metric::Rouge1,
                RougeArg::Rouge2 => Metric::Rouge2,
                RougeArg::RougeL => Metric::RougeL,
                RougeArg::RougeS => Metric::RougeS,
            };
            cmd_eval(&a.corpus, metric, exec)
        }
        Command::EvalWer(a) => cmd_eval(a, Metric::Wer, exec),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EX_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let first = f.msg.lines().next().unwrap_or("");
            eprintln!("error: {first}");
            ExitCode::from(f.code)
        }
    }
}
