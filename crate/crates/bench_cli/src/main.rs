//! `bench_cli`: forward timing, gradient checks, the cost sweep, the
//! verification suites, toy training and the block comparison table.
//!
//! Exit codes: 0 success, 2 verification or training failure, 3 usage
//! error, 4 I/O or FLT1 format error.
//!
//! CSV reals use Rust's shortest round-trip formatting, except the `gflops`
//! column of `table4`, which is printed with two decimals. Columns holding
//! wall-clock times are named `*_ms` and are the only nondeterministic ones.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fla_core::blocks::{default_reduction, forward, grad_check_block, load_checkpoint, BlockKind, BlockParams};
use fla_core::cost::{self, CostConfig, CostReport};
use fla_core::tensor::{read_file, sum_squares, write_file, DType, Rng};
use fla_core::train::{run_task, TaskKind, TaskSpec, DEFAULT_LR};
use fla_core::verify::{run_verify, Fault, VerifyConfig, DEFAULT_CASES, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use fla_core::Error;

const EXIT_FAILURE: u8 = 2;
const EXIT_USAGE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "bench_cli", version, about = "Non-local attention block benchmarks and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time forward passes; optionally read/write FLT1 tensors.
    Forward(ForwardArgs),
    /// Compare tape gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Analytic FLOPs and activation memory over a shape grid.
    Cost(CostArgs),
    /// Run the verification suites.
    Verify(VerifyArgs),
    /// Train a block on a synthetic task.
    Train(TrainArgs),
    /// Per-kind comparison at the anchor configuration.
    Table4(Table4Args),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        let parse = |p: &str| match p.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("expected CxHxW with positive integers, got `{s}`")),
        };
        match parts.as_slice() {
            [c, h, w] => Ok(Shape {
                c: parse(c)?,
                h: parse(h)?,
                w: parse(w)?,
            }),
            _ => Err(format!("expected CxHxW, got `{s}`")),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Comma-separated kind list; an empty string selects no kinds.
#[derive(Clone, Debug, PartialEq, Eq)]
struct KindFilter(Vec<BlockKind>);

impl FromStr for KindFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.parse::<BlockKind>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()
            .map(KindFilter)
    }
}

fn kinds(filters: &[KindFilter]) -> Vec<BlockKind> {
    if filters.is_empty() {
        return BlockKind::ALL.to_vec();
    }
    let mut out: Vec<BlockKind> = filters.iter().flat_map(|f| f.0.iter().copied()).collect();
    out.sort();
    out.dedup();
    out
}

#[derive(Args, Debug)]
struct Common {
    /// Block kinds, comma-separated or repeated; default all.
    #[arg(long = "kind")]
    kinds: Vec<KindFilter>,
    /// Feature-map shape `CxHxW`; repeatable.
    #[arg(long = "shape")]
    shapes: Vec<Shape>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Spatial NL reduction ratio; default the largest divisor of C up to 8.
    #[arg(long)]
    reduction: Option<usize>,
}

impl Common {
    fn shapes_or(&self, default: Shape) -> Vec<Shape> {
        if self.shapes.is_empty() {
            vec![default]
        } else {
            self.shapes.clone()
        }
    }

    fn reduction_for(&self, c: usize) -> usize {
        self.reduction.unwrap_or_else(|| default_reduction(c))
    }
}

#[derive(Args, Debug)]
struct ForwardArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory with block parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    /// FLT1 input tensor; the output keeps its dtype.
    #[arg(long)]
    input: Option<PathBuf>,
    /// FLT1 output tensor (single kind and shape only).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = GRADCHECK_STEP)]
    step: f64,
    #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// Count only the attention matrix products.
    #[arg(long)]
    matmuls_only: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Random cases per kind for the randomized suites.
    #[arg(long, default_value_t = DEFAULT_CASES)]
    cases: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    SoftmaxAxis,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "full_mix")]
    task: TaskArg,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
}

#[derive(Clone, Copy, Debug)]
struct TaskArg(TaskKind);

impl FromStr for TaskArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse::<TaskKind>().map(TaskArg).map_err(|e| e.to_string())
    }
}

#[derive(Args, Debug)]
struct Table4Args {
    #[command(flatten)]
    common: Common,
    /// Shape used for the wall-clock column.
    #[arg(long, default_value = "64x24x24")]
    timing_shape: Shape,
}

/// Command failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failed(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => EXIT_IO,
            Error::Config(_) | Error::Dimension { .. } | Error::InvalidTensor(_) | Error::Overflow(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure {
            code: EXIT_IO,
            message: format!("I/O error on {}: {e}", path.display()),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Pads CSV columns for reading.
fn humanize(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|i| rows.iter().filter_map(|r| r.get(i)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(i, c)| format!("{c:<w$}", w = widths[i])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn render(csv: String, format: Format) -> String {
    match format {
        Format::Csv => csv,
        Format::Human => humanize(&csv),
    }
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

/// Median wall-clock milliseconds of `reps` runs after one warm-up.
fn time_ms<T>(reps: u64, mut f: impl FnMut() -> fla_core::Result<T>) -> fla_core::Result<(f64, T)> {
    let mut last = f()?;
    let mut samples = Vec::with_capacity(reps as usize);
    for _ in 0..reps {
        let t0 = Instant::now();
        last = f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median_ms(samples), last))
}

fn sweep_threads() -> Result<usize, Failure> {
    match std::env::var("FLA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::usage(format!("FLA_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn cmd_forward(a: &ForwardArgs) -> CmdResult {
    let c = &a.common;
    let loaded = a.params.as_deref().map(load_checkpoint).transpose()?;
    let input = a.input.as_deref().map(read_file).transpose()?;
    let kinds = match &loaded {
        Some(p) => vec![p.kind()],
        None => kinds(&c.kinds),
    };
    let shapes = match &input {
        Some((t, _)) => {
            if t.rank() != 3 {
                return Err(Failure::usage(format!("input must be C×H×W, got shape {:?}", t.shape())));
            }
            vec![Shape {
                c: t.shape()[0],
                h: t.shape()[1],
                w: t.shape()[2],
            }]
        }
        None => c.shapes_or(Shape { c: 8, h: 8, w: 8 }),
    };
    if a.output.is_some() && kinds.len() * shapes.len() != 1 {
        return Err(Failure::usage("--output needs exactly one kind and one shape"));
    }

    let mut csv = String::from("kind,C,H,W,reps,output_sum_squares,median_ms\n");
    for &kind in &kinds {
        for &s in &shapes {
            let mut rng = Rng::new(c.seed);
            let params = match &loaded {
                Some(p) => p.clone(),
                None => BlockParams::random(kind, s.c, c.reduction_for(s.c), &mut rng)?,
            };
            let x = match &input {
                Some((t, _)) => t.clone(),
                None => rng.uniform_tensor(&[s.c, s.h, s.w], -1.0, 1.0)?,
            };
            let (ms, out) = time_ms(c.reps, || Ok(forward(&params, &x)?.output))?;
            csv.push_str(&format!(
                "{kind},{},{},{},{},{:?},{ms:?}\n",
                s.c,
                s.h,
                s.w,
                c.reps,
                sum_squares(&out)
            ));
            if let Some(path) = &a.output {
                let dtype = input.as_ref().map(|(_, d)| *d).unwrap_or(DType::F64);
                write_file(path, &out, dtype)?;
            }
        }
    }
    emit(c.out.as_deref(), &render(csv, c.format))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let c = &a.common;
    let mut csv = String::from("kind,C,H,W,coords,max_rel_err,max_abs_err,worst_param,status\n");
    let mut all_passed = true;
    for kind in kinds(&c.kinds) {
        for s in c.shapes_or(Shape { c: 4, h: 3, w: 3 }) {
            let mut rng = Rng::new(c.seed);
            let params = BlockParams::random(kind, s.c, c.reduction_for(s.c), &mut rng)?;
            let x = rng.uniform_tensor(&[s.c, s.h, s.w], -1.0, 1.0)?;
            let report = grad_check_block(&params, &x, a.step)?;
            let passed = report.passed(a.tolerance);
            all_passed &= passed;
            csv.push_str(&format!(
                "{kind},{},{},{},{},{:?},{:?},{},{}\n",
                s.c,
                s.h,
                s.w,
                report.params.iter().map(|p| p.coords).sum::<usize>(),
                report.max_rel_err(),
                report.max_abs_err(),
                report.worst().map(|p| p.name.as_str()).unwrap_or("-"),
                if passed { "pass" } else { "fail" }
            ));
        }
    }
    emit(c.out.as_deref(), &render(csv, c.format))?;
    if all_passed {
        Ok(())
    } else {
        Err(Failure::failed(format!("gradient check above tolerance {:?}", a.tolerance)))
    }
}

fn cmd_cost(a: &CostArgs) -> CmdResult {
    let c = &a.common;
    let anchor = CostConfig::anchor();
    let shapes: Vec<(u64, u64, u64)> = c
        .shapes_or(Shape {
            c: anchor.channels as usize,
            h: anchor.height as usize,
            w: anchor.width as usize,
        })
        .iter()
        .map(|s| (s.c as u64, s.h as u64, s.w as u64))
        .collect();
    let mut base = CostConfig::anchor();
    if a.matmuls_only {
        base = base.matmuls_only();
    }
    let kinds = kinds(&c.kinds);
    let mut reports = Vec::new();
    // The reduction default depends on C, so each channel count is swept on
    // its own.
    let mut channel_counts: Vec<u64> = shapes.iter().map(|s| s.0).collect();
    channel_counts.sort();
    channel_counts.dedup();
    let threads = sweep_threads()?;
    for ch in channel_counts {
        let group: Vec<_> = shapes.iter().copied().filter(|s| s.0 == ch).collect();
        let cfg = CostConfig {
            reduction: c.reduction_for(ch as usize) as u64,
            ..base
        };
        if !kinds.is_empty() {
            reports.extend(cost::sweep(&kinds, &group, &cfg, threads)?);
        }
    }
    // kind-major, then shape
    reports.sort_by_key(|r: &CostReport| (r.kind, r.config.channels, r.config.height, r.config.width));
    emit(c.out.as_deref(), &render(cost::to_csv(&reports), c.format))
}

fn cmd_verify(a: &VerifyArgs) -> CmdResult {
    let c = &a.common;
    let cfg = VerifyConfig {
        seed: c.seed,
        cases_per_kind: a.cases,
        fault: match a.inject_fault {
            Some(FaultArg::SoftmaxAxis) => Fault::CorruptSoftmaxAxis,
            None => Fault::None,
        },
    };
    let report = run_verify(&cfg)?;
    let text = match c.format {
        Format::Human => report.to_text(),
        Format::Csv => {
            let mut s = String::from("suite,status,cases,max_err,tol\n");
            for r in &report.suites {
                s.push_str(&format!(
                    "{},{},{},{:?},{:?}\n",
                    r.name,
                    if r.passed { "pass" } else { "fail" },
                    r.cases,
                    r.max_err,
                    r.tolerance
                ));
            }
            s
        }
    };
    emit(c.out.as_deref(), &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::failed("verification failed"))
    }
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let c = &a.common;
    let kind = match kinds(&c.kinds).as_slice() {
        [k] if !c.kinds.is_empty() => *k,
        _ if c.kinds.is_empty() => BlockKind::Fla,
        _ => return Err(Failure::usage("train takes exactly one --kind")),
    };
    let s = match c.shapes.as_slice() {
        [] => Shape { c: 4, h: 6, w: 6 },
        [s] => *s,
        _ => return Err(Failure::usage("train takes at most one --shape")),
    };
    let spec = TaskSpec {
        steps: a.steps,
        lr: a.lr,
        ..TaskSpec::new(a.task.0, s.c, s.h, s.w, c.seed)
    };
    let (report, failure) = match run_task(&spec, kind) {
        Ok(r) => (r, None),
        Err(Error::Diverged { step, loss, report }) => {
            (*report, Some(Failure::failed(format!("training diverged at step {step} (loss {loss:?})"))))
        }
        Err(e) => return Err(e.into()),
    };
    let text = match c.format {
        Format::Csv => report.to_csv(),
        Format::Human => format!(
            "task={} kind={kind} shape={s} seed={} steps={} lr={:?} initial_loss={:?} final_loss={:?} ratio={:?}\n",
            spec.kind,
            spec.seed,
            report.steps,
            spec.lr,
            report.initial_loss(),
            report.final_loss(),
            report.ratio
        ),
    };
    emit(c.out.as_deref(), &text)?;
    failure.map_or(Ok(()), Err)
}

fn cmd_table4(a: &Table4Args) -> CmdResult {
    let c = &a.common;
    let kinds = kinds(&c.kinds);
    let ts = a.timing_shape;
    let mut csv = String::from("kind,gflops,attn_elements,activation_mb,timing_shape,wall_ms\n");
    let mut rows: Vec<(BlockKind, CostReport, f64)> = Vec::new();
    for &kind in &kinds {
        let report = cost::estimate(kind, &CostConfig::anchor())?;
        let mut rng = Rng::new(c.seed);
        let params = BlockParams::random(kind, ts.c, c.reduction_for(ts.c), &mut rng)?;
        let x = rng.uniform_tensor(&[ts.c, ts.h, ts.w], -1.0, 1.0)?;
        let (ms, _) = time_ms(c.reps, || forward(&params, &x))?;
        csv.push_str(&format!(
            "{kind},{:.2},{},{:?},{ts},{ms:?}\n",
            report.gflops(),
            report.attention_map_elements,
            report.activation_megabytes()
        ));
        rows.push((kind, report, ms));
    }
    let find = |k| rows.iter().find(|r| r.0 == k);
    if let (Some(fla), Some(dual)) = (find(BlockKind::Fla), find(BlockKind::DualNl)) {
        csv.push_str(&format!(
            "fla/dual,{:?},{:?},{:?},{ts},{:?}\n",
            fla.1.flops_total as f64 / dual.1.flops_total as f64,
            fla.1.attention_map_elements as f64 / dual.1.attention_map_elements as f64,
            fla.1.activation_bytes_peak as f64 / dual.1.activation_bytes_peak as f64,
            fla.2 / dual.2
        ));
    }
    emit(c.out.as_deref(), &render(csv, c.format))
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Forward(a) => cmd_forward(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
        Command::Table4(a) => cmd_table4(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bench_cli: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
