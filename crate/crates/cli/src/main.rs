//! `mtsa`: equivalence suite, gradient check, scaling benchmarks, toy
//! training, heatmap export and parameter initialization.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mtsa_core::bench::{run_bench, write_bench_csv, BenchImpl, BenchOptions};
use mtsa_core::equiv::{run_equiv, EquivOptions};
use mtsa_core::grad::{grad_check, GradCheckConfig, GradCheckReport};
use mtsa_core::heatmap::{heatmap_bundle, parse_tokens, write_heatmaps};
use mtsa_core::masks::MaskKind;
use mtsa_core::mtsa_fast::{read_params, write_params, AttentionConfig, MtsaParams, ScoreDivisor};
use mtsa_core::numkit::{DType, Rng};
use mtsa_core::toytask::{train_eval, write_metrics, ToyConfig, Variant};
use mtsa_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK_FAILED: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mtsa", version, about = "Multi-mask tensorized self-attention tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Randomized fast-vs-naive equivalence suite; prints a JSON report.
    Equiv(EquivArgs),
    /// Reverse-mode vs finite-difference gradients; prints a JSON report.
    Gradcheck(GradcheckArgs),
    /// Time and memory per implementation and sequence length, as CSV.
    Bench(BenchArgs),
    /// Train on the synthetic order task and print eval accuracy.
    TrainToy(TrainArgs),
    /// Export token2token heatmaps and source2token scores.
    Heatmap(HeatmapArgs),
    /// Write a freshly initialized parameter container.
    Init(InitArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Divisor {
    /// sqrt(d_i)
    Di,
    /// sqrt(d_h)
    Dh,
}

#[derive(Debug, Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 32)]
    n_max: usize,
    #[arg(long, default_value_t = 16)]
    dims_max: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    heads: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    dtype: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token2token divisor used by the fast path. The naive path always
    /// divides by sqrt(d_i), so `dh` fails whenever d_i != d_h.
    #[arg(long, value_enum, default_value_t = Divisor::Di)]
    step3_divisor: Divisor,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Any of naive, fast, multihead_dot, conv_baseline.
    #[arg(long, value_delimiter = ',', default_value = "naive,fast,multihead_dot,conv_baseline")]
    impls: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512,1024")]
    lens: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    dtype: Precision,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Evaluate heads of the fast path on separate threads.
    #[arg(long)]
    parallel_heads: bool,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "fwbw")]
    variant: Variant,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// JSON toy configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    /// Parameter container; its `.json` sidecar must sit next to it.
    #[arg(long)]
    params: PathBuf,
    /// One token per line: `label<TAB>v1 v2 …`.
    #[arg(long)]
    input: PathBuf,
    /// Output prefix for `_head{c}_t2t.pgm`, `_t2t.csv` and `_s2t.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InitArgs {
    /// JSON layer configuration, optionally with a `masks` list.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    dtype: Precision,
    #[arg(long)]
    out: PathBuf,
}

/// A command's failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn check_failed(message: String) -> Failure {
    Failure {
        code: EXIT_CHECK_FAILED,
        message,
    }
}

fn cmd_equiv(a: EquivArgs) -> CmdResult {
    let opts = EquivOptions {
        trials: a.trials,
        n_max: a.n_max,
        dims_max: a.dims_max,
        heads: a.heads,
        dtype: a.dtype.into(),
        seed: a.seed,
        score_divisor: match a.step3_divisor {
            Divisor::Di => ScoreDivisor::KeyDim,
            Divisor::Dh => ScoreDivisor::HeadDim,
        },
    };
    let report = run_equiv(&opts)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = a.report {
        fs::write(path, &json)?;
    }
    eprint!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(check_failed(format!(
            "{} of {} configurations exceed {:e}",
            report.failures, report.trials, report.tolerance
        )))
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.instances == 0 {
        return Err(Error::Config("instances must be >= 1".into()).into());
    }
    let cfg = GradCheckConfig {
        tol: a.tol,
        ..GradCheckConfig::default()
    };
    let mut rng = Rng::new(a.seed);
    let mut total: Option<GradCheckReport> = None;
    for _ in 0..a.instances {
        let r = grad_check(&cfg, &mut rng)?;
        match total.as_mut() {
            Some(t) => t.merge(&r),
            None => total = Some(r),
        }
    }
    let report = total.expect("at least one instance");
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed {
        Ok(())
    } else {
        Err(check_failed(format!(
            "max relative error {:e} at {}{:?} exceeds {:e}",
            report.max_rel_error, report.worst_param, report.worst_index, report.tol
        )))
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let impls = a
        .impls
        .iter()
        .map(|s| s.parse::<BenchImpl>())
        .collect::<Result<Vec<_>, _>>()?;
    let opts = BenchOptions {
        impls,
        lens: a.lens,
        batch: a.batch,
        d_model: a.d_model,
        heads: a.heads,
        seed: a.seed,
        dtype: a.dtype.into(),
        parallel_heads: a.parallel_heads,
        repeats: a.repeats,
        ..BenchOptions::default()
    };
    let records = run_bench(&opts)?;
    write_bench_csv(&records, fs::File::create(&a.out)?)?;
    eprintln!("wrote {} rows to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_train_toy(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => ToyConfig::default(),
    };
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let report = train_eval(&cfg, a.variant)?;
    if let Some(path) = &a.metrics {
        write_metrics(&report.metrics, fs::File::create(path)?)?;
    }
    println!("{}", report.eval_accuracy);
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> CmdResult {
    let (params, cfg) = read_params::<f64>(&a.params)?;
    let (labels, x) = parse_tokens(&fs::read_to_string(&a.input)?, cfg.d_e)?;
    let bundle = heatmap_bundle(&params, &cfg, labels, &x)?;
    for path in write_heatmaps(&bundle, &a.out)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn read_init_config(path: &Path) -> Result<(AttentionConfig, Option<Vec<MaskKind>>), Failure> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let masks = value
        .get("masks")
        .map(|m| serde_json::from_value(m.clone()))
        .transpose()?;
    let cfg: AttentionConfig = serde_json::from_value(value)?;
    Ok((cfg, masks))
}

fn cmd_init(a: InitArgs) -> CmdResult {
    let (cfg, masks) = read_init_config(&a.config)?;
    let mut params = MtsaParams::<f64>::init(&cfg, &mut Rng::new(a.seed))?;
    if let Some(m) = masks {
        params = params.with_masks(m);
    }
    match DType::from(a.dtype) {
        DType::F64 => write_params(&a.out, &params, &cfg)?,
        DType::F32 => write_params(&a.out, &params.cast::<f32>(), &cfg)?,
    }
    eprintln!("wrote {} parameters to {}", params.param_count(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Equiv(a) => cmd_equiv(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Init(a) => cmd_init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mtsa: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
