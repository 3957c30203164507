//! Command-line front end: runs the link experiments and writes result
//! records as CSV (stdout by default), or computes SNR gaps from a CSV.
//!
//! Exit codes: 0 success, 2 invalid spec or arguments, 3 every training in
//! the run diverged, 4 a requested gap never crosses the target BER.

use clap::{Args, Parser, Subcommand};
use patternbench::harness::{
    self, compute_gap, group_curves, run_experiment, snr_grid, ExperimentSpec, HarnessError,
    PatternKind, PatternSpec, ResultRecord, Topology,
};
use std::path::PathBuf;
use std::str::FromStr;

const EXIT_OK: i32 = 0;
const EXIT_ERROR: i32 = 1;
const EXIT_BAD_SPEC: i32 = 2;
const EXIT_ALL_DIVERGED: i32 = 3;
const EXIT_NO_CROSSING: i32 = 4;

#[derive(Parser)]
#[command(
    name = "patternbench",
    version,
    about = "Measure how much of a neural-network receiver's gain comes from \
             predicting the test pattern instead of equalizing the channel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// BER vs window length: one receiver per L, trained at --train-snr and
    /// evaluated on the matched pattern and on fresh random data
    SweepL(SweepLArgs),
    /// BER vs SNR at a fixed window length
    SweepSnr(SweepSnrArgs),
    /// Train on a repeated random unit, evaluate on the same unit and on
    /// fresh random data
    RepeatedRandom(RepeatedRandomArgs),
    /// PAM4 IM/DD link: quartile baseline, random- and PRBS15-trained
    /// receivers over post-detector SNR
    Imdd(ImddArgs),
    /// SNR gap between two curves of a result CSV at a target BER
    Gap(GapArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Master seed; all pattern/init/shuffle/noise seeds derive from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all available cores)
    #[arg(long)]
    workers: Option<usize>,
    /// Permit evaluation sizes below 2^16 windows (smoke runs)
    #[arg(long)]
    allow_small_eval: bool,
}

#[derive(Args)]
struct AwgnTrainArgs {
    /// Training pattern
    #[arg(long, default_value = "prbs7", value_parser = PatternKind::from_str)]
    train_pattern: PatternKind,
    /// Restrict evaluation to this pattern (default: matched and random)
    #[arg(long, value_parser = PatternKind::from_str)]
    eval_pattern: Option<PatternKind>,
    /// Hidden-layer topology of the receiver
    #[arg(long, default_value = "8", value_parser = Topology::from_str)]
    topology: Topology,
    /// Training SNR in dB
    #[arg(long, default_value_t = 10.0)]
    train_snr: f64,
    /// Training set size in windows
    #[arg(long, default_value_t = 1 << 19)]
    train_size: usize,
    /// Evaluation size in windows per SNR point
    #[arg(long, default_value_t = 1 << 16)]
    eval_size: usize,
    /// Unit length for repeated-random patterns
    #[arg(long, default_value_t = 128)]
    unit_len: usize,
    /// Passes over the training set
    #[arg(long, default_value_t = 3)]
    epochs: usize,
}

#[derive(Args)]
struct SnrGridArgs {
    /// Lowest evaluation SNR in dB
    #[arg(long)]
    snr_min: f64,
    /// Highest evaluation SNR in dB
    #[arg(long)]
    snr_max: f64,
    /// Evaluation SNR step in dB
    #[arg(long, default_value_t = 1.0)]
    snr_step: f64,
}

#[derive(Args)]
struct SweepLArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: AwgnTrainArgs,
    /// Window lengths (comma-separated odd values)
    #[arg(
        long = "window",
        value_delimiter = ',',
        default_value = "5,9,13,17,25,33,65,129"
    )]
    windows: Vec<usize>,
    /// Evaluation SNR in dB
    #[arg(long, default_value_t = 9.0)]
    eval_snr: f64,
}

#[derive(Args)]
struct SweepSnrArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: AwgnTrainArgs,
    /// Window length (odd)
    #[arg(long, default_value_t = 13)]
    window: usize,
    #[command(flatten)]
    grid: SnrGridArgs,
}

#[derive(Args)]
struct RepeatedRandomArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Hidden-layer topology of the receiver
    #[arg(long, default_value = "8", value_parser = Topology::from_str)]
    topology: Topology,
    /// Training SNR in dB
    #[arg(long, default_value_t = 10.0)]
    train_snr: f64,
    /// Training set size in windows
    #[arg(long, default_value_t = 1 << 19)]
    train_size: usize,
    /// Evaluation size in windows per SNR point
    #[arg(long, default_value_t = 1 << 16)]
    eval_size: usize,
    /// Length of the repeated random unit
    #[arg(long, default_value_t = 128)]
    unit_len: usize,
    /// Window length (odd)
    #[arg(long, default_value_t = 33)]
    window: usize,
    /// Passes over the training set
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[command(flatten)]
    grid: SnrGridArgs,
}

#[derive(Args)]
struct ImddArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Hidden-layer topology of the receivers
    #[arg(long, default_value = "64x64", value_parser = Topology::from_str)]
    topology: Topology,
    /// Post-detector training SNR in dB
    #[arg(long, default_value_t = harness::IMDD_TRAIN_SNR_DB)]
    train_snr: f64,
    /// Training set size in PAM4 symbols
    #[arg(long, default_value_t = 500_000)]
    train_size: usize,
    /// Evaluation size in PAM4 symbols per SNR point
    #[arg(long, default_value_t = 1 << 16)]
    eval_size: usize,
    /// Window length in samples (odd; 2 samples per symbol)
    #[arg(long, default_value_t = 129)]
    window: usize,
    /// Passes over the training set
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[command(flatten)]
    grid: SnrGridArgs,
}

#[derive(Args)]
struct GapArgs {
    /// Result CSV produced by a sweep subcommand
    #[arg(long)]
    input: PathBuf,
    /// Target BER at which both curves are interpolated
    #[arg(long, default_value_t = 1e-3)]
    target_ber: f64,
    /// Curve id of the reference (e.g. "hard-decision:none/random/L13/none")
    #[arg(long, required_unless_present = "list")]
    reference: Option<String>,
    /// Curve id of the comparison (e.g. "nn:prbs7/prbs7/L13/8")
    #[arg(long, required_unless_present = "list")]
    comparison: Option<String>,
    /// List the curve ids available in the input and exit
    #[arg(long)]
    list: bool,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = Cli::parse();
    match cli.command {
        Command::SweepL(args) => run_sweep(build_sweep_l(&args), &args.common),
        Command::SweepSnr(args) => match build_sweep_snr(&args) {
            Ok(spec) => run_sweep(spec, &args.common),
            Err(e) => bad_spec(&e),
        },
        Command::RepeatedRandom(args) => match build_repeated_random(&args) {
            Ok(spec) => run_sweep(spec, &args.common),
            Err(e) => bad_spec(&e),
        },
        Command::Imdd(args) => match build_imdd(&args) {
            Ok(spec) => run_sweep(spec, &args.common),
            Err(e) => bad_spec(&e),
        },
        Command::Gap(args) => run_gap(&args),
    }
}

fn bad_spec(e: &HarnessError) -> i32 {
    eprintln!("error: {e}");
    EXIT_BAD_SPEC
}

fn build_sweep_l(args: &SweepLArgs) -> ExperimentSpec {
    let mut spec = ExperimentSpec::sweep_l(pattern_spec(&args.train, args.train.train_pattern));
    spec.window_ls = args.windows.clone();
    spec.snr_points_db = vec![args.eval_snr];
    apply_awgn_args(&mut spec, &args.common, &args.train);
    spec
}

fn build_sweep_snr(args: &SweepSnrArgs) -> Result<ExperimentSpec, HarnessError> {
    let points = snr_grid(args.grid.snr_min, args.grid.snr_max, args.grid.snr_step)?;
    let mut spec = ExperimentSpec::sweep_snr(
        pattern_spec(&args.train, args.train.train_pattern),
        args.window,
        points,
    );
    apply_awgn_args(&mut spec, &args.common, &args.train);
    Ok(spec)
}

fn build_repeated_random(args: &RepeatedRandomArgs) -> Result<ExperimentSpec, HarnessError> {
    let points = snr_grid(args.grid.snr_min, args.grid.snr_max, args.grid.snr_step)?;
    let mut spec = ExperimentSpec::repeated_random(points);
    spec.train_pattern = PatternSpec::repeated_random(args.unit_len);
    spec.window_ls = vec![args.window];
    spec.topology = args.topology;
    spec.train_snr_db = args.train_snr;
    spec.train_size = args.train_size;
    spec.eval_size = args.eval_size;
    spec.epochs = args.epochs;
    apply_common(&mut spec, &args.common);
    Ok(spec)
}

fn build_imdd(args: &ImddArgs) -> Result<ExperimentSpec, HarnessError> {
    let points = snr_grid(args.grid.snr_min, args.grid.snr_max, args.grid.snr_step)?;
    let mut spec = ExperimentSpec::imdd(points);
    spec.window_ls = vec![args.window];
    spec.topology = args.topology;
    spec.train_snr_db = args.train_snr;
    spec.train_size = args.train_size;
    spec.eval_size = args.eval_size;
    spec.epochs = args.epochs;
    apply_common(&mut spec, &args.common);
    Ok(spec)
}

fn pattern_spec(train: &AwgnTrainArgs, kind: PatternKind) -> PatternSpec {
    if kind == PatternKind::RepeatedRandom {
        PatternSpec::repeated_random(train.unit_len)
    } else {
        PatternSpec::new(kind)
    }
}

fn apply_awgn_args(spec: &mut ExperimentSpec, common: &CommonArgs, train: &AwgnTrainArgs) {
    spec.eval_pattern = train.eval_pattern.map(|k| pattern_spec(train, k));
    spec.topology = train.topology;
    spec.train_snr_db = train.train_snr;
    spec.train_size = train.train_size;
    spec.eval_size = train.eval_size;
    spec.epochs = train.epochs;
    apply_common(spec, common);
}

fn apply_common(spec: &mut ExperimentSpec, common: &CommonArgs) {
    spec.master_seed = common.seed;
    spec.allow_small_eval = common.allow_small_eval;
}

fn configure_workers(workers: Option<usize>) -> Result<(), String> {
    if let Some(n) = workers {
        if n == 0 {
            return Err("--workers must be >= 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run_sweep(spec: ExperimentSpec, common: &CommonArgs) -> i32 {
    if let Err(e) = configure_workers(common.workers) {
        eprintln!("error: {e}");
        return EXIT_BAD_SPEC;
    }
    let output = match run_experiment(&spec) {
        Ok(o) => o,
        Err(e @ HarnessError::BadSpec(_)) => return bad_spec(&e),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    for d in &output.diverged {
        eprintln!("warning: training diverged for {d}");
    }
    if let Err(e) = write_output(&output.records, common.out.as_deref()) {
        eprintln!("error: {e}");
        return EXIT_ERROR;
    }
    if output.all_trainings_diverged() {
        eprintln!("error: every training in the run diverged");
        return EXIT_ALL_DIVERGED;
    }
    EXIT_OK
}

fn write_output(records: &[ResultRecord], out: Option<&std::path::Path>) -> Result<(), HarnessError> {
    match out {
        Some(path) => {
            harness::write_records_path(path, records)?;
            eprintln!("wrote {} records to {}", records.len(), path.display());
        }
        None => {
            harness::write_records(std::io::stdout().lock(), records)?;
        }
    }
    Ok(())
}

fn run_gap(args: &GapArgs) -> i32 {
    let records = match harness::read_records_path(&args.input) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let curves = group_curves(&records);
    if args.list {
        for c in &curves {
            println!("{}", c.id);
        }
        return EXIT_OK;
    }
    let (reference_id, comparison_id) = (
        args.reference.as_deref().expect("required by clap"),
        args.comparison.as_deref().expect("required by clap"),
    );
    let find = |id: &str| curves.iter().find(|c| c.id == id);
    let (reference, comparison) = match (find(reference_id), find(comparison_id)) {
        (Some(r), Some(c)) => (r, c),
        _ => {
            eprintln!(
                "error: curve id not found in {} (try --list)",
                args.input.display()
            );
            return EXIT_BAD_SPEC;
        }
    };
    let report = compute_gap(reference, comparison, args.target_ber);
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    println!("reference,comparison,target_ber,reference_snr_db,comparison_snr_db,delta_snr_db");
    println!(
        "{},{},{},{},{},{}",
        report.reference,
        report.comparison,
        report.target_ber,
        fmt_opt(report.reference_snr_db),
        fmt_opt(report.comparison_snr_db),
        fmt_opt(report.delta_snr_db),
    );
    if !report.crossed() {
        eprintln!("warning: at least one curve never crosses the target BER");
        return EXIT_NO_CROSSING;
    }
    EXIT_OK
}
