//! `wiretap` — train and evaluate learned wiretap-channel codes.
//!
//! Verbs: `train` (one system from a config), `eval` (BER/leakage/
//! equivocation of a checkpoint), `sweep` (train/evaluate a whole grid and
//! emit figure data), `inspect` (checkpoint metadata dump).
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 non-finite loss abort,
//! 4 checkpoint/metadata mismatch, 5 sweep with no successful points.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wiretap_core::checkpoint::Checkpoint;
use wiretap_core::config::{RunConfig, SweepConfig};
use wiretap_core::eval::{
    evaluate, exact_leakage_oracle, gf2_coset_codebook, run_sweep, write_report_csv, EvalOptions,
    EvalReport, REPORT_HEADER,
};
use wiretap_core::rng::{RngHub, Stream};
use wiretap_core::trainer::{train, WiretapSystem};
use wiretap_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_SWEEP_EMPTY: u8 = 5;

#[derive(Parser)]
#[command(name = "wiretap", about = "End-to-end learned codes for the Gaussian wiretap channel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one system from a TOML config.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint: BER, leakage, equivocation.
    Eval(EvalArgs),
    /// Train/evaluate a grid of (arch, code, SNR) points and emit one CSV.
    Sweep(SweepArgs),
    /// Dump a checkpoint's metadata and array shapes.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional config supplying evaluation settings (and a GF(2) baseline).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Information bits per BER point.
    #[arg(long)]
    ber_bits: Option<usize>,
    /// Post-hoc ascent steps before the leakage read-out.
    #[arg(long)]
    readout_steps: Option<usize>,
    /// Fresh batches averaged for the read-out.
    #[arg(long)]
    readout_batches: Option<usize>,
    /// Read-out batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Also run the exact enumeration oracle (k + r <= 20).
    #[arg(long)]
    oracle: bool,
    /// Monte-Carlo draws per message for the oracle.
    #[arg(long)]
    oracle_mc: Option<usize>,
    /// Where to append the CSV row (header written if the file is new).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Path to the sweep configuration (run config plus a [grid] section).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for grid points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Only evaluate existing checkpoints; list missing points instead of
    /// training them.
    #[arg(long)]
    no_train: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn fail(code: u8, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn config_exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => EXIT_NON_FINITE,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_CONFIG,
    }
}

fn cmd_train(args: TrainArgs) -> ExitCode {
    let mut cfg = match RunConfig::load(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    cfg.apply_env_overrides();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut system = match WiretapSystem::from_config(&cfg) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    println!(
        "training {} k={} r={} n={} at Bob {} dB / Eve {} dB (seed {})",
        cfg.code.arch,
        cfg.code.k,
        cfg.code.r,
        cfg.code.n,
        cfg.channel.bob_eb_n0_db,
        cfg.channel.eve_eb_n0_db,
        cfg.seed
    );
    match train(&cfg, &mut system) {
        Ok(outcome) => {
            if let Some(m) = outcome.final_metrics {
                println!(
                    "done after {} steps{}: L_R {:.4}, L_E {:.4}, xi {:.4} nats, vartheta {:.4} nats",
                    outcome.steps_run,
                    if outcome.stopped_on_plateau { " (plateau)" } else { "" },
                    m.l_r,
                    m.l_e,
                    m.xi_nats,
                    m.vartheta_nats
                );
            }
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("metrics:    {}", cfg.paths.metrics_csv.display());
            ExitCode::SUCCESS
        }
        Err(e @ Error::NonFinite(_)) => fail(EXIT_NON_FINITE, e),
        Err(e) => fail(config_exit_code(&e), e),
    }
}

fn cmd_eval(args: EvalArgs) -> ExitCode {
    let ck = match Checkpoint::load(&args.checkpoint) {
        Ok(ck) => ck,
        Err(e) => return fail(EXIT_CHECKPOINT, e),
    };
    let system = match WiretapSystem::from_checkpoint(&ck) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CHECKPOINT, e),
    };

    let cfg = match &args.config {
        Some(path) => match RunConfig::load(path) {
            Ok(cfg) => Some(cfg),
            Err(e) => return fail(EXIT_CONFIG, e),
        },
        None => None,
    };
    // A supplied config must describe the same system as the checkpoint.
    if let Some(cfg) = &cfg {
        let matches = cfg.code.arch == system.code.arch.name()
            && cfg.code.k == system.code.k
            && cfg.code.r == system.code.r
            && cfg.code.n == system.code.n;
        if !matches {
            return fail(
                EXIT_CHECKPOINT,
                format!(
                    "config describes {} k={} r={} n={}, checkpoint holds {} k={} r={} n={}",
                    cfg.code.arch,
                    cfg.code.k,
                    cfg.code.r,
                    cfg.code.n,
                    system.code.arch.name(),
                    system.code.k,
                    system.code.r,
                    system.code.n
                ),
            );
        }
    }

    let mut opts = cfg
        .as_ref()
        .map(EvalOptions::from_config)
        .unwrap_or(EvalOptions {
            ber_bits: 1_000_000,
            mine_readout_steps: 2000,
            mine_readout_batches: 64,
            readout_batch_size: 512,
            oracle: false,
            oracle_mc: 100_000,
        });
    if let Some(v) = args.ber_bits {
        opts.ber_bits = v;
    }
    if let Some(v) = args.readout_steps {
        opts.mine_readout_steps = v;
    }
    if let Some(v) = args.readout_batches {
        opts.mine_readout_batches = v;
    }
    if let Some(v) = args.batch {
        opts.readout_batch_size = v;
    }
    if let Some(v) = args.oracle_mc {
        opts.oracle_mc = v;
    }
    opts.oracle |= args.oracle;

    let report = match evaluate(&system, &opts) {
        Ok(r) => r,
        Err(e) => return fail(config_exit_code(&e), e),
    };
    print_report_table(&report);

    // Classical coset baseline when the config carries GF(2) matrices.
    if let (Some(cfg), true) = (&cfg, opts.oracle) {
        if let Some(gf2) = &cfg.gf2 {
            match gf2_baseline_bits(gf2, system.channel.sigma2_eve, opts.oracle_mc, cfg.seed) {
                Ok(bits) => println!("gf2 coset baseline leakage: {bits:.4} bits"),
                Err(e) => eprintln!("gf2 baseline skipped: {e}"),
            }
        }
    }

    if let Some(out) = &args.out {
        if let Err(e) = append_report_row(out, &report) {
            return fail(EXIT_CONFIG, e);
        }
        println!("row appended to {}", out.display());
    }
    ExitCode::SUCCESS
}

fn gf2_baseline_bits(
    gf2: &wiretap_core::config::Gf2Section,
    sigma2_eve: f64,
    oracle_mc: usize,
    seed: u64,
) -> Result<f64, Error> {
    let h = gf2.h_matrix()?;
    let g = gf2.g_matrix()?;
    let book = gf2_coset_codebook(&h, &g)?;
    let hub = RngHub::new(seed);
    let est = exact_leakage_oracle(&book, sigma2_eve, oracle_mc, &mut hub.stream(Stream::OracleMc))?;
    Ok(est.bits.max(0.0))
}

fn print_report_table(r: &EvalReport) {
    println!(
        "{} k={} r={} n={} | Bob {} dB, Eve {} dB",
        r.arch, r.k, r.r, r.n, r.bob_snr_db, r.eve_snr_db
    );
    println!("  BER (Bob)      {:.6} +- {:.6}", r.ber_bob, r.ber_bob_ci);
    println!("  BER (Eve)      {:.6} +- {:.6}", r.ber_eve, r.ber_eve_ci);
    println!("  leakage (MINE) {:.4} bits", r.leak_mine_bits);
    match (r.leak_oracle_bits, r.leak_oracle_se) {
        (Some(b), Some(se)) => println!("  leakage (oracle) {b:.4} bits (se {se:.4})"),
        _ => println!("  leakage (oracle) -"),
    }
    println!(
        "  equivocation   {:.4}{}",
        r.equivocation,
        if r.equivocation_clamped { " (clamped)" } else { "" }
    );
    if r.low_sample_warning {
        println!("  warning: fewer than 1e4 bits tested; BER confidence is weak");
    }
}

fn append_report_row(path: &PathBuf, report: &EvalReport) -> Result<(), Error> {
    use std::io::Write as _;
    let fresh = !path.exists();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    if fresh {
        writeln!(f, "{REPORT_HEADER}").map_err(io)?;
    }
    writeln!(f, "{}", report.csv_row()).map_err(io)
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    let mut sweep = match SweepConfig::load(&args.config) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    sweep.base.apply_env_overrides();
    let summary = match run_sweep(&sweep, args.jobs, !args.no_train) {
        Ok(s) => s,
        Err(e) => return fail(config_exit_code(&e), e),
    };
    for row in &summary.rows {
        print_report_table(row);
    }
    for label in &summary.skipped_missing {
        println!("missing checkpoint, skipped: {label}");
    }
    for (label, msg) in &summary.failures {
        eprintln!("failed: {label}: {msg}");
    }
    println!(
        "sweep: {} ok, {} failed, {} missing -> {}",
        summary.rows.len(),
        summary.failures.len(),
        summary.skipped_missing.len(),
        sweep.base.paths.report_csv.display()
    );
    if summary.rows.is_empty() {
        return ExitCode::from(EXIT_SWEEP_EMPTY);
    }
    // Rows were already written by run_sweep; nothing else to do.
    let _ = write_report_csv(&sweep.base.paths.report_csv, &summary.rows);
    ExitCode::SUCCESS
}

fn cmd_inspect(args: InspectArgs) -> ExitCode {
    let ck = match Checkpoint::load(&args.checkpoint) {
        Ok(ck) => ck,
        Err(e) => return fail(EXIT_CHECKPOINT, e),
    };
    println!("checkpoint: {}", args.checkpoint.display());
    println!("metadata ({} entries):", ck.metadata.len());
    for (k, v) in &ck.metadata {
        println!("  {k} = {v}");
    }
    println!("arrays ({}):", ck.arrays.len());
    let mut total = 0usize;
    for (name, t) in &ck.arrays {
        println!("  {name}  shape {:?}  ({} values)", t.shape(), t.len());
        total += t.len();
    }
    println!("total parameters: {total}");
    ExitCode::SUCCESS
}
