//! `ffm`: pretrain, probe and sweep federated MAE runs from a config file.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ffm_core::benchmark::{self, BoundKind};
use ffm_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ffm_core::config::RunConfig;
use ffm_core::mae::Domain;
use ffm_core::orchestrator::{Federation, FederationData};
use ffm_core::partition::{self, DatasetPool};
use ffm_core::report::{self, write_atomic};
use ffm_core::rng::{SeededRng, StreamPurpose};
use ffm_core::{synth, Error};

#[derive(Parser)]
#[command(name = "ffm", version, about = "Deterministic federated MAE pretraining simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the configured run; writes checkpoints and rounds.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Probe a checkpoint's frozen encoder; writes probe.csv.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Lower, upper and FedFound accuracy across rounds; writes sweep.csv and bounds.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Print a split manifest over two id pools.
    Split(SplitArgs),
    /// Write the synthetic corpus manifest to synth.csv.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Homogeneous,
    Heterogeneous,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    pool_a: usize,
    #[arg(long)]
    pool_b: usize,
    #[arg(long)]
    server: usize,
    #[arg(long, default_value_t = 3)]
    a_clients: usize,
    #[arg(long, default_value_t = 2)]
    b_clients: usize,
    /// Homogeneous mode only.
    #[arg(long, default_value_t = 5)]
    clients: usize,
    /// Homogeneous mode only.
    #[arg(long)]
    per_client: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write split.manifest here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    run.validate()?;
    Ok(run)
}

fn out_dir(dir: &Path) -> Result<&Path, Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(dir)
}

fn pretrain(common: &Common, resume: Option<&Path>) -> Result<(), Error> {
    let run = load(common)?;
    let cfg = run.federation()?;
    let out = out_dir(&common.out)?;
    let data = FederationData::from_config(&cfg)?;
    let (fcfg, fdata) = benchmark::bound_setup(run.bound(), &cfg, &data)?;
    let mut fed = Federation::new(fcfg, &fdata)?;
    if let Some(path) = resume {
        load_checkpoint(path)?.resume(&mut fed)?;
    }
    let mut records = Vec::new();
    while fed.round() < run.rounds as u64 {
        records.push(fed.run_round()?);
        let done = fed.round();
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 {
            save_checkpoint(&out.join(format!("round-{done:04}.ckpt")), &Checkpoint::capture(&fed))?;
        }
    }
    save_checkpoint(&out.join("final.ckpt"), &Checkpoint::capture(&fed))?;
    write_atomic(&out.join("rounds.csv"), &report::rounds_csv(&records)?)?;
    let loss = records.last().map(|r| r.global_loss).unwrap_or(f64::NAN);
    println!(
        "{}: round {} loss {loss:.6} checksum {:016x}",
        run.bound(),
        fed.round(),
        fed.theta().checksum()
    );
    Ok(())
}

fn probe(common: &Common, checkpoint: &Path) -> Result<(), Error> {
    let run = load(common)?;
    let cfg = run.federation()?;
    let probe_cfg = run.probe()?;
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.check_compatible(&cfg)?;
    let labeled = benchmark::probe_set(&cfg, &probe_cfg)?;
    let result = benchmark::probe(&ckpt.state.theta, cfg.model, &labeled, &probe_cfg, cfg.seed)?;
    let out = out_dir(&common.out)?;
    write_atomic(
        &out.join("probe.csv"),
        &report::probe_csv(std::slice::from_ref(&result))?,
    )?;
    println!(
        "{} probe at round {}: accuracy {:.4} ({} test samples)",
        result.classifier.name(),
        ckpt.state.round,
        result.accuracy,
        result.test_size
    );
    Ok(())
}

fn sweep(common: &Common) -> Result<(), Error> {
    let run = load(common)?;
    let cfg = run.federation()?;
    let points = benchmark::sweep_epochs(&cfg, &run.sweep_rounds, &run.probe()?)?;
    let out = out_dir(&common.out)?;
    write_atomic(&out.join("sweep.csv"), &report::sweep_csv(&points)?)?;
    let last = run.sweep_rounds.iter().copied().max();
    let finals: Vec<_> = points
        .iter()
        .filter(|p| Some(p.round) == last)
        .map(|p| p.result.clone())
        .collect();
    write_atomic(&out.join("bounds.csv"), &report::probe_csv(&finals)?)?;
    for r in &finals {
        println!(
            "{:<16} {:.4}",
            r.kind.map(|k: BoundKind| k.label()).unwrap_or_default(),
            r.accuracy
        );
    }
    Ok(())
}

fn split(args: &SplitArgs) -> Result<(), Error> {
    let a = DatasetPool::range(Domain::A, 0, args.pool_a);
    let b = DatasetPool::range(Domain::B, args.pool_a as u64, args.pool_b);
    let mut rng = SeededRng::for_purpose(args.seed, StreamPurpose::Split, 0);
    let s = match args.mode {
        Mode::Heterogeneous => {
            partition::heterogeneous_split(&a, &b, args.a_clients, args.b_clients, args.server, &mut rng)?
        }
        Mode::Homogeneous => {
            let per_client = args
                .per_client
                .ok_or_else(|| Error::Config("homogeneous mode needs --per-client".into()))?;
            partition::homogeneous_split(&a, &b, args.clients, per_client, args.server, &mut rng)?
        }
    };
    let counts: Vec<String> = s.clients.iter().map(|c| c.len().to_string()).collect();
    eprintln!(
        "clients {} | server {} | leftover {}",
        counts.join(" "),
        s.server.len(),
        s.leftover.len()
    );
    match &args.out {
        Some(dir) => write_atomic(&out_dir(dir)?.join("split.manifest"), s.to_manifest().as_bytes()),
        None => {
            print!("{}", s.to_manifest());
            Ok(())
        }
    }
}

fn synth_manifest(common: &Common) -> Result<(), Error> {
    let run = load(common)?;
    let cfg = run.federation()?;
    let samples = synth::generate_synth(&cfg.synth)?;
    let out = out_dir(&common.out)?;
    write_atomic(&out.join("synth.csv"), synth::manifest(&samples).as_bytes())?;
    println!(
        "{} images written to {}",
        samples.len(),
        out.join("synth.csv").display()
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Pretrain { common, resume } => pretrain(common, resume.as_deref()),
        Command::Probe { common, checkpoint } => probe(common, checkpoint),
        Command::Sweep { common } => sweep(common),
        Command::Split(args) => split(args),
        Command::Synth { common } => synth_manifest(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
