use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lw2g::config::ExperimentConfig;
use lw2g::experiment::{compare, run, started_now, write_run, Report};
use lw2g::lw2g::DecisionKind;
use lw2g::trace::replay_trace;
use lw2g::trainer::Mode;
use lw2g::Error;

/// Exit status for an unreadable or invalid configuration.
const EXIT_CONFIG: u8 = 1;
/// Exit status for anything that fails once the configuration is accepted.
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "lw2g",
    version,
    about = "Run, replay and compare grow-or-reuse prompt-pool experiments",
    args_conflicts_with_subcommands = true
)]
struct Cli {
    /// Replay a decision trace (same as the `replay` subcommand).
    #[arg(long, value_name = "PATH")]
    replay: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train over the configured stream and write the run directory.
    Run {
        /// TOML config; omitted keys take their defaults.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Overrides `train.mode`.
        #[arg(long)]
        mode: Option<Mode>,
        /// Overrides every seed (stream, backbone, trainer).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Re-decide grow/reuse from the HFC values of a trace file.
    Replay {
        #[arg(value_name = "PATH")]
        trace: PathBuf,
        /// Print one JSON object per step instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Differences of the headline metrics, B minus A.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidFraction(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: Option<&Path>) -> lw2g::Result<(ExperimentConfig, Option<String>)> {
    match path {
        Some(p) => {
            let (cfg, sha) = ExperimentConfig::load(p)?;
            Ok((cfg, Some(sha)))
        }
        None => Ok((ExperimentConfig::default(), None)),
    }
}

fn cmd_run(
    config: Option<&Path>,
    mode: Option<Mode>,
    seed: Option<u64>,
    out: &Path,
    precision: Precision,
) -> Result<(), u8> {
    let fail = |e: Error| {
        eprintln!("error: {e}");
        exit_code(&e)
    };
    let (mut cfg, sha) = load_config(config).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate().map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let started = started_now();
    let report = match precision {
        Precision::F64 => {
            let o = run::<f64>(&cfg).map_err(fail)?;
            write_run(out, &o, sha.as_deref(), started).map_err(fail)?;
            o.report()
        }
        Precision::F32 => {
            let o = run::<f32>(&cfg).map_err(fail)?;
            write_run(out, &o, sha.as_deref(), started).map_err(fail)?;
            o.report()
        }
    }
    .map_err(fail)?;
    let ffm = report.ffm.map_or("-".to_string(), |f| format!("{f:.4}"));
    println!(
        "mode {} seed {}: faa {:.4} ffm {ffm} pra {:.4} ssp {}",
        report.mode, report.seed, report.faa, report.pra, report.ssp
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn describe(d: DecisionKind) -> String {
    match d {
        DecisionKind::Grow => "grow".into(),
        DecisionKind::Reuse(j) => format!("reuse {j}"),
    }
}

fn cmd_replay(path: &Path, json: bool) -> Result<(), u8> {
    let steps = replay_trace(path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_RUNTIME
    })?;
    for s in &steps {
        if json {
            println!(
                "{}",
                serde_json::to_string(s).expect("replay step serializes")
            );
            continue;
        }
        let min =
            s.z.iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(String::new(), |(set, z)| {
                    format!("  (min Z {z:.2} on set {set})")
                });
        println!("task {}: {}{min}", s.task, describe(s.decision));
    }
    if let (Some(last), false) = (steps.last(), json) {
        for (set, tasks) in &last.pool_after {
            println!("set {set}: tasks {tasks:?}");
        }
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<Report, u8> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        EXIT_RUNTIME
    })?;
    serde_json::from_str(&text).map_err(|e| {
        eprintln!("error: {} is not a report: {e}", path.display());
        EXIT_RUNTIME
    })
}

fn cmd_compare(a: &Path, b: &Path, json: bool) -> Result<(), u8> {
    let d = compare(&read_report(a)?, &read_report(b)?);
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&d).expect("diff serializes")
        );
        return Ok(());
    }
    println!("dFAA {:+.4}", d.d_faa);
    match d.d_ffm {
        Some(f) => println!("dFFM {f:+.4}"),
        None => println!("dFFM -"),
    }
    println!("dPRA {:+.4}", d.d_pra);
    println!("dSSP {:+}", d.d_ssp);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match (&cli.replay, &cli.command) {
        (Some(p), _) => cmd_replay(p, false),
        (
            None,
            Some(Command::Run {
                config,
                mode,
                seed,
                out,
                precision,
            }),
        ) => cmd_run(config.as_deref(), *mode, *seed, out, *precision),
        (None, Some(Command::Replay { trace, json })) => cmd_replay(trace, *json),
        (None, Some(Command::Compare { a, b, json })) => cmd_compare(a, b, *json),
        (None, None) => {
            eprintln!("error: no command given; see --help");
            Err(EXIT_CONFIG)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
