use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use avsr::config::{RunConfig, RunInfo, RUN_FILE};
use avsr::distill::Stage;
use avsr::evalkit::human_count;
use avsr::pipeline::{self, DistillCorpora, ReportFormat, SystemSpec, Workspace};
use avsr::selector::{Head, RouteMode};
use avsr::signal::NoiseScenario;
use avsr::Error;

#[derive(Parser)]
#[command(name = "avsr", version, about = "Adapter-based audio-visual speech recognition at desk scale")]
struct Cli {
    /// Work directory holding every artifact of a run.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Overrides {
    /// JSON file with RunConfig fields; missing fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Multiplier on the reference distillation step counts.
    #[arg(long, global = true)]
    scale_ratio: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpora and the noise bank.
    Synth {
        /// Alias for --work.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    #[command(subcommand)]
    Train(TrainCommand),
    /// Score systems on the category × SNR test grid.
    Eval {
        /// Comma-separated: base, full, babble, music, natural, sidespeaker, high, low.
        #[arg(long, value_delimiter = ',')]
        system: Vec<String>,
        #[arg(long, value_enum, default_value = "direct")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "md")]
        report: Report,
        /// Route with the true scenario instead of the classifier.
        #[arg(long)]
        oracle: bool,
    },
    /// Trainable and total parameter counts per system.
    Params {
        #[arg(long, value_delimiter = ',')]
        system: Vec<String>,
    },
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Supervised clean-audio training of the frozen recognizer.
    Base,
    /// Distill adapter sets; `all` trains the seven scenarios in turn.
    Adapters {
        #[arg(long, value_delimiter = ',', required = true)]
        scenario: Vec<String>,
    },
    Classifier {
        #[arg(long, value_enum, default_value = "both")]
        head: HeadArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Direct,
    RoutedCategory,
    RoutedLevel,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Csv,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Category,
    Snr,
    Both,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn resolve(work: &Path, o: &Overrides, fresh: bool) -> avsr::Result<RunConfig> {
    let stored = work.join(RUN_FILE);
    let mut cfg = if !fresh && stored.exists() {
        RunInfo::read(work)?.config
    } else {
        RunConfig::default()
    };
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path).map_err(|_| Error::Missing(path.clone()))?;
        cfg = serde_json::from_str(&text)?;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
        cfg.reseed();
    }
    if let Some(r) = o.scale_ratio {
        cfg.schedule.scale_ratio = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scenarios(names: &[String]) -> avsr::Result<Vec<NoiseScenario>> {
    if names.iter().any(|n| n == "all") {
        return Ok(NoiseScenario::ALL.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn systems(names: &[String], mode: Mode, oracle: bool) -> avsr::Result<Vec<SystemSpec>> {
    let routed = |mode| vec![SystemSpec::Routed { mode, oracle }];
    match mode {
        Mode::RoutedCategory => Ok(routed(RouteMode::Category)),
        Mode::RoutedLevel => Ok(routed(RouteMode::Level)),
        Mode::Direct => {
            let names: Vec<String> = if names.is_empty() {
                NoiseScenario::ALL.iter().map(|s| s.id().to_string()).collect()
            } else {
                names.to_vec()
            };
            names
                .iter()
                .map(|n| match n.as_str() {
                    "base" => Ok(SystemSpec::Base),
                    "routed-category" => Ok(SystemSpec::Routed { mode: RouteMode::Category, oracle }),
                    "routed-level" => Ok(SystemSpec::Routed { mode: RouteMode::Level, oracle }),
                    other => other.parse().map(SystemSpec::Direct),
                })
                .collect()
        }
    }
}

fn run(cli: Cli) -> avsr::Result<()> {
    let work = match &cli.cmd {
        Command::Synth { out: Some(o), .. } => o.clone(),
        _ => cli.work.clone(),
    };
    let ws = Workspace::new(&work);
    let fresh = matches!(cli.cmd, Command::Synth { .. });
    let mut cfg = resolve(&work, &cli.overrides, fresh)?;
    if let Command::Synth { train, test, .. } = &cli.cmd {
        cfg.train_size = train.unwrap_or(cfg.train_size);
        cfg.test_size = test.unwrap_or(cfg.test_size);
        cfg.validate()?;
    } else if !work.join(RUN_FILE).exists() {
        return Err(Error::Missing(work.join(RUN_FILE)));
    }
    let info = RunInfo::new(cfg.clone(), git_describe());
    let t0 = Instant::now();
    match cli.cmd {
        Command::Synth { .. } => {
            let s = pipeline::synth(&ws, &info)?;
            info.write(&work)?;
            println!(
                "corpus: {} train + {} test utterances; noise clips {}/{}/{} (train/val/test) in {}",
                s.train,
                s.test,
                s.noise.0,
                s.noise.1,
                s.noise.2,
                work.display()
            );
        }
        Command::Train(TrainCommand::Base) => {
            let (model, report) = pipeline::train_base_stage(&ws, &info)?;
            println!(
                "base: {} parameters, final loss {:.4}, held-out clean WER {:.1}%",
                model.param_count(),
                report.losses.last().copied().unwrap_or(f64::NAN),
                report.heldout_wer.unwrap_or(f64::NAN)
            );
        }
        Command::Train(TrainCommand::Adapters { scenario }) => {
            let list = scenarios(&scenario)?;
            let base = pipeline::load_base(&ws, &cfg)?;
            let noise = pipeline::load_noise(&ws)?;
            let corpora = DistillCorpora::prepare(&ws, &cfg, &base)?;
            let steps: Vec<String> = Stage::ALL
                .iter()
                .map(|s| format!("{s} {}", cfg.schedule.steps(*s)))
                .collect();
            eprintln!("schedule: {}", steps.join(", "));
            for s in list {
                let (_, log) = pipeline::train_adapter_stage(&ws, &info, &base, s, &corpora, &noise, |r| {
                    if r.step % 100 == 0 {
                        eprintln!("  [{s}] step {} {} l_pre {:.4} l_ce {:.4}", r.step, r.stage, r.loss.l_pre, r.loss.l_ce);
                    }
                })?;
                let ft = |l: &str| log.validation_at(l).and_then(|b| b.l_ft).unwrap_or(f64::NAN);
                println!(
                    "adapters {s}: val l_ft {:.4} -> {:.4} ({:.0?} elapsed)",
                    ft("init"),
                    ft("f2"),
                    t0.elapsed()
                );
            }
        }
        Command::Train(TrainCommand::Classifier { head }) => {
            let heads = match head {
                HeadArg::Category => vec![Head::Category],
                HeadArg::Snr => vec![Head::Snr],
                HeadArg::Both => vec![Head::Category, Head::Snr],
            };
            for (h, (_, m)) in heads.iter().zip(pipeline::train_classifier_stage(&ws, &info, &heads)?) {
                match h {
                    Head::Category => println!(
                        "classifier category: val accuracy {:.1}%",
                        100.0 * m.category_accuracy.unwrap_or(f64::NAN)
                    ),
                    Head::Snr => {
                        println!(
                            "classifier snr: val MAE {:.2} dB, 5 dB decision accuracy {:.1}%",
                            m.snr_mae_db.unwrap_or(f64::NAN),
                            100.0 * m.threshold_accuracy.unwrap_or(f64::NAN)
                        );
                        for (c, a) in &m.per_category_threshold_accuracy {
                            println!("  {c}: {:.1}%", 100.0 * a);
                        }
                    }
                }
            }
        }
        Command::Eval {
            system,
            mode,
            report,
            oracle,
        } => {
            let specs = systems(&system, mode, oracle)?;
            let outcome = pipeline::evaluate(&ws, &cfg, &specs)?;
            let format = match report {
                Report::Csv => ReportFormat::Csv,
                Report::Md => ReportFormat::Markdown,
            };
            let path = pipeline::write_outcome(&ws.reports_dir(), &outcome, format, &info)?;
            if matches!(format, ReportFormat::Markdown) {
                print!("{}", std::fs::read_to_string(&path)?);
            }
            println!("report: {}", path.display());
        }
        Command::Params { system } => {
            let specs = systems(&system, Mode::Direct, false)?;
            for (id, c) in pipeline::param_table(&ws, &cfg, &specs)? {
                println!(
                    "{id:<24} TrP {:>6} ({:>9})  ToP {:>6} ({:>9})",
                    human_count(c.trainable),
                    c.trainable,
                    human_count(c.total),
                    c.total
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Vocabulary(_) => 2,
        Error::Missing(_) => 3,
        Error::Diverged { .. } | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("AVX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Missing(p) => eprintln!("error: missing prerequisite {}", p.display()),
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
