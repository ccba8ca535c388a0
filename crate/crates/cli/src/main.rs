use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hat_core::checkpoint::Checkpoint;
use hat_core::commands::{self, InferOptions, ANNOTATION_FILE};
use hat_core::config::RunConfig;
use hat_core::infer::GateKind;
use hat_core::model::gradcheck_config;
use hat_core::synthdata::ProceduralGrammar;

#[derive(Parser)]
#[command(name = "hat", version, about = "Online temporal action localization with a compressed history")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size defaults.
    Full,
    /// The small CPU configuration used with the synthetic grammar.
    Toy,
    /// The tiny configuration used for finite-difference checks.
    Gradcheck,
}

#[derive(Args)]
struct ConfigArgs {
    /// Defaults the config file and overrides apply to.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Structural toggle: history, anticipation, refinement, integration or loss.
    #[arg(long = "ablate", value_name = "NAME=VALUE")]
    ablations: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match self.preset {
            Preset::Full => RunConfig::default(),
            Preset::Toy => RunConfig::toy(),
            Preset::Gradcheck => gradcheck_config(),
        };
        let text = match &self.config {
            Some(p) => Some((
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                p.display().to_string(),
            )),
            None => None,
        };
        let (mut cfg, _) = RunConfig::build(
            base,
            text.as_ref().map(|(t, p)| (t.as_str(), p.as_str())),
            &self.sets,
            &self.ablations,
        )?;
        cfg.apply_env_seed()?;
        Ok(cfg)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.sets.is_empty() || !self.ablations.is_empty()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Osn,
    Score,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the main network, then the suppression network.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of `.hatf` feature files.
        #[arg(long)]
        data: PathBuf,
        /// Annotation CSV; defaults to `annotations.csv` inside `--data`.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Streams feature files through a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature files, or directories of them.
        #[arg(required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Writes per-frame history attention mass.
        #[arg(long)]
        attn_out: bool,
        /// Records the read/append trace and checks it.
        #[arg(long)]
        audit: bool,
        #[arg(long, value_enum, default_value = "osn")]
        gate: GateArg,
        /// Config the checkpoint must have been trained with.
        #[command(flatten)]
        expect: ConfigArgs,
        /// Loads the checkpoint even if its config digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Scores Ψ files against annotations.
    Eval {
        #[arg(required = true)]
        proposals: Vec<PathBuf>,
        #[arg(long)]
        annotations: PathBuf,
        /// Comma-separated tIoU thresholds.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5", value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        step_seconds: f64,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Writes synthetic feature files and annotations.
    Synth {
        /// Grammar file; the built-in grammar when absent.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates checked per tensor in the full model; all when absent.
        #[arg(long)]
        sample: Option<usize>,
    },
}

fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(commands::feature_files(p)?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            data,
            annotations,
            out,
        } => {
            let cfg = config.resolve()?;
            let ann = annotations.unwrap_or_else(|| data.join(ANNOTATION_FILE));
            let t = commands::cmd_train(&cfg, &data, &ann, &out)?;
            let last = t.epochs.last().map_or(f64::NAN, |e| e.loss);
            println!("trained {} epochs, final loss {last:.5}, config digest {}", t.epochs.len(), cfg.digest());
            println!("checkpoint: {}", out.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Infer {
            checkpoint,
            features,
            out,
            attn_out,
            audit,
            gate,
            expect,
            force,
        } => {
            let expected = if expect.given() { Some(expect.resolve()?.digest()) } else { None };
            let ck = Checkpoint::load(&checkpoint, expected.as_deref(), force)?;
            let opts = InferOptions {
                audit,
                attention: attn_out,
                gate: match gate {
                    GateArg::Osn => GateKind::Osn,
                    GateArg::Score => GateKind::Score,
                },
            };
            let mut ok = true;
            for s in commands::cmd_infer(&ck, &expand(&features)?, &out, opts)? {
                print!("{}: {} proposals, {} emitted", s.video, s.result.proposals.len(), s.result.psi.len());
                if let Some(a) = &s.audit {
                    print!(", audit {}", if a.passed { "passed" } else { "FAILED" });
                    for (i, v) in &a.violations {
                        eprintln!("{}: event {i}: {v}", s.video);
                    }
                    ok &= a.passed;
                }
                println!();
            }
            return Ok(ok);
        }
        Command::Eval {
            proposals,
            annotations,
            thresholds,
            step_seconds,
            json,
            csv,
        } => {
            let cfg = hat_core::eval::EvalConfig {
                tiou_thresholds: thresholds,
                step_seconds,
            };
            let m = commands::cmd_eval(&proposals, &annotations, &cfg, json.as_deref(), csv.as_deref())?;
            print!("{}", m.to_csv());
        }
        Command::Synth {
            grammar,
            n,
            steps,
            seed,
            out,
        } => {
            let g = match grammar {
                Some(p) => ProceduralGrammar::load(&p)?,
                None => ProceduralGrammar::default(),
            };
            let report = commands::cmd_synth(&g, n, steps, seed, &out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {n} videos of {steps} steps to {}", out.display());
        }
        Command::Gradcheck {
            config,
            tolerance,
            seed,
            sample,
        } => {
            let cfg = config.resolve()?;
            let mut ok = true;
            for (name, r) in commands::cmd_gradcheck(&cfg, seed, tolerance, sample)? {
                println!(
                    "{:<28} {} max rel err {:.3e} over {} coordinates{}",
                    name,
                    if r.passed { "ok  " } else { "FAIL" },
                    r.max_rel_error,
                    r.checked,
                    r.worst.map(|w| format!(" (worst {w})")).unwrap_or_default()
                );
                ok &= r.passed;
            }
            if !ok {
                bail!("gradient check failed at tolerance {tolerance:e}");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
