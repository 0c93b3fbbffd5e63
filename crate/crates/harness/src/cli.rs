//! Argument parsing and the subcommand bodies.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use moeulab::analytics::Strategy;
use moeulab::bench::{gen_benchmark, Benchmark};
use moeulab::checkpoint;
use moeulab::pretrain::{AdamState, CURVE_HEADER};
use moeulab::unlearn::{Algorithm, Selection};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, HarnessResult};
use crate::pipeline::{self, evals_csv, load_benchmark, load_model, run_unlearn};
use crate::report::{self, TableKind};

#[derive(Debug, Parser)]
#[command(name = "moeulab", version, about = "Selected-expert unlearning experiments on a toy MoE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Take the remaining benchmark parameters from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the base model on the full corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Benchmark file; regenerated from the config when omitted.
        #[arg(long)]
        bench: Option<PathBuf>,
        /// Continue from the optimizer state saved in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Expert attribution on a calibration sample of the forget set.
    Attribute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value_t = 2000)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value = "same-layer")]
        strategy: Strategy,
    },
    /// Unlearn the forget set from a checkpoint.
    Unlearn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        seuf: Option<bool>,
        #[arg(long)]
        select: Option<Selection>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Merge finished runs into a results table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        table: TableKind,
        /// Also write `<table>.md` and `<table>.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default config.
    Defaults,
}

/// Pretraining progress kept next to the checkpoint for `--resume`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainState {
    pub step: u64,
    pub forget_acc: f64,
    pub utility_acc: f64,
    pub passed_gate: bool,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> HarnessResult<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::Run(format!("cannot write {}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> HarnessResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Run(format!("cannot create {}: {e}", dir.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

fn config_or_default(path: Option<&Path>) -> HarnessResult<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

/// Benchmark from a file, or regenerated from the config's parameters. The
/// config is updated to the parameters actually used.
fn resolve_bench(cfg: &mut ExperimentConfig, path: Option<&Path>) -> HarnessResult<Benchmark> {
    let bench = match path {
        Some(p) => load_benchmark(p)?,
        None => gen_benchmark(&cfg.bench)?,
    };
    cfg.bench = bench.params.clone();
    cfg.validate()?;
    Ok(bench)
}

/// Parses `args` and runs the command, writing results to `out`. Returns
/// the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out_stream: &mut dyn std::io::Write) -> HarnessResult<()> {
    match cli.command {
        Command::GenData { seed, out, config } => {
            let mut params = config_or_default(config.as_deref())?.bench;
            params.seed = seed;
            let bench = gen_benchmark(&params)?;
            make_dir(&out)?;
            let path = out.join("benchmark.json");
            write(&path, bench.to_json()?)?;
            writeln!(out_stream, "{}", path.display())?;
        }
        Command::Pretrain {
            config,
            out,
            bench,
            resume,
        } => {
            let mut cfg = config_or_default(config.as_deref())?;
            let bench = resolve_bench(&mut cfg, bench.as_deref())?;
            cfg.output_dir = out.clone();
            make_dir(&out)?;
            let start = if resume && out.join("state.json").exists() {
                let text = std::fs::read_to_string(out.join("state.json"))?;
                let st: PretrainState = serde_json::from_str(&text).map_err(|e| HarnessError::Run(e.to_string()))?;
                let model = load_model(&out.join("model.bin"))?;
                let state = AdamState {
                    step: st.step,
                    m: load_model(&out.join("adam_m.bin"))?,
                    v: load_model(&out.join("adam_v.bin"))?,
                };
                Some((model, state))
            } else {
                None
            };
            let resumed_at = start.as_ref().map_or(0, |(_, s)| s.step);
            let mut curve = format!("{CURVE_HEADER}\n");
            if resumed_at > 0 {
                let old = std::fs::read_to_string(out.join("curve.csv")).unwrap_or_default();
                for line in old.lines().skip(1) {
                    if line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= resumed_at) {
                        curve.push_str(line);
                        curve.push('\n');
                    }
                }
            }
            let (model, state, outcome) = pipeline::train_base(&cfg, &bench, start, |p| {
                curve.push_str(&p.csv_row());
                curve.push('\n');
                eprintln!("step {} loss {:.4} forget {:.3} utility {:.3}", p.step, p.loss, p.forget_acc, p.utility_acc);
            })?;
            write(&out.join("curve.csv"), &curve)?;
            checkpoint::save(&model, out.join("model.bin"))?;
            checkpoint::save(&state.m, out.join("adam_m.bin"))?;
            checkpoint::save(&state.v, out.join("adam_v.bin"))?;
            let st = PretrainState {
                step: state.step,
                forget_acc: outcome.forget_acc,
                utility_acc: outcome.utility_acc,
                passed_gate: outcome.passed_gate,
            };
            write(&out.join("state.json"), json(&st))?;
            write(&out.join("config.json"), cfg.to_json() + "\n")?;
            if !outcome.passed_gate {
                return Err(HarnessError::Run(format!(
                    "accuracy gate {} not reached after {} steps (forget {:.3}, utility {:.3})",
                    cfg.pretrain.gate, state.step, outcome.forget_acc, outcome.utility_acc
                )));
            }
            writeln!(out_stream, "{}", out.join("model.bin").display())?;
        }
        Command::Attribute {
            ckpt,
            bench,
            tokens,
            out,
            seed,
            m,
            strategy,
        } => {
            let model = load_model(&ckpt)?;
            let bench = load_benchmark(&bench)?;
            let a = pipeline::attribute(&model, &bench.split().forget, tokens, seed, m, strategy)?;
            make_dir(&out)?;
            write(&out.join("affinity.json"), json(&a.summary))?;
            write(&out.join("assignment.csv"), a.proportions_csv())?;
            write(&out.join("long_tail.json"), json(&a.long_tail))?;
            write(&out.join("plan.json"), json(&a.plan))?;
            write(&out.join("calibration.json"), json(&a.calibration))?;
            for e in &a.plan.entries {
                writeln!(out_stream, "{} {} {}", e.layer, e.expert, e.score)?;
            }
        }
        Command::Unlearn {
            ckpt,
            config,
            out,
            bench,
            algorithm,
            seuf,
            select,
            m,
            strategy,
            alpha,
            seed,
            steps,
            lr,
        } => {
            let mut cfgs = match config.as_deref() {
                Some(p) => ExperimentConfig::load_many(p)?,
                None => vec![ExperimentConfig::default()],
            };
            let base = load_model(&ckpt)?;
            let sweep = cfgs.len() > 1;
            for (i, cfg) in cfgs.iter_mut().enumerate() {
                let u = &mut cfg.unlearn;
                if let Some(v) = algorithm {
                    u.algorithm = v;
                }
                if let Some(v) = seuf {
                    u.seuf = v;
                }
                if let Some(v) = select {
                    u.selection = v;
                }
                if let Some(v) = m {
                    u.m = v;
                }
                if let Some(v) = strategy {
                    u.strategy = v;
                }
                if let Some(v) = alpha {
                    u.alpha = v;
                }
                if let Some(v) = seed {
                    u.seed = v;
                }
                if let Some(v) = steps {
                    u.steps = v;
                }
                if let Some(v) = lr {
                    u.lr = v;
                }
                let dir = if sweep { out.join(format!("{i:03}")) } else { out.clone() };
                cfg.output_dir = dir.clone();
                let b = resolve_bench(cfg, bench.as_deref())?;
                make_dir(&dir)?;
                write(&dir.join("config.json"), cfg.to_json() + "\n")?;
                let (outcome, row) = run_unlearn(&base, &b, cfg)?;
                checkpoint::save(&outcome.model, dir.join("model.bin"))?;
                write(&dir.join("metrics.csv"), outcome.metrics_csv())?;
                write(&dir.join("evals.csv"), evals_csv(&outcome.evals))?;
                write(&dir.join("plan.json"), json(&outcome.plan))?;
                write(&dir.join("report.json"), json(&row))?;
                writeln!(
                    out_stream,
                    "{} fe {:.4} ut {:.4} step {} matched {} -> {}",
                    row.method,
                    row.fe,
                    row.ut,
                    row.step,
                    row.matched,
                    dir.display()
                )?;
            }
        }
        Command::Report { runs, table, out } => {
            let mut warnings = Vec::new();
            let records = report::load_runs(&runs, &mut warnings);
            let t = report::build(table, &records, warnings);
            write!(out_stream, "{}", t.markdown())?;
            if let Some(dir) = out {
                make_dir(&dir)?;
                write(&dir.join(format!("{}.md", table.name())), t.markdown())?;
                write(&dir.join(format!("{}.csv", table.name())), t.csv())?;
            }
            for w in &t.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("warnings: {}", t.warnings.len());
        }
        Command::Defaults => writeln!(out_stream, "{}", ExperimentConfig::default().to_json())?,
    }
    Ok(())
}
