use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use dagrpo_core::advantage::MaskedGroup;
use dagrpo_core::config::{TrainConfig, KEY_DOCS};
use dagrpo_core::gradient::conflict_report;
use dagrpo_core::judge::{JudgeRequest, RUBRIC_VERSION};
use dagrpo_core::metrics::compare_runs;
use dagrpo_core::policy::PolicyParams;
use dagrpo_core::tasks::{reference_solution, OpCode, Operation, Prompt};
use dagrpo_core::trainer::{evaluate, external_judge, run_experiment, EvalConfig};
use dagrpo_core::{gradcheck, Error};

#[derive(Parser, Debug)]
#[command(name = "dagrpo", version, about = "Group-relative policy optimization experiments on a modular-arithmetic task")]
struct Cli {
    /// JSON config file (flat object of config keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate; writes config, metrics, checkpoints and summary.
    Run,
    /// Align metrics files by step and write comparison CSVs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        metrics: Vec<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Replay a group dump through the conflict report.
    Conflict {
        /// groups.jsonl written by `run`.
        groups: PathBuf,
        /// Policy to evaluate gradients at (default: uniform).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Only groups of this step.
        #[arg(long)]
        step: Option<u64>,
    },
    /// Send one canned request to the external judge.
    JudgeTest,
    /// Evaluate a saved policy.
    Eval {
        policy: PathBuf,
    },
}

/// Usage and configuration problems exit with 2, everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn key_help() -> String {
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (use in --config files or --set KEY=VALUE):\n");
    for (k, doc) in KEY_DOCS {
        out.push_str(&format!("  {k:<width$}  {doc}\n"));
    }
    out
}

fn resolve_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut overrides = Vec::new();
    for raw in &cli.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Failure::Usage(anyhow::anyhow!("--set expects KEY=VALUE, got {raw:?}")))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    Ok(TrainConfig::resolve(cli.config.as_deref(), &overrides)?)
}

fn write_out(out: Option<&Path>, name: &str, text: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn snapshot(out: Option<&Path>, cfg: &TrainConfig) -> anyhow::Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.json");
        std::fs::write(&path, cfg.to_json_pretty()? + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    let out = cli.out.as_deref();
    snapshot(out, &cfg)?;
    match &cli.command {
        Command::Run => {
            let dir = out.ok_or_else(|| Failure::Usage(anyhow::anyhow!("run requires --out DIR")))?;
            match run_experiment(&cfg, dir) {
                Ok(summary) => {
                    for level in &summary.final_eval.levels {
                        println!(
                            "L={} pass@1={:.4} avg@{}={:.4}",
                            level.chain_length, level.pass_at_1, level.k, level.avg_at_k
                        );
                    }
                    Ok(())
                }
                Err(e) => {
                    let path = dir.join("diagnostics.txt");
                    let _ = std::fs::write(&path, format!("{e}\n{e:?}\n"));
                    Err(e.into())
                }
            }
        }
        Command::Compare { metrics } => {
            let cmp = compare_runs(metrics)?;
            write_out(out, "comparison.csv", &cmp.to_csv())?;
            write_out(out, "summary.csv", &cmp.summary_csv())?;
            Ok(())
        }
        Command::Gradcheck { instances } => {
            let report = gradcheck::run(cfg.seed, *instances)?;
            println!("instances            {}", report.instances);
            println!("redrawn near kink    {}", report.redrawn_near_kink);
            println!("policy     max rel   {:.3e}", report.policy);
            println!("grpo       max rel   {:.3e}", report.grpo);
            println!("dagrpo     max rel   {:.3e}", report.dagrpo);
            println!("surrogate  max rel   {:.3e}", report.surrogate);
            println!("max relative error   {:.3e}", report.max_relative_error());
            if report.max_relative_error() > 1e-4 {
                return Err(Failure::Runtime(anyhow::anyhow!("gradient check failed")));
            }
            Ok(())
        }
        Command::Conflict { groups, policy, step } => {
            let params = match policy {
                Some(p) => PolicyParams::load(p)?,
                None => PolicyParams::new(cfg.vocab_size(), cfg.context_order),
            };
            let text = std::fs::read_to_string(groups).with_context(|| format!("reading {}", groups.display()))?;
            let obj = cfg.objective();
            let mut csv = String::from("step,group,context,token,net_coefficient,positive_count,negative_count\n");
            let mut summary = String::from("step,group,interference_index,cancellation_mass,shared_pairs\n");
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let value: serde_json::Value = serde_json::from_str(line)
                    .with_context(|| format!("{} line {}", groups.display(), n + 1))?;
                let s = value.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
                let index = value.get("index").and_then(|v| v.as_u64()).unwrap_or(n as u64);
                if step.is_some_and(|want| want != s) {
                    continue;
                }
                let mg: MaskedGroup = serde_json::from_value(value)
                    .with_context(|| format!("{} line {}", groups.display(), n + 1))?;
                let report = conflict_report(&mg.effective(), &params, &obj)?;
                for p in &report.shared_pairs {
                    csv.push_str(&format!(
                        "{s},{index},{},{},{:?},{},{}\n",
                        p.context, p.token.0, p.net_coefficient, p.positive_count, p.negative_count
                    ));
                }
                summary.push_str(&format!(
                    "{s},{index},{:?},{:?},{}\n",
                    report.interference_index,
                    report.cancellation_mass,
                    report.shared_pairs.len()
                ));
            }
            write_out(out, "shared_pairs.csv", &csv)?;
            write_out(out, "conflict_summary.csv", &summary)?;
            Ok(())
        }
        Command::JudgeTest => {
            let judge = external_judge(&cfg)?;
            let prompt = Prompt::new(
                3,
                vec![
                    Operation { op_code: OpCode::Add, operand: 5 },
                    Operation { op_code: OpCode::Mul, operand: 2 },
                ],
                cfg.modulus,
            )?;
            let reference = reference_solution(&prompt);
            let request = JudgeRequest::render(&prompt, &reference, &reference);
            let score = judge.score(&request)?;
            println!("rubric {RUBRIC_VERSION}: score {}", score.value);
            Ok(())
        }
        Command::Eval { policy } => {
            let params = PolicyParams::load(policy)?;
            let report = evaluate(&params, &EvalConfig::from_train(&cfg))?;
            let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
            text.push('\n');
            write_out(out, "eval.json", &text)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let command = Cli::command().after_long_help(key_help()).after_help("Run with --help to list every config key.");
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
