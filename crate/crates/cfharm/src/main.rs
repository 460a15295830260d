use std::path::PathBuf;
use std::process::ExitCode;

use cfharm::artifacts::{ShieldValues, CONFIG};
use cfharm::commands::{self, EvalOptions};
use cfharm::config::{Config, EnvId};
use cfharm::{output_root, plot, CliError, CliResult};
use cfharm_core::counterfactual::Formulation;
use cfharm_core::scm::InitRegime;
use cfharm_core::shield::ShieldMode;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfharm", version, about = "Counterfactual-harm constrained reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Regime {
    Feasible,
    Wide,
}

impl From<Regime> for InitRegime {
    fn from(r: Regime) -> Self {
        match r {
            Regime::Feasible => InitRegime::Feasible,
            Regime::Wide => InitRegime::Wide,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Shield {
    Explicit,
    Implicit,
}

#[derive(Clone, Copy, ValueEnum)]
enum Values {
    Rollout,
    Critic,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, checkpoints and a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        formulation: Option<String>,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        envs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: output root / run name).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint (or the default policy) against the default policy.
    Eval {
        #[arg(long, conflicts_with = "default_policy")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the default policy itself.
        #[arg(long)]
        default_policy: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_states: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        regime: Option<Regime>,
        /// Use the mean action instead of sampling.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, value_enum)]
        shield: Option<Shield>,
        #[arg(long)]
        shield_samples: Option<usize>,
        #[arg(long)]
        shield_steps: Option<usize>,
        #[arg(long, value_enum, default_value = "rollout")]
        shield_values: Values,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Default-policy violation statistics from an initial-state regime.
    Baseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        n_states: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        regime: Option<Regime>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG figures from a run or evaluation directory.
    Plot { dir: PathBuf },
    /// Repeat the command recorded in a manifest into a new directory.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: Option<&PathBuf>, env: Option<&String>) -> CliResult<Config> {
    let cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::for_env(env.map(|e| e.parse()).transpose()?.unwrap_or(EnvId::Rover)),
    };
    if let (Some(_), Some(e)) = (config, env) {
        let id: EnvId = e.parse()?;
        if id != cfg.run.env {
            return Err(CliError::Usage(format!(
                "--env {id} contradicts the config's environment {}",
                cfg.run.env
            )));
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            env,
            formulation,
            updates,
            envs,
            seed,
            out,
            quiet,
        } => {
            let mut cfg = load(config.as_ref(), env.as_ref())?;
            if let Some(f) = formulation {
                cfg.train.formulation = f.parse::<Formulation>()?;
            }
            if let Some(u) = updates {
                cfg.train.updates = u;
            }
            if let Some(n) = envs {
                cfg.train.n_envs = n;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dir = out.unwrap_or_else(|| output_root().join(cfg.run_name()));
            let r = commands::train(&cfg, &dir, !quiet)?;
            println!(
                "trained {} updates in {:.1} s; selected checkpoint at update {}; outputs in {}",
                r.metrics.len(),
                r.seconds,
                r.selected_update,
                r.run_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            default_policy,
            config,
            n_states,
            seed,
            regime,
            deterministic,
            shield,
            shield_samples,
            shield_steps,
            shield_values,
            out,
        } => {
            if checkpoint.is_none() && !default_policy {
                return Err(CliError::Usage("pass --checkpoint or --default-policy".into()));
            }
            let mut cfg = match (&config, &checkpoint) {
                (Some(p), _) => Config::load(p)?,
                (None, Some(c)) => commands::config_for_checkpoint(c)?,
                (None, None) => return Err(CliError::Usage(format!("--default-policy needs --config (or a run's {CONFIG})"))),
            };
            if let Some(n) = shield_samples {
                cfg.shield.samples = n;
            }
            if let Some(n) = shield_steps {
                cfg.shield.steps = n;
            }
            let mut opts = EvalOptions::from_config(&cfg, checkpoint.clone());
            if let Some(n) = n_states {
                opts.n_states = n;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            if let Some(r) = regime {
                opts.regime = r.into();
            }
            opts.deterministic |= deterministic;
            opts.shield = shield.map(|s| match s {
                Shield::Explicit => ShieldMode::Explicit,
                Shield::Implicit => ShieldMode::Implicit,
            });
            opts.shield_values = match shield_values {
                Values::Rollout => ShieldValues::Rollout,
                Values::Critic => ShieldValues::Critic,
            };
            let suffix = match opts.shield {
                Some(ShieldMode::Explicit) => "_explicit",
                Some(ShieldMode::Implicit) => "_implicit",
                None => "",
            };
            let dir = out.unwrap_or_else(|| {
                let name = format!("eval_s{}{suffix}", opts.seed);
                match checkpoint.as_ref().and_then(|c| c.parent()).and_then(|p| p.parent()) {
                    Some(run) => run.join(name),
                    None => output_root().join(format!("{}_default_{name}", cfg.run.env)),
                }
            });
            let s = commands::eval(&cfg, &opts, &dir)?;
            let pct = |x: Option<i64>| x.map_or("n/a".to_string(), |v| format!("{:.2}", v as f64 / 100.0));
            println!(
                "{}: Recall {}  DR {}  Success {}  P_harm {}  violation {:.4} (default {:.4}); outputs in {}",
                s.policy,
                pct(s.percent.recall),
                pct(Some(s.percent.dr)),
                pct(s.percent.success),
                pct(Some(s.percent.p_harm)),
                s.summary.learner_violation,
                s.summary.default_violation,
                dir.display()
            );
            if let Some(st) = s.shield {
                println!("shield: {} interventions in {} decisions ({} infeasible)", st.interventions, st.decisions, st.infeasible);
            }
        }
        Command::Baseline {
            config,
            env,
            n_states,
            seed,
            regime,
            out,
        } => {
            let cfg = load(config.as_ref(), env.as_ref())?;
            let n = n_states.unwrap_or(cfg.eval.n_states);
            let seed = seed.unwrap_or(cfg.eval.seed);
            let regime = regime.map(Into::into).unwrap_or(cfg.eval.regime);
            let dir = out.unwrap_or_else(|| output_root().join(cfg.run_name()).join("baseline"));
            let b = commands::baseline(&cfg, n, seed, regime, &dir)?;
            println!(
                "default policy violates in {:.4} of {} episodes; outputs in {}",
                b.violation_probability,
                b.n_states,
                dir.display()
            );
        }
        Command::Plot { dir } => {
            for p in plot::plot_dir(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::Rerun { manifest, out } => {
            commands::rerun(&manifest, &out)?;
            println!("outputs in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
