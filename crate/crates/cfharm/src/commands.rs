//! Command implementations shared by the binary and the tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cfharm_core::eval::{evaluate, percent, report_cdfs, Cdf, Summary};
use cfharm_core::eval::{default_outcome, NoisePlan};
use cfharm_core::nn::{ActionMode, ActorPolicy, ModelCache};
use cfharm_core::rng::{self, Stream};
use cfharm_core::scm::{DefaultPolicy, EnvState, Environment, InitRegime, Policy};
use cfharm_core::shield::{CriticValues, RolloutValues, ShieldConfig, ShieldMode, ShieldStats, ShieldedPolicy};
use cfharm_core::trainer::{pooled_success, pooled_violation, select_checkpoint, Trainer, UpdateMetrics};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::{Config, EnvId};
use crate::error::{CliError, CliResult};

macro_rules! with_env {
    ($cfg:expr, |$env:ident| $body:expr) => {
        match $cfg.run.env {
            EnvId::Rover => {
                let $env = $cfg.rover()?;
                $body
            }
            EnvId::TractorTrailer => {
                let $env = $cfg.tractor_trailer()?;
                $body
            }
            EnvId::Wall => {
                let $env = $cfg.wall()?;
                $body
            }
        }
    };
}

/// Create `dir`, refusing to reuse one that already holds a manifest.
fn prepare_dir(dir: &Path) -> CliResult<()> {
    if dir.join(MANIFEST).exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; choose another output directory",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn manifest(cfg: &Config, invocation: Invocation, seed: u64, formulation: bool) -> CliResult<RunManifest> {
    Ok(RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        invocation,
        env: cfg.run.env.name().to_string(),
        formulation: formulation.then(|| cfg.train.formulation.to_string()),
        seed,
        config: cfg.to_toml()?,
        outputs: Vec::new(),
        status: "running".into(),
        started_unix: unix_now(),
        finished_unix: 0,
    })
}

fn finish(dir: &Path, mut m: RunManifest, status: &str) -> CliResult<()> {
    m.status = status.into();
    m.finished_unix = unix_now();
    m.outputs = list_outputs(dir)?;
    write_manifest(dir, &m)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics: Vec<UpdateMetrics>,
    pub selected_update: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Selection {
    selected_update: usize,
    checkpoint: String,
    candidates: Vec<(usize, Option<f64>, Option<f64>)>,
}

pub fn train(cfg: &Config, dir: &Path, progress: bool) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    with_env!(cfg, |env| train_with(env, cfg, dir, progress))
}

fn train_with<E: Environment>(env: E, cfg: &Config, dir: &Path, progress: bool) -> CliResult<TrainOutcome> {
    prepare_dir(dir)?;
    fs::create_dir_all(dir.join(CHECKPOINTS))?;
    fs::write(dir.join(CONFIG), cfg.to_toml()?)?;
    let m = manifest(cfg, Invocation::Train, cfg.train.seed, true)?;
    write_manifest(dir, &m)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(env, cfg.train.clone())?;
    let mut w = metrics_writer(&dir.join(METRICS))?;
    let mut metrics = Vec::with_capacity(cfg.train.updates);
    let mut candidates = Vec::new();
    let mut since = 0;
    for _ in 0..cfg.train.updates {
        let u = match trainer.step() {
            Ok(u) => u,
            Err(e) => {
                w.flush()?;
                let err = CliError::from(e);
                finish(dir, m, &format!("aborted: {err}"))?;
                return Err(err);
            }
        };
        w.serialize(MetricsRow::from(&u))?;
        if progress && (u.update % 10 == 0 || u.update == cfg.train.updates) {
            eprintln!(
                "update {:>6}  violation {:>6}  reward {:>8.4}  w {:>8.4}",
                u.update,
                u.violation_probability().map_or("-".into(), |v| format!("{v:.3}")),
                u.mean_reward,
                u.w
            );
        }
        metrics.push(u);
        let k = metrics.len();
        if k % cfg.train.checkpoint_every == 0 || k == cfg.train.updates {
            let window = &metrics[since..];
            let (v, s) = (pooled_violation(window), pooled_success(window));
            save_checkpoint(&dir.join(CHECKPOINTS).join(checkpoint_name(k)), &trainer.checkpoint(v, s))?;
            candidates.push((k, v, s));
            since = k;
        }
    }
    w.flush()?;
    let stats: Vec<_> = candidates.iter().map(|&(_, v, s)| (v, s)).collect();
    let best = select_checkpoint(&stats)?;
    let selected_update = candidates[best].0;
    write_json(
        &dir.join(SELECTION),
        &Selection {
            selected_update,
            checkpoint: format!("{CHECKPOINTS}/{}", checkpoint_name(selected_update)),
            candidates,
        },
    )?;
    finish(dir, m, "ok")?;
    Ok(TrainOutcome {
        run_dir: dir.to_path_buf(),
        metrics,
        selected_update,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub n_states: usize,
    pub seed: u64,
    pub regime: InitRegime,
    pub deterministic: bool,
    pub shield: Option<ShieldMode>,
    pub shield_values: ShieldValues,
}

impl EvalOptions {
    pub fn from_config(cfg: &Config, checkpoint: Option<PathBuf>) -> Self {
        Self {
            checkpoint,
            n_states: cfg.eval.n_states,
            seed: cfg.eval.seed,
            regime: cfg.eval.regime,
            deterministic: cfg.eval.deterministic,
            shield: None,
            shield_values: ShieldValues::Rollout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percentages {
    pub recall: Option<i64>,
    pub dr: i64,
    pub success: Option<i64>,
    pub p_harm: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub summary: Summary,
    pub percent: Percentages,
    pub shield: Option<ShieldStats>,
}

/// Locate the config saved next to a training run's checkpoints.
pub fn config_for_checkpoint(checkpoint: &Path) -> CliResult<Config> {
    let run_dir = checkpoint
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| CliError::Usage("checkpoint is not inside a run directory; pass --config".into()))?;
    let path = run_dir.join(CONFIG);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no {CONFIG} in {}; pass --config",
            run_dir.display()
        )));
    }
    Config::load(&path)
}

pub fn eval(cfg: &Config, opts: &EvalOptions, dir: &Path) -> CliResult<EvalSummary> {
    cfg.validate()?;
    if opts.n_states == 0 {
        return Err(CliError::Usage("--n-states must be positive".into()));
    }
    with_env!(cfg, |env| eval_with(env, cfg, opts, dir))
}

fn eval_with<E: Environment>(env: E, cfg: &Config, opts: &EvalOptions, dir: &Path) -> CliResult<EvalSummary> {
    let ckpt = opts.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if let Some(c) = &ckpt {
        if c.env != env.name() || c.model.spec.obs_dim != env.obs_dim() || c.model.spec.action_dim != env.action_dim() {
            return Err(CliError::Usage(format!(
                "checkpoint was trained on `{}` and does not fit environment `{}`",
                c.env,
                env.name()
            )));
        }
    }
    prepare_dir(dir)?;
    let invocation = Invocation::Eval {
        checkpoint: opts.checkpoint.clone(),
        n_states: opts.n_states,
        seed: opts.seed,
        regime: opts.regime,
        deterministic: opts.deterministic,
        shield: opts.shield,
        shield_values: opts.shield_values,
    };
    let m = manifest(cfg, invocation, opts.seed, ckpt.is_some())?;
    write_manifest(dir, &m)?;
    let gamma = cfg.train.estimator.gamma;
    let mode = if opts.deterministic { ActionMode::Mean } else { ActionMode::Sample };
    let mut default_policy = DefaultPolicy;
    let mut actor;
    let (inner, name): (&mut dyn Policy<E>, String) = match &ckpt {
        Some(c) => {
            actor = ActorPolicy::new(&c.model, &c.params, mode);
            (&mut actor, format!("{} update {}", c.formulation, c.update))
        }
        None => (&mut default_policy, "default".into()),
    };
    let shield_cfg = ShieldConfig {
        mode: opts.shield.unwrap_or(cfg.shield.mode),
        ..cfg.shield.clone()
    };
    let (report, shield) = match (opts.shield, opts.shield_values) {
        (None, _) => (evaluate(&env, inner, opts.n_states, opts.regime, gamma, opts.seed)?, None),
        (Some(_), ShieldValues::Rollout) => {
            let mut p = ShieldedPolicy::new(inner, RolloutValues { gamma }, shield_cfg)?;
            let r = evaluate(&env, &mut p, opts.n_states, opts.regime, gamma, opts.seed)?;
            (r, Some(p.stats))
        }
        (Some(_), ShieldValues::Critic) => {
            let c = ckpt
                .as_ref()
                .ok_or_else(|| CliError::Usage("critic shield values need a checkpoint".into()))?;
            let values = CriticValues {
                model: &c.model,
                params: &c.params,
                cache: ModelCache::default(),
            };
            let mut p = ShieldedPolicy::new(inner, values, shield_cfg)?;
            let r = evaluate(&env, &mut p, opts.n_states, opts.regime, gamma, opts.seed)?;
            (r, Some(p.stats))
        }
    };
    write_report(&dir.join(REPORT), &report.rows)?;
    let cdfs = report_cdfs(&report.rows)?;
    write_cdf(&dir.join(CDF_HARM), &cdfs.harm)?;
    write_cdf(&dir.join(CDF_VIOLATION), &cdfs.violation)?;
    write_cdf(&dir.join(CDF_DEFAULT_VIOLATION), &cdfs.default_violation)?;
    let s = &report.summary;
    let out = EvalSummary {
        policy: name,
        percent: Percentages {
            recall: s.recall.map(percent),
            dr: percent(s.dr),
            success: s.success.map(percent),
            p_harm: percent(s.p_harm),
        },
        summary: report.summary.clone(),
        shield,
    };
    write_json(&dir.join(SUMMARY), &out)?;
    finish(dir, m, "ok")?;
    Ok(out)
}

pub fn baseline(cfg: &Config, n_states: usize, seed: u64, regime: InitRegime, dir: &Path) -> CliResult<BaselineStats> {
    cfg.validate()?;
    if n_states == 0 {
        return Err(CliError::Usage("--n-states must be positive".into()));
    }
    with_env!(cfg, |env| baseline_with(env, cfg, n_states, seed, regime, dir))
}

fn baseline_with<E: Environment>(
    env: E,
    cfg: &Config,
    n_states: usize,
    seed: u64,
    regime: InitRegime,
    dir: &Path,
) -> CliResult<BaselineStats> {
    prepare_dir(dir)?;
    let m = manifest(cfg, Invocation::Baseline { n_states, seed, regime }, seed, false)?;
    write_manifest(dir, &m)?;
    let mut worst = Vec::with_capacity(n_states);
    for i in 0..n_states as u64 {
        let mut init = rng::stream(seed, Stream::Init, i);
        let s0 = EnvState::new(env.sample_initial(regime, &mut init)?);
        let plan = NoisePlan::sample(&env, seed, i);
        let g = default_outcome(&env, &s0, plan.from_step(0))?;
        worst.push(g.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let stats = BaselineStats {
        env: env.name().into(),
        regime,
        n_states,
        seed,
        violation_probability: worst.iter().filter(|&&g| g > 0.0).count() as f64 / n_states as f64,
    };
    let clipped: Vec<f64> = worst.iter().map(|&g| g.max(0.0)).collect();
    write_cdf(&dir.join(CDF_DEFAULT_VIOLATION), &Cdf::new(&clipped)?)?;
    write_json(&dir.join(BASELINE), &stats)?;
    finish(dir, m, "ok")?;
    Ok(stats)
}

/// Redo the command recorded in a manifest into a fresh directory.
pub fn rerun(manifest_path: &Path, dir: &Path) -> CliResult<()> {
    let m = read_manifest(manifest_path)?;
    let cfg = Config::parse(&m.config)?;
    match m.invocation {
        Invocation::Train => train(&cfg, dir, false).map(|_| ()),
        Invocation::Eval {
            checkpoint,
            n_states,
            seed,
            regime,
            deterministic,
            shield,
            shield_values,
        } => {
            let opts = EvalOptions {
                checkpoint,
                n_states,
                seed,
                regime,
                deterministic,
                shield,
                shield_values,
            };
            eval(&cfg, &opts, dir).map(|_| ())
        }
        Invocation::Baseline { n_states, seed, regime } => baseline(&cfg, n_states, seed, regime, dir).map(|_| ()),
    }
}
