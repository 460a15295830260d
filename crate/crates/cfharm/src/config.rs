//! Run configuration: one TOML file with a section per module.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cfharm_core::counterfactual::Formulation;
use cfharm_core::env::{Rover, RoverConfig, TractorTrailer, TrailerConfig, WallConfig, WallEnv};
use cfharm_core::scm::InitRegime;
use cfharm_core::shield::ShieldConfig;
use cfharm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Rover,
    TractorTrailer,
    Wall,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::Rover => "rover",
            EnvId::TractorTrailer => "tractor_trailer",
            EnvId::Wall => "wall",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rover" => Ok(EnvId::Rover),
            "tractor_trailer" | "tt" => Ok(EnvId::TractorTrailer),
            "wall" => Ok(EnvId::Wall),
            _ => Err(CliError::Usage(format!("unknown environment `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub env: EnvId,
    /// Output directory name under the output root; derived when empty.
    pub name: String,
    /// Permit an initial-state regime other than the formulation's own.
    pub allow_regime_mismatch: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            env: EnvId::Rover,
            name: String::new(),
            allow_regime_mismatch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_states: usize,
    pub regime: InitRegime,
    pub seed: u64,
    /// Evaluate the mean action instead of sampling.
    pub deterministic: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_states: 2000,
            regime: InitRegime::Wide,
            seed: 1,
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub run: RunSection,
    pub train: TrainConfig,
    pub rover: RoverConfig,
    pub trailer: TrailerConfig,
    /// Grid file for the tractor-trailer lot, read into `trailer.grid`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_file: Option<PathBuf>,
    pub wall: WallConfig,
    pub eval: EvalSection,
    pub shield: ShieldConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::for_env(EnvId::Rover)
    }
}

impl Config {
    /// Shipped defaults for an environment.
    pub fn for_env(env: EnvId) -> Self {
        let train = match env {
            EnvId::TractorTrailer => TrainConfig::tractor_trailer(),
            _ => TrainConfig::rover(),
        };
        Self {
            run: RunSection {
                env,
                ..RunSection::default()
            },
            train,
            rover: RoverConfig::default(),
            trailer: TrailerConfig::default(),
            grid_file: None,
            wall: WallConfig::default(),
            eval: EvalSection::default(),
            shield: ShieldConfig::default(),
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        // Environment-specific training defaults apply unless overridden.
        let probe: toml::Table = toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))?;
        let env = probe
            .get("run")
            .and_then(|r| r.get("env"))
            .and_then(|e| e.as_str())
            .map(EnvId::from_str)
            .transpose()?
            .unwrap_or(EnvId::Rover);
        let mut base = toml::Table::try_from(Self::for_env(env)).map_err(|e| CliError::Runtime(e.to_string()))?;
        merge(&mut base, probe);
        let cfg: Config = base
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("bad config: {}", e.message())))?;
        Ok(cfg)
    }

    /// Load a file, resolving `grid_file` relative to it.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(grid) = cfg.grid_file.take() {
            let grid = if grid.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(grid)
            } else {
                grid
            };
            cfg.trailer.grid = std::fs::read_to_string(&grid)
                .map_err(|e| CliError::Usage(format!("cannot read grid {}: {e}", grid.display())))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.shield.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(regime) = self.train.init_override {
            if regime != self.train.formulation.init_regime() && !self.run.allow_regime_mismatch {
                return Err(CliError::Usage(format!(
                    "{} trains from the {:?} regime; set run.allow_regime_mismatch to override",
                    self.train.formulation,
                    self.train.formulation.init_regime()
                )));
            }
        }
        if self.eval.n_states == 0 {
            return Err(CliError::Usage("eval.n_states must be positive".into()));
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        if self.run.name.is_empty() {
            format!("{}_{}_s{}", self.run.env, self.train.formulation, self.train.seed)
        } else {
            self.run.name.clone()
        }
    }

    pub fn rover(&self) -> CliResult<Rover> {
        Rover::new(self.rover.clone()).map_err(CliError::from)
    }

    pub fn tractor_trailer(&self) -> CliResult<TractorTrailer> {
        TractorTrailer::new(self.trailer.clone()).map_err(CliError::from)
    }

    pub fn wall(&self) -> CliResult<WallEnv> {
        WallEnv::new(self.wall.clone()).map_err(CliError::from)
    }

    pub fn formulation(&self) -> Formulation {
        self.train.formulation
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for env in [EnvId::Rover, EnvId::TractorTrailer, EnvId::Wall] {
            let cfg = Config::for_env(env);
            let back = Config::parse(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn env_specific_training_defaults() {
        let cfg = Config::parse("[run]\nenv = \"tractor_trailer\"\n[train]\nseed = 3\n").unwrap();
        assert_eq!(cfg.train.counterfactual_steps, 4);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.n_envs, TrainConfig::tractor_trailer().n_envs);
    }

    #[test]
    fn unknown_formulation_is_rejected() {
        let e = Config::parse("[train]\nformulation = \"FOO\"\n").unwrap_err();
        assert!(e.to_string().contains("unknown formulation"), "{e}");
    }

    #[test]
    fn regime_mismatch_needs_override() {
        let mut cfg = Config::parse("[train]\nformulation = \"DBS\"\ninit_override = \"wide\"\n").unwrap();
        assert!(cfg.validate().is_err());
        cfg.run.allow_regime_mismatch = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn run_name() {
        let cfg = Config::default();
        assert_eq!(cfg.run_name(), "rover_HARM_C_s0");
    }
}
