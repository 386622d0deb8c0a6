//! Experiment and sweep configuration files (TOML) and their validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{AlgorithmId, DynamicsConfig, LabelMode, Mode};
use crate::game::{seeded_rng, GameSpec, Policy, PreferenceMatrix};
use crate::games;

use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub game: GameSection,
    pub algo: AlgoSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preference_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default)]
    pub reference_policy: ReferenceSpec,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Upper-triangle preferences uniform on `[0, 1]`.
    Random {
        seed: u64,
        n: usize,
    },
    BradleyTerry {
        rewards: Vec<f64>,
    },
    Rps,
    /// The printed 3×3 cyclic example (not anti-symmetric).
    ThreeActionExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceSpec {
    Named(String),
    Probs(Vec<f64>),
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::Named("uniform".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Expected,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub learning_rate: f64,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_mode: Option<LabelMode>,
    /// Offline IPO sampling policy; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_policy: Option<Vec<f64>>,
    /// RLHF reward vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<Vec<f64>>,
}

fn default_mode() -> ModeName {
    ModeName::Expected
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_steps() -> usize {
    1000
}

fn default_record_every() -> usize {
    1
}

fn default_tolerance() -> f64 {
    1e-4
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            seed: 0,
            record_every: default_record_every(),
            tolerance: default_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

pub const ALGORITHM_NAMES: [&str; 8] = [
    "online_ipo",
    "ipo_md",
    "offline_ipo",
    "nash_md_pg",
    "self_play",
    "online_dpo",
    "online_slic",
    "rlhf_pg",
];

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.game_spec()?;
        self.algorithm(&spec)?;
        let a = &self.algo;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(invalid(
                "algo.learning_rate",
                format!("must be positive, got {}", a.learning_rate),
            ));
        }
        match (a.mode, a.batch_size) {
            (ModeName::Expected, Some(_)) => {
                return Err(invalid("algo.batch_size", "only allowed with mode = \"stochastic\""))
            }
            (ModeName::Expected, None) if a.label_mode.is_some() => {
                return Err(invalid("algo.label_mode", "only allowed with mode = \"stochastic\""))
            }
            (ModeName::Stochastic, None) => return Err(invalid("algo.batch_size", "required in stochastic mode")),
            (ModeName::Stochastic, Some(0)) => return Err(invalid("algo.batch_size", "must be at least 1")),
            _ => {}
        }
        if self.run.steps == 0 {
            return Err(invalid("run.steps", "must be at least 1"));
        }
        if self.run.record_every == 0 {
            return Err(invalid("run.record_every", "must be at least 1"));
        }
        if !(self.run.tolerance > 0.0 && self.run.tolerance.is_finite()) {
            return Err(invalid(
                "run.tolerance",
                format!("must be positive, got {}", self.run.tolerance),
            ));
        }
        if self.output.formats.is_empty() {
            return Err(invalid("output.formats", "must list at least one of \"csv\", \"json\""));
        }
        Ok(())
    }

    pub fn game_spec(&self) -> Result<GameSpec, CliError> {
        let g = &self.game;
        let prefs = match (&g.preference_matrix, &g.generator) {
            (Some(_), Some(_)) => return Err(invalid("game", "give either preference_matrix or generator, not both")),
            (None, None) => return Err(invalid("game", "missing preference_matrix or generator")),
            (Some(rows), None) => {
                PreferenceMatrix::new(rows.clone()).map_err(|e| invalid("game.preference_matrix", e.to_string()))?
            }
            (None, Some(gen)) => match gen {
                Generator::Random { seed, n } => {
                    if *n < 2 {
                        return Err(invalid("game.generator.n", format!("need at least 2 actions, got {n}")));
                    }
                    games::random_preference_matrix(&mut seeded_rng(*seed, 0), *n)
                }
                Generator::BradleyTerry { rewards } => {
                    if rewards.len() < 2 || rewards.iter().any(|r| !r.is_finite()) {
                        return Err(invalid("game.generator.rewards", "need at least 2 finite rewards"));
                    }
                    games::bradley_terry_matrix(rewards)
                        .map_err(|e| invalid("game.generator.rewards", e.to_string()))?
                }
                Generator::Rps => games::rock_paper_scissors_matrix(),
                Generator::ThreeActionExample => games::three_action_example().prefs,
            },
        };
        let n = prefs.n();
        let reference = match &g.reference_policy {
            ReferenceSpec::Named(name) if name == "uniform" => Policy::uniform(n),
            ReferenceSpec::Named(name) => {
                return Err(invalid(
                    "game.reference_policy",
                    format!("unknown policy {name:?}; use \"uniform\" or a list"),
                ))
            }
            ReferenceSpec::Probs(p) => {
                if p.len() != n {
                    return Err(invalid(
                        "game.reference_policy",
                        format!("has {} entries, the game has {n} actions", p.len()),
                    ));
                }
                Policy::new(p.clone()).map_err(|e| invalid("game.reference_policy", e.to_string()))?
            }
        };
        if !(g.tau > 0.0 && g.tau.is_finite()) {
            return Err(invalid("game.tau", format!("must be positive, got {}", g.tau)));
        }
        GameSpec::new(prefs, reference, g.tau).map_err(|e| invalid("game", e.to_string()))
    }

    pub fn algorithm(&self, spec: &GameSpec) -> Result<AlgorithmId, CliError> {
        let a = &self.algo;
        let n = spec.n();
        let takes_beta = matches!(a.name.as_str(), "ipo_md" | "nash_md_pg");
        let beta = match (takes_beta, a.beta) {
            (true, Some(b)) if (0.0..=1.0).contains(&b) => b,
            (true, Some(b)) => return Err(invalid("algo.beta", format!("must lie in [0, 1], got {b}"))),
            (true, None) => return Err(invalid("algo.beta", format!("required by {}", a.name))),
            (false, Some(_)) => return Err(invalid("algo.beta", format!("not used by {}", a.name))),
            (false, None) => 0.0,
        };
        if a.sampling_policy.is_some() && a.name != "offline_ipo" {
            return Err(invalid("algo.sampling_policy", "only used by offline_ipo"));
        }
        if a.reward.is_some() && a.name != "rlhf_pg" {
            return Err(invalid("algo.reward", "only used by rlhf_pg"));
        }
        Ok(match a.name.as_str() {
            "online_ipo" => AlgorithmId::OnlineIpo,
            "ipo_md" => AlgorithmId::IpoMd(beta),
            "nash_md_pg" => AlgorithmId::NashMdPg(beta),
            "self_play" => AlgorithmId::SelfPlay,
            "online_dpo" => AlgorithmId::OnlineDpo,
            "online_slic" => AlgorithmId::OnlineSlic,
            "offline_ipo" => {
                let mu = match &a.sampling_policy {
                    None => Policy::uniform(n),
                    Some(p) if p.len() != n => {
                        return Err(invalid(
                            "algo.sampling_policy",
                            format!("needs {n} entries, got {}", p.len()),
                        ))
                    }
                    Some(p) => Policy::new(p.clone()).map_err(|e| invalid("algo.sampling_policy", e.to_string()))?,
                };
                AlgorithmId::OfflineIpo(mu)
            }
            "rlhf_pg" => match &a.reward {
                Some(r) if r.len() == n && r.iter().all(|v| v.is_finite()) => AlgorithmId::RlhfPg(r.clone()),
                Some(_) => return Err(invalid("algo.reward", format!("needs {n} finite entries"))),
                None => return Err(invalid("algo.reward", "required by rlhf_pg")),
            },
            other => {
                return Err(invalid(
                    "algo.name",
                    format!(
                        "unknown algorithm {other:?}; expected one of {}",
                        ALGORITHM_NAMES.join(", ")
                    ),
                ))
            }
        })
    }

    pub fn dynamics(&self) -> Result<DynamicsConfig, CliError> {
        self.validate()?;
        let spec = self.game_spec()?;
        if !spec.ref_policy.is_interior() {
            return Err(invalid(
                "game.reference_policy",
                "dynamics need a reference policy with no zero entries",
            ));
        }
        let algorithm = self.algorithm(&spec)?;
        let mode = match self.algo.mode {
            ModeName::Expected => Mode::Expected,
            ModeName::Stochastic => Mode::Stochastic {
                batch_size: self.algo.batch_size.unwrap_or(1),
                label_mode: self.algo.label_mode.unwrap_or_default(),
            },
        };
        Ok(DynamicsConfig {
            algorithm,
            spec,
            learning_rate: self.algo.learning_rate,
            steps: self.run.steps,
            seed: self.run.seed,
            mode,
            record_every: self.run.record_every,
        })
    }
}

pub const DEFAULT_MAX_CELLS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: SweepAxes,
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
}

fn default_max_cells() -> usize {
    DEFAULT_MAX_CELLS
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
    #[serde(default)]
    pub seed: Vec<u64>,
}

/// Axis values of one sweep cell; `None` keeps the base value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellAxes {
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let spec: Self = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        spec.base.validate().map_err(|e| e.prefixed("base"))?;
        let size = spec.cell_count();
        if size > spec.max_cells {
            return Err(invalid(
                "axes",
                format!("{size} cells exceed max_cells = {}", spec.max_cells),
            ));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| e.in_file(path))
    }

    pub fn cell_count(&self) -> usize {
        let len = |k: usize| k.max(1);
        len(self.axes.tau.len())
            * len(self.axes.beta.len())
            * len(self.axes.learning_rate.len())
            * len(self.axes.seed.len())
    }

    /// Cross product in the order tau, beta, learning_rate, seed (last fastest).
    pub fn cells(&self) -> Vec<CellAxes> {
        let mut out = Vec::with_capacity(self.cell_count());
        for tau in axis(&self.axes.tau) {
            for beta in axis(&self.axes.beta) {
                for learning_rate in axis(&self.axes.learning_rate) {
                    for seed in axis(&self.axes.seed) {
                        out.push(CellAxes {
                            tau,
                            beta,
                            learning_rate,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &CellAxes) -> ExperimentConfig {
        let mut c = self.base.clone();
        if let Some(t) = cell.tau {
            c.game.tau = t;
        }
        if let Some(b) = cell.beta {
            c.algo.beta = Some(b);
        }
        if let Some(lr) = cell.learning_rate {
            c.algo.learning_rate = lr;
        }
        if let Some(s) = cell.seed {
            c.run.seed = s;
        }
        c
    }
}
