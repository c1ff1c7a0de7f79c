//! Experiment configuration: one JSON tree covering every stage.

use std::path::{Path, PathBuf};

use icrl_core::baselines::{DqnConfig, QTrainConfig};
use icrl_core::envcore::{EnvConfig, Suite};
use icrl_core::eval::EvalSettings;
use icrl_core::store::config_hash;
use icrl_core::train::{ModelShape, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub tabular: QTrainConfig,
    pub dqn: DqnConfig,
    /// Fit DQN only where a gridworld comparison needs it.
    pub run_dqn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub settings: EvalSettings,
    pub n_envs: usize,
    pub context_grid: Vec<usize>,
    /// Context length of the query-type comparison.
    pub query_type_context: usize,
    /// Encoder seeds per shortcut test (gridworld only).
    pub shortcut_envs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Test envs for kernel alignment and cross-context correlation.
    pub n_envs: usize,
    pub contexts: Vec<usize>,
    pub cka_gamma: f64,
    /// Envs for the linear decoders.
    pub decoder_envs: usize,
    pub decoder_context: usize,
    pub test_frac: f64,
    pub value_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttribSection {
    pub n_envs: usize,
    pub ig_steps: usize,
    pub context_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: Suite,
    pub seed: u64,
    pub out: PathBuf,
    pub tasks: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub attrib: AttribSection,
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn preset(suite: Suite) -> Self {
        let (tasks, ctx_grid, qt_ctx, probe_ctx, cka_gamma, attrib_ctx) = match suite {
            Suite::Gridworld => (40_960, vec![0, 10, 25, 50, 75, 100, 150, 200], 200, vec![1, 10, 50, 100, 250], 0.8, 200),
            Suite::Tree => (20_480, vec![0, 50, 100, 200, 400, 800], 800, vec![1, 100, 400, 800, 1600], 0.6, 800),
        };
        let mut train = TrainConfig::for_suite(suite);
        train.model = ModelShape {
            layers: 3,
            heads: 4,
            d_model: 256,
        };
        train.seeds = vec![0];
        ExperimentConfig {
            suite,
            seed: 0,
            out: PathBuf::from(format!("runs/{}", suite.name())),
            tasks,
            env: EnvConfig::for_suite(suite),
            train,
            baseline: BaselineSection {
                tabular: QTrainConfig::default(),
                dqn: DqnConfig::default(),
                run_dqn: suite == Suite::Gridworld,
            },
            eval: EvalSection {
                settings: EvalSettings::for_suite(suite),
                n_envs: 50,
                context_grid: ctx_grid,
                query_type_context: qt_ctx,
                shortcut_envs: if suite == Suite::Gridworld { 100 } else { 0 },
            },
            probe: ProbeSection {
                n_envs: 100,
                contexts: probe_ctx,
                cka_gamma,
                decoder_envs: 600,
                decoder_context: if suite == Suite::Gridworld { 250 } else { 1600 },
                test_frac: 0.1,
                value_gamma: 0.8,
            },
            attrib: AttribSection {
                n_envs: 50,
                ig_steps: 20,
                context_len: attrib_ctx,
            },
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.env.suite == self.suite, "env.suite differs from suite");
        anyhow::ensure!(self.train.suite == self.suite, "train.suite differs from suite");
        anyhow::ensure!(self.tasks >= 10, "tasks must be at least 10");
        self.train.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of the sections a stage depends on; `out` is excluded.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let data = (self.suite, self.seed, self.tasks, &self.env);
        match stage {
            Stage::Generate => config_hash(&data),
            Stage::Train => config_hash(&(data, &self.train)),
            Stage::Baseline => config_hash(&(data, &self.eval, &self.baseline)),
            Stage::Eval => config_hash(&(data, &self.train, &self.eval)),
            Stage::Probe => config_hash(&(data, &self.train, &self.probe)),
            Stage::Attrib => config_hash(&(data, &self.train, &self.attrib)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Train,
    Baseline,
    Eval,
    Probe,
    Attrib,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Baseline => "baseline",
            Stage::Eval => "eval",
            Stage::Probe => "probe",
            Stage::Attrib => "attrib",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for suite in [Suite::Gridworld, Suite::Tree] {
            let c = ExperimentConfig::preset(suite);
            c.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn stage_hashes_track_their_sections() {
        let a = ExperimentConfig::preset(Suite::Gridworld);
        let mut b = a.clone();
        b.probe.cka_gamma = 0.5;
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.stage_hash(Stage::Train), b.stage_hash(Stage::Train));
        assert_eq!(a.stage_hash(Stage::Eval), b.stage_hash(Stage::Eval));
        assert_ne!(a.stage_hash(Stage::Probe), b.stage_hash(Stage::Probe));
        b.env.sigma = 0.1;
        assert_ne!(a.stage_hash(Stage::Generate), b.stage_hash(Stage::Generate));
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::preset(Suite::Tree)).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }
}
