//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{AlgorithmParams, Arm, Level, StrategyId, Weighting};
use crate::data::{PartitionMode, SyntheticKind, SyntheticSpec};
use crate::hetero::WidthRate;
use crate::nn::{BlockKind, BlockNetSpec, SgdConfig};
use crate::resource::{Constraint, CostConfig, MemoryTier, PoolConfig, ProfileDistribution, ScenarioConfig};
use crate::{Error, Result};

pub const ENV_SEED: &str = "HETFED_SEED";
pub const ENV_OUT: &str = "HETFED_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pool: PoolSection,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub profiles: ProfileDistribution,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub partition: PartitionMode,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub aggregation: AggregationSection,
    #[serde(default)]
    pub algorithms: AlgorithmParams,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub strategies: Vec<StrategyId>,
    /// Level at which the baselines run.
    #[serde(default = "default_level")]
    pub level: Level,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_sampling")]
    pub sampling_fraction: f64,
    #[serde(default = "default_rounds")]
    pub num_rounds: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Train sampled clients on the rayon pool.
    #[serde(default = "yes")]
    pub parallel: bool,
    /// Add `fedavg_smallest` at every level in use so effectiveness can be
    /// reported.
    #[serde(default = "yes")]
    pub baselines: bool,
}

fn default_level() -> Level {
    Level::Width
}
fn default_clients() -> usize {
    20
}
fn default_sampling() -> f64 {
    0.1
}
fn default_rounds() -> usize {
    200
}
fn default_repeats() -> usize {
    3
}
fn yes() -> bool {
    true
}

/// Architecture of the full model; input and class counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub block_kind: BlockKind,
    pub proto_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dim: 16,
            num_blocks: 4,
            block_kind: BlockKind::Skip,
            proto_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSection {
    /// Variant ladder, largest first; also Fjord's dropout ladder.
    pub rates: Vec<WidthRate>,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            rates: [1.0, 0.75, 0.5, 0.25].map(|r| WidthRate::new(r).expect("valid")).to_vec(),
        }
    }
}

impl Default for ScenarioConfig {
    /// Memory-limited scenario with three tiers in a 16:4:1 capacity ratio.
    fn default() -> Self {
        ScenarioConfig {
            constraints: BTreeSet::from([Constraint::Memory]),
            compute_deadline_s: None,
            comm_deadline_s: 200.0,
            memory_tiers: vec![
                MemoryTier { label: "large".into(), capacity_bytes: 2_400_000.0, fraction: 0.25 },
                MemoryTier { label: "medium".into(), capacity_bytes: 600_000.0, fraction: 0.5 },
                MemoryTier { label: "small".into(), capacity_bytes: 150_000.0, fraction: 0.25 },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synthetic: Option<SyntheticSpec>,
    /// CSV file (`f0,...,label`); mutually exclusive with `synthetic`.
    pub csv: Option<PathBuf>,
    pub test_fraction: f64,
    /// Unlabeled server split (Fed-ET).
    pub public_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            synthetic: Some(SyntheticSpec {
                kind: SyntheticKind::Blobs,
                n: 2000,
                input_dim: 16,
                num_classes: 5,
                noise: 0.5,
                clusters_per_class: 8,
            }),
            csv: None,
            test_fraction: 0.2,
            public_fraction: 0.1,
        }
    }
}

impl Default for PartitionMode {
    fn default() -> Self {
        PartitionMode::Dirichlet { alpha: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationSection {
    pub weighting: Weighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Evaluate every this many rounds, plus the final round.
    pub eval_every: usize,
    pub target_accuracy: f64,
    pub per_client_columns: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            eval_every: 10,
            target_accuracy: 0.6,
            per_client_columns: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    /// A valid configuration with every default and the given strategies.
    pub fn with_strategies(strategies: Vec<StrategyId>) -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                strategies,
                level: default_level(),
                num_clients: default_clients(),
                sampling_fraction: default_sampling(),
                num_rounds: default_rounds(),
                repeats: default_repeats(),
                master_seed: 0,
                parallel: true,
                baselines: true,
            },
            model: ModelSection::default(),
            pool: PoolSection::default(),
            scenario: ScenarioConfig::default(),
            profiles: ProfileDistribution::default(),
            data: DataSection::default(),
            partition: PartitionMode::default(),
            optimizer: SgdConfig::default(),
            aggregation: AggregationSection::default(),
            algorithms: AlgorithmParams::default(),
            cost: CostConfig::default(),
            metrics: MetricsSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "<root>".into());
            Error::config(path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies `HETFED_SEED` / `HETFED_OUT`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.experiment.master_seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::config(ENV_SEED, format!("`{seed}` is not an unsigned integer")))?;
        }
        if let Ok(out) = std::env::var(ENV_OUT) {
            self.output.dir = PathBuf::from(out);
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.strategies.is_empty() {
            return Err(Error::config("experiment.strategies", "at least one strategy is required"));
        }
        if e.num_clients == 0 {
            return Err(Error::config("experiment.num_clients", "must be >= 1"));
        }
        if !(e.sampling_fraction > 0.0 && e.sampling_fraction <= 1.0) {
            return Err(Error::config("experiment.sampling_fraction", "must lie in (0, 1]"));
        }
        if e.num_rounds == 0 {
            return Err(Error::config("experiment.num_rounds", "must be >= 1"));
        }
        if e.repeats == 0 {
            return Err(Error::config("experiment.repeats", "must be >= 1"));
        }
        let m = &self.model;
        if m.hidden_dim < 4 {
            return Err(Error::config("model.hidden_dim", "must be >= 4"));
        }
        if m.num_blocks == 0 {
            return Err(Error::config("model.num_blocks", "must be >= 1"));
        }
        if m.proto_dim == 0 {
            return Err(Error::config("model.proto_dim", "must be >= 1"));
        }
        if m.block_kind == BlockKind::Bottleneck && m.hidden_dim % 4 != 0 {
            return Err(Error::config("model.hidden_dim", "bottleneck blocks need a multiple of 4"));
        }
        if self.pool.rates.is_empty() {
            return Err(Error::config("pool.rates", "must not be empty"));
        }
        if self.pool.rates.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("pool.rates", "must be strictly decreasing"));
        }
        self.scenario.validate()?;
        self.profiles.validate()?;
        let d = &self.data;
        match (&d.synthetic, &d.csv) {
            (Some(_), Some(_)) => return Err(Error::config("data", "set exactly one of `synthetic` and `csv`")),
            (None, None) => return Err(Error::config("data", "a data source (`synthetic` or `csv`) is required")),
            _ => {}
        }
        if !(0.0..1.0).contains(&d.test_fraction) || d.test_fraction == 0.0 {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&d.public_fraction) {
            return Err(Error::config("data.public_fraction", "must lie in [0, 1)"));
        }
        if d.test_fraction + d.public_fraction >= 1.0 {
            return Err(Error::config("data", "test and public fractions leave no training data"));
        }
        if e.strategies.contains(&StrategyId::Fedet) && d.public_fraction == 0.0 {
            return Err(Error::config("data.public_fraction", "fedet requires a public split"));
        }
        if let PartitionMode::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::config("partition.alpha", "must be > 0"));
            }
        }
        self.optimizer.validate()?;
        self.algorithms.validate()?;
        self.cost.validate()?;
        if self.metrics.eval_every == 0 {
            return Err(Error::config("metrics.eval_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Requested arms followed by any missing `fedavg_smallest` baselines,
    /// without duplicates.
    pub fn arms(&self) -> Vec<Arm> {
        let mut arms: Vec<Arm> = Vec::new();
        for &s in &self.experiment.strategies {
            let a = Arm::new(s, self.experiment.level);
            if !arms.contains(&a) {
                arms.push(a);
            }
        }
        if self.experiment.baselines {
            let needed: Vec<Arm> = arms.iter().map(Arm::baseline).collect();
            for b in needed {
                if !arms.contains(&b) {
                    arms.push(b);
                }
            }
        }
        arms
    }

    pub fn base_spec(&self, input_dim: usize, num_classes: usize) -> Result<BlockNetSpec> {
        BlockNetSpec::new(
            input_dim,
            self.model.hidden_dim,
            self.model.num_blocks,
            self.model.block_kind,
            num_classes,
            self.model.proto_dim,
        )
    }

    pub fn pool_config(&self, base: BlockNetSpec) -> PoolConfig {
        PoolConfig {
            base,
            rates: self.pool.rates.clone(),
            batch_size: self.optimizer.batch_size,
        }
    }

    /// SHA-256 over the canonical JSON form of the parsed config.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&canon);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[experiment]
strategies = ["sheterofl"]
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.experiment.num_clients, 20);
        assert_eq!(c.experiment.num_rounds, 200);
        assert_eq!(c.scenario.comm_deadline_s, 200.0);
        assert_eq!(c.aggregation.weighting, Weighting::Samples);
        assert_eq!(c.partition, PartitionMode::Dirichlet { alpha: 0.5 });
        assert_eq!(c, ExperimentConfig::with_strategies(vec![StrategyId::Sheterofl]));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{MINIMAL}\n[optimizer]\nlearning_rat = 0.1\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_path() {
        let text = format!("{MINIMAL}\n[experiment2]\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = MINIMAL.replace("[\"sheterofl\"]", "[\"sheterofl\"]\nsampling_fraction = 0.0");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "experiment.sampling_fraction"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn computation_needs_deadline() {
        let text = format!("{MINIMAL}\n[scenario]\nconstraints = [\"computation\"]\nmemory_tiers = [{{ label = \"a\", capacity_bytes = 1.0, fraction = 1.0 }}]\n");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "scenario.compute_deadline_s"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn roundtrip_and_hash() {
        let c = ExperimentConfig::with_strategies(vec![StrategyId::Depthfl, StrategyId::Fedproto]);
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.experiment.master_seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn baselines_are_added_per_level() {
        let mut c = ExperimentConfig::with_strategies(vec![StrategyId::Sheterofl, StrategyId::Depthfl]);
        let labels: Vec<String> = c.arms().iter().map(Arm::label).collect();
        assert_eq!(labels, ["sheterofl", "depthfl", "fedavg_smallest@width", "fedavg_smallest@depth"]);
        c.experiment.baselines = false;
        assert_eq!(c.arms().len(), 2);
    }
}
