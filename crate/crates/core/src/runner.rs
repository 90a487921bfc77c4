//! Experiment orchestration: per-repeat inputs, the round loop, repeats,
//! baselines, sweeps and persisted outputs.
//!
//! Repeat `r` uses seed `mix_seed([master_seed, r])`. Within a repeat every
//! arm sees the same data, partition and device profiles.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::{build_strategy, sample_clients, Arm, Federation, Level};
use crate::config::ExperimentConfig;
use crate::data::{gen_synthetic, load_csv, partition, partition_histograms, split_global, Dataset, GlobalSplit, PartitionMode};
use crate::metrics::{advance_clock, effectiveness, time_to_accuracy, MetricsReport, RoundRecord, SimClock};
use crate::nn::{BlockNetModel, BlockNetSpec};
use crate::report::{write_atomic, write_json, ArmSummary, RunManifest, Summary};
use crate::resource::{assign_models, parse_constraints, sample_profiles, DeviceProfile, ModelPool, VariantStats};
use crate::rng::mix_seed;
use crate::{Error, Result};

pub fn repeat_seed(master_seed: u64, repeat: usize) -> u64 {
    mix_seed(&[master_seed, repeat as u64])
}

/// Inputs shared by every arm of one repeat.
#[derive(Clone, Debug)]
pub struct RepeatInputs {
    pub seed: u64,
    pub base: BlockNetSpec,
    pub split: GlobalSplit,
    pub client_indices: Vec<Vec<usize>>,
    pub clients: Vec<Dataset>,
    pub profiles: Vec<DeviceProfile>,
}

impl RepeatInputs {
    pub fn sample_counts(&self) -> Vec<usize> {
        self.clients.iter().map(Dataset::len).collect()
    }
}

fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match (&cfg.data.synthetic, &cfg.data.csv) {
        (Some(s), _) => gen_synthetic(s, seed),
        (None, Some(p)) => load_csv(p),
        (None, None) => Err(Error::config("data", "no data source")),
    }
}

pub fn prepare_repeat(cfg: &ExperimentConfig, repeat: usize) -> Result<RepeatInputs> {
    let seed = repeat_seed(cfg.experiment.master_seed, repeat);
    let data = load_dataset(cfg, seed)?;
    let base = cfg
        .base_spec(data.input_dim(), data.num_classes)
        .map_err(|e| Error::config("model", e.to_string()))?;
    let split = split_global(&data, cfg.data.test_fraction, cfg.data.public_fraction, seed)
        .map_err(|e| Error::config("data", e.to_string()))?;
    let n = cfg.experiment.num_clients;
    let client_indices = partition(&split.train.labels, data.num_classes, cfg.partition, n, seed)
        .map_err(|e| Error::config("partition", e.to_string()))?;
    let clients = client_indices.iter().map(|idx| split.train.subset(idx)).collect();
    let profiles = sample_profiles(&cfg.profiles, &cfg.scenario.memory_tiers, n, seed)?;
    Ok(RepeatInputs {
        seed,
        base,
        split,
        client_indices,
        clients,
        profiles,
    })
}

pub fn build_pool(cfg: &ExperimentConfig, arm: Arm, base: BlockNetSpec) -> Result<ModelPool> {
    ModelPool::build(arm.strategy, arm.level, &cfg.pool_config(base), &cfg.cost)
}

/// One arm in one repeat.
#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: Arm,
    pub records: Vec<RoundRecord>,
    /// Effectiveness is zero until [`run_experiment`] fills it in.
    pub report: MetricsReport,
    pub pool: ModelPool,
    /// Pool index per client.
    pub assignment: Vec<usize>,
    pub final_model: Option<BlockNetModel>,
}

impl ArmRun {
    pub fn assignment_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.pool.entries.len()];
        for &a in &self.assignment {
            h[a] += 1;
        }
        h
    }
}

pub fn run_arm(cfg: &ExperimentConfig, inputs: &RepeatInputs, arm: Arm) -> Result<ArmRun> {
    let pool = build_pool(cfg, arm, inputs.base)?;
    let samples = inputs.sample_counts();
    let epochs = cfg.optimizer.local_epochs;
    let assignment = assign_models(&pool, &inputs.profiles, &cfg.scenario, &samples, epochs)?;
    let fed = Federation {
        base: inputs.base,
        clients: &inputs.clients,
        test: &inputs.split.test,
        public: &inputs.split.public,
        pool: &pool,
        assignment: &assignment,
        optimizer: cfg.optimizer,
        params: cfg.algorithms.clone(),
        weighting: cfg.aggregation.weighting,
        seed: inputs.seed,
        parallel: cfg.experiment.parallel,
    };
    let mut strategy = build_strategy(arm, &fed)?;
    let stats: Vec<VariantStats> = assignment.iter().map(|&i| pool.entries[i].clone()).collect();
    let mut clock = SimClock::new();
    let mut records = Vec::new();
    let rounds = cfg.experiment.num_rounds;
    let n = cfg.experiment.num_clients;
    for t in 0..rounds {
        let sampled = sample_clients(n, cfg.experiment.sampling_fraction, inputs.seed, t);
        let out = strategy.run_round(&fed, &sampled, t).map_err(|e| match e {
            Error::Diverged(m) => Error::Diverged(format!("{arm}, round {}: {m}", t + 1)),
            other => other,
        })?;
        if strategy.global_model().is_some_and(|m| !m.is_finite()) {
            return Err(Error::Diverged(format!("{arm}, round {}: non-finite global model", t + 1)));
        }
        for u in &out.uploads {
            let priced = stats[u.client].comm_payload_bytes;
            if u.exchanged_numbers as f64 * 8.0 != priced {
                return Err(Error::InvalidArgument(format!(
                    "{arm}: client {} exchanged {} numbers but the cost model prices {priced} bytes",
                    u.client, u.exchanged_numbers
                )));
            }
        }
        let timing = advance_clock(&mut clock, &sampled, &stats, &inputs.profiles, &samples, epochs);
        let round = t + 1;
        if round % cfg.metrics.eval_every == 0 || round == rounds {
            let eval = strategy.evaluate(&fed)?;
            records.push(RoundRecord {
                round,
                simulated_time_s: clock.elapsed_s(),
                global_accuracy: eval.global_accuracy,
                per_client_accuracy: eval.per_client,
                max_train_s: timing.max_train_s,
                max_comm_s: timing.max_comm_s,
            });
        }
    }
    let last = records.last().expect("final round is always evaluated");
    let report = MetricsReport {
        final_global_accuracy: last.global_accuracy,
        time_to_accuracy_s: time_to_accuracy(&records, cfg.metrics.target_accuracy),
        stability_variance: last.stability(),
        effectiveness_delta: 0.0,
    };
    let final_model = strategy.global_model().cloned();
    Ok(ArmRun {
        arm,
        records,
        report,
        pool,
        assignment,
        final_model,
    })
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    /// One run per repeat.
    pub runs: Vec<ArmRun>,
    pub mean: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub scenario: String,
    pub repeat_seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
}

impl ExperimentResult {
    pub fn arm(&self, label: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.label() == label)
    }
}

/// Runs every arm for every repeat and fills in effectiveness against the
/// `fedavg_smallest` arm of the same level and repeat.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let arms = cfg.arms();
    let repeats = cfg.experiment.repeats;
    let mut runs: Vec<Vec<ArmRun>> = vec![Vec::with_capacity(repeats); arms.len()];
    let mut seeds = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let inputs = prepare_repeat(cfg, r)?;
        seeds.push(inputs.seed);
        for (i, &arm) in arms.iter().enumerate() {
            runs[i].push(run_arm(cfg, &inputs, arm)?);
        }
    }
    for r in 0..repeats {
        let baseline = |level: Level| -> Option<f64> {
            arms.iter()
                .position(|a| *a == Arm::new(crate::algorithms::StrategyId::FedavgSmallest, level))
                .map(|i| runs[i][r].report.final_global_accuracy)
        };
        let deltas: Vec<Option<f64>> = arms.iter().map(|a| baseline(a.level)).collect();
        for (i, d) in deltas.into_iter().enumerate() {
            if let Some(b) = d {
                let rep = &mut runs[i][r].report;
                rep.effectiveness_delta = effectiveness(rep.final_global_accuracy, b);
            }
        }
    }
    let arms = arms
        .into_iter()
        .zip(runs)
        .map(|(arm, runs)| {
            let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
            ArmResult {
                arm,
                mean: MetricsReport::mean(&reports),
                runs,
            }
        })
        .collect();
    Ok(ExperimentResult {
        scenario: cfg.scenario.name(),
        repeat_seeds: seeds,
        arms,
    })
}

pub fn summarize(cfg: &ExperimentConfig, result: &ExperimentResult) -> Summary {
    Summary {
        scenario: result.scenario.clone(),
        target_accuracy: cfg.metrics.target_accuracy,
        arms: result
            .arms
            .iter()
            .map(|a| ArmSummary {
                arm: a.arm.label(),
                strategy: a.arm.strategy.to_string(),
                level: a.arm.level.to_string(),
                mean: a.mean.clone(),
                repeats: a.runs.iter().map(|r| r.report.clone()).collect(),
                assignment_histogram: a.runs.first().map(ArmRun::assignment_histogram).unwrap_or_default(),
            })
            .collect(),
    }
}

/// Writes per-repeat CSVs, `summary.json`, the resolved `config.toml` and
/// finally `manifest.json`, each atomically.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<RunManifest> {
    let mut artifacts = Vec::new();
    for a in &result.arms {
        for (r, run) in a.runs.iter().enumerate() {
            let rel = format!("{}/repeat_{r}.csv", a.arm.label());
            let csv = crate::metrics::records_to_csv(&run.records, cfg.metrics.per_client_columns);
            write_atomic(&dir.join(&rel), csv.as_bytes())?;
            artifacts.push(rel);
        }
    }
    write_json(&dir.join("summary.json"), &summarize(cfg, result))?;
    artifacts.push("summary.json".into());
    write_atomic(&dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    artifacts.push("config.toml".into());
    let manifest = RunManifest {
        config_sha256: cfg.hash(),
        master_seed: cfg.experiment.master_seed,
        repeat_seeds: result.repeat_seeds.clone(),
        artifacts,
        version: crate::report::version_string(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// `run` subcommand: run, then persist under `cfg.output.dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<(ExperimentResult, RunManifest)> {
    let result = run_experiment(cfg)?;
    let manifest = write_outputs(cfg, &result, &cfg.output.dir)?;
    Ok((result, manifest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumClients,
    Alpha,
    Scenario,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NumClients => "num_clients",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Scenario => "scenario",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "num_clients" => Ok(SweepAxis::NumClients),
            "alpha" => Ok(SweepAxis::Alpha),
            "scenario" => Ok(SweepAxis::Scenario),
            _ => Err(Error::config("sweep.axis", format!("unknown axis `{s}`"))),
        }
    }
}

/// Config for one sweep point.
pub fn sweep_point(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let bad = |msg: String| Error::config(format!("sweep.{}", axis.as_str()), msg);
    match axis {
        SweepAxis::NumClients => {
            c.experiment.num_clients = value
                .parse()
                .map_err(|_| bad(format!("`{value}` is not a client count")))?;
        }
        SweepAxis::Alpha => {
            let alpha: f64 = value.parse().map_err(|_| bad(format!("`{value}` is not a number")))?;
            c.partition = PartitionMode::Dirichlet { alpha };
        }
        SweepAxis::Scenario => {
            let set = parse_constraints(value).map_err(|e| bad(e.to_string()))?;
            c.scenario = c.scenario.with_constraints(set);
        }
    }
    c.output.dir = cfg.output.dir.join(format!("{}={value}", axis.as_str()));
    c.validate()?;
    Ok(c)
}

/// Runs one experiment per axis value with shared seeds and writes the
/// merged `sweep_<axis>.csv`. Returns the merged CSV text.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::config("sweep.values", "at least one value is required"));
    }
    let mut csv = String::from(
        "axis,value,arm,final_global_accuracy,time_to_accuracy_s,stability_variance,effectiveness_delta\n",
    );
    for v in values {
        let point = sweep_point(cfg, axis, v)?;
        let (result, _) = run(&point)?;
        for a in &result.arms {
            let m = &a.mean;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                axis.as_str(),
                v,
                a.arm.label(),
                m.final_global_accuracy,
                m.time_to_accuracy_s.map_or_else(String::new, |t| t.to_string()),
                m.stability_variance,
                m.effectiveness_delta
            );
        }
    }
    write_atomic(&cfg.output.dir.join(format!("sweep_{}.csv", axis.as_str())), csv.as_bytes())?;
    Ok(csv)
}

/// `pool` subcommand: every arm's variants as CSV.
pub fn pool_table(cfg: &ExperimentConfig) -> Result<String> {
    let inputs_dims = match (&cfg.data.synthetic, &cfg.data.csv) {
        (Some(s), _) => (s.input_dim, s.num_classes),
        (None, Some(p)) => {
            let d = load_csv(p)?;
            (d.input_dim(), d.num_classes)
        }
        (None, None) => return Err(Error::config("data", "no data source")),
    };
    let base = cfg
        .base_spec(inputs_dims.0, inputs_dims.1)
        .map_err(|e| Error::config("model", e.to_string()))?;
    let mut out = String::from(
        "arm,index,variant,params,flops_forward,train_flops_per_sample,memory_bytes,comm_payload_bytes\n",
    );
    for arm in cfg.arms() {
        let pool = build_pool(cfg, arm, base)?;
        for (i, e) in pool.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{i},{},{},{},{},{},{}",
                arm.label(),
                e.variant,
                e.params,
                e.flops_forward,
                e.train_flops_per_sample,
                e.memory_bytes,
                e.comm_payload_bytes
            );
        }
    }
    Ok(out)
}

/// `partition` subcommand: per-client class counts of repeat 0.
pub fn partition_table(cfg: &ExperimentConfig) -> Result<String> {
    let inputs = prepare_repeat(cfg, 0)?;
    let k = inputs.base.num_classes;
    let hist = partition_histograms(&inputs.split.train.labels, k, &inputs.client_indices);
    let mut out = String::from("client,samples");
    for c in 0..k {
        let _ = write!(out, ",class_{c}");
    }
    out.push('\n');
    for (i, h) in hist.iter().enumerate() {
        let _ = write!(out, "{i},{}", h.iter().sum::<usize>());
        for v in h {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}
