//! Device profiles, the analytic cost model, the model pool and
//! constraint-driven model assignment.
//!
//! Cost formulas (per sample unless noted):
//!
//! - forward FLOPs = `2 * MACs`; a training step costs `3 *` forward.
//! - memory = `kappa(strategy) * 8 * (3 * params + batch * activations)` bytes
//!   (weights, gradients and momentum plus stored activations). The
//!   multipliers `kappa` are calibration constants; their defaults reproduce
//!   the measured per-strategy footprint ratios at equal model size
//!   (DepthFL 1220/593, FedRolex 780/593, FeDepth 631/593 relative to
//!   static HeteroFL).
//! - FeDepth trains the full model one segment of blocks at a time, so its
//!   footprint is the largest segment footprint
//!   `8 * (params + 2 * segment_params + batch * segment_activations)`.
//! - payload = `2 * params * 8` bytes (upload plus download); FedProto sends
//!   `num_classes * (proto_dim + 1)` numbers instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Level, StrategyId};
use crate::hetero::WidthRate;
use crate::nn::{BlockKind, BlockNetSpec, ModelShape};
use crate::rng::stream;
use crate::{Error, Result};

const BYTES_PER_VALUE: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// FLOP/s.
    pub compute_rate: f64,
    /// Bytes/s.
    pub bandwidth: f64,
    /// Bytes.
    pub memory_capacity: f64,
    pub tier_label: String,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.compute_rate > 0.0 && self.bandwidth > 0.0 && self.memory_capacity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "device {} must have positive capacities",
                self.device_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Computation,
    Communication,
    Memory,
}

impl Constraint {
    pub fn as_str(self) -> &'static str {
        match self {
            Constraint::Computation => "computation",
            Constraint::Communication => "communication",
            Constraint::Memory => "memory",
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryTier {
    pub label: String,
    pub capacity_bytes: f64,
    pub fraction: f64,
}

fn default_comm_deadline() -> f64 {
    200.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub constraints: BTreeSet<Constraint>,
    /// Round training deadline; required when `computation` is active.
    #[serde(default)]
    pub compute_deadline_s: Option<f64>,
    #[serde(default = "default_comm_deadline")]
    pub comm_deadline_s: f64,
    pub memory_tiers: Vec<MemoryTier>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.constraints.is_empty() {
            return Err(Error::config("scenario.constraints", "at least one constraint must be active"));
        }
        if self.constraints.contains(&Constraint::Computation) {
            match self.compute_deadline_s {
                Some(t) if t > 0.0 => {}
                Some(_) => return Err(Error::config("scenario.compute_deadline_s", "must be > 0")),
                None => {
                    return Err(Error::config(
                        "scenario.compute_deadline_s",
                        "required when the computation constraint is active",
                    ))
                }
            }
        }
        if !(self.comm_deadline_s > 0.0) {
            return Err(Error::config("scenario.comm_deadline_s", "must be > 0"));
        }
        if self.memory_tiers.is_empty() {
            return Err(Error::config("scenario.memory_tiers", "at least one tier is required"));
        }
        for (i, t) in self.memory_tiers.iter().enumerate() {
            if !(t.capacity_bytes > 0.0) || !(t.fraction >= 0.0) {
                return Err(Error::config(
                    format!("scenario.memory_tiers[{i}]"),
                    "capacity must be > 0 and fraction >= 0",
                ));
            }
        }
        let total: f64 = self.memory_tiers.iter().map(|t| t.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "scenario.memory_tiers",
                format!("fractions must sum to 1, got {total}"),
            ));
        }
        Ok(())
    }

    /// `computation+memory` style name of the active constraint set.
    pub fn name(&self) -> String {
        self.constraints
            .iter()
            .map(|c| c.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn with_constraints(&self, constraints: BTreeSet<Constraint>) -> Self {
        ScenarioConfig {
            constraints,
            ..self.clone()
        }
    }
}

/// Parses `computation+memory` into a constraint set.
pub fn parse_constraints(name: &str) -> Result<BTreeSet<Constraint>> {
    name.split('+')
        .map(|p| match p.trim() {
            "computation" => Ok(Constraint::Computation),
            "communication" => Ok(Constraint::Communication),
            "memory" => Ok(Constraint::Memory),
            other => Err(Error::InvalidArgument(format!("unknown constraint `{other}`"))),
        })
        .collect()
}

/// Log-uniform ranges `[min, max]` for the sampled device capabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileDistribution {
    pub compute_flops: [f64; 2],
    pub bandwidth_bytes: [f64; 2],
}

impl Default for ProfileDistribution {
    fn default() -> Self {
        // 10x compute spread, 10x bandwidth spread.
        ProfileDistribution {
            compute_flops: [2.0e6, 2.0e7],
            bandwidth_bytes: [2.0e2, 2.0e3],
        }
    }
}

impl ProfileDistribution {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("compute_flops", self.compute_flops), ("bandwidth_bytes", self.bandwidth_bytes)] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return Err(Error::config(
                    format!("profiles.{name}"),
                    "expected 0 < min <= max",
                ));
            }
        }
        Ok(())
    }
}

fn log_uniform<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    rng.random_range(range[0].ln()..range[1].ln()).exp()
}

/// Exact per-tier client counts by largest remainder.
fn tier_counts(tiers: &[MemoryTier], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = tiers.iter().map(|t| t.fraction * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..tiers.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Draws `n` profiles. Compute rate and bandwidth are log-uniform; memory
/// tiers are allotted in exact proportion to their fractions and shuffled.
pub fn sample_profiles(
    dist: &ProfileDistribution,
    tiers: &[MemoryTier],
    n: usize,
    seed: u64,
) -> Result<Vec<DeviceProfile>> {
    dist.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    if tiers.is_empty() {
        return Err(Error::InvalidArgument("no memory tiers".into()));
    }
    let mut labels: Vec<usize> = tier_counts(tiers, n)
        .iter()
        .enumerate()
        .flat_map(|(t, &c)| std::iter::repeat_n(t, c))
        .collect();
    let mut rng = stream(&[seed, crate::rng::tag::TIERS]);
    labels.shuffle(&mut rng);
    let mut rng = stream(&[seed, crate::rng::tag::PROFILES]);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(id, t)| DeviceProfile {
            device_id: id,
            compute_rate: log_uniform(dist.compute_flops, &mut rng),
            bandwidth: log_uniform(dist.bandwidth_bytes, &mut rng),
            memory_capacity: tiers[t].capacity_bytes,
            tier_label: tiers[t].label.clone(),
        })
        .collect())
}

/// Per-strategy memory multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default = "default_multipliers")]
    pub memory_multipliers: BTreeMap<StrategyId, f64>,
}

fn default_multipliers() -> BTreeMap<StrategyId, f64> {
    BTreeMap::from([
        (StrategyId::Sheterofl, 1.0),
        (StrategyId::Depthfl, 1220.0 / 593.0),
        (StrategyId::Fedrolex, 780.0 / 593.0),
        (StrategyId::Fedepth, 631.0 / 593.0),
    ])
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            memory_multipliers: default_multipliers(),
        }
    }
}

impl CostConfig {
    pub fn multiplier(&self, strategy: StrategyId) -> f64 {
        self.memory_multipliers.get(&strategy).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (s, &k) in &self.memory_multipliers {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::config(format!("cost.memory_multipliers.{s}"), "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopEstimate {
    pub forward: u64,
    pub train_step: u64,
}

/// Per-sample FLOPs: forward `2 * MACs`, training step `3 * forward`.
pub fn estimate_flops(shape: &ModelShape) -> FlopEstimate {
    let forward = 2 * shape.mac_count();
    FlopEstimate {
        forward,
        train_step: 3 * forward,
    }
}

fn base_memory(params: u64, activations: u64, batch: usize) -> f64 {
    BYTES_PER_VALUE * (3.0 * params as f64 + batch as f64 * activations as f64)
}

/// Training footprint in bytes of `shape` under `strategy`.
pub fn estimate_memory(shape: &ModelShape, batch: usize, strategy: StrategyId, cost: &CostConfig) -> f64 {
    cost.multiplier(strategy) * base_memory(shape.parameter_count(), shape.activation_count(), batch)
}

/// Contiguous block ranges of at most `blocks_per_segment` blocks.
pub fn segments(num_blocks: usize, blocks_per_segment: usize) -> Vec<std::ops::Range<usize>> {
    let k = blocks_per_segment.clamp(1, num_blocks.max(1));
    (0..num_blocks)
        .step_by(k)
        .map(|s| s..(s + k).min(num_blocks))
        .collect()
}

/// Layer indices trained in each segment. The first segment owns the stem;
/// exits belong to the segment containing their attachment block.
pub fn segment_layers(shape: &ModelShape, blocks_per_segment: usize) -> Vec<Vec<usize>> {
    segments(shape.spec().num_blocks, blocks_per_segment)
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut layers = Vec::new();
            if i == 0 {
                layers.push(0);
            }
            for b in r.clone() {
                layers.extend(shape.block_layers(b));
            }
            for (e, &d) in shape.exits().iter().enumerate() {
                if d > r.start && d <= r.end {
                    let (neck, head) = shape.exit_layers(e);
                    layers.extend([neck, head]);
                }
            }
            layers
        })
        .collect()
}

/// Footprint of segment-wise training: frozen weights are resident, only the
/// active segment holds gradients, momentum and activations.
pub fn estimate_segmented_memory(
    shape: &ModelShape,
    blocks_per_segment: usize,
    batch: usize,
    cost: &CostConfig,
) -> f64 {
    let dims = shape.layer_dims();
    let params = shape.parameter_count() as f64;
    let worst = segment_layers(shape, blocks_per_segment)
        .iter()
        .map(|layers| {
            let seg_params: usize = layers.iter().map(|&l| dims[l].0 * dims[l].1 + dims[l].0).sum();
            let seg_acts: usize = layers.iter().map(|&l| dims[l].0).sum();
            BYTES_PER_VALUE * (params + 2.0 * seg_params as f64 + batch as f64 * seg_acts as f64)
        })
        .fold(0.0, f64::max);
    cost.multiplier(StrategyId::Fedepth) * worst
}

/// Model variant a client can be assigned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    /// Full base model.
    Full,
    Width { rate: WidthRate },
    Depth { prefix: usize, aux_heads: bool },
    /// Full model trained `blocks_per_segment` blocks at a time.
    Segments { blocks_per_segment: usize },
    Arch { spec: BlockNetSpec },
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::Width { rate } => write!(f, "width={}", rate.value()),
            Variant::Depth { prefix, aux_heads } => {
                write!(f, "depth={prefix}{}", if *aux_heads { "+aux" } else { "" })
            }
            Variant::Segments { blocks_per_segment } => write!(f, "segment={blocks_per_segment}"),
            Variant::Arch { spec } => write!(
                f,
                "{}x{}x{}",
                spec.block_kind.as_str(),
                spec.hidden_dim,
                spec.num_blocks
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: Variant,
    /// Shape of the model the client trains.
    pub shape: ModelShape,
    pub params: u64,
    pub flops_forward: u64,
    pub train_flops_per_sample: u64,
    pub memory_bytes: f64,
    pub comm_payload_bytes: f64,
}

impl VariantStats {
    pub fn new(
        strategy: StrategyId,
        variant: Variant,
        shape: ModelShape,
        batch: usize,
        cost: &CostConfig,
    ) -> Self {
        let params = shape.parameter_count();
        let flops = estimate_flops(&shape);
        let (memory_bytes, train_flops) = match &variant {
            Variant::Segments { blocks_per_segment } => {
                let segs = segments(shape.spec().num_blocks, *blocks_per_segment).len() as u64;
                // one forward per segment pass plus one full backward
                (
                    estimate_segmented_memory(&shape, *blocks_per_segment, batch, cost),
                    (segs + 2) * flops.forward,
                )
            }
            _ => (estimate_memory(&shape, batch, strategy, cost), flops.train_step),
        };
        VariantStats {
            params,
            flops_forward: flops.forward,
            train_flops_per_sample: train_flops,
            memory_bytes,
            comm_payload_bytes: payload_numbers(strategy, &shape) as f64 * BYTES_PER_VALUE,
            variant,
            shape,
        }
    }
}

/// Numbers exchanged per client per round (both directions).
pub fn payload_numbers(strategy: StrategyId, shape: &ModelShape) -> u64 {
    let spec = shape.spec();
    match strategy {
        StrategyId::Fedproto => (spec.num_classes * (spec.proto_dim + 1)) as u64,
        _ => 2 * shape.parameter_count(),
    }
}

/// `(train_seconds, comm_seconds)` of one round.
pub fn estimate_times(stats: &VariantStats, profile: &DeviceProfile, samples: usize, epochs: usize) -> (f64, f64) {
    let train = epochs as f64 * samples as f64 * stats.train_flops_per_sample as f64 / profile.compute_rate;
    let comm = stats.comm_payload_bytes / profile.bandwidth;
    (train, comm)
}

/// Inputs from which every strategy's pool is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub base: BlockNetSpec,
    /// Variant ladder, largest first (e.g. `1.0, 0.75, 0.5, 0.25`).
    pub rates: Vec<WidthRate>,
    pub batch_size: usize,
}

/// Candidate variants of one strategy, largest to smallest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPool {
    pub strategy: StrategyId,
    pub level: Level,
    pub entries: Vec<VariantStats>,
}

/// Topology family: rate `r` maps to width `~r*d` (multiple of 4), depth
/// `ceil(r*B)`, with block kinds cycling from the base kind.
pub fn topology_family(base: &BlockNetSpec, rates: &[WidthRate]) -> Result<Vec<BlockNetSpec>> {
    let cycle = [BlockKind::Skip, BlockKind::Bottleneck, BlockKind::Plain];
    let start = cycle.iter().position(|&k| k == base.block_kind).unwrap_or(0);
    rates
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.value() == 1.0 {
                return Ok(*base);
            }
            let hidden = (((r.value() * base.hidden_dim as f64) / 4.0).round() as usize).max(1) * 4;
            let blocks = r.width(base.num_blocks);
            let spec = BlockNetSpec {
                hidden_dim: hidden,
                num_blocks: blocks,
                block_kind: cycle[(start + i) % cycle.len()],
                ..*base
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

impl ModelPool {
    pub fn build(strategy: StrategyId, level: Level, cfg: &PoolConfig, cost: &CostConfig) -> Result<Self> {
        let level = strategy.level().unwrap_or(level);
        if cfg.rates.is_empty() {
            return Err(Error::config("pool.rates", "must not be empty"));
        }
        if cfg.rates.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("pool.rates", "must be strictly decreasing"));
        }
        let base = cfg.base;
        let batch = cfg.batch_size;
        let stats = |variant: Variant, shape: ModelShape| VariantStats::new(strategy, variant, shape, batch, cost);
        let ladder = level_ladder(level, cfg)?;
        let entries = match strategy {
            StrategyId::FedavgFull => vec![stats(Variant::Full, ModelShape::single_head(base))],
            StrategyId::FedavgSmallest => {
                let (v, shape) = ladder.last().cloned().expect("non-empty ladder");
                let v = match v {
                    Variant::Depth { prefix, .. } => Variant::Depth { prefix, aux_heads: false },
                    other => other,
                };
                let shape = match v {
                    Variant::Depth { prefix, .. } => ModelShape::single_head(base.with_blocks(prefix)),
                    _ => shape,
                };
                vec![stats(v, shape)]
            }
            StrategyId::Depthfl => ladder
                .into_iter()
                .map(|(v, _)| match v {
                    Variant::Depth { prefix, .. } => stats(
                        Variant::Depth { prefix, aux_heads: true },
                        ModelShape::per_block(base.with_blocks(prefix)),
                    ),
                    _ => unreachable!("depth ladder"),
                })
                .collect(),
            StrategyId::Fedepth => ladder
                .into_iter()
                .map(|(v, _)| match v {
                    Variant::Depth { prefix, .. } => stats(
                        Variant::Segments { blocks_per_segment: prefix },
                        ModelShape::single_head(base),
                    ),
                    _ => unreachable!("depth ladder"),
                })
                .collect(),
            _ => ladder.into_iter().map(|(v, s)| stats(v, s)).collect(),
        };
        let pool = ModelPool { strategy, level, entries };
        pool.validate()?;
        Ok(pool)
    }

    /// Entries must shrink strictly: by parameters, or by footprint for
    /// FeDepth whose variants all upload the full model.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("pool", format!("empty pool for {}", self.strategy)));
        }
        let shrinking = self.entries.windows(2).all(|w| {
            if self.strategy == StrategyId::Fedepth {
                w[0].memory_bytes > w[1].memory_bytes
            } else {
                w[0].params > w[1].params
            }
        });
        if !shrinking {
            return Err(Error::config(
                "pool.rates",
                format!("variants of {} are not strictly decreasing in size", self.strategy),
            ));
        }
        Ok(())
    }
}

fn level_ladder(level: Level, cfg: &PoolConfig) -> Result<Vec<(Variant, ModelShape)>> {
    let base = cfg.base;
    Ok(match level {
        Level::Width => cfg
            .rates
            .iter()
            .map(|&rate| {
                let spec = base.with_hidden(rate.width(base.hidden_dim));
                spec.validate()?;
                Ok((Variant::Width { rate }, ModelShape::single_head(spec)))
            })
            .collect::<Result<_>>()?,
        Level::Depth => cfg
            .rates
            .iter()
            .map(|&r| {
                let prefix = r.width(base.num_blocks);
                (
                    Variant::Depth { prefix, aux_heads: false },
                    ModelShape::single_head(base.with_blocks(prefix)),
                )
            })
            .collect(),
        Level::Topology => topology_family(&base, &cfg.rates)?
            .into_iter()
            .map(|spec| (Variant::Arch { spec }, ModelShape::single_head(spec)))
            .collect(),
    })
}

/// Whether `stats` satisfies one constraint on `profile`.
pub fn satisfies(
    stats: &VariantStats,
    profile: &DeviceProfile,
    scenario: &ScenarioConfig,
    samples: usize,
    epochs: usize,
    constraint: Constraint,
) -> bool {
    let (train, comm) = estimate_times(stats, profile, samples, epochs);
    match constraint {
        Constraint::Computation => train <= scenario.compute_deadline_s.unwrap_or(f64::INFINITY),
        Constraint::Communication => comm <= scenario.comm_deadline_s,
        Constraint::Memory => stats.memory_bytes <= profile.memory_capacity,
    }
}

/// Pool indices satisfying every active constraint.
pub fn feasible_set(
    pool: &ModelPool,
    profile: &DeviceProfile,
    scenario: &ScenarioConfig,
    samples: usize,
    epochs: usize,
) -> Vec<usize> {
    (0..pool.entries.len())
        .filter(|&i| {
            scenario
                .constraints
                .iter()
                .all(|&c| satisfies(&pool.entries[i], profile, scenario, samples, epochs, c))
        })
        .collect()
}

/// Largest feasible pool index per client. `samples[k]` is client `k`'s local
/// dataset size.
pub fn assign_models(
    pool: &ModelPool,
    profiles: &[DeviceProfile],
    scenario: &ScenarioConfig,
    samples: &[usize],
    epochs: usize,
) -> Result<Vec<usize>> {
    if pool.entries.is_empty() {
        return Err(Error::config("pool", "empty pool"));
    }
    if samples.len() != profiles.len() {
        return Err(Error::InvalidArgument("one sample count per profile required".into()));
    }
    profiles
        .iter()
        .zip(samples)
        .map(|(p, &n)| {
            feasible_set(pool, p, scenario, n, epochs)
                .first()
                .copied()
                .ok_or_else(|| {
                    let smallest = pool.entries.last().expect("non-empty");
                    let binding = scenario
                        .constraints
                        .iter()
                        .find(|&&c| !satisfies(smallest, p, scenario, n, epochs, c))
                        .copied()
                        .unwrap_or(Constraint::Memory);
                    Error::Infeasible {
                        client: p.device_id,
                        constraint: binding.to_string(),
                    }
                })
        })
        .collect()
}
