//! Oracles and generators shared by the integration tests.
//!
//! Everything here is written against plain nested loops so it shares no
//! code path with the library it checks.

#![allow(dead_code)]

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::index::sample;
use rand::Rng;

use hetfed::algorithms::{build_strategy, sample_clients, AlgorithmParams, Arm, Federation, Level, StrategyId, Weighting};
use hetfed::data::{gen_synthetic, partition, Dataset, PartitionMode, SyntheticKind, SyntheticSpec};
use hetfed::hetero::{extract_depth, extract_width_indices, Aggregator, SubModelMap, WidthRate};
use hetfed::nn::{
    backward, loss_value_with_teachers, teacher_log_probs, BlockKind, BlockNetModel, BlockNetSpec, HeadSet,
    LossSpec, ModelShape, SgdConfig, Targets, Tensor,
};
use hetfed::resource::{
    assign_models, estimate_memory, estimate_segmented_memory, Constraint, CostConfig, DeviceProfile, ModelPool,
    PoolConfig, ScenarioConfig,
};
use hetfed::rng::{stream, SimRng};

/// Denominator floor of the gradient relative error. Central differences at
/// `h = 1e-5` carry ~1e-10 absolute noise, so coordinates below this are
/// compared on absolute error instead.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> SimRng {
    stream(&[0x7e57, seed])
}

pub fn random_kind<R: Rng + ?Sized>(rng: &mut R) -> BlockKind {
    [BlockKind::Plain, BlockKind::Skip, BlockKind::Bottleneck][rng.random_range(0..3)]
}

/// Small random architecture with a random non-empty exit set.
pub fn random_shape<R: Rng + ?Sized>(rng: &mut R, max_hidden: usize) -> ModelShape {
    let kind = random_kind(rng);
    let hidden = if kind == BlockKind::Bottleneck {
        4 * rng.random_range(1..=max_hidden / 4)
    } else {
        rng.random_range(4..=max_hidden)
    };
    let blocks = rng.random_range(1..=3);
    let spec = BlockNetSpec::new(
        rng.random_range(1..=5),
        hidden,
        blocks,
        kind,
        rng.random_range(2..=4),
        rng.random_range(1..=4),
    )
    .unwrap();
    let mut exits: Vec<usize> = (1..blocks).filter(|_| rng.random_bool(0.5)).collect();
    exits.push(blocks);
    ModelShape::new(spec, exits).unwrap()
}

pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(vec![n, dim], data).unwrap()
}

/// Forward pass of one sample written as scalar loops.
pub struct ScalarForward {
    /// Logits per exit.
    pub logits: Vec<Vec<f64>>,
    /// Every pre-activation that passes through a ReLU.
    pub relu_inputs: Vec<f64>,
}

fn affine(model: &BlockNetModel, layer: usize, x: &[f64]) -> Vec<f64> {
    let l = &model.layers()[layer];
    let (out, inp) = (l.out_dim(), l.in_dim());
    assert_eq!(inp, x.len());
    let mut y = vec![0.0; out];
    for o in 0..out {
        let mut acc = l.bias.data()[o];
        for i in 0..inp {
            acc += l.weight.data()[o * inp + i] * x[i];
        }
        y[o] = acc;
    }
    y
}

pub fn scalar_forward(model: &BlockNetModel, x: &[f64]) -> ScalarForward {
    let shape = model.shape();
    let spec = shape.spec();
    let mut relu_inputs = Vec::new();
    let relu = |z: Vec<f64>, seen: &mut Vec<f64>| -> Vec<f64> {
        seen.extend_from_slice(&z);
        z.into_iter().map(|v| v.max(0.0)).collect()
    };
    let mut h = relu(affine(model, 0, x), &mut relu_inputs);
    let mut at_depth = vec![h.clone()];
    for b in 0..spec.num_blocks {
        let mut y = h.clone();
        for l in shape.block_layers(b) {
            y = relu(affine(model, l, &y), &mut relu_inputs);
        }
        if spec.block_kind != BlockKind::Plain {
            for (a, r) in y.iter_mut().zip(&h) {
                *a += r;
            }
        }
        h = y;
        at_depth.push(h.clone());
    }
    let mut logits = Vec::new();
    for (e, &d) in shape.exits().iter().enumerate() {
        let (neck, head) = shape.exit_layers(e);
        let emb = relu(affine(model, neck, &at_depth[d]), &mut relu_inputs);
        logits.push(affine(model, head, &emb));
    }
    ScalarForward { logits, relu_inputs }
}

/// Random loss: CE on a random head set, optionally with prototype and
/// self-distillation terms.
pub fn random_loss<R: Rng + ?Sized>(rng: &mut R, shape: &ModelShape) -> LossSpec {
    let ne = shape.num_exits();
    let heads = match rng.random_range(0..3) {
        0 => HeadSet::Final,
        1 => HeadSet::All,
        _ => {
            let mut v: Vec<usize> = (0..ne).filter(|_| rng.random_bool(0.5)).collect();
            if v.is_empty() {
                v.push(ne - 1);
            }
            HeadSet::Exits(v)
        }
    };
    let mut loss = LossSpec::cross_entropy(heads);
    if rng.random_bool(0.4) {
        let spec = shape.spec();
        let targets = (0..spec.num_classes)
            .map(|_| {
                rng.random_bool(0.8)
                    .then(|| (0..spec.proto_dim).map(|_| rng.random_range(0.0..1.0)).collect())
            })
            .collect();
        loss = loss.with_prototypes(rng.random_range(0.1..2.0), targets);
    }
    if ne > 1 && rng.random_bool(0.5) {
        loss = loss.with_self_distill(rng.random_range(0.05..0.5));
    }
    loss
}

/// Largest relative error between the analytic gradient and a central
/// difference, with `floor` guarding near-zero coordinates.
pub fn gradient_error(model: &BlockNetModel, x: &Tensor, labels: &[usize], loss: &LossSpec, floor: f64) -> f64 {
    let h = 1e-5;
    let (_, g) = backward(model, x, Targets::Labels(labels), loss).unwrap();
    let analytic = g.flat();
    // the distillation teachers are detached, so they stay fixed under perturbation
    let teachers = teacher_log_probs(model, x, loss).unwrap();
    let eval = |m: &BlockNetModel| loss_value_with_teachers(m, x, Targets::Labels(labels), loss, &teachers).unwrap();
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    for layer in 0..model.layers().len() {
        let sizes = [model.layers()[layer].weight.len(), model.layers()[layer].bias.len()];
        for (part, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let tweak = |m: &mut BlockNetModel, d: f64| {
                    let l = &mut m.layers_mut()[layer];
                    let t = if part == 0 { &mut l.weight } else { &mut l.bias };
                    t.data_mut()[i] += d;
                };
                tweak(&mut plus, h);
                tweak(&mut minus, -h);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(rel);
                idx += 1;
            }
        }
    }
    assert_eq!(idx, analytic.len());
    worst
}

/// One random gradient case away from ReLU kinks. Returns the error and the
/// number of parameters checked.
pub fn gradient_case(seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    loop {
        let shape = random_shape(&mut r, 8);
        let model = BlockNetModel::init(shape.clone(), &mut r);
        let n = r.random_range(1..=4);
        let x = random_batch(&mut r, n, shape.spec().input_dim);
        let margin = (0..n)
            .flat_map(|i| scalar_forward(&model, x.row(i)).relu_inputs)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin < 1e-3 {
            continue;
        }
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..shape.spec().num_classes)).collect();
        let loss = random_loss(&mut r, &shape);
        let err = gradient_error(&model, &x, &labels, &loss, GRAD_FLOOR);
        return (err, model.flat_params().len());
    }
}

/// Per-coordinate weighted mean over exactly the contributors holding the
/// coordinate; untouched coordinates keep `previous`.
pub fn brute_force_aggregate(previous: &BlockNetModel, subs: &[(BlockNetModel, SubModelMap, f64)]) -> BlockNetModel {
    let mut out = previous.clone();
    for gl in 0..previous.layers().len() {
        let (rows, cols) = (previous.layers()[gl].out_dim(), previous.layers()[gl].in_dim());
        for r in 0..rows {
            for c in 0..=cols {
                // c == cols stands for the bias entry of row r
                let mut num = 0.0;
                let mut den = 0.0;
                for (sub, map, w) in subs {
                    for (sl, lm) in map.layers.iter().enumerate() {
                        if lm.global_layer != gl {
                            continue;
                        }
                        let Some(i) = lm.rows.iter().position(|&x| x == r) else { continue };
                        let s = &sub.layers()[sl];
                        let v = if c == cols {
                            s.bias.data()[i]
                        } else {
                            let Some(j) = lm.cols.iter().position(|&x| x == c) else { continue };
                            s.weight.data()[i * s.in_dim() + j]
                        };
                        num += w * v;
                        den += w;
                    }
                }
                if den > 0.0 {
                    let l = &mut out.layers_mut()[gl];
                    if c == cols {
                        l.bias.data_mut()[r] = num / den;
                    } else {
                        l.weight.data_mut()[r * cols + c] = num / den;
                    }
                }
            }
        }
    }
    out
}

/// Linearly separable-ish toy data for federation tests.
pub fn toy_clients(num_clients: usize, per_client: usize, dim: usize, classes: usize, seed: u64) -> Vec<Dataset> {
    let mut r = rng(seed);
    (0..num_clients)
        .map(|_| {
            let labels: Vec<usize> = (0..per_client).map(|_| r.random_range(0..classes)).collect();
            let data = labels
                .iter()
                .flat_map(|&y| {
                    let mut row: Vec<f64> = (0..dim).map(|_| r.random_range(-0.5..0.5)).collect();
                    row[y % dim] += 1.5;
                    row
                })
                .collect();
            Dataset::new(Tensor::new(vec![per_client, dim], data).unwrap(), labels, classes).unwrap()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Standard 100/75/50/25 ladder pool over `base`.
pub fn ladder_pool(strategy: StrategyId, level: Level, base: BlockNetSpec, batch: usize) -> ModelPool {
    let rates = [1.0, 0.75, 0.5, 0.25].map(|r| WidthRate::new(r).unwrap()).to_vec();
    let cfg = PoolConfig { base, rates, batch_size: batch };
    ModelPool::build(strategy, level, &cfg, &CostConfig::default()).unwrap()
}

pub const POOLED: [StrategyId; 9] = [
    StrategyId::Fjord,
    StrategyId::Sheterofl,
    StrategyId::Fedrolex,
    StrategyId::Fedepth,
    StrategyId::Inclusivefl,
    StrategyId::Depthfl,
    StrategyId::Fedproto,
    StrategyId::Fedet,
    StrategyId::FedavgSmallest,
];

fn constraint_set() -> impl Strategy<Value = BTreeSet<Constraint>> {
    proptest::sample::subsequence(
        vec![Constraint::Computation, Constraint::Communication, Constraint::Memory],
        1..=3,
    )
    .prop_map(|v| v.into_iter().collect())
}

pub type AssignCase = (ModelPool, ScenarioConfig, DeviceProfile, usize);

prop_compose! {
    /// Random pool, scenario, device and local dataset size.
    pub fn assign_case()(
        strategy in proptest::sample::select(POOLED.to_vec()),
        hidden in prop_oneof![Just(16usize), Just(24), Just(32)],
        blocks in 4usize..=6,
        constraints in constraint_set(),
        t_compute in 1.0f64..400.0,
        t_comm in 1.0f64..400.0,
        rate in (5.0f64..8.0).prop_map(|e| 10f64.powf(e)),
        bw in (2.0f64..4.0).prop_map(|e| 10f64.powf(e)),
        mem in (4.0f64..6.5).prop_map(|e| 10f64.powf(e)),
        samples in 10usize..200,
    ) -> AssignCase {
        let base = BlockNetSpec::new(6, hidden, blocks, BlockKind::Skip, 4, 8).unwrap();
        let scenario = ScenarioConfig {
            constraints,
            compute_deadline_s: Some(t_compute),
            comm_deadline_s: t_comm,
            memory_tiers: ScenarioConfig::default().memory_tiers,
        };
        let profile = DeviceProfile {
            device_id: 0,
            compute_rate: rate,
            bandwidth: bw,
            memory_capacity: mem,
            tier_label: "t".into(),
        };
        (ladder_pool(strategy, Level::Width, base, 16), scenario, profile, samples)
    }
}

pub fn assigned(pool: &ModelPool, p: &DeviceProfile, s: &ScenarioConfig, samples: usize) -> Option<usize> {
    assign_models(pool, std::slice::from_ref(p), s, &[samples], 2).ok().map(|v| v[0])
}

/// Enlarges one capacity of `p` (0 compute, 1 bandwidth, 2 memory).
pub fn enlarged(p: &DeviceProfile, which: usize, factor: f64) -> DeviceProfile {
    let mut q = p.clone();
    match which {
        0 => q.compute_rate *= factor,
        1 => q.bandwidth *= factor,
        _ => q.memory_capacity *= factor,
    }
    q
}

pub fn feasible_intersection(pool: &ModelPool, p: &DeviceProfile, s: &ScenarioConfig, samples: usize) -> BTreeSet<usize> {
    s.constraints
        .iter()
        .map(|&c| {
            let single = s.with_constraints(BTreeSet::from([c]));
            hetfed::resource::feasible_set(pool, p, &single, samples, 2)
                .into_iter()
                .collect::<BTreeSet<usize>>()
        })
        .reduce(|a, b| a.intersection(&b).copied().collect())
        .unwrap_or_default()
}

/// Small federation fixture: toy clients plus a held-out test client.
pub struct World {
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    pub public: Tensor,
    pub base: BlockNetSpec,
}

impl World {
    pub fn new(num_clients: usize) -> World {
        let mut clients = toy_clients(num_clients + 1, 24, 6, 3, 42);
        let test = clients.pop().unwrap();
        World {
            public: test.features.clone(),
            clients,
            test,
            base: BlockNetSpec::new(6, 16, 4, BlockKind::Skip, 3, 8).unwrap(),
        }
    }

    pub fn fed<'a>(&'a self, pool: &'a ModelPool, assignment: &'a [usize], params: AlgorithmParams, parallel: bool) -> Federation<'a> {
        Federation {
            base: self.base,
            clients: &self.clients,
            test: &self.test,
            public: &self.public,
            pool,
            assignment,
            optimizer: SgdConfig {
                learning_rate: 0.1,
                batch_size: 8,
                local_epochs: 2,
                momentum: 0.5,
            },
            params,
            weighting: Weighting::Samples,
            seed: 77,
            parallel,
        }
    }
}

/// Global parameters after each of `rounds` rounds, half the clients per round.
pub fn trajectory(f: &Federation<'_>, strategy: StrategyId, rounds: usize) -> Vec<Vec<f64>> {
    let mut s = build_strategy(Arm::new(strategy, Level::Width), f).unwrap();
    (0..rounds)
        .map(|t| {
            let sampled = sample_clients(f.num_clients(), 0.5, f.seed, t);
            s.run_round(f, &sampled, t).unwrap();
            s.global_model().unwrap().flat_params()
        })
        .collect()
}

/// Largest parameter gap between each width method at full capacity and
/// FedAvg over five rounds.
pub fn fedavg_degeneracy_gaps() -> Vec<(StrategyId, f64)> {
    let w = World::new(8);
    let full = vec![0; 8];
    let ref_pool = ladder_pool(StrategyId::FedavgFull, Level::Width, w.base, 8);
    let reference = trajectory(&w.fed(&ref_pool, &full, AlgorithmParams::default(), true), StrategyId::FedavgFull, 5);
    [StrategyId::Sheterofl, StrategyId::Fjord, StrategyId::Fedrolex]
        .into_iter()
        .map(|strategy| {
            let p = ladder_pool(strategy, Level::Width, w.base, 8);
            let params = AlgorithmParams {
                fjord_fixed_rate: Some(1.0),
                ..AlgorithmParams::default()
            };
            let got = trajectory(&w.fed(&p, &full, params, true), strategy, 5);
            let gap = got.iter().zip(&reference).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
            (strategy, gap)
        })
        .collect()
}

/// Labels of the 2000-point blobs set used by the partition checks.
pub fn blob_labels(seed: u64) -> Vec<usize> {
    let spec = SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n: 2000,
        input_dim: 16,
        num_classes: 5,
        noise: 0.35,
        clusters_per_class: 4,
    };
    gen_synthetic(&spec, seed).unwrap().labels
}

pub fn label_shares(labels: &[usize], idx: &[usize], classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for &i in idx {
        h[labels[i]] += 1.0;
    }
    let n = idx.len() as f64;
    h.iter().map(|c| c / n).collect()
}

/// Mean over clients of KL(client || global), computed from scratch.
pub fn mean_kl(labels: &[usize], parts: &[Vec<usize>], classes: usize) -> f64 {
    let all: Vec<usize> = (0..labels.len()).collect();
    let g = label_shares(labels, &all, classes);
    let kl: f64 = parts
        .iter()
        .map(|p| {
            label_shares(labels, p, classes)
                .iter()
                .zip(&g)
                .filter(|(q, _)| **q > 0.0)
                .map(|(q, g)| q * (q / g).ln())
                .sum::<f64>()
        })
        .sum();
    kl / parts.len() as f64
}

/// Largest absolute gap between any client's class share and the global one.
pub fn dirichlet_share_gap(alpha: f64, seed: u64) -> f64 {
    let labels = blob_labels(seed);
    let parts = partition(&labels, 5, PartitionMode::Dirichlet { alpha }, 20, seed).unwrap();
    let all: Vec<usize> = (0..labels.len()).collect();
    let g = label_shares(&labels, &all, 5);
    parts
        .iter()
        .flat_map(|p| label_shares(&labels, p, 5).into_iter().zip(g.clone()).map(|(q, g)| (q - g).abs()))
        .fold(0.0, f64::max)
}

/// Mean client KL at `alpha`, averaged over seeds 0..5.
pub fn mean_kl_over_seeds(alpha: f64) -> f64 {
    (0..5)
        .map(|seed| {
            let labels = blob_labels(seed);
            let parts = partition(&labels, 5, PartitionMode::Dirichlet { alpha }, 20, seed).unwrap();
            mean_kl(&labels, &parts, 5)
        })
        .sum::<f64>()
        / 5.0
}

/// Random client sub-model of `global`, with its values jittered as if trained.
pub fn random_client<R: Rng>(r: &mut R, global: &BlockNetModel) -> (BlockNetModel, SubModelMap, f64) {
    let spec = global.spec();
    let width_ok = spec.block_kind != BlockKind::Bottleneck;
    let (mut sub, map) = if width_ok && r.random_bool(0.5) {
        let d = spec.hidden_dim;
        let k = r.random_range(4..=d);
        let mut idx = sample(r, d, k).into_vec();
        idx.sort_unstable();
        extract_width_indices(global, &idx).unwrap()
    } else {
        let prefix = r.random_range(1..=spec.num_blocks);
        extract_depth(global, prefix, r.random_bool(0.5)).unwrap()
    };
    for l in sub.layers_mut() {
        for v in l.weight.data_mut().iter_mut().chain(l.bias.data_mut()) {
            *v += r.random_range(-0.3..0.3);
        }
    }
    (sub, map, r.random_range(0.1..3.0))
}

/// Scatter/normalize against the brute-force oracle on one random case.
pub fn aggregation_case_diff<R: Rng>(r: &mut R) -> f64 {
    let shape = random_shape(r, 8);
    let global = BlockNetModel::init(shape, r);
    let clients: Vec<_> = (0..r.random_range(1..=5)).map(|_| random_client(r, &global)).collect();
    let mut agg = Aggregator::new(&global);
    for (sub, map, w) in &clients {
        agg.scatter(sub, map, *w).unwrap();
    }
    let got = agg.normalize(&global).unwrap();
    let want = brute_force_aggregate(&global, &clients);
    max_abs_diff(&got.flat_params(), &want.flat_params())
}

/// `(name, estimated, measured)` memory ratios against SHeteroFL at equal spec.
/// Measured: 1220, 780 and 631 MB against 593 MB on device.
pub fn memory_ratios() -> Vec<(String, f64, f64)> {
    let spec = BlockNetSpec::new(16, 32, 4, BlockKind::Skip, 5, 16).unwrap();
    let shape = ModelShape::single_head(spec);
    let cost = CostConfig::default();
    let base = estimate_memory(&shape, 16, StrategyId::Sheterofl, &cost);
    let mut out: Vec<_> = [
        (StrategyId::Depthfl, 1220.0),
        (StrategyId::Fedrolex, 780.0),
        (StrategyId::Fedepth, 631.0),
    ]
    .into_iter()
    .map(|(s, mb)| (s.to_string(), estimate_memory(&shape, 16, s, &cost) / base, mb / 593.0))
    .collect();
    let segment = estimate_segmented_memory(&shape, 4, 16, &cost) / base;
    out.push(("fedepth (one segment)".into(), segment, 631.0 / 593.0));
    out
}
