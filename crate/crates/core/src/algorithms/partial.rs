//! Parameter-sharing strategies.
//!
//! [`SubModelStrategy`] covers the extraction-based methods (Fjord,
//! SHeteroFL, FedRolex, InclusiveFL, DepthFL): each client trains a slice of
//! one global model and the server averages every coordinate over the
//! clients that hold it. [`FullModel`] covers plain FedAvg and FeDepth, where
//! every client trains the same architecture.
//!
//! Simplifications relative to the cited methods: InclusiveFL omits momentum
//! distillation between depths, and DepthFL's mutual distillation uses the
//! summed pairwise KL with detached teachers.

use rand::seq::IndexedRandom;

use super::{
    all_layers, check_sampled, local_sgd, ClientUpload, Evaluation, Federation, RoundOutput, Strategy,
    StrategyId, Supervision,
};
use crate::hetero::{
    extract_depth, extract_width, extract_width_indices, lift_gradient, weighted_average, Aggregator,
    ChannelSelector, SubModelMap, WidthRate,
};
use crate::metrics::Accuracy;
use crate::nn::train::{accuracy, minibatches};
use crate::nn::{backward, BlockNetModel, HeadSet, LossSpec, ModelShape, Sgd, Targets};
use crate::resource::{segment_layers, Variant};
use crate::rng::{stream, tag, SimRng};
use crate::{Error, Result};

/// Extraction-based partial-aggregation strategy.
pub struct SubModelStrategy {
    id: StrategyId,
    global: BlockNetModel,
    loss: LossSpec,
    /// Fjord's rate ladder, ascending.
    ladder: Vec<WidthRate>,
}

impl SubModelStrategy {
    pub fn new(id: StrategyId, fed: &Federation<'_>) -> Result<Self> {
        let base = fed.base;
        let shape = match id {
            StrategyId::Fjord | StrategyId::Sheterofl | StrategyId::Fedrolex => ModelShape::single_head(base),
            StrategyId::Depthfl => ModelShape::per_block(base),
            StrategyId::Inclusivefl => {
                // one exit per ladder depth, plus the full-depth exit
                let mut exits: Vec<usize> = fed
                    .pool
                    .entries
                    .iter()
                    .filter_map(|e| match e.variant {
                        Variant::Depth { prefix, .. } => Some(prefix),
                        _ => None,
                    })
                    .chain([base.num_blocks])
                    .collect();
                exits.sort_unstable();
                exits.dedup();
                ModelShape::new(base, exits)?
            }
            other => {
                return Err(Error::InvalidArgument(format!("{other} is not a sub-model strategy")));
            }
        };
        let loss = if id == StrategyId::Depthfl {
            let l = LossSpec::cross_entropy(HeadSet::All);
            if fed.params.lambda_kd > 0.0 {
                l.with_self_distill(fed.params.lambda_kd)
            } else {
                l
            }
        } else {
            LossSpec::cross_entropy(HeadSet::Final)
        };
        let mut ladder: Vec<WidthRate> = fed
            .pool
            .entries
            .iter()
            .filter_map(|e| match e.variant {
                Variant::Width { rate } => Some(rate),
                _ => None,
            })
            .collect();
        ladder.reverse();
        let global = BlockNetModel::init(shape, &mut stream(&[fed.seed, tag::INIT]));
        Ok(SubModelStrategy { id, global, loss, ladder })
    }

    fn selector(&self, round: usize) -> ChannelSelector {
        if self.id == StrategyId::Fedrolex {
            ChannelSelector::Rolling { round }
        } else {
            ChannelSelector::StaticPrefix
        }
    }

    /// Sub-model of `variant` under `selector`.
    fn extract(&self, variant: &Variant, selector: ChannelSelector) -> Result<(BlockNetModel, SubModelMap)> {
        match *variant {
            Variant::Width { rate } => extract_width(&self.global, rate, selector),
            Variant::Depth { prefix, aux_heads } => extract_depth(&self.global, prefix, aux_heads),
            ref other => Err(Error::InvalidArgument(format!(
                "{} cannot train variant {other}",
                self.id
            ))),
        }
    }

    fn train_client(&self, fed: &Federation<'_>, k: usize, round: usize) -> Result<(BlockNetModel, SubModelMap)> {
        let (mut sub, map) = self.extract(&fed.variant(k).variant, self.selector(round))?;
        let data = &fed.clients[k];
        let mut rng = fed.train_rng(k, round);
        if self.id == StrategyId::Fjord {
            let mut dropout_rng = stream(&[fed.seed, tag::FJORD, k as u64, round as u64]);
            self.fjord_local(fed, &mut sub, k, &mut rng, &mut dropout_rng)?;
        } else {
            local_sgd(
                &mut sub,
                &data.features,
                Supervision::Labels(&data.labels),
                &self.loss,
                &fed.optimizer,
                fed.optimizer.local_epochs,
                &mut rng,
                &all_layers,
            )?;
        }
        Ok((sub, map))
    }

    /// Ordered dropout: every step trains the nested prefix sub-model of a
    /// rate drawn from the ladder entries not above the client's own rate.
    fn fjord_local(
        &self,
        fed: &Federation<'_>,
        local: &mut BlockNetModel,
        k: usize,
        rng: &mut SimRng,
        dropout_rng: &mut SimRng,
    ) -> Result<()> {
        let own = match fed.variant(k).variant {
            Variant::Width { rate } => rate,
            _ => return Err(Error::InvalidArgument("fjord needs width variants".into())),
        };
        let allowed: Vec<WidthRate> = self.ladder.iter().copied().filter(|r| *r <= own).collect();
        let d = fed.base.hidden_dim;
        let data = &fed.clients[k];
        let mut opt = Sgd::new(fed.optimizer);
        for _ in 0..fed.optimizer.local_epochs {
            for batch in minibatches(data.len(), fed.optimizer.batch_size, rng) {
                let p = match fed.params.fjord_fixed_rate {
                    Some(p) => WidthRate::new(p.min(own.value()))?,
                    None => *allowed.choose(dropout_rng).unwrap_or(&own),
                };
                let keep: Vec<usize> = (0..p.width(d).min(local.spec().hidden_dim)).collect();
                let (nested, nmap) = extract_width_indices(local, &keep)?;
                let x = data.features.select_rows(&batch);
                let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                let (l, g) = backward(&nested, &x, Targets::Labels(&y), &self.loss)?;
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("local loss became {l}")));
                }
                let g = lift_gradient(local, &g, &nmap)?;
                opt.step(local, &g)?;
            }
        }
        Ok(())
    }
}

impl Strategy for SubModelStrategy {
    fn id(&self) -> StrategyId {
        self.id
    }

    fn run_round(&mut self, fed: &Federation<'_>, sampled: &[usize], round: usize) -> Result<RoundOutput> {
        check_sampled(sampled, fed.num_clients())?;
        let trained = fed.map_clients(sampled, |k| self.train_client(fed, k, round))?;
        let mut agg = Aggregator::new(&self.global);
        let mut uploads = Vec::with_capacity(sampled.len());
        for (&k, (sub, map)) in sampled.iter().zip(&trained) {
            agg.scatter(sub, map, fed.weight(k))?;
            uploads.push(ClientUpload {
                client: k,
                samples: fed.clients[k].len(),
                exchanged_numbers: 2 * sub.parameter_count(),
            });
        }
        self.global = agg.normalize(&self.global)?;
        Ok(RoundOutput { uploads })
    }

    /// Clients are scored with their static (prefix) sub-model.
    fn evaluate(&self, fed: &Federation<'_>) -> Result<Evaluation> {
        let test = fed.test;
        let global = accuracy(&self.global, &test.features, &test.labels)?;
        let mut by_variant: Vec<Option<Accuracy>> = vec![None; fed.pool.entries.len()];
        let mut per_client = Vec::with_capacity(fed.num_clients());
        for k in 0..fed.num_clients() {
            let v = fed.assignment[k];
            let acc = match by_variant[v] {
                Some(a) => a,
                None => {
                    let (sub, _) = self.extract(&fed.pool.entries[v].variant, ChannelSelector::StaticPrefix)?;
                    let a = accuracy(&sub, &test.features, &test.labels)?;
                    by_variant[v] = Some(a);
                    a
                }
            };
            per_client.push(acc);
        }
        Ok(Evaluation {
            global_accuracy: global.value(),
            per_client,
        })
    }

    fn global_model(&self) -> Option<&BlockNetModel> {
        Some(&self.global)
    }
}

/// Every client trains the whole global architecture; the server averages.
///
/// FeDepth clients train block segments one after another with all other
/// layers frozen, so only one segment's training state is resident.
pub struct FullModel {
    id: StrategyId,
    global: BlockNetModel,
}

impl FullModel {
    pub fn new(id: StrategyId, fed: &Federation<'_>) -> Result<Self> {
        if !matches!(id, StrategyId::Fedepth | StrategyId::FedavgFull | StrategyId::FedavgSmallest) {
            return Err(Error::InvalidArgument(format!("{id} is not a full-model strategy")));
        }
        let shape = fed.pool.entries[0].shape.clone();
        if fed.pool.entries.iter().any(|e| e.shape != shape) {
            return Err(Error::InvalidArgument(format!("{id} needs a single architecture")));
        }
        let global = BlockNetModel::init(shape, &mut stream(&[fed.seed, tag::INIT]));
        Ok(FullModel { id, global })
    }

    fn train_client(&self, fed: &Federation<'_>, k: usize, round: usize) -> Result<BlockNetModel> {
        let mut local = self.global.clone();
        let data = &fed.clients[k];
        let mut rng = fed.train_rng(k, round);
        let ce = LossSpec::cross_entropy(HeadSet::Final);
        let sup = Supervision::Labels(&data.labels);
        let epochs = fed.optimizer.local_epochs;
        match fed.variant(k).variant {
            Variant::Segments { blocks_per_segment } => {
                for layers in segment_layers(local.shape(), blocks_per_segment) {
                    let active = |l: usize| layers.contains(&l);
                    local_sgd(&mut local, &data.features, sup, &ce, &fed.optimizer, epochs, &mut rng, &active)?;
                }
            }
            _ => local_sgd(&mut local, &data.features, sup, &ce, &fed.optimizer, epochs, &mut rng, &all_layers)?,
        }
        Ok(local)
    }
}

impl Strategy for FullModel {
    fn id(&self) -> StrategyId {
        self.id
    }

    fn run_round(&mut self, fed: &Federation<'_>, sampled: &[usize], round: usize) -> Result<RoundOutput> {
        check_sampled(sampled, fed.num_clients())?;
        let trained = fed.map_clients(sampled, |k| self.train_client(fed, k, round))?;
        let weighted: Vec<(&BlockNetModel, f64)> =
            sampled.iter().zip(&trained).map(|(&k, m)| (m, fed.weight(k))).collect();
        self.global = weighted_average(&weighted)?;
        let uploads = sampled
            .iter()
            .map(|&k| ClientUpload {
                client: k,
                samples: fed.clients[k].len(),
                exchanged_numbers: 2 * self.global.parameter_count(),
            })
            .collect();
        Ok(RoundOutput { uploads })
    }

    fn evaluate(&self, fed: &Federation<'_>) -> Result<Evaluation> {
        let acc = accuracy(&self.global, &fed.test.features, &fed.test.labels)?;
        Ok(Evaluation {
            global_accuracy: acc.value(),
            per_client: vec![acc; fed.num_clients()],
        })
    }

    fn global_model(&self) -> Option<&BlockNetModel> {
        Some(&self.global)
    }
}
