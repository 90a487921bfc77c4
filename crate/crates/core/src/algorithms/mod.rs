//! MHFL strategies over a common synchronous round protocol.
//!
//! A round samples clients, trains each one independently on its own RNG
//! stream (optionally in parallel), then aggregates at a deterministic
//! barrier. Client results are always merged in ascending client order.

mod distill;
mod ids;
mod partial;
mod proto;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use distill::{consensus_logits, FedEt};
pub use ids::{Arm, Level, StrategyId};
pub use partial::{FullModel, SubModelStrategy};
pub use proto::{aggregate_prototypes, local_prototypes, FedProto, Prototype};

use crate::data::Dataset;
use crate::metrics::Accuracy;
use crate::nn::{backward, BlockNetModel, BlockNetSpec, LossSpec, Sgd, SgdConfig, Targets, Tensor};
use crate::resource::{ModelPool, VariantStats};
use crate::rng::{stream, tag, SimRng};
use crate::{Error, Result};

/// Strategy hyperparameters not covered by the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmParams {
    /// DepthFL self-distillation weight.
    pub lambda_kd: f64,
    /// FedProto prototype-regularizer weight.
    pub lambda_proto: f64,
    /// Fjord: use this rate (capped at the client's own) instead of sampling.
    pub fjord_fixed_rate: Option<f64>,
    /// Fed-ET: blend weight of the mean client distribution into the
    /// consensus target. 0 disables it.
    pub fedet_diversity: f64,
    /// Epochs over the public split for each Fed-ET distillation pass.
    pub distill_epochs: usize,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        AlgorithmParams {
            lambda_kd: 0.1,
            lambda_proto: 1.0,
            fjord_fixed_rate: None,
            fedet_diversity: 0.0,
            distill_epochs: 1,
        }
    }
}

impl AlgorithmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kd >= 0.0) {
            return Err(Error::config("algorithms.lambda_kd", "must be >= 0"));
        }
        if !(self.lambda_proto >= 0.0) {
            return Err(Error::config("algorithms.lambda_proto", "must be >= 0"));
        }
        if let Some(p) = self.fjord_fixed_rate {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config("algorithms.fjord_fixed_rate", "must lie in (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.fedet_diversity) {
            return Err(Error::config("algorithms.fedet_diversity", "must lie in [0, 1]"));
        }
        if self.distill_epochs == 0 {
            return Err(Error::config("algorithms.distill_epochs", "must be >= 1"));
        }
        Ok(())
    }
}

/// How client contributions are weighted during aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    #[default]
    Samples,
}

/// Everything a strategy may read during a run.
pub struct Federation<'a> {
    /// Full-size architecture of the width/depth global model.
    pub base: BlockNetSpec,
    /// Local training data per client id.
    pub clients: &'a [Dataset],
    pub test: &'a Dataset,
    /// Unlabeled server-side features.
    pub public: &'a Tensor,
    pub pool: &'a ModelPool,
    /// Pool index per client id.
    pub assignment: &'a [usize],
    pub optimizer: SgdConfig,
    pub params: AlgorithmParams,
    pub weighting: Weighting,
    pub seed: u64,
    pub parallel: bool,
}

impl Federation<'_> {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn variant(&self, client: usize) -> &VariantStats {
        &self.pool.entries[self.assignment[client]]
    }

    pub fn weight(&self, client: usize) -> f64 {
        match self.weighting {
            Weighting::Uniform => 1.0,
            Weighting::Samples => self.clients[client].len() as f64,
        }
    }

    /// Local-training stream of `client` in `round`.
    pub fn train_rng(&self, client: usize, round: usize) -> SimRng {
        stream(&[self.seed, tag::TRAIN, client as u64, round as u64])
    }

    /// Applies `f` to every id in `ids`, in parallel when enabled. Results
    /// keep the order of `ids`; the first error (in that order) wins.
    pub fn map_clients<T: Send>(&self, ids: &[usize], f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
        if self.parallel {
            ids.par_iter().map(|&k| f(k)).collect::<Vec<_>>().into_iter().collect()
        } else {
            ids.iter().map(|&k| f(k)).collect()
        }
    }
}

/// What one client exchanged in a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpload {
    pub client: usize,
    pub samples: usize,
    /// Numbers sent up plus down.
    pub exchanged_numbers: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutput {
    pub uploads: Vec<ClientUpload>,
}

/// Accuracy on the global test set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub global_accuracy: f64,
    /// Indexed by client id; each client's own model.
    pub per_client: Vec<Accuracy>,
}

pub trait Strategy: Send {
    fn id(&self) -> StrategyId;

    fn run_round(&mut self, fed: &Federation<'_>, sampled: &[usize], round: usize) -> Result<RoundOutput>;

    fn evaluate(&self, fed: &Federation<'_>) -> Result<Evaluation>;

    /// Shared global model, if the strategy has one.
    fn global_model(&self) -> Option<&BlockNetModel>;
}

/// Instantiates the strategy of `arm` with its initial global state.
pub fn build_strategy(arm: Arm, fed: &Federation<'_>) -> Result<Box<dyn Strategy>> {
    if fed.assignment.len() != fed.num_clients() {
        return Err(Error::InvalidArgument("one assignment per client required".into()));
    }
    if fed.pool.strategy != arm.strategy {
        return Err(Error::InvalidArgument(format!(
            "pool built for {} used with {}",
            fed.pool.strategy, arm.strategy
        )));
    }
    Ok(match arm.strategy {
        StrategyId::Fjord
        | StrategyId::Sheterofl
        | StrategyId::Fedrolex
        | StrategyId::Inclusivefl
        | StrategyId::Depthfl => Box::new(SubModelStrategy::new(arm.strategy, fed)?),
        StrategyId::Fedepth | StrategyId::FedavgFull | StrategyId::FedavgSmallest => {
            Box::new(FullModel::new(arm.strategy, fed)?)
        }
        StrategyId::Fedproto => Box::new(FedProto::new(fed)?),
        StrategyId::Fedet => Box::new(FedEt::new(fed)?),
    })
}

/// `ceil(fraction * n)` (at least one) clients by seeded shuffle, returned in
/// ascending id order.
pub fn sample_clients(n: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let m = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut stream(&[seed, tag::SAMPLING, round as u64]));
    let mut out = ids[..m].to_vec();
    out.sort_unstable();
    out
}

/// Supervision used by [`local_sgd`].
#[derive(Clone, Copy)]
pub(crate) enum Supervision<'a> {
    Labels(&'a [usize]),
    Soft(&'a Tensor),
}

/// Minibatch SGD for `epochs` passes with a fresh optimizer. Only layers for
/// which `trainable` holds are updated.
pub(crate) fn local_sgd(
    model: &mut BlockNetModel,
    features: &Tensor,
    sup: Supervision<'_>,
    loss: &LossSpec,
    cfg: &SgdConfig,
    epochs: usize,
    rng: &mut SimRng,
    trainable: &dyn Fn(usize) -> bool,
) -> Result<()> {
    let mut opt = Sgd::new(*cfg);
    let n = features.rows();
    for _ in 0..epochs {
        for batch in crate::nn::train::minibatches(n, cfg.batch_size, rng) {
            let x = features.select_rows(&batch);
            let (loss_value, grad) = match sup {
                Supervision::Labels(labels) => {
                    let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    backward(model, &x, Targets::Labels(&y), loss)?
                }
                Supervision::Soft(t) => {
                    let y = t.select_rows(&batch);
                    backward(model, &x, Targets::Soft(&y), loss)?
                }
            };
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!("local loss became {loss_value}")));
            }
            opt.step_layers(model, &grad, trainable)?;
        }
    }
    Ok(())
}

pub(crate) fn all_layers(_: usize) -> bool {
    true
}

pub(crate) fn check_sampled(sampled: &[usize], n: usize) -> Result<()> {
    if sampled.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    if sampled.windows(2).any(|w| w[0] >= w[1]) || sampled.iter().any(|&k| k >= n) {
        return Err(Error::InvalidArgument(format!("invalid sample set {sampled:?}")));
    }
    Ok(())
}
