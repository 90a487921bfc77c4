//! FedProto: private heterogeneous models federated through per-class
//! embedding prototypes only.

use super::{check_sampled, local_sgd, ClientUpload, Evaluation, Federation, RoundOutput, Strategy, StrategyId, Supervision};
use crate::metrics::mean_accuracy;
use crate::nn::train::accuracy;
use crate::nn::{BlockNetModel, HeadSet, LossSpec};
use crate::resource::payload_numbers;
use crate::rng::{stream, tag};
use crate::{Error, Result};

/// Mean embedding of one class on one client.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
    /// Samples behind the mean; zero means the vector is zero and ignored.
    pub support_count: usize,
}

/// Per-class mean embeddings of `model` on the given samples.
pub fn local_prototypes(
    model: &BlockNetModel,
    features: &crate::nn::Tensor,
    labels: &[usize],
) -> Result<Vec<Prototype>> {
    let spec = model.spec();
    let emb = model.forward(features)?.embedding;
    let mut protos: Vec<Prototype> = (0..spec.num_classes)
        .map(|c| Prototype {
            class_id: c,
            vector: vec![0.0; spec.proto_dim],
            support_count: 0,
        })
        .collect();
    for (i, &y) in labels.iter().enumerate() {
        let p = &mut protos[y];
        p.support_count += 1;
        for (a, b) in p.vector.iter_mut().zip(emb.row(i)) {
            *a += b;
        }
    }
    for p in &mut protos {
        if p.support_count > 0 {
            let n = p.support_count as f64;
            p.vector.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(protos)
}

/// Support-weighted mean per class over clients with non-zero support.
/// Classes nobody supports come back with a zero vector and zero support.
pub fn aggregate_prototypes(clients: &[Vec<Prototype>]) -> Result<Vec<Prototype>> {
    let dim = clients
        .iter()
        .flatten()
        .map(|p| p.vector.len())
        .next()
        .ok_or_else(|| Error::InvalidArgument("no prototypes to aggregate".into()))?;
    let classes = clients.iter().flatten().map(|p| p.class_id + 1).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut support = vec![0usize; classes];
    for p in clients.iter().flatten() {
        if p.vector.len() != dim {
            return Err(Error::Shape(format!(
                "prototype of class {} has {} entries, expected {dim}",
                p.class_id,
                p.vector.len()
            )));
        }
        if p.support_count == 0 {
            continue;
        }
        let w = p.support_count as f64;
        for (s, v) in sums[p.class_id].iter_mut().zip(&p.vector) {
            *s += w * v;
        }
        support[p.class_id] += p.support_count;
    }
    Ok(sums
        .into_iter()
        .zip(support)
        .enumerate()
        .map(|(c, (mut v, n))| {
            if n > 0 {
                v.iter_mut().for_each(|x| *x /= n as f64);
            }
            Prototype {
                class_id: c,
                vector: v,
                support_count: n,
            }
        })
        .collect())
}

pub struct FedProto {
    models: Vec<BlockNetModel>,
    /// Indexed by class; `None` until some client has reported the class.
    global: Vec<Option<Vec<f64>>>,
}

impl FedProto {
    pub fn new(fed: &Federation<'_>) -> Result<Self> {
        let proto_dims: Vec<usize> = fed.pool.entries.iter().map(|e| e.shape.spec().proto_dim).collect();
        if proto_dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::config("pool", "fedproto needs a shared proto_dim"));
        }
        let models = (0..fed.num_clients())
            .map(|k| {
                BlockNetModel::init(
                    fed.variant(k).shape.clone(),
                    &mut stream(&[fed.seed, tag::CLIENT_INIT, k as u64]),
                )
            })
            .collect();
        Ok(FedProto {
            models,
            global: vec![None; fed.base.num_classes],
        })
    }

    pub fn global_prototypes(&self) -> &[Option<Vec<f64>>] {
        &self.global
    }

    pub fn client_model(&self, k: usize) -> &BlockNetModel {
        &self.models[k]
    }
}

impl Strategy for FedProto {
    fn id(&self) -> StrategyId {
        StrategyId::Fedproto
    }

    fn run_round(&mut self, fed: &Federation<'_>, sampled: &[usize], round: usize) -> Result<RoundOutput> {
        check_sampled(sampled, fed.num_clients())?;
        let loss = LossSpec::cross_entropy(HeadSet::Final).with_prototypes(fed.params.lambda_proto, self.global.clone());
        let results = fed.map_clients(sampled, |k| {
            let data = &fed.clients[k];
            let mut model = self.models[k].clone();
            local_sgd(
                &mut model,
                &data.features,
                Supervision::Labels(&data.labels),
                &loss,
                &fed.optimizer,
                fed.optimizer.local_epochs,
                &mut fed.train_rng(k, round),
                &super::all_layers,
            )?;
            let protos = local_prototypes(&model, &data.features, &data.labels)?;
            Ok((model, protos))
        })?;
        let mut uploads = Vec::with_capacity(sampled.len());
        let mut reported = Vec::with_capacity(sampled.len());
        for (&k, (model, protos)) in sampled.iter().zip(results) {
            uploads.push(ClientUpload {
                client: k,
                samples: fed.clients[k].len(),
                exchanged_numbers: payload_numbers(StrategyId::Fedproto, model.shape()),
            });
            self.models[k] = model;
            reported.push(protos);
        }
        for p in aggregate_prototypes(&reported)? {
            if p.support_count > 0 && p.class_id < self.global.len() {
                self.global[p.class_id] = Some(p.vector);
            }
        }
        Ok(RoundOutput { uploads })
    }

    /// No global model exists; global accuracy is the mean client accuracy.
    fn evaluate(&self, fed: &Federation<'_>) -> Result<Evaluation> {
        let per_client = fed.map_clients(&(0..fed.num_clients()).collect::<Vec<_>>(), |k| {
            accuracy(&self.models[k], &fed.test.features, &fed.test.labels)
        })?;
        Ok(Evaluation {
            global_accuracy: mean_accuracy(&per_client),
            per_client,
        })
    }

    fn global_model(&self) -> Option<&BlockNetModel> {
        None
    }
}
