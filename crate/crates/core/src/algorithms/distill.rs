//! Fed-ET: ensemble distillation through a larger server model.
//!
//! Clients upload their locally trained models. On the unlabeled public
//! split the server forms a confidence-weighted consensus of their logits,
//! distills it into the server model, then distills the server model back
//! into each participating client architecture before returning it. The
//! optional diversity term blends the plain mean of client distributions
//! into the consensus target.

use super::{all_layers, check_sampled, local_sgd, ClientUpload, Evaluation, Federation, RoundOutput, Strategy, StrategyId, Supervision};
use crate::nn::train::accuracy;
use crate::nn::{softmax, BlockNetModel, HeadSet, LossSpec, Tensor};
use crate::rng::{stream, tag};
use crate::{Error, Result};

/// Per sample, `sum_k w_k z_k / sum_k w_k` with `w_k` the largest softmax
/// probability of client `k` on that sample.
pub fn consensus_logits(client_logits: &[Tensor]) -> Result<Tensor> {
    let first = client_logits
        .first()
        .ok_or_else(|| Error::InvalidArgument("consensus needs at least one client".into()))?;
    if client_logits.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::Shape("client logits disagree in shape".into()));
    }
    if client_logits.len() == 1 {
        // w z / w can be off by an ulp
        return Ok(first.clone());
    }
    let (n, c) = (first.rows(), first.cols());
    let weights: Vec<Tensor> = client_logits.iter().map(softmax).collect();
    let mut out = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        let mut total = 0.0;
        for (z, p) in client_logits.iter().zip(&weights) {
            let w = p.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            total += w;
            for (o, v) in out.row_mut(i).iter_mut().zip(z.row(i)) {
                *o += w * v;
            }
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

pub struct FedEt {
    server: BlockNetModel,
    clients: Vec<BlockNetModel>,
}

impl FedEt {
    pub fn new(fed: &Federation<'_>) -> Result<Self> {
        if fed.public.rows() == 0 {
            return Err(Error::config("data.public_fraction", "fedet requires a non-empty public split"));
        }
        let server = BlockNetModel::init(fed.pool.entries[0].shape.clone(), &mut stream(&[fed.seed, tag::INIT]));
        let clients = (0..fed.num_clients())
            .map(|k| {
                BlockNetModel::init(
                    fed.variant(k).shape.clone(),
                    &mut stream(&[fed.seed, tag::CLIENT_INIT, k as u64]),
                )
            })
            .collect();
        Ok(FedEt { server, clients })
    }

    pub fn client_model(&self, k: usize) -> &BlockNetModel {
        &self.clients[k]
    }
}

impl Strategy for FedEt {
    fn id(&self) -> StrategyId {
        StrategyId::Fedet
    }

    fn run_round(&mut self, fed: &Federation<'_>, sampled: &[usize], round: usize) -> Result<RoundOutput> {
        check_sampled(sampled, fed.num_clients())?;
        let ce = LossSpec::cross_entropy(HeadSet::Final);
        let cfg = &fed.optimizer;
        let trained = fed.map_clients(sampled, |k| {
            let data = &fed.clients[k];
            let mut model = self.clients[k].clone();
            local_sgd(
                &mut model,
                &data.features,
                Supervision::Labels(&data.labels),
                &ce,
                cfg,
                cfg.local_epochs,
                &mut fed.train_rng(k, round),
                &all_layers,
            )?;
            let logits = model.forward(fed.public)?.final_logits().clone();
            Ok((model, logits))
        })?;
        let logits: Vec<Tensor> = trained.iter().map(|(_, z)| z.clone()).collect();
        let mut target = softmax(&consensus_logits(&logits)?);
        let mu = fed.params.fedet_diversity;
        if mu > 0.0 {
            let probs: Vec<Tensor> = logits.iter().map(softmax).collect();
            let m = probs.len() as f64;
            for (j, t) in target.data_mut().iter_mut().enumerate() {
                let mean: f64 = probs.iter().map(|p| p.data()[j]).sum::<f64>() / m;
                *t = (1.0 - mu) * *t + mu * mean;
            }
        }
        let epochs = fed.params.distill_epochs;
        local_sgd(
            &mut self.server,
            fed.public,
            Supervision::Soft(&target),
            &ce,
            cfg,
            epochs,
            &mut stream(&[fed.seed, tag::SERVER, round as u64]),
            &all_layers,
        )?;
        let teacher = softmax(self.server.forward(fed.public)?.final_logits());
        let models: Vec<BlockNetModel> = trained.into_iter().map(|(m, _)| m).collect();
        let distilled = fed.map_clients(&(0..sampled.len()).collect::<Vec<_>>(), |i| {
            let k = sampled[i];
            let mut m = models[i].clone();
            local_sgd(
                &mut m,
                fed.public,
                Supervision::Soft(&teacher),
                &ce,
                cfg,
                epochs,
                &mut stream(&[fed.seed, tag::SERVER, k as u64, round as u64]),
                &all_layers,
            )?;
            Ok(m)
        })?;
        let mut uploads = Vec::with_capacity(sampled.len());
        for (&k, m) in sampled.iter().zip(distilled) {
            uploads.push(ClientUpload {
                client: k,
                samples: fed.clients[k].len(),
                exchanged_numbers: 2 * m.parameter_count(),
            });
            self.clients[k] = m;
        }
        Ok(RoundOutput { uploads })
    }

    /// Global accuracy is the server model's.
    fn evaluate(&self, fed: &Federation<'_>) -> Result<Evaluation> {
        let global = accuracy(&self.server, &fed.test.features, &fed.test.labels)?;
        let per_client = fed.map_clients(&(0..fed.num_clients()).collect::<Vec<_>>(), |k| {
            accuracy(&self.clients[k], &fed.test.features, &fed.test.labels)
        })?;
        Ok(Evaluation {
            global_accuracy: global.value(),
            per_client,
        })
    }

    fn global_model(&self) -> Option<&BlockNetModel> {
        Some(&self.server)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_client_is_identity() {
        let z = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(consensus_logits(&[z.clone()]).unwrap(), z);
        let c = consensus_logits(&[z.clone(), z.clone()]).unwrap();
        for (a, b) in c.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_clients_average() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(consensus_logits(&[a, b]).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(consensus_logits(&[]).is_err());
    }
}
