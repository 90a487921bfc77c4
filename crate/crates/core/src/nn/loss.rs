use super::model::{BlockNetModel, Linear, Trace};
use super::Tensor;
use crate::{Error, Result};

/// Which exits contribute a supervised term.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadSet {
    /// Deepest exit only.
    Final,
    /// Every exit of the model.
    All,
    /// Explicit exit indices.
    Exits(Vec<usize>),
}

/// Squared-distance pull of the final embedding toward per-class targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeLoss {
    pub weight: f64,
    /// Indexed by class; `None` classes contribute nothing.
    pub targets: Vec<Option<Vec<f64>>>,
}

/// Scalar training objective.
///
/// `sum_h CE(h) + proto.weight * mean ||emb - t_y||^2
///  + self_distill * sum_{i != j} KL(p_i || sg(p_j))`, every term averaged
/// over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub heads: HeadSet,
    pub prototype: Option<PrototypeLoss>,
    pub self_distill: Option<f64>,
}

impl LossSpec {
    pub fn cross_entropy(heads: HeadSet) -> Self {
        LossSpec {
            heads,
            prototype: None,
            self_distill: None,
        }
    }

    pub fn with_prototypes(mut self, weight: f64, targets: Vec<Option<Vec<f64>>>) -> Self {
        self.prototype = Some(PrototypeLoss { weight, targets });
        self
    }

    pub fn with_self_distill(mut self, weight: f64) -> Self {
        self.self_distill = Some(weight);
        self
    }

    fn resolve_heads(&self, num_exits: usize) -> Result<Vec<usize>> {
        match &self.heads {
            HeadSet::Final => Ok(vec![num_exits - 1]),
            HeadSet::All => Ok((0..num_exits).collect()),
            HeadSet::Exits(v) => {
                if v.is_empty() {
                    return Err(Error::InvalidArgument("empty head set".into()));
                }
                if let Some(&bad) = v.iter().find(|&&h| h >= num_exits) {
                    return Err(Error::InvalidArgument(format!(
                        "unknown head index {bad} (model has {num_exits} exits)"
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Supervision for the cross-entropy terms.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    /// `[n, num_classes]` target distributions (distillation).
    Soft(&'a Tensor),
}

/// Gradient with the same layer structure as the model it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    layers: Vec<Linear>,
}

impl Gradient {
    pub fn zeros_like(model: &BlockNetModel) -> Self {
        Gradient {
            layers: model
                .layers()
                .iter()
                .map(|l| Linear::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Gradient { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(l.weight.data());
            v.extend_from_slice(l.bias.data());
        }
        v
    }

    pub fn matches(&self, model: &BlockNetModel) -> bool {
        self.layers.len() == model.layers().len()
            && self.layers.iter().zip(model.layers()).all(|(g, p)| {
                g.weight.same_shape(&p.weight) && g.bias.same_shape(&p.bias)
            })
    }
}

/// Row-wise log-softmax, computed as `z - max - ln(sum exp(z - max))`.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        for z in row.iter_mut() {
            *z = *z - m - lse;
        }
    }
    out
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let mut p = log_softmax(logits);
    for v in p.data_mut() {
        *v = v.exp();
    }
    p
}

/// Loss value of `spec` at the current parameters.
pub fn loss_value(
    model: &BlockNetModel,
    batch: &Tensor,
    targets: Targets<'_>,
    spec: &LossSpec,
) -> Result<f64> {
    let trace = model.trace(batch)?;
    Ok(evaluate(model, &trace, targets, spec, None)?.0)
}

/// Loss value with self-distillation teachers held fixed.
///
/// `teachers[k]` holds the log-probabilities used as the detached target for
/// the k-th selected head. Used to check gradients of the stop-gradient term.
pub fn loss_value_with_teachers(
    model: &BlockNetModel,
    batch: &Tensor,
    targets: Targets<'_>,
    spec: &LossSpec,
    teachers: &[Tensor],
) -> Result<f64> {
    let trace = model.trace(batch)?;
    Ok(evaluate(model, &trace, targets, spec, Some(teachers))?.0)
}

/// Detached log-probabilities of the selected heads at the current parameters.
pub fn teacher_log_probs(model: &BlockNetModel, batch: &Tensor, spec: &LossSpec) -> Result<Vec<Tensor>> {
    let heads = spec.resolve_heads(model.num_exits())?;
    let out = model.forward(batch)?;
    Ok(heads.iter().map(|&h| log_softmax(&out.logits[h])).collect())
}

/// Loss value and its exact gradient with respect to every parameter.
pub fn backward(
    model: &BlockNetModel,
    batch: &Tensor,
    targets: Targets<'_>,
    spec: &LossSpec,
) -> Result<(f64, Gradient)> {
    let trace = model.trace(batch)?;
    let (loss, dlogits, demb) = evaluate(model, &trace, targets, spec, None)?;
    Ok((loss, backprop(model, &trace, dlogits, demb)))
}

type LossParts = (f64, Vec<Option<Tensor>>, Option<Tensor>);

fn evaluate(
    model: &BlockNetModel,
    trace: &Trace,
    targets: Targets<'_>,
    spec: &LossSpec,
    teachers: Option<&[Tensor]>,
) -> Result<LossParts> {
    let n = trace.inputs[0].rows();
    let classes = model.spec().num_classes;
    let heads = spec.resolve_heads(model.num_exits())?;
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    match targets {
        Targets::Labels(y) => {
            if y.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} samples", y.len())));
            }
            if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range [0, {classes})"
                )));
            }
        }
        Targets::Soft(t) => {
            if t.shape() != [n, classes] {
                return Err(Error::Shape(format!(
                    "soft targets must be [{n}, {classes}], got {:?}",
                    t.shape()
                )));
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dlogits: Vec<Option<Tensor>> = vec![None; model.num_exits()];
    let log_probs: Vec<Tensor> = heads.iter().map(|&h| log_softmax(&trace.logits[h])).collect();

    for (k, &h) in heads.iter().enumerate() {
        let logp = &log_probs[k];
        let dz = dlogits[h].get_or_insert_with(|| Tensor::zeros(vec![n, classes]));
        for r in 0..n {
            let lp = logp.row(r);
            let g = dz.row_mut(r);
            match targets {
                Targets::Labels(y) => {
                    loss -= lp[y[r]] * inv_n;
                    for c in 0..classes {
                        let onehot = if c == y[r] { 1.0 } else { 0.0 };
                        g[c] += (lp[c].exp() - onehot) * inv_n;
                    }
                }
                Targets::Soft(t) => {
                    let tr = t.row(r);
                    let mass: f64 = tr.iter().sum();
                    for c in 0..classes {
                        loss -= tr[c] * lp[c] * inv_n;
                        g[c] += (lp[c].exp() * mass - tr[c]) * inv_n;
                    }
                }
            }
        }
    }

    if let Some(lambda) = spec.self_distill {
        let teach: Vec<Tensor> = match teachers {
            Some(t) => {
                if t.len() != heads.len() {
                    return Err(Error::Shape(format!(
                        "{} teachers for {} heads",
                        t.len(),
                        heads.len()
                    )));
                }
                t.to_vec()
            }
            None => log_probs.clone(),
        };
        for (i, &hi) in heads.iter().enumerate() {
            let logp = &log_probs[i];
            let dz = dlogits[hi].get_or_insert_with(|| Tensor::zeros(vec![n, classes]));
            for (j, logq) in teach.iter().enumerate() {
                if i == j {
                    continue;
                }
                for r in 0..n {
                    let lp = logp.row(r);
                    let lq = logq.row(r);
                    let kl: f64 = (0..classes).map(|c| lp[c].exp() * (lp[c] - lq[c])).sum();
                    loss += lambda * kl * inv_n;
                    let g = dz.row_mut(r);
                    for c in 0..classes {
                        g[c] += lambda * inv_n * lp[c].exp() * (lp[c] - lq[c] - kl);
                    }
                }
            }
        }
    }

    let mut demb = None;
    if let Some(proto) = &spec.prototype {
        let Targets::Labels(y) = targets else {
            return Err(Error::InvalidArgument(
                "prototype regularisation needs hard labels".into(),
            ));
        };
        let pd = model.spec().proto_dim;
        if proto.targets.len() != classes {
            return Err(Error::Shape(format!(
                "{} prototype targets for {classes} classes",
                proto.targets.len()
            )));
        }
        if proto.targets.iter().flatten().any(|t| t.len() != pd) {
            return Err(Error::Shape(format!("prototype targets must have length {pd}")));
        }
        let emb = trace.embeddings.last().expect("at least one exit");
        let mut d = Tensor::zeros(vec![n, pd]);
        for r in 0..n {
            if let Some(t) = &proto.targets[y[r]] {
                let e = emb.row(r);
                let g = d.row_mut(r);
                for c in 0..pd {
                    let diff = e[c] - t[c];
                    loss += proto.weight * diff * diff * inv_n;
                    g[c] = 2.0 * proto.weight * diff * inv_n;
                }
            }
        }
        demb = Some(d);
    }

    Ok((loss, dlogits, demb))
}

/// Accumulates `dW += dz^T x`, `db += sum dz` and returns `dz W`.
fn linear_backward(layer: &Linear, input: &Tensor, dz: &Tensor, grad: &mut Linear) -> Tensor {
    let (n, inp, out) = (input.rows(), layer.in_dim(), layer.out_dim());
    let w = layer.weight.data();
    let mut dx = Tensor::zeros(vec![n, inp]);
    {
        let gw = grad.weight.data_mut();
        for r in 0..n {
            let x = input.row(r);
            let dzr = dz.row(r);
            for o in 0..out {
                let g = dzr[o];
                if g == 0.0 {
                    continue;
                }
                let row = &mut gw[o * inp..(o + 1) * inp];
                for (gi, xi) in row.iter_mut().zip(x) {
                    *gi += g * xi;
                }
            }
        }
    }
    let gb = grad.bias.data_mut();
    for r in 0..n {
        let dzr = dz.row(r);
        for o in 0..out {
            gb[o] += dzr[o];
        }
        let dxr = dx.row_mut(r);
        for o in 0..out {
            let g = dzr[o];
            if g == 0.0 {
                continue;
            }
            for (d, wi) in dxr.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *d += g * wi;
            }
        }
    }
    dx
}

fn relu_mask(upstream: &Tensor, pre: &Tensor) -> Tensor {
    let data = upstream
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data).expect("same shape")
}

fn add_into(acc: &mut Tensor, x: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

fn backprop(
    model: &BlockNetModel,
    trace: &Trace,
    mut dlogits: Vec<Option<Tensor>>,
    demb: Option<Tensor>,
) -> Gradient {
    let shape = model.shape();
    let spec = model.spec();
    let layers = model.layers();
    let mut grad = Gradient::zeros_like(model);
    let n = trace.inputs[0].rows();
    let last = model.num_exits() - 1;

    let mut dh: Vec<Tensor> = (0..=spec.num_blocks)
        .map(|_| Tensor::zeros(vec![n, spec.hidden_dim]))
        .collect();

    for (e, &depth) in shape.exits().iter().enumerate() {
        let (neck, head) = shape.exit_layers(e);
        let mut d_emb = match dlogits[e].take() {
            Some(dz) => linear_backward(&layers[head], &trace.inputs[head], &dz, &mut grad.layers[head]),
            None => Tensor::zeros(vec![n, spec.proto_dim]),
        };
        if e == last {
            if let Some(d) = &demb {
                add_into(&mut d_emb, d);
            }
        }
        let dz = relu_mask(&d_emb, &trace.pre[neck]);
        let dx = linear_backward(&layers[neck], &trace.inputs[neck], &dz, &mut grad.layers[neck]);
        add_into(&mut dh[depth], &dx);
    }

    let skip = spec.block_kind != super::BlockKind::Plain;
    for b in (0..spec.num_blocks).rev() {
        let upstream = std::mem::replace(&mut dh[b + 1], Tensor::zeros(vec![0]));
        let mut g = upstream.clone();
        for l in shape.block_layers(b).rev() {
            let dz = relu_mask(&g, &trace.pre[l]);
            g = linear_backward(&layers[l], &trace.inputs[l], &dz, &mut grad.layers[l]);
        }
        if skip {
            add_into(&mut g, &upstream);
        }
        add_into(&mut dh[b], &g);
    }

    let dz = relu_mask(&dh[0], &trace.pre[0]);
    linear_backward(&layers[0], &trace.inputs[0], &dz, &mut grad.layers[0]);
    grad
}
