//! Minibatch iteration and evaluation helpers shared by all strategies.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{BlockNetModel, Tensor};
use crate::metrics::Accuracy;
use crate::Result;

/// Shuffled minibatch index lists covering `0..n` once.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs `epochs` passes of shuffled minibatches, calling `step` per batch.
pub fn for_each_batch<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    epochs: usize,
    rng: &mut R,
    mut step: impl FnMut(&[usize], &mut R) -> Result<()>,
) -> Result<()> {
    for _ in 0..epochs {
        for batch in minibatches(n, batch_size, rng) {
            step(&batch, rng)?;
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions of exit `exit` (defaults to the deepest).
pub fn predict(model: &BlockNetModel, features: &Tensor, exit: Option<usize>) -> Result<Vec<usize>> {
    let out = model.forward(features)?;
    let logits = match exit {
        Some(e) => &out.logits[e],
        None => out.final_logits(),
    };
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

pub fn accuracy(model: &BlockNetModel, features: &Tensor, labels: &[usize]) -> Result<Accuracy> {
    let pred = predict(model, features, None)?;
    Ok(Accuracy::from_predictions(&pred, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn minibatches_cover_each_index_once() {
        let mut rng = stream(&[3]);
        let mut all: Vec<usize> = minibatches(23, 5, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }
}
