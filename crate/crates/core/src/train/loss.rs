//! Translation loss, margin loss over context corruptions, and their mix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Input, Model};
use crate::tokenizer::EncodedExample;

/// Example with one or more corrupted context sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveItem {
    pub example: EncodedExample,
    /// Encoded contexts of each corruption variant.
    pub corrupted: Vec<Vec<Vec<usize>>>,
}

/// Token-mean negative log-likelihood over the non-padding targets.
pub fn mt_loss<F: Scalar>(g: &mut Graph<F>, model: &Model<F>, batch: &[Input<'_>]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("mt batch"));
    }
    let fwd = model.forward(g, batch)?;
    let count = fwd.labels.iter().filter(|&&l| l != crate::tokenizer::PAD).count();
    let tok = model.token_log_probs(g, &fwd)?;
    let total = g.sum(tok);
    Ok(g.scale(total, -1.0 / count as f64))
}

/// Mean over items of the mean over an item's negatives of
/// `max(eta + lp[neg] - lp[pos], 0)`. `lp` is a vector of sequence
/// log-probabilities; each item is `(pos, negs)` indexing into it.
pub fn hinge<F: Scalar>(g: &mut Graph<F>, lp: Var, items: &[(usize, Vec<usize>)], eta: f64) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    let n = g.value(lp).numel();
    let col = g.reshape(lp, &[n, 1])?;
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    let mut weights = Vec::new();
    for (p, negs) in items {
        if negs.is_empty() {
            return Err(Error::Empty("contrastive variants"));
        }
        for &q in negs {
            pos_idx.push(*p);
            neg_idx.push(q);
            weights.push(F::from_f64(1.0 / (negs.len() * items.len()) as f64));
        }
    }
    let pos = g.embedding(col, &pos_idx)?;
    let neg = g.embedding(col, &neg_idx)?;
    let diff = g.sub(neg, pos)?;
    let margin = g.add_scalar(diff, eta);
    let h = g.relu(margin);
    let w = g.constant(Tensor::new(vec![weights.len(), 1], weights)?);
    let hw = g.mul(h, w)?;
    Ok(g.sum(hw))
}

/// Margin loss with summed sequence log-probabilities under the true and the
/// corrupted contexts. One batched forward pass covers all variants.
pub fn cl_loss<F: Scalar>(g: &mut Graph<F>, model: &Model<F>, items: &[&ContrastiveItem], eta: f64) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    let mut inputs: Vec<Input> = items.iter().map(|it| Input::from(&it.example)).collect();
    let mut groups = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let mut negs = Vec::with_capacity(it.corrupted.len());
        for c in &it.corrupted {
            negs.push(inputs.len());
            inputs.push(Input {
                contexts: c,
                source: &it.example.source,
                target: &it.example.target,
            });
        }
        groups.push((i, negs));
    }
    let lp = model.sequence_log_probs(g, &inputs)?;
    hinge(g, lp, &groups, eta)
}

/// `(1 - alpha) * mt + alpha * cl`.
pub fn joint_loss<F: Scalar>(g: &mut Graph<F>, mt: Var, cl: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = g.scale(mt, 1.0 - alpha);
    let b = g.scale(cl, alpha);
    g.add(a, b)
}
