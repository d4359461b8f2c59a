//! Mini-batch gradient accumulation and plain training epochs.

use rand::seq::SliceRandom;
use rand::Rng;

use super::model::{accumulate_backward, forward, infer, Dropout, Head, Target};
use super::optim::OptState;
use super::params::{Gradients, ModelParams};
use crate::data::StudentRecord;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSettings {
    pub batch_size: usize,
    pub dropout: f64,
}

impl Default for BatchSettings {
    fn default() -> Self {
        Self {
            batch_size: 8,
            dropout: 0.5,
        }
    }
}

/// Summed outcome loss over a batch and its gradient. Student `i` of the
/// batch draws its dropout mask from the stream `(dropout_seed, i)`, so the
/// same seed reproduces the same masks at any parameter value.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&StudentRecord],
    dropout: f64,
    dropout_seed: u64,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(params.dims());
    let mut loss = 0.0;
    for (i, student) in batch.iter().enumerate() {
        let mut mask_rng = rng::stream(&[dropout_seed, i as u64]);
        let trace = forward(
            params,
            &student.sequence,
            Head::Outcome,
            Some(Dropout {
                rate: dropout,
                rng: &mut mask_rng,
            }),
        )?;
        loss += accumulate_backward(&trace, Target::Outcome(student.label), params, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Shuffled mini-batches of `data`.
pub fn batches<'a>(
    data: &[&'a StudentRecord],
    batch_size: usize,
    rng: &mut StreamRng,
) -> Vec<Vec<&'a StudentRecord>> {
    let mut order: Vec<&StudentRecord> = data.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
}

/// One pass of plain gradient descent; returns the mean per-student loss.
pub fn plain_epoch(
    params: &mut ModelParams,
    opt: &mut OptState,
    data: &[&StudentRecord],
    settings: BatchSettings,
    rng: &mut StreamRng,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("no training students".into()));
    }
    let mut total = 0.0;
    for batch in batches(data, settings.batch_size, rng) {
        let seed: u64 = rng.gen();
        let (loss, grads) = batch_gradient(params, &batch, settings.dropout, seed)?;
        opt.step(params, &grads, epoch)?;
        total += loss;
    }
    Ok(total / data.len() as f64)
}

/// Pass probabilities in evaluation mode.
pub fn predict_pass(params: &ModelParams, students: &[&StudentRecord]) -> Result<Vec<f64>> {
    students
        .iter()
        .map(|s| infer(params, &s.sequence, Head::Outcome).map(|t| t.pass_probability()))
        .collect()
}
