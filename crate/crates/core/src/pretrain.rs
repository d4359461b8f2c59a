//! Self-supervised behavioral pretraining: mask one activity, predict it from
//! the rest of the sequence, then hand the encoder to the outcome model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::EncodedActivity;
use crate::error::{Error, Result};
use crate::neural::model::{accumulate_backward, infer, Head, Target};
use crate::neural::{Gradients, Layer, ModelParams, OptState, OptimizerKind};
use crate::rng::{self, StreamRng};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CbowInstance {
    pub masked_sequence: Vec<EncodedActivity>,
    pub target: EncodedActivity,
    pub target_position: usize,
}

/// Masked copy of `sequence` with position `t` zeroed.
pub fn make_instance(sequence: &[EncodedActivity], t: usize) -> CbowInstance {
    let mut masked_sequence = sequence.to_vec();
    let target = std::mem::replace(
        &mut masked_sequence[t],
        EncodedActivity::zeros(sequence[t].width()),
    );
    CbowInstance {
        masked_sequence,
        target,
        target_position: t,
    }
}

/// One instance per position; sequences shorter than two have no context
/// and yield nothing.
pub fn make_cbow_instances(sequence: &[EncodedActivity]) -> Vec<CbowInstance> {
    if sequence.len() < 2 {
        return Vec::new();
    }
    (0..sequence.len())
        .map(|t| make_instance(sequence, t))
        .collect()
}

/// Squared-error loss of one instance and its gradient, added into `grads`.
pub fn instance_gradient(
    params: &ModelParams,
    inst: &CbowInstance,
    grads: &mut Gradients,
) -> Result<f64> {
    let trace = infer(params, &inst.masked_sequence, Head::Pretrain)?;
    accumulate_backward(&trace, Target::Activity(&inst.target), params, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub epochs: usize,
    /// Positions sampled per sequence and epoch; `None` uses every position.
    pub max_positions_per_sequence: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 10,
            max_positions_per_sequence: None,
        }
    }
}

/// Instance addresses `(sequence, position)` for one epoch, shuffled.
fn epoch_instances(
    corpus: &[&[EncodedActivity]],
    max_positions: Option<usize>,
    rng: &mut StreamRng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, seq) in corpus.iter().enumerate() {
        if seq.len() < 2 {
            continue;
        }
        let mut positions: Vec<usize> = (0..seq.len()).collect();
        if let Some(m) = max_positions {
            if m < positions.len() {
                positions.shuffle(rng);
                positions.truncate(m);
                positions.sort_unstable();
            }
        }
        out.extend(positions.into_iter().map(|t| (s, t)));
    }
    out.shuffle(rng);
    out
}

/// One pass over the masked-activity instances of `corpus`; returns the
/// mean instance loss.
pub fn pretrain_epoch(
    params: &mut ModelParams,
    corpus: &[&[EncodedActivity]],
    opt: &mut OptState,
    batch_size: usize,
    max_positions: Option<usize>,
    rng: &mut StreamRng,
    epoch: usize,
) -> Result<f64> {
    let d = params.dims().input;
    if let Some(seq) = corpus
        .iter()
        .find(|s| s.first().is_some_and(|a| a.width() != d))
    {
        return Err(Error::Shape(format!(
            "activity width {} does not match model input {d}",
            seq[0].width()
        )));
    }
    let instances = epoch_instances(corpus, max_positions, rng);
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for batch in instances.chunks(batch_size.max(1)) {
        let mut grads = Gradients::zeros(params.dims());
        for &(s, t) in batch {
            total += instance_gradient(params, &make_instance(corpus[s], t), &mut grads)?;
        }
        opt.step(params, &grads, epoch)?;
    }
    Ok(total / instances.len() as f64)
}

/// Runs `cfg.epochs` pretraining epochs from `init`; returns the trained
/// model and the per-epoch mean losses.
pub fn pretrain(
    init: ModelParams,
    corpus: &[&[EncodedActivity]],
    cfg: &PretrainConfig,
    optimizer: (OptimizerKind, f64, f64),
    batch_size: usize,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    let (kind, lr, decay) = optimizer;
    let mut params = init;
    let mut opt = OptState::new(kind, lr, decay, params.dims());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(&[seed, rng::name_key("pretrain"), epoch as u64]);
        let loss = pretrain_epoch(
            &mut params,
            corpus,
            &mut opt,
            batch_size,
            cfg.max_positions_per_sequence,
            &mut r,
            epoch,
        )?;
        log::debug!("pretrain epoch {epoch}: loss {loss:.6}");
        losses.push(loss);
    }
    Ok((params, losses))
}

/// Encoder layers (GRU and attention) from `pretrained`; both heads from
/// `fresh`.
pub fn transfer_weights(pretrained: &ModelParams, fresh: &ModelParams) -> Result<ModelParams> {
    pretrained.check_congruent(fresh)?;
    let mut out = fresh.clone();
    for layer in Layer::ALL.into_iter().filter(|l| l.is_encoder()) {
        out.layer_mut(layer)
            .copy_from_slice(pretrained.layer(layer));
    }
    Ok(out)
}

/// Mean per-instance loss without updating anything.
pub fn corpus_loss(params: &ModelParams, corpus: &[&[EncodedActivity]]) -> Result<f64> {
    let mut grads = Gradients::zeros(params.dims());
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        for inst in make_cbow_instances(seq) {
            total += instance_gradient(params, &inst, &mut grads)?;
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}
