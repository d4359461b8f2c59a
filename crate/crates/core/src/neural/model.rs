//! Attention-pooled GRU: forward pass, losses and exact backpropagation.
//!
//! Gate convention (update `z`, reset `r`, candidate `n`):
//!
//! ```text
//! z = sigmoid(Wx_z x + U_z h_prev + b_z)
//! r = sigmoid(Wx_r x + U_r h_prev + b_r)
//! n = tanh(Wx_n x + U_n (r * h_prev) + b_n)
//! h = (1 - z) * h_prev + z * n
//! ```
//!
//! Pooling uses one context vector `p`: `e(t) = p . tanh(W_alpha h(t))`,
//! `alpha = softmax(e)`, pooled `= sum_t alpha(t) h(t)`.

use rand::Rng;

use super::params::{Dims, Gradients, Layer, ModelParams};
use crate::data::EncodedActivity;
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Slot of the pass probability in the two-way output.
pub const PASS_SLOT: usize = 0;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Which output head a forward pass ends in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Two-way pass/fail softmax.
    Outcome,
    /// Softmax over the `n + 7` activity slots.
    Pretrain,
}

/// Everything backpropagation needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    dims: Dims,
    params_fingerprint: u64,
    head: Head,
    inputs: Vec<Vec<usize>>,
    /// `h(1..L)`, row-major `L x k`.
    hidden: Vec<f64>,
    update: Vec<f64>,
    reset: Vec<f64>,
    candidate: Vec<f64>,
    attn_tanh: Vec<f64>,
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
    dropout_scale: Option<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn hidden_state(&self, t: usize) -> &[f64] {
        let k = self.dims.hidden;
        &self.hidden[t * k..(t + 1) * k]
    }

    pub fn pass_probability(&self) -> f64 {
        self.probs[PASS_SLOT]
    }
}

struct GruCache {
    hidden: Vec<f64>,
    update: Vec<f64>,
    reset: Vec<f64>,
    candidate: Vec<f64>,
}

fn check_input(params: &ModelParams, sequence: &[EncodedActivity]) -> Result<Vec<Vec<usize>>> {
    if sequence.is_empty() {
        return Err(Error::Shape("empty activity sequence".into()));
    }
    let d = params.dims().input;
    sequence
        .iter()
        .map(|a| {
            if a.width() != d {
                Err(Error::Shape(format!(
                    "activity width {} does not match model input {d}",
                    a.width()
                )))
            } else {
                Ok(a.active().collect())
            }
        })
        .collect()
}

fn gru_run(params: &ModelParams, inputs: &[Vec<usize>]) -> GruCache {
    let k = params.dims().hidden;
    let k3 = 3 * k;
    let wx = params.layer(Layer::GruInput);
    let u = params.layer(Layer::GruRecurrent);
    let b = params.layer(Layer::GruBias);
    let len = inputs.len();
    let mut cache = GruCache {
        hidden: vec![0.0; len * k],
        update: vec![0.0; len * k],
        reset: vec![0.0; len * k],
        candidate: vec![0.0; len * k],
    };
    let mut h_prev = vec![0.0; k];
    let mut pre = vec![0.0; k3];
    let mut rh = vec![0.0; k];
    for (t, active) in inputs.iter().enumerate() {
        pre.copy_from_slice(b);
        for &j in active {
            for (p, w) in pre.iter_mut().zip(&wx[j * k3..(j + 1) * k3]) {
                *p += w;
            }
        }
        for (i, &hp) in h_prev.iter().enumerate() {
            if hp == 0.0 {
                continue;
            }
            for (p, w) in pre[..2 * k].iter_mut().zip(&u[i * k3..i * k3 + 2 * k]) {
                *p += hp * w;
            }
        }
        let z = &mut cache.update[t * k..(t + 1) * k];
        let r = &mut cache.reset[t * k..(t + 1) * k];
        for c in 0..k {
            z[c] = sigmoid(pre[c]);
            r[c] = sigmoid(pre[k + c]);
            rh[c] = r[c] * h_prev[c];
        }
        for (i, &v) in rh.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (p, w) in pre[2 * k..]
                .iter_mut()
                .zip(&u[i * k3 + 2 * k..(i + 1) * k3])
            {
                *p += v * w;
            }
        }
        let n = &mut cache.candidate[t * k..(t + 1) * k];
        let h = &mut cache.hidden[t * k..(t + 1) * k];
        for c in 0..k {
            n[c] = pre[2 * k + c].tanh();
            h[c] = (1.0 - z[c]) * h_prev[c] + z[c] * n[c];
        }
        h_prev.copy_from_slice(h);
    }
    cache
}

/// Runs the GRU from `h(0) = 0` and returns `h(1..L)`.
pub fn gru_forward(params: &ModelParams, sequence: &[EncodedActivity]) -> Result<Vec<Vec<f64>>> {
    let inputs = check_input(params, sequence)?;
    let k = params.dims().hidden;
    Ok(gru_run(params, &inputs)
        .hidden
        .chunks(k)
        .map(<[f64]>::to_vec)
        .collect())
}

struct Pooling {
    attn_tanh: Vec<f64>,
    energies: Vec<f64>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

fn pool(params: &ModelParams, hidden: &[f64]) -> Pooling {
    let k = params.dims().hidden;
    let w = params.layer(Layer::AttnWeights);
    let p = params.layer(Layer::AttnContext);
    let len = hidden.len() / k;
    let mut attn_tanh = vec![0.0; len * k];
    let mut energies = vec![0.0; len];
    for t in 0..len {
        let h = &hidden[t * k..(t + 1) * k];
        let ut = &mut attn_tanh[t * k..(t + 1) * k];
        for i in 0..k {
            let a: f64 = w[i * k..(i + 1) * k]
                .iter()
                .zip(h)
                .map(|(x, y)| x * y)
                .sum();
            ut[i] = a.tanh();
        }
        energies[t] = ut.iter().zip(p).map(|(x, y)| x * y).sum();
    }
    let weights = softmax(&energies);
    let mut pooled = vec![0.0; k];
    for (t, &a) in weights.iter().enumerate() {
        for (o, h) in pooled.iter_mut().zip(&hidden[t * k..(t + 1) * k]) {
            *o += a * h;
        }
    }
    Pooling {
        attn_tanh,
        energies,
        weights,
        pooled,
    }
}

/// Additive attention over hidden states; returns the pooled vector and the
/// attention weights.
pub fn attention_pool(params: &ModelParams, states: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = params.dims().hidden;
    if states.is_empty() {
        return Err(Error::Shape("no hidden states to pool".into()));
    }
    if let Some(s) = states.iter().find(|s| s.len() != k) {
        return Err(Error::Shape(format!(
            "hidden state width {} does not match {k}",
            s.len()
        )));
    }
    let flat: Vec<f64> = states.concat();
    let p = pool(params, &flat);
    Ok((p.pooled, p.weights))
}

fn head_logits(params: &ModelParams, head: Head, pooled: &[f64]) -> Vec<f64> {
    let (w, b) = match head {
        Head::Outcome => (
            params.layer(Layer::HeadWeights),
            params.layer(Layer::HeadBias),
        ),
        Head::Pretrain => (
            params.layer(Layer::PretrainWeights),
            params.layer(Layer::PretrainBias),
        ),
    };
    let out = b.len();
    let mut logits = b.to_vec();
    for (i, &h) in pooled.iter().enumerate() {
        for (l, wv) in logits.iter_mut().zip(&w[i * out..(i + 1) * out]) {
            *l += h * wv;
        }
    }
    logits
}

/// Pass/fail probabilities `softmax(W_l^T pooled + b_l)`.
pub fn predict_outcome(params: &ModelParams, pooled: &[f64]) -> Result<Vec<f64>> {
    if pooled.len() != params.dims().hidden {
        return Err(Error::Shape(format!(
            "pooled width {} does not match {}",
            pooled.len(),
            params.dims().hidden
        )));
    }
    Ok(softmax(&head_logits(params, Head::Outcome, pooled)))
}

/// Dropout applied to the pooled vector before the outcome head.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Full forward pass. Dropout only affects the outcome head.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    sequence: &[EncodedActivity],
    head: Head,
    dropout: Option<Dropout<'_, R>>,
) -> Result<ForwardTrace> {
    let inputs = check_input(params, sequence)?;
    let gru = gru_run(params, &inputs);
    let pooling = pool(params, &gru.hidden);
    let dropout_scale = match (head, dropout) {
        (Head::Outcome, Some(Dropout { rate, rng })) if rate > 0.0 => {
            let keep = 1.0 - rate;
            Some(
                (0..pooling.pooled.len())
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<f64>>(),
            )
        }
        _ => None,
    };
    let head_input: Vec<f64> = match &dropout_scale {
        Some(s) => pooling.pooled.iter().zip(s).map(|(h, m)| h * m).collect(),
        None => pooling.pooled.clone(),
    };
    let probs = softmax(&head_logits(params, head, &head_input));
    Ok(ForwardTrace {
        dims: params.dims(),
        params_fingerprint: params.fingerprint(),
        head,
        inputs,
        hidden: gru.hidden,
        update: gru.update,
        reset: gru.reset,
        candidate: gru.candidate,
        attn_tanh: pooling.attn_tanh,
        energies: pooling.energies,
        weights: pooling.weights,
        pooled: pooling.pooled,
        dropout_scale,
        probs,
    })
}

/// Forward pass in evaluation mode (no dropout).
pub fn infer(
    params: &ModelParams,
    sequence: &[EncodedActivity],
    head: Head,
) -> Result<ForwardTrace> {
    forward::<rand::rngs::mock::StepRng>(params, sequence, head, None)
}

/// One-hot label vector with pass in slot 0.
pub fn label_vector(label: u8) -> [f64; 2] {
    if label == 1 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Two-term binary cross-entropy of one prediction against a one-hot label:
/// `-sum_c [y_c ln y'_c + (1 - y_c) ln(1 - y'_c)]`.
pub fn student_bce(probs: &[f64], label: u8) -> f64 {
    let y = label_vector(label);
    -(0..2)
        .map(|c| {
            let p = clamp_prob(probs[c]);
            y[c] * p.ln() + (1.0 - y[c]) * (1.0 - p).ln()
        })
        .sum::<f64>()
}

/// Summed two-term BCE over students.
pub fn bce_loss(predictions: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    for p in predictions {
        let valid = p.len() == 2
            && p.iter().all(|v| (0.0..=1.0).contains(v))
            && (p[0] + p[1] - 1.0).abs() < 1e-9;
        if !valid {
            return Err(Error::Domain(format!("{p:?} is not a probability pair")));
        }
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| student_bce(p, y))
        .sum())
}

/// Mean squared error between predicted and target activity vectors.
pub fn activity_mse(probs: &[f64], target: &EncodedActivity) -> f64 {
    let d = probs.len() as f64;
    probs
        .iter()
        .zip(target.bits())
        .map(|(p, &t)| (p - f64::from(t)).powi(2))
        .sum::<f64>()
        / d
}

/// Training target for one backward pass.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Outcome(u8),
    Activity(&'a EncodedActivity),
}

/// Gradients of one example's loss; see [`accumulate_backward`].
pub fn backward(
    trace: &ForwardTrace,
    target: Target<'_>,
    params: &ModelParams,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(params.dims());
    let loss = accumulate_backward(trace, target, params, &mut grads)?;
    Ok((loss, grads))
}

/// Adds the gradient of one example's loss into `grads` and returns the loss.
/// The trace must come from a forward pass over exactly `params`.
pub fn accumulate_backward(
    trace: &ForwardTrace,
    target: Target<'_>,
    params: &ModelParams,
    grads: &mut Gradients,
) -> Result<f64> {
    if trace.dims != params.dims() || trace.params_fingerprint != params.fingerprint() {
        return Err(Error::Invalid(
            "forward trace was produced with different parameters".into(),
        ));
    }
    params.check_congruent(grads)?;
    let dims = params.dims();
    let (d, k) = (dims.input, dims.hidden);
    let k3 = 3 * k;
    let len = trace.len();

    // Loss and d(loss)/d(probs).
    let (loss, dprobs, head) = match (target, trace.head) {
        (Target::Outcome(label), Head::Outcome) => {
            let y = label_vector(label);
            let dp: Vec<f64> = (0..2)
                .map(|c| {
                    let raw = trace.probs[c];
                    if raw <= PROB_FLOOR || raw >= 1.0 - PROB_FLOOR {
                        0.0
                    } else {
                        -y[c] / raw + (1.0 - y[c]) / (1.0 - raw)
                    }
                })
                .collect();
            (student_bce(&trace.probs, label), dp, Head::Outcome)
        }
        (Target::Activity(a), Head::Pretrain) => {
            if a.width() != d {
                return Err(Error::Shape(format!(
                    "target width {} does not match {d}",
                    a.width()
                )));
            }
            let dp: Vec<f64> = trace
                .probs
                .iter()
                .zip(a.bits())
                .map(|(p, &t)| 2.0 * (p - f64::from(t)) / d as f64)
                .collect();
            (activity_mse(&trace.probs, a), dp, Head::Pretrain)
        }
        _ => {
            return Err(Error::Invalid(
                "target does not match the traced head".into(),
            ))
        }
    };

    // Softmax Jacobian.
    let inner: f64 = trace.probs.iter().zip(&dprobs).map(|(p, g)| p * g).sum();
    let dlogits: Vec<f64> = trace
        .probs
        .iter()
        .zip(&dprobs)
        .map(|(p, g)| p * (g - inner))
        .collect();

    let head_input: Vec<f64> = match &trace.dropout_scale {
        Some(s) => trace.pooled.iter().zip(s).map(|(h, m)| h * m).collect(),
        None => trace.pooled.clone(),
    };
    let (w_layer, b_layer) = match head {
        Head::Outcome => (Layer::HeadWeights, Layer::HeadBias),
        Head::Pretrain => (Layer::PretrainWeights, Layer::PretrainBias),
    };
    let out = dlogits.len();
    let w = params.layer(w_layer);
    let mut dpooled = vec![0.0; k];
    {
        let gw = grads.layer_mut(w_layer);
        for i in 0..k {
            let row = &mut gw[i * out..(i + 1) * out];
            for (g, dl) in row.iter_mut().zip(&dlogits) {
                *g += head_input[i] * dl;
            }
            dpooled[i] = w[i * out..(i + 1) * out]
                .iter()
                .zip(&dlogits)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    for (g, dl) in grads.layer_mut(b_layer).iter_mut().zip(&dlogits) {
        *g += dl;
    }
    if let Some(s) = &trace.dropout_scale {
        dpooled.iter_mut().zip(s).for_each(|(g, m)| *g *= m);
    }

    // Attention pooling.
    let mut dhidden = vec![0.0; len * k];
    let mut dalpha = vec![0.0; len];
    for t in 0..len {
        let h = trace.hidden_state(t);
        dalpha[t] = h.iter().zip(&dpooled).map(|(a, b)| a * b).sum();
        for (dh, dp) in dhidden[t * k..(t + 1) * k].iter_mut().zip(&dpooled) {
            *dh += trace.weights[t] * dp;
        }
    }
    let mean_dalpha: f64 = trace.weights.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
    let w_att = params.layer(Layer::AttnWeights);
    let p_att = params.layer(Layer::AttnContext);
    let mut dv = vec![0.0; k];
    for t in 0..len {
        let de = trace.weights[t] * (dalpha[t] - mean_dalpha);
        if de == 0.0 {
            continue;
        }
        let ut = &trace.attn_tanh[t * k..(t + 1) * k];
        for (g, u) in grads.layer_mut(Layer::AttnContext).iter_mut().zip(ut) {
            *g += de * u;
        }
        for i in 0..k {
            dv[i] = de * p_att[i] * (1.0 - ut[i] * ut[i]);
        }
        let h = &trace.hidden[t * k..(t + 1) * k];
        let gw = grads.layer_mut(Layer::AttnWeights);
        let dh = &mut dhidden[t * k..(t + 1) * k];
        for i in 0..k {
            let row = &mut gw[i * k..(i + 1) * k];
            for (g, hv) in row.iter_mut().zip(h) {
                *g += dv[i] * hv;
            }
            for (dhj, wv) in dh.iter_mut().zip(&w_att[i * k..(i + 1) * k]) {
                *dhj += dv[i] * wv;
            }
        }
    }

    // Backpropagation through time.
    let u = params.layer(Layer::GruRecurrent);
    let mut dh = vec![0.0; k];
    let mut da = vec![0.0; k3];
    let mut drh = vec![0.0; k];
    let zeros = vec![0.0; k];
    for t in (0..len).rev() {
        for (a, b) in dh.iter_mut().zip(&dhidden[t * k..(t + 1) * k]) {
            *a += b;
        }
        let h_prev: &[f64] = if t == 0 {
            &zeros
        } else {
            trace.hidden_state(t - 1)
        };
        let z = &trace.update[t * k..(t + 1) * k];
        let r = &trace.reset[t * k..(t + 1) * k];
        let n = &trace.candidate[t * k..(t + 1) * k];
        let mut dh_prev = vec![0.0; k];
        for c in 0..k {
            let dn = dh[c] * z[c];
            let dz = dh[c] * (n[c] - h_prev[c]);
            dh_prev[c] = dh[c] * (1.0 - z[c]);
            da[c] = dz * z[c] * (1.0 - z[c]);
            da[2 * k + c] = dn * (1.0 - n[c] * n[c]);
        }
        // Candidate path through r * h_prev.
        let gu = grads.layer_mut(Layer::GruRecurrent);
        for i in 0..k {
            let urow = &u[i * k3 + 2 * k..(i + 1) * k3];
            drh[i] = urow.iter().zip(&da[2 * k..]).map(|(a, b)| a * b).sum();
            let rh = r[i] * h_prev[i];
            if rh != 0.0 {
                for (g, dv) in gu[i * k3 + 2 * k..(i + 1) * k3]
                    .iter_mut()
                    .zip(&da[2 * k..])
                {
                    *g += rh * dv;
                }
            }
        }
        for c in 0..k {
            let dr = drh[c] * h_prev[c];
            dh_prev[c] += drh[c] * r[c];
            da[k + c] = dr * r[c] * (1.0 - r[c]);
        }
        // Gate paths through h_prev.
        for i in 0..k {
            let urow = &u[i * k3..i * k3 + 2 * k];
            dh_prev[i] += urow
                .iter()
                .zip(&da[..2 * k])
                .map(|(a, b)| a * b)
                .sum::<f64>();
            let hp = h_prev[i];
            if hp != 0.0 {
                for (g, dv) in gu[i * k3..i * k3 + 2 * k].iter_mut().zip(&da[..2 * k]) {
                    *g += hp * dv;
                }
            }
        }
        for (g, dv) in grads.layer_mut(Layer::GruBias).iter_mut().zip(&da) {
            *g += dv;
        }
        let gx = grads.layer_mut(Layer::GruInput);
        for &j in &trace.inputs[t] {
            for (g, dv) in gx[j * k3..(j + 1) * k3].iter_mut().zip(&da) {
                *g += dv;
            }
        }
        dh = dh_prev;
    }
    Ok(loss)
}
