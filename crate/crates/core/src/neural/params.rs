//! Named-layer parameter collections and the vector-space algebra over them.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Default hidden width.
pub const DEFAULT_HIDDEN: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    GruInput,
    GruRecurrent,
    GruBias,
    AttnWeights,
    AttnContext,
    HeadWeights,
    HeadBias,
    PretrainWeights,
    PretrainBias,
}

impl Layer {
    pub const ALL: [Layer; 9] = [
        Layer::GruInput,
        Layer::GruRecurrent,
        Layer::GruBias,
        Layer::AttnWeights,
        Layer::AttnContext,
        Layer::HeadWeights,
        Layer::HeadBias,
        Layer::PretrainWeights,
        Layer::PretrainBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::GruInput => "gru.input_weights",
            Layer::GruRecurrent => "gru.recurrent_weights",
            Layer::GruBias => "gru.biases",
            Layer::AttnWeights => "attn.W_alpha",
            Layer::AttnContext => "attn.p",
            Layer::HeadWeights => "head.W_l",
            Layer::HeadBias => "head.b_l",
            Layer::PretrainWeights => "pretrain.W_p",
            Layer::PretrainBias => "pretrain.b_p",
        }
    }

    pub fn from_name(name: &str) -> Option<Layer> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }

    /// Row-major shape. The GRU arrays hold the update, reset and candidate
    /// gates side by side along the column axis.
    pub fn shape(self, dims: Dims) -> Vec<usize> {
        let (d, k) = (dims.input, dims.hidden);
        match self {
            Layer::GruInput => vec![d, 3 * k],
            Layer::GruRecurrent => vec![k, 3 * k],
            Layer::GruBias => vec![3 * k],
            Layer::AttnWeights => vec![k, k],
            Layer::AttnContext => vec![k],
            Layer::HeadWeights => vec![k, 2],
            Layer::HeadBias => vec![2],
            Layer::PretrainWeights => vec![k, d],
            Layer::PretrainBias => vec![d],
        }
    }

    pub fn len(self, dims: Dims) -> usize {
        self.shape(dims).iter().product()
    }

    pub fn is_bias(self) -> bool {
        matches!(self, Layer::GruBias | Layer::HeadBias | Layer::PretrainBias)
    }

    /// Layers shared between the pretraining and outcome models.
    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            Layer::GruInput
                | Layer::GruRecurrent
                | Layer::GruBias
                | Layer::AttnWeights
                | Layer::AttnContext
        )
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    /// Activity width `n + 7`.
    pub input: usize,
    pub hidden: usize,
}

impl Dims {
    pub fn new(input: usize, hidden: usize) -> Self {
        Self { input, hidden }
    }

    fn offsets(self) -> [usize; 10] {
        let mut off = [0; 10];
        for (i, l) in Layer::ALL.iter().enumerate() {
            off[i + 1] = off[i] + l.len(self);
        }
        off
    }
}

/// All learnable arrays of the model, stored contiguously in `Layer::ALL`
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: Dims,
    offsets: [usize; 10],
    data: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let offsets = dims.offsets();
        Self {
            dims,
            offsets,
            data: vec![0.0; offsets[9]],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        for layer in Layer::ALL {
            if layer.is_bias() {
                continue;
            }
            let shape = layer.shape(dims);
            let fan = match shape.as_slice() {
                [r, c] => r + c,
                [n] => n + 1,
                _ => unreachable!(),
            };
            let bound = (6.0 / fan as f64).sqrt();
            for w in p.layer_mut(layer) {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        let offsets = dims.offsets();
        if data.len() != offsets[9] {
            return Err(Error::Shape(format!(
                "expected {} values for {dims:?}, got {}",
                offsets[9],
                data.len()
            )));
        }
        Ok(Self {
            dims,
            offsets,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn range(&self, layer: Layer) -> std::ops::Range<usize> {
        let i = layer as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn layer(&self, layer: Layer) -> &[f64] {
        &self.data[self.range(layer)]
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut [f64] {
        let r = self.range(layer);
        &mut self.data[r]
    }

    pub fn check_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "parameter shapes differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a * x`
    pub fn add_scaled(&mut self, a: f64, x: &ModelParams) -> Result<()> {
        self.check_congruent(x)?;
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ModelParams) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn layer_norm(&self, layer: Layer) -> f64 {
        self.layer(layer).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// 64-bit fingerprint of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        self.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits())
                .wrapping_mul(0x0000_0100_0000_01b3)
                .rotate_left(5)
        })
    }
}

/// `a * x + y`
pub fn params_axpy(a: f64, x: &ModelParams, y: &ModelParams) -> Result<ModelParams> {
    let mut out = y.clone();
    out.add_scaled(a, x)?;
    Ok(out)
}

/// Euclidean norm of the whole model, or of one layer.
pub fn params_norm(x: &ModelParams, layer: Option<Layer>) -> f64 {
    match layer {
        Some(l) => x.layer_norm(l),
        None => x.norm(),
    }
}

/// Cosine similarity of the flattened parameter vectors; 0 when either is
/// the zero vector.
pub fn params_cosine(x: &ModelParams, y: &ModelParams) -> Result<f64> {
    let dot = x.dot(y)?;
    let denom = x.norm() * y.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}
