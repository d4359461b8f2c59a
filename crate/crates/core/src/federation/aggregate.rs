//! Global aggregation rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::model::softmax;
use crate::neural::{Layer, ModelParams};

/// Size-weighted mean `sum_x (N_x / N) theta_x`.
pub fn fedavg_aggregate(locals: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let Some(((first, _), rest)) = locals.split_first() else {
        return Err(Error::Invalid("no local models to aggregate".into()));
    };
    for (m, _) in rest {
        first.check_congruent(m)?;
    }
    let total: usize = locals.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Invalid("aggregation weights sum to zero".into()));
    }
    weighted_sum(locals.iter().map(|(m, n)| (*m, *n as f64 / total as f64)))
}

/// `sum_x w_x theta_x` with weights that must sum to one.
pub fn weighted_sum<'a>(
    terms: impl IntoIterator<Item = (&'a ModelParams, f64)>,
) -> Result<ModelParams> {
    let mut out: Option<ModelParams> = None;
    let mut weight_sum = 0.0;
    for (m, w) in terms {
        weight_sum += w;
        match out.as_mut() {
            None => {
                let mut acc = ModelParams::zeros(m.dims());
                acc.add_scaled(w, m)?;
                out = Some(acc);
            }
            Some(acc) => acc.add_scaled(w, m)?,
        }
    }
    if (weight_sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "aggregation weights sum to {weight_sum}, not 1"
        )));
    }
    out.ok_or_else(|| Error::Invalid("no local models to aggregate".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnWeightMode {
    /// Separate softmax over subgroups for every layer, applied per layer.
    PerLayer,
    /// Per-layer softmaxes summed over layers, renormalized across subgroups,
    /// and applied to the whole model.
    ScalarSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnAggConfig {
    /// Step size `epsilon`.
    pub step: f64,
    pub weight_mode: AttnWeightMode,
}

impl Default for AttnAggConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            weight_mode: AttnWeightMode::PerLayer,
        }
    }
}

/// Attention weights used by one aggregation: `weights[l][x]` for layer `l`
/// in `Layer::ALL` order and local model `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Vec<Vec<f64>>,
}

/// Attention-weighted aggregation. For each layer the Euclidean distances
/// between the global layer and every local layer go through a softmax over
/// local models; the global layer then moves by
/// `-step * sum_x alpha_x (global - local_x)`.
pub fn fedatt_aggregate(
    global: &ModelParams,
    locals: &[&ModelParams],
    cfg: &AttnAggConfig,
) -> Result<(ModelParams, AttentionWeights)> {
    if locals.is_empty() {
        return Err(Error::Invalid("no local models to aggregate".into()));
    }
    if !(cfg.step > 0.0) {
        return Err(Error::Invalid(format!(
            "attention step must be positive, got {}",
            cfg.step
        )));
    }
    for m in locals {
        global.check_congruent(m)?;
    }
    let per_layer: Vec<Vec<f64>> = Layer::ALL
        .iter()
        .map(|&l| {
            let g = global.layer(l);
            let dists: Vec<f64> = locals
                .iter()
                .map(|m| {
                    g.iter()
                        .zip(m.layer(l))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            softmax(&dists)
        })
        .collect();
    let weights = match cfg.weight_mode {
        AttnWeightMode::PerLayer => per_layer,
        AttnWeightMode::ScalarSum => {
            let summed: Vec<f64> = (0..locals.len())
                .map(|x| per_layer.iter().map(|w| w[x]).sum())
                .collect();
            let total: f64 = summed.iter().sum();
            let scalar: Vec<f64> = summed.iter().map(|s| s / total).collect();
            vec![scalar; Layer::ALL.len()]
        }
    };
    let mut out = global.clone();
    for (li, &l) in Layer::ALL.iter().enumerate() {
        let g = global.layer(l);
        let mut step = vec![0.0; g.len()];
        for (x, m) in locals.iter().enumerate() {
            let a = weights[li][x];
            for ((s, gv), mv) in step.iter_mut().zip(g).zip(m.layer(l)) {
                *s += a * (gv - mv);
            }
        }
        for (o, s) in out.layer_mut(l).iter_mut().zip(&step) {
            *o -= cfg.step * s;
        }
    }
    Ok((out, AttentionWeights { weights }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Dims;
    use crate::rng;

    fn scalar(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(Dims::new(7, 1));
        p.layer_mut(Layer::HeadBias)[0] = v;
        p
    }

    #[test]
    fn fedavg_examples() {
        let a = scalar(0.0);
        let b = scalar(4.0);
        let m = fedavg_aggregate(&[(&a, 1), (&b, 3)]).unwrap();
        assert_eq!(m.layer(Layer::HeadBias)[0], 3.0);
        let r = ModelParams::init(Dims::new(9, 3), &mut rng::stream(&[1]));
        assert_eq!(fedavg_aggregate(&[(&r, 17)]).unwrap(), r);
        let m = fedavg_aggregate(&[(&a, 5), (&b, 5)]).unwrap();
        assert_eq!(m.layer(Layer::HeadBias)[0], 2.0);
        assert!(fedavg_aggregate(&[(&a, 0)]).is_err());
        assert!(fedavg_aggregate(&[(&a, 1), (&r, 1)]).is_err());
    }

    #[test]
    fn fedatt_fixed_point_and_symmetry() {
        let dims = Dims::new(9, 3);
        let g = ModelParams::init(dims, &mut rng::stream(&[1]));
        let (out, w) = fedatt_aggregate(&g, &[&g, &g, &g], &AttnAggConfig::default()).unwrap();
        assert_eq!(out, g);
        for row in &w.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        // Locals mirrored around the global are equidistant in every layer.
        let delta = ModelParams::init(dims, &mut rng::stream(&[2]));
        let mut a = g.clone();
        a.add_scaled(1.0, &delta).unwrap();
        let mut b = g.clone();
        b.add_scaled(-1.0, &delta).unwrap();
        let (out, _) = fedatt_aggregate(&g, &[&a, &b], &AttnAggConfig::default()).unwrap();
        let mean = fedavg_aggregate(&[(&a, 1), (&b, 1)]).unwrap();
        for (x, y) in out.as_slice().iter().zip(mean.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fedatt_weights_follow_distance_softmax() {
        let g = scalar(0.0);
        let a = scalar(1.0);
        let b = scalar(-2.0);
        let (out, w) = fedatt_aggregate(&g, &[&a, &b], &AttnAggConfig::default()).unwrap();
        let bias = Layer::ALL
            .iter()
            .position(|l| *l == Layer::HeadBias)
            .unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((w.weights[bias][0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((w.weights[bias][0] - 0.2689).abs() < 1e-4);
        assert!((w.weights[bias][1] - 0.7311).abs() < 1e-4);
        // Step 1 moves the global to the attention-weighted mean.
        let expect = e1 / (e1 + e2) * 1.0 + e2 / (e1 + e2) * -2.0;
        assert!((out.layer(Layer::HeadBias)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn scalar_mode_uses_one_weight_per_local() {
        let dims = Dims::new(9, 3);
        let g = ModelParams::init(dims, &mut rng::stream(&[1]));
        let a = ModelParams::init(dims, &mut rng::stream(&[2]));
        let b = ModelParams::init(dims, &mut rng::stream(&[3]));
        let cfg = AttnAggConfig {
            step: 0.5,
            weight_mode: AttnWeightMode::ScalarSum,
        };
        let (_, w) = fedatt_aggregate(&g, &[&a, &b], &cfg).unwrap();
        assert!(w.weights.windows(2).all(|p| p[0] == p[1]));
        assert!((w.weights[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(fedatt_aggregate(&g, &[], &cfg).is_err());
    }
}
