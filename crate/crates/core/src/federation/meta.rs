//! Meta-gradients of the one-step-adapted loss `F(theta) = f(theta - a * grad f(theta))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Gradients, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// Drops the Hessian term: `grad f(theta - a * grad f(theta))`.
    FirstOrder,
    /// Keeps `(I - a * Hessian)` via a central finite difference of gradients.
    HessianFd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner adaptation step `a`. Setting it to 1 recovers the unit step.
    pub inner_step: f64,
    /// Outer step size; `None` uses the base learning rate.
    pub outer_step: Option<f64>,
    pub mode: MetaMode,
    /// Finite-difference step for the Hessian-vector product.
    pub fd_step: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_step: 0.01,
            outer_step: None,
            mode: MetaMode::FirstOrder,
            fd_step: 1e-4,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.inner_step >= 0.0
            && self.inner_step.is_finite()
            && self.fd_step > 0.0
            && self.outer_step.is_none_or(|s| s >= 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "invalid meta configuration {self:?}"
            )))
        }
    }
}

fn finite(g: Gradients, what: &str) -> Result<Gradients> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::Optimizer(format!(
            "non-finite {what} in meta-gradient"
        )))
    }
}

/// Meta-gradient at `params`. `grad` must be deterministic in its argument
/// (fixed batch and dropout masks), which the finite-difference mode relies
/// on.
///
/// The Hessian-vector product `H v` is taken as
/// `|v| * (grad(theta + d v/|v|) - grad(theta - d v/|v|)) / (2 d)`, exact
/// for quadratic losses.
pub fn meta_gradient<F>(params: &ModelParams, cfg: &MetaConfig, mut grad: F) -> Result<Gradients>
where
    F: FnMut(&ModelParams) -> Result<Gradients>,
{
    let inner = finite(grad(params)?, "inner gradient")?;
    let mut adapted = params.clone();
    adapted.add_scaled(-cfg.inner_step, &inner)?;
    let outer = finite(grad(&adapted)?, "adapted gradient")?;
    match cfg.mode {
        MetaMode::FirstOrder => Ok(outer),
        MetaMode::HessianFd => {
            let norm = outer.norm();
            if norm == 0.0 || cfg.inner_step == 0.0 {
                return Ok(outer);
            }
            let h = cfg.fd_step / norm;
            let mut plus = params.clone();
            plus.add_scaled(h, &outer)?;
            let mut minus = params.clone();
            minus.add_scaled(-h, &outer)?;
            let g_plus = finite(grad(&plus)?, "perturbed gradient")?;
            let g_minus = finite(grad(&minus)?, "perturbed gradient")?;
            let mut result = outer;
            // result = v - a * (g+ - g-) / (2h)
            let coef = cfg.inner_step / (2.0 * h);
            result.add_scaled(-coef, &g_plus)?;
            result.add_scaled(coef, &g_minus)?;
            finite(result, "meta-gradient")
        }
    }
}
