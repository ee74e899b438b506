//! Adam and Adamax with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientStore, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::model::NamedTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adamax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr.is_finite() && self.lr > 0.0)
            || !betas_ok
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Moments for every parameter plus the step count.
///
/// For Adamax `second` holds the infinity-norm estimate `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

/// Fresh state with zero moments shaped like `params`.
pub fn zero_like_state(params: &[NamedTensor], config: &OptimizerConfig) -> OptimizerState {
    let zeros = || {
        params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    };
    OptimizerState {
        config: config.clone(),
        first: zeros(),
        second: zeros(),
        step: 0,
    }
}

impl OptimizerState {
    /// One update. Parameters without a gradient are left untouched; a
    /// non-finite or mis-shaped gradient aborts before anything changes.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (ParamId, &'a str, &'a mut Tensor)>,
        grads: &GradientStore,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        for (id, name, p) in &params {
            let Some(g) = grads.get(*id) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient((*name).to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, _, p) in params {
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                let decay = c.lr * c.weight_decay * *w;
                let update = match c.kind {
                    OptimizerKind::Adam => {
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                        let (mh, vh) = (m[k] / bc1, v[k] / bc2);
                        c.lr * mh / (vh.sqrt() + c.eps)
                    }
                    OptimizerKind::Adamax => {
                        v[k] = (c.beta2 * v[k]).max(gk.abs());
                        (c.lr / bc1) * m[k] / (v[k] + c.eps)
                    }
                };
                *w -= update + decay;
            }
        }
        Ok(())
    }
}
