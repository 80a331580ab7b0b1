//! Adam for network weights and GRDA for architecture parameters.
//!
//! GRDA keeps the running sum of every α gradient seen since the search
//! started and takes the exact minimizer of
//! `α·(γ·acc − α_0) + g(t, γ)·|α| + α²/2` per coordinate, where
//! `g(t, γ) = c·γ^½·(t·γ)^μ`. The minimizer is the soft threshold
//! `sign(u)·max(|u| − g, 0)` with `u = α_0 − γ·acc`, so coordinates hit
//! exact zeros once the threshold outgrows them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::MiniBatch;
use crate::error::{Error, Result};
use crate::network::{Gradients, Model};
use crate::par::Execution;
use crate::tensor::SparseRows;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("adam lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Global step count, shared by every tensor for bias correction.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the global step. Call once per optimizer step, before the
    /// tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step.max(1) as i32;
        (1.0 - self.config.beta1.powi(t), 1.0 - self.config.beta2.powi(t))
    }

    fn slot(&mut self, name: &str, len: usize) -> &mut Moments {
        self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        })
    }

    /// Dense update of every coordinate.
    pub fn update_dense(&mut self, name: &str, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Shape(format!(
                "`{name}` has {} values but {} gradients",
                params.len(),
                grad.len()
            )));
        }
        let (c1, c2) = self.corrections();
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let slot = self.slot(name, params.len());
        for k in 0..params.len() {
            let g = grad[k];
            slot.m[k] = beta1 * slot.m[k] + (1.0 - beta1) * g;
            slot.v[k] = beta2 * slot.v[k] + (1.0 - beta2) * g * g;
            let m_hat = slot.m[k] / c1;
            let v_hat = slot.v[k] / c2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }

    /// Lazy update: only rows present in `grad` with a nonzero entry touch
    /// their moments and values.
    pub fn update_sparse(&mut self, name: &str, params: &mut [f64], grad: &SparseRows) -> Result<()> {
        let width = grad.width();
        if width == 0 || !params.len().is_multiple_of(width) {
            return Err(Error::Shape(format!("`{name}` is not a table of width {width}")));
        }
        let rows = params.len() / width;
        let (c1, c2) = self.corrections();
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let slot = self.slot(name, params.len());
        for (r, g) in grad.iter() {
            if r >= rows {
                return Err(Error::Shape(format!("`{name}` has no row {r}")));
            }
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            for (c, &gk) in g.iter().enumerate() {
                let k = r * width + c;
                slot.m[k] = beta1 * slot.m[k] + (1.0 - beta1) * gk;
                slot.v[k] = beta2 * slot.v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = slot.m[k] / c1;
                let v_hat = slot.v[k] / c2;
                params[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Free-function form of a dense Adam step on one tensor.
pub fn adam_step(name: &str, params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("{name}[{k}]")));
    }
    state.begin_step();
    state.update_dense(name, params, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrdaConfig {
    /// Learning rate γ.
    pub lr: f64,
    pub c: f64,
    pub mu: f64,
}

impl Default for GrdaConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            c: 0.005,
            mu: 0.6,
        }
    }
}

impl GrdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("grda lr must be positive".into()));
        }
        if !(self.c >= 0.0) {
            return Err(Error::Config("grda c must be non-negative".into()));
        }
        if !self.mu.is_finite() {
            return Err(Error::Config("grda mu must be finite".into()));
        }
        Ok(())
    }

    /// `g(t, γ) = c·γ^½·(t·γ)^μ`.
    pub fn threshold(&self, t: u64) -> f64 {
        self.c * self.lr.sqrt() * (t as f64 * self.lr).powf(self.mu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrdaState {
    /// α at the start of the search.
    pub initial: Vec<f64>,
    /// Sum of all α gradients seen so far.
    pub accumulator: Vec<f64>,
    pub step: u64,
}

impl GrdaState {
    pub fn new(initial: &[f64]) -> Self {
        Self {
            initial: initial.to_vec(),
            accumulator: vec![0.0; initial.len()],
            step: 0,
        }
    }
}

/// `sign(u)·max(|u| − g, 0)`.
#[inline]
pub fn soft_threshold(u: f64, g: f64) -> f64 {
    if u > g {
        u - g
    } else if u < -g {
        u + g
    } else {
        0.0
    }
}

/// One GRDA step. `grad` must be evaluated at the α passed in.
pub fn grda_step(alpha: &mut [f64], grad: &[f64], state: &mut GrdaState, config: &GrdaConfig) -> Result<()> {
    config.validate()?;
    if alpha.len() != grad.len() || alpha.len() != state.initial.len() {
        return Err(Error::Shape(format!(
            "grda over {} values got {} alpha and {} gradients",
            state.initial.len(),
            alpha.len(),
            grad.len()
        )));
    }
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("alpha[{k}]")));
    }
    for (a, g) in state.accumulator.iter_mut().zip(grad) {
        *a += g;
    }
    state.step += 1;
    let g = config.threshold(state.step);
    for ((a, a0), acc) in alpha.iter_mut().zip(&state.initial).zip(&state.accumulator) {
        *a = soft_threshold(a0 - config.lr * acc, g);
    }
    Ok(())
}

/// How a group's α is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaRule {
    Grda,
    Adam,
    Frozen,
}

/// Optimizer state for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub adam: AdamState,
    pub grda: GrdaConfig,
    pub pair_rule: AlphaRule,
    pub triple_rule: AlphaRule,
    pub grda_pair: Option<GrdaState>,
    pub grda_triple: Option<GrdaState>,
}

impl Optimizer {
    /// Snapshots the current α of every GRDA-trained group as `α_0`.
    pub fn new(
        model: &Model,
        adam: AdamConfig,
        grda: GrdaConfig,
        pair_rule: AlphaRule,
        triple_rule: AlphaRule,
    ) -> Result<Self> {
        adam.validate()?;
        if pair_rule == AlphaRule::Grda || triple_rule == AlphaRule::Grda {
            grda.validate()?;
        }
        let grda_pair = (pair_rule == AlphaRule::Grda).then(|| GrdaState::new(&model.pairs.alpha));
        let grda_triple = match (&model.triples, triple_rule) {
            (Some(t), AlphaRule::Grda) => Some(GrdaState::new(&t.alpha)),
            _ => None,
        };
        Ok(Self {
            adam: AdamState::new(adam),
            grda,
            pair_rule,
            triple_rule,
            grda_pair,
            grda_triple,
        })
    }

    /// Applies one update from gradients evaluated at the current
    /// parameters. Nothing changes when any gradient is non-finite.
    pub fn apply(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        grads.check_finite()?;
        self.adam.begin_step();
        self.adam
            .update_sparse("embedding", model.embedding.weights_mut(), &grads.embedding)?;
        self.adam.update_sparse("linear", &mut model.linear, &grads.linear)?;
        self.adam
            .update_dense("bias", std::slice::from_mut(&mut model.bias), &[grads.bias])?;
        for (l, (layer, g)) in model.mlp.iter_mut().zip(&grads.mlp).enumerate() {
            self.adam
                .update_dense(&format!("mlp.{l}.weight"), &mut layer.weight, &g.weight)?;
            self.adam
                .update_dense(&format!("mlp.{l}.bias"), &mut layer.bias, &g.bias)?;
            if let (Some(bn), Some(ds), Some(dh)) = (layer.bn.as_mut(), &g.bn_scale, &g.bn_shift) {
                self.adam
                    .update_dense(&format!("mlp.{l}.bn_scale"), &mut bn.scale, ds)?;
                self.adam
                    .update_dense(&format!("mlp.{l}.bn_shift"), &mut bn.shift, dh)?;
            }
        }
        match self.pair_rule {
            AlphaRule::Grda => grda_step(
                &mut model.pairs.alpha,
                &grads.pair_alpha,
                self.grda_pair.as_mut().expect("grda state"),
                &self.grda,
            )?,
            AlphaRule::Adam => self
                .adam
                .update_dense("alpha.pair", &mut model.pairs.alpha, &grads.pair_alpha)?,
            AlphaRule::Frozen => {}
        }
        if let (Some(group), Some(g)) = (model.triples.as_mut(), &grads.triple_alpha) {
            match self.triple_rule {
                AlphaRule::Grda => grda_step(
                    &mut group.alpha,
                    g,
                    self.grda_triple.as_mut().expect("grda state"),
                    &self.grda,
                )?,
                AlphaRule::Adam => self.adam.update_dense("alpha.triple", &mut group.alpha, g)?,
                AlphaRule::Frozen => {}
            }
        }
        Ok(())
    }
}

/// One-level step: a single forward/backward at the current (v, α), then
/// Adam on v and the configured rule on α. Returns the batch loss.
pub fn joint_step(model: &mut Model, batch: &MiniBatch<'_>, opt: &mut Optimizer, exec: Execution) -> Result<f64> {
    let (loss, grads, fwd) = model.loss_and_grad(batch, exec)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient("loss".into()));
    }
    opt.apply(model, &grads)?;
    model.update_running_stats(&fwd);
    Ok(loss)
}
