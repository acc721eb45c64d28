//! Bilevel (MAML) training over retrieved episodes, test-time adaptation and
//! the two non-retrieval baselines.

mod toy;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, AdamConfig, AdamState, GradMode, Graph, NodeId, ParamNodes, ParamVector};
use crate::encoder::{flat_grad, head_logits, mlm_loss, slot_states, EncoderConfig};
use crate::episode::{Episode, SupportMode};
use crate::error::{Error, Result};
use crate::verbalizer::{restricted_cross_entropy, support_vocab};
use crate::world::Instance;

pub use toy::QuadraticTask;
pub use train::{
    adapt, adapted_query_loss, maml_no_ret_baseline, meta_train, test_time_predict, train_scratch_baseline,
    write_log_csv, MetaLogRow, MetaTrainOutput, Prediction, Selection, ValidationRecord, Validator,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_test: usize,
    pub episodes_per_outer_step: usize,
    pub order: Order,
    /// Owned by the experiment's retrieval section, not read from `[meta]`.
    #[serde(skip)]
    pub support_mode: SupportMode,
    #[serde(skip)]
    pub k: usize,
    pub epochs: usize,
    /// Outer steps between validation passes.
    pub val_every: usize,
    /// Restrict the meta-training query loss to support concepts.
    pub verbalize_train: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 5e-5,
            outer_lr: 1e-5,
            inner_steps_train: 1,
            inner_steps_test: 20,
            episodes_per_outer_step: 4,
            order: Order::Second,
            support_mode: SupportMode::DivK,
            k: 4,
            epochs: 1,
            val_every: 50,
            verbalize_train: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) {
            return Err(Error::config("meta.inner_lr", "must be > 0"));
        }
        if !(self.outer_lr > 0.0) {
            return Err(Error::config("meta.outer_lr", "must be > 0"));
        }
        if self.episodes_per_outer_step == 0 {
            return Err(Error::config("meta.episodes_per_outer_step", "must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config("meta.k", "must be >= 1"));
        }
        if self.val_every == 0 {
            return Err(Error::config("meta.val_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.outer_lr)
    }
}

/// One bilevel task: an inner (support) objective and an outer (query) one.
/// `None` means the objective is empty for this task.
pub trait Task: Sync {
    fn has_support(&self) -> bool;
    fn support_loss(&self, g: &mut Graph, theta: &ParamNodes) -> Result<Option<NodeId>>;
    fn query_loss(&self, g: &mut Graph, theta: &ParamNodes) -> Result<Option<NodeId>>;
}

/// Meta-learning task over one episode with the encoder as the model.
pub struct EpisodeTask<'a> {
    pub config: &'a EncoderConfig,
    pub episode: &'a Episode,
    pub verbalize: bool,
}

impl Task for EpisodeTask<'_> {
    fn has_support(&self) -> bool {
        !self.episode.support.is_empty()
    }

    fn support_loss(&self, g: &mut Graph, theta: &ParamNodes) -> Result<Option<NodeId>> {
        if self.episode.support.is_empty() {
            return Ok(None);
        }
        let batch: Vec<&Instance> = self.episode.support.iter().collect();
        mlm_loss(g, theta, self.config, &batch).map(Some)
    }

    fn query_loss(&self, g: &mut Graph, theta: &ParamNodes) -> Result<Option<NodeId>> {
        let q = &self.episode.query;
        if self.verbalize && self.episode.mode != SupportMode::NoRetrieval && !self.episode.support.is_empty() {
            let vocab = support_vocab(self.episode)?;
            let slots = slot_states(g, theta, self.config, &[q.masked()])?;
            let logits = head_logits(g, theta, slots)?;
            restricted_cross_entropy(g, logits, &[&vocab.attr, &vocab.obj], &[q.gold.attr, q.gold.obj])
        } else {
            mlm_loss(g, theta, self.config, &[q]).map(Some)
        }
    }
}

/// `steps` differentiable SGD steps on the support loss, starting from the
/// parameter nodes `theta`. In second-order mode the result stays
/// differentiable with respect to `theta` through the inner gradients.
pub fn inner_adapt(
    g: &mut Graph,
    theta: &ParamNodes,
    task: &dyn Task,
    alpha: f64,
    steps: usize,
    order: Order,
) -> Result<(ParamNodes, Vec<f64>)> {
    let mode = match order {
        Order::Second => GradMode::CreateGraph,
        Order::First => GradMode::Detached,
    };
    let mut cur = theta.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let Some(loss) = task.support_loss(g, &cur)? else {
            if steps > 0 {
                return Err(Error::EmptySupport);
            }
            break;
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, step: losses.len() });
        }
        losses.push(value);
        let grads = g.grad(loss, &cur.nodes, mode)?;
        cur = sgd_step(g, &cur, &grads, alpha)?;
    }
    Ok((cur, losses))
}

/// Result of differentiating one task's post-adaptation query loss.
#[derive(Clone, Debug)]
pub struct OuterGrad {
    pub grad: Vec<f64>,
    pub query_loss: Option<f64>,
    pub inner_loss: Option<f64>,
}

/// Gradient of `L_query(inner_adapt(theta))` with respect to `theta`.
/// Tasks without support skip adaptation.
pub fn outer_gradient(theta: &ParamVector, task: &dyn Task, alpha: f64, steps: usize, order: Order) -> Result<OuterGrad> {
    let mut g = Graph::new();
    let nodes = theta.to_nodes(&mut g);
    let steps = if task.has_support() { steps } else { 0 };
    let (adapted, inner) = inner_adapt(&mut g, &nodes, task, alpha, steps, order)?;
    let Some(q) = task.query_loss(&mut g, &adapted)? else {
        return Ok(OuterGrad { grad: vec![0.0; theta.len()], query_loss: None, inner_loss: inner.first().copied() });
    };
    let grads = g.grad(q, &nodes.nodes, GradMode::Detached)?;
    Ok(OuterGrad { grad: flat_grad(&g, &grads), query_loss: Some(g.value(q).item()), inner_loss: inner.first().copied() })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OuterStats {
    pub inner_loss: f64,
    pub query_loss: f64,
    pub counted: usize,
}

/// Mean outer gradient over the batch, applied with Adam.
///
/// Per-task gradients are computed in parallel and reduced in batch order.
pub fn outer_step(
    theta: &mut ParamVector,
    tasks: &[&dyn Task],
    config: &MetaConfig,
    adam: &mut AdamState,
    step_index: usize,
) -> Result<OuterStats> {
    if tasks.is_empty() {
        return Err(Error::Invalid("empty outer batch".into()));
    }
    let snapshot = theta.clone();
    let results: Vec<Result<OuterGrad>> = tasks
        .par_iter()
        .map(|t| outer_gradient(&snapshot, *t, config.inner_lr, config.inner_steps_train, config.order))
        .collect();
    let mut mean = vec![0.0; theta.len()];
    let mut stats = OuterStats::default();
    let mut inner_n = 0;
    for r in results {
        let r = r?;
        for (m, g) in mean.iter_mut().zip(&r.grad) {
            *m += g / tasks.len() as f64;
        }
        if let Some(q) = r.query_loss {
            stats.query_loss += q;
            stats.counted += 1;
        }
        if let Some(i) = r.inner_loss {
            stats.inner_loss += i;
            inner_n += 1;
        }
    }
    if mean.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(step_index));
    }
    stats.query_loss /= stats.counted.max(1) as f64;
    stats.inner_loss /= inner_n.max(1) as f64;
    adam.step(&config.adam(), theta, &mean);
    Ok(stats)
}
