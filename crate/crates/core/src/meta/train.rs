use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{outer_step, EpisodeTask, MetaConfig, Task};
use crate::autodiff::{AdamState, Graph};
use crate::encoder::{
    argmax, batch_logits, head_logits, init_params, mlm_loss_and_grad, slot_states, train_retriever_encoder,
    EncoderConfig, ModelParams, TrainConfig, TrainReport,
};
use crate::episode::{Episode, SupportMode};
use crate::error::{Error, Result};
use crate::verbalizer::{predict, restricted_cross_entropy, support_vocab, SupportVocab};
use crate::world::{CompositionalPair, Instance, TokenId};

/// Plain SGD on the support MLM loss, outside any graph. Same arithmetic as
/// the inner loop, minus the bookkeeping needed for outer gradients.
pub fn adapt(params: &ModelParams, support: &[Instance], alpha: f64, steps: usize) -> Result<(ModelParams, Vec<f64>)> {
    let mut p = params.clone();
    let mut losses = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok((p, losses));
    }
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let batch: Vec<&Instance> = support.iter().collect();
    for step in 0..steps {
        let (loss, grad) = mlm_loss_and_grad(&p, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, step });
        }
        losses.push(loss);
        for (x, g) in p.theta.data_mut().iter_mut().zip(&grad) {
            *x -= alpha * g;
        }
    }
    Ok((p, losses))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub attr: TokenId,
    pub obj: TokenId,
    /// Inner steps actually run.
    pub steps: usize,
    /// Candidate sets when the verbalizer was applied.
    pub candidates: Option<SupportVocab>,
}

impl Prediction {
    pub fn matches(&self, gold: &CompositionalPair) -> (bool, bool) {
        (self.attr == gold.attr, self.obj == gold.obj)
    }
}

/// Adapt a copy of `theta` on the episode's support and predict both slots.
///
/// Retrieval modes take `config.inner_steps_test` steps and a verbalized
/// argmax. Without retrieval there is no adaptation and the argmax runs over
/// the full vocabulary.
pub fn test_time_predict(theta: &ModelParams, episode: &Episode, config: &MetaConfig) -> Result<Prediction> {
    let view = [episode.query.masked()];
    if episode.mode == SupportMode::NoRetrieval {
        let logits = batch_logits(theta, &view)?;
        return Ok(Prediction {
            attr: argmax(&logits[0]) as TokenId,
            obj: argmax(&logits[1]) as TokenId,
            steps: 0,
            candidates: None,
        });
    }
    let vocab = support_vocab(episode)?;
    let (adapted, losses) = adapt(theta, &episode.support, config.inner_lr, config.inner_steps_test)?;
    let logits = batch_logits(&adapted, &view)?;
    Ok(Prediction {
        attr: predict(&logits[0], &vocab.attr)?,
        obj: predict(&logits[1], &vocab.obj)?,
        steps: losses.len(),
        candidates: Some(vocab),
    })
}

/// Restricted query loss after `steps` of adaptation; `None` when neither
/// gold concept is among the candidates.
pub fn adapted_query_loss(theta: &ModelParams, episode: &Episode, alpha: f64, steps: usize) -> Result<Option<f64>> {
    let vocab = support_vocab(episode)?;
    let (adapted, _) = adapt(theta, &episode.support, alpha, steps)?;
    let mut g = Graph::new();
    let nodes = adapted.theta.to_nodes(&mut g);
    let q = &episode.query;
    let slots = slot_states(&mut g, &nodes, &adapted.config, &[q.masked()])?;
    let logits = head_logits(&mut g, &nodes, slots)?;
    let loss = restricted_cross_entropy(&mut g, logits, &[&vocab.attr, &vocab.obj], &[q.gold.attr, q.gold.obj])?;
    Ok(loss.map(|l| g.value(l).item()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetaLogRow {
    pub step: usize,
    pub epoch: usize,
    pub inner_loss: f64,
    pub query_loss: f64,
}

/// Validation scores of every selector after `step` outer updates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub scores: Vec<f64>,
}

/// Best checkpoint under one selector. Ties keep the earlier step.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub name: String,
    pub step: usize,
    pub score: f64,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutput {
    pub selections: Vec<Selection>,
    pub last: ModelParams,
    pub log: Vec<MetaLogRow>,
    pub validations: Vec<ValidationRecord>,
}

impl MetaTrainOutput {
    pub fn selection(&self, name: &str) -> Option<&Selection> {
        self.selections.iter().find(|s| s.name == name)
    }
}

/// Validation callback: one score per selector, higher is better.
pub type Validator<'a> = dyn FnMut(&ModelParams) -> Result<Vec<f64>> + 'a;

/// MAML over `episodes` for `config.epochs` passes, shuffled per epoch by
/// `seed`. The initial parameters are validated too, so a selector can keep
/// them if meta-training never helps it.
pub fn meta_train(
    theta0: &ModelParams,
    episodes: &[Episode],
    config: &MetaConfig,
    seed: u64,
    selectors: &[&str],
    validate: &mut Validator<'_>,
) -> Result<MetaTrainOutput> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::Invalid("no meta-training episodes".into()));
    }
    let mut theta = theta0.clone();
    let mut adam = AdamState::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    let mut validations = Vec::new();
    let mut selections: Vec<Selection> = selectors
        .iter()
        .map(|n| Selection { name: n.to_string(), step: 0, score: f64::NEG_INFINITY, params: theta.clone() })
        .collect();

    let mut record = |step: usize, theta: &ModelParams, selections: &mut Vec<Selection>| -> Result<ValidationRecord> {
        let scores = validate(theta)?;
        if scores.len() != selections.len() {
            return Err(Error::Invalid(format!("{} scores for {} selectors", scores.len(), selections.len())));
        }
        for (sel, &s) in selections.iter_mut().zip(&scores) {
            if s > sel.score {
                sel.score = s;
                sel.step = step;
                sel.params = theta.clone();
            }
        }
        Ok(ValidationRecord { step, scores })
    };

    validations.push(record(0, &theta, &mut selections)?);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.episodes_per_outer_step) {
            let tasks: Vec<EpisodeTask<'_>> = batch
                .iter()
                .map(|&i| EpisodeTask { config: &theta.config, episode: &episodes[i], verbalize: config.verbalize_train })
                .collect();
            let refs: Vec<&dyn Task> = tasks.iter().map(|t| t as &dyn Task).collect();
            let stats = match outer_step(&mut theta.theta, &refs, config, &mut adam, step) {
                Ok(s) => s,
                Err(Error::NonFinite { .. }) | Err(Error::NonFiniteLoss { .. }) => {
                    return Err(Error::NonFiniteLoss { epoch, step })
                }
                Err(e) => return Err(e),
            };
            step += 1;
            log.push(MetaLogRow { step, epoch, inner_loss: stats.inner_loss, query_loss: stats.query_loss });
            if step % config.val_every == 0 {
                validations.push(record(step, &theta, &mut selections)?);
            }
        }
    }
    if validations.last().map(|v| v.step) != Some(step) {
        validations.push(record(step, &theta, &mut selections)?);
    }
    Ok(MetaTrainOutput { selections, last: theta, log, validations })
}

/// Training log: one row per outer step, then one per validation pass.
pub fn write_log_csv(out: &MetaTrainOutput, provenance: Option<&str>, path: &Path) -> Result<()> {
    let mut w = crate::eval::csv_writer(path, provenance)?;
    let mut header = vec!["kind".to_string(), "step".into(), "epoch".into(), "inner_loss".into(), "query_loss".into()];
    header.extend(out.selections.iter().map(|s| format!("val_{}", s.name)));
    let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(err)?;
    let blanks = vec![String::new(); out.selections.len()];
    for r in &out.log {
        let mut row = vec!["train".into(), r.step.to_string(), r.epoch.to_string(), r.inner_loss.to_string(), r.query_loss.to_string()];
        row.extend(blanks.iter().cloned());
        w.write_record(&row).map_err(err)?;
    }
    for v in &out.validations {
        let mut row = vec!["val".into(), v.step.to_string(), String::new(), String::new(), String::new()];
        row.extend(v.scores.iter().map(|s| s.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Randomly initialized encoder trained with plain MLM; no episodes.
pub fn train_scratch_baseline(
    config: &EncoderConfig,
    train: &[Instance],
    novel: &BTreeSet<CompositionalPair>,
    mask: TokenId,
    cls: TokenId,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let p0 = init_params(config, seed)?;
    train_retriever_encoder(&p0, train, novel, mask, cls, train_config, seed)
}

/// Meta-training identical to the full method's, selected by `validate`
/// (which should score the zero-step, unrestricted test path).
pub fn maml_no_ret_baseline(
    theta0: &ModelParams,
    episodes: &[Episode],
    config: &MetaConfig,
    seed: u64,
    validate: &mut Validator<'_>,
) -> Result<MetaTrainOutput> {
    meta_train(theta0, episodes, config, seed, &["maml_no_ret"], validate)
}
