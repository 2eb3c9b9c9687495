//! Stage II: curriculum-weighted projector tuning against a frozen head.

mod curriculum;
mod head;

pub use curriculum::{curriculum_weights, uniform_weights, DifficultyTracker, DomainDifficulty};
pub use head::{
    accumulate_projector_gradient, instance_loss_from_repr, DomainHead, FrozenHead, InstanceCache, Projector,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::MultiScaleEncoder;
use crate::error::{Error, Result};
use crate::graphdata::{iterate_epochs, Batch, BatchItem, DomainDataset, GraphInstance, SplitKind};
use crate::numcore::{Matrix, OptimizerKind, OptimizerState, ParamSet};
use crate::pretrain::encode_items;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Curriculum,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Total steps `T`; `None` means one pass over the training union.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub tokens: usize,
    pub token_dim: usize,
    pub weighting: Weighting,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            steps: None,
            batch_size: 3,
            learning_rate: 0.004,
            warmup_ratio: 0.01,
            momentum: 0.7,
            temperature: 1.0,
            tokens: 7,
            token_dim: 64,
            weighting: Weighting::Curriculum,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size == 0 || self.tokens == 0 || self.token_dim == 0 {
            return bad("align batch size, token count and token width must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!(
                "curriculum temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "align learning rate must be nonnegative, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }

    pub fn head_seed(&self) -> u64 {
        seeding::derive(self.seed, "head")
    }

    /// The frozen head for `datasets`, one part per domain in order.
    pub fn build_head(&self, datasets: &[DomainDataset]) -> Result<FrozenHead> {
        let specs: Vec<(String, usize)> = datasets.iter().map(|d| (d.domain.clone(), d.classes)).collect();
        FrozenHead::new(self.head_seed(), self.tokens, self.token_dim, &specs)
    }
}

/// One logged row per active domain per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub domain: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub smoothed: f64,
    pub weight: f64,
}

/// Mean loss of one domain's members in a batch, with per-instance caches.
#[derive(Debug, Clone)]
pub struct DomainBatchLoss {
    pub loss: f64,
    pub caches: Vec<InstanceCache>,
}

/// Everything Stage II reads but never changes.
#[derive(Debug, Clone)]
pub struct AlignContext<'a> {
    pub datasets: &'a [DomainDataset],
    /// Frozen encoder outputs, one matrix per dataset with one row per instance.
    pub representations: Vec<Matrix>,
    pub head: FrozenHead,
}

impl<'a> AlignContext<'a> {
    /// Encodes every instance once; the encoder is frozen for all of Stage II.
    pub fn new(encoder: &MultiScaleEncoder, datasets: &'a [DomainDataset], head: FrozenHead) -> Result<Self> {
        for (i, ds) in datasets.iter().enumerate() {
            match head.domains().get(i) {
                Some(h) if h.domain == ds.domain && h.classes() == ds.classes => {}
                _ => {
                    return Err(Error::contract(format!(
                        "head has no matching part for domain `{}`",
                        ds.domain
                    )))
                }
            }
        }
        let representations = datasets
            .iter()
            .enumerate()
            .map(|(d, _)| {
                let items: Vec<BatchItem> = (0..datasets[d].instances.len())
                    .map(|i| BatchItem {
                        dataset: 0,
                        instance: i,
                    })
                    .collect();
                encode_items(encoder, &datasets[d..=d], &items).map(|(x, _)| x)
            })
            .collect::<Result<_>>()?;
        Ok(AlignContext {
            datasets,
            representations,
            head,
        })
    }

    fn label(&self, item: &BatchItem) -> Result<usize> {
        let inst = &self.datasets[item.dataset].instances[item.instance];
        inst.label.ok_or_else(|| {
            Error::contract(format!(
                "instance {} of `{}` has no label",
                item.instance, self.datasets[item.dataset].domain
            ))
        })
    }

    pub fn instance_loss(&self, item: &BatchItem, projector: &Projector) -> Result<(f64, InstanceCache)> {
        let x = self.representations[item.dataset].row(item.instance);
        instance_loss_from_repr(x, self.label(item)?, item.dataset, projector, &self.head)
    }

    /// Mean instance loss per active domain. Domains without members are absent.
    pub fn domain_batch_losses(
        &self,
        batch: &Batch,
        projector: &Projector,
    ) -> Result<BTreeMap<usize, DomainBatchLoss>> {
        let mut groups: BTreeMap<usize, Vec<&BatchItem>> = BTreeMap::new();
        for it in &batch.items {
            groups.entry(it.dataset).or_default().push(it);
        }
        let groups: Vec<(usize, Vec<&BatchItem>)> = groups.into_iter().collect();
        let losses: Vec<(usize, DomainBatchLoss)> = groups
            .par_iter()
            .map(|(d, items)| {
                let mut sum = 0.0;
                let mut caches = Vec::with_capacity(items.len());
                for it in items {
                    let (l, c) = self.instance_loss(it, projector)?;
                    sum += l;
                    caches.push(c);
                }
                Ok((
                    *d,
                    DomainBatchLoss {
                        loss: sum / items.len() as f64,
                        caches,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(losses.into_iter().collect())
    }

    /// Mean loss over one split of one dataset.
    pub fn split_loss(&self, dataset: usize, split: SplitKind, projector: &Projector) -> Result<f64> {
        let idx = self.datasets[dataset].split_indices(split);
        if idx.is_empty() {
            return Err(Error::contract(format!(
                "`{}` has an empty {split:?} split",
                self.datasets[dataset].domain
            )));
        }
        let mut sum = 0.0;
        for &i in idx {
            sum += self.instance_loss(&BatchItem { dataset, instance: i }, projector)?.0;
        }
        Ok(sum / idx.len() as f64)
    }
}

/// Gradient of a domain's mean batch loss with respect to the projector,
/// and its L2 norm.
pub fn projector_gradient_norm(
    domain_loss: &DomainBatchLoss,
    head: &FrozenHead,
    projector: &Projector,
) -> Result<(ParamSet, f64)> {
    let mut g = projector.params().zeros_like();
    let scale = 1.0 / domain_loss.caches.len() as f64;
    for c in &domain_loss.caches {
        accumulate_projector_gradient(c, head, scale, &mut g)?;
    }
    let norm = g.l2_norm();
    Ok((g, norm))
}

#[derive(Debug, Clone)]
pub struct AlignState {
    pub projector: Projector,
    pub optimizer: OptimizerState,
    pub tracker: DifficultyTracker,
    pub metrics: Vec<MetricRow>,
}

impl AlignState {
    pub fn new(config: &AlignConfig, input_dim: usize, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let projector = Projector::new(
            input_dim,
            config.tokens,
            config.token_dim,
            seeding::derive(config.seed, "projector"),
        )?;
        let optimizer = OptimizerState::new(config.optimizer, config.learning_rate, projector.params())?;
        Ok(AlignState {
            projector,
            optimizer,
            tracker: DifficultyTracker::new(total_steps, config.warmup_ratio, config.momentum)?,
            metrics: Vec::new(),
        })
    }
}

/// What one step computed, before the parameter update.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub total_loss: f64,
    pub losses: BTreeMap<usize, f64>,
    pub grad_norms: BTreeMap<usize, f64>,
    pub weights: BTreeMap<usize, f64>,
}

/// One tuning step: per-domain losses and gradient norms, tracker update,
/// weights, then a projector update on the weighted sum. Weights are
/// constants of the step.
pub fn align_step(
    ctx: &AlignContext<'_>,
    state: &mut AlignState,
    batch: &Batch,
    config: &AlignConfig,
) -> Result<StepReport> {
    let k = state.tracker.step + 1;
    let losses = ctx.domain_batch_losses(batch, &state.projector)?;
    let grads: Vec<(usize, ParamSet, f64)> = losses
        .par_iter()
        .map(|(&d, l)| projector_gradient_norm(l, &ctx.head, &state.projector).map(|(g, n)| (d, g, n)))
        .collect::<Result<_>>()?;
    let grad_norms: BTreeMap<usize, f64> = grads.iter().map(|(d, _, n)| (*d, *n)).collect();
    state.tracker.update(k, &grad_norms)?;
    let active: Vec<usize> = losses.keys().copied().collect();
    let weights = match config.weighting {
        Weighting::Curriculum => curriculum_weights(&state.tracker, &active, config.temperature)?,
        Weighting::Uniform => uniform_weights(&active)?,
    };

    let mut total = state.projector.params().zeros_like();
    let mut total_loss = 0.0;
    for (d, g, _) in &grads {
        total.axpy(weights[d], g)?;
        total_loss += weights[d] * losses[d].loss;
    }
    state.optimizer.step(state.projector.params_mut(), &total)?;

    for &d in &active {
        state.metrics.push(MetricRow {
            step: k,
            domain: ctx.datasets[d].domain.clone(),
            loss: losses[&d].loss,
            grad_norm: grad_norms[&d],
            smoothed: state.tracker.smoothed(d).unwrap_or(0.0),
            weight: weights[&d],
        });
    }
    Ok(StepReport {
        step: k,
        total_loss,
        losses: losses.into_iter().map(|(d, l)| (d, l.loss)).collect(),
        grad_norms,
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub projector: Projector,
    pub optimizer: OptimizerState,
    pub head: FrozenHead,
    pub tracker: DifficultyTracker,
    pub metrics: Vec<MetricRow>,
    pub steps: usize,
}

fn check_labels(datasets: &[DomainDataset]) -> Result<()> {
    for ds in datasets {
        for &i in &ds.split.train {
            if ds.instances[i].label.is_none() {
                return Err(Error::Validation {
                    instance: i,
                    field: "label".into(),
                    message: format!("training instance in `{}` has no label", ds.domain),
                });
            }
        }
    }
    Ok(())
}

/// Runs `T` steps of [`align_step`] over epoch-shuffled batches.
pub fn align_loop(
    config: &AlignConfig,
    datasets: &[DomainDataset],
    encoder: &MultiScaleEncoder,
) -> Result<AlignOutcome> {
    config.validate()?;
    check_labels(datasets)?;
    let head = config.build_head(datasets)?;
    let batches = iterate_epochs(
        datasets,
        config.batch_size,
        usize::MAX,
        seeding::derive(config.seed, "batches"),
    )?;
    let total_steps = config.steps.unwrap_or_else(|| batches.batches_per_epoch());
    let ctx = AlignContext::new(encoder, datasets, head)?;
    let mut state = AlignState::new(config, encoder.dims().hidden_dim, total_steps)?;
    for batch in batches.take(total_steps) {
        align_step(&ctx, &mut state, &batch, config)?;
    }
    Ok(AlignOutcome {
        projector: state.projector,
        optimizer: state.optimizer,
        head: ctx.head,
        tracker: state.tracker,
        metrics: state.metrics,
        steps: total_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub count: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 from `(truth, prediction)` pairs. Macro-F1 averages
/// over every class that occurs as a truth or a prediction.
pub fn classification_scores(pairs: &[(usize, usize)]) -> Result<ClassificationScores> {
    if pairs.is_empty() {
        return Err(Error::contract("classification scores of an empty split"));
    }
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for &(t, p) in pairs {
        if t == p {
            correct += 1;
            counts.entry(t).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().2 += 1;
        }
    }
    let f1_sum: f64 = counts
        .values()
        .map(|&(tp, fp, fneg)| 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
        .sum();
    Ok(ClassificationScores {
        count: pairs.len(),
        accuracy: correct as f64 / pairs.len() as f64,
        macro_f1: f1_sum / counts.len() as f64,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted label for one instance: the highest-scoring candidate, lowest index on ties.
pub fn predict(
    encoder: &MultiScaleEncoder,
    projector: &Projector,
    head: &FrozenHead,
    domain: usize,
    instance: &GraphInstance,
) -> Result<usize> {
    let (x, _) = encoder.task_representation(&instance.input())?;
    let z = projector.project_flat(&x)?;
    Ok(argmax(&head.logits(domain, &z)?))
}

pub fn evaluate_classification(
    encoder: &MultiScaleEncoder,
    projector: &Projector,
    head: &FrozenHead,
    dataset: &DomainDataset,
    split: SplitKind,
) -> Result<ClassificationScores> {
    let domain = head
        .index_of(&dataset.domain)
        .ok_or_else(|| Error::contract(format!("head has no part for `{}`", dataset.domain)))?;
    let pairs = dataset
        .split_indices(split)
        .par_iter()
        .map(|&i| {
            let inst = &dataset.instances[i];
            let truth = inst
                .label
                .ok_or_else(|| Error::contract(format!("instance {i} of `{}` has no label", dataset.domain)))?;
            Ok((truth, predict(encoder, projector, head, domain, inst)?))
        })
        .collect::<Result<Vec<_>>>()?;
    classification_scores(&pairs)
}
