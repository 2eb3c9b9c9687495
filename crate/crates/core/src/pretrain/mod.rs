//! Stage I: domain-reweighted graph-text contrastive pretraining.

mod contrastive;
mod domain_weights;

pub use contrastive::{dr_clip_loss, ContrastiveOutput, TextAdapter};
pub use domain_weights::{
    compute_domain_centers, domain_distance_matrix, domain_weight_matrix, DomainCenters, DomainWeightMatrix,
};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodeCache, EncoderDims, MultiScaleEncoder};
use crate::error::{Error, Result};
use crate::graphdata::{iterate_epochs, BatchItem, DomainDataset, SplitKind};
use crate::numcore::{row_cosine_similarity, Matrix, OptimizerKind, OptimizerState, ParamSet};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub center_cap: usize,
    pub temperature: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 4096,
            learning_rate: 1e-4,
            center_cap: 1000,
            temperature: 1.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.center_cap == 0 {
            return Err(Error::InvalidParameter(
                "pretrain batch size and center cap must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pretrain temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pretrain learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Encoder plus the optional text adapter, the Stage I deliverable.
#[derive(Debug, Clone)]
pub struct PretrainedModel {
    pub encoder: MultiScaleEncoder,
    pub adapter: Option<TextAdapter>,
}

pub const ADAPTER_PREFIX: &str = "adapter.";

impl PretrainedModel {
    /// Fresh model; an adapter is added only when `text_dim` differs from the hidden width.
    pub fn new(dims: EncoderDims, text_dim: usize, seed: u64) -> Result<Self> {
        let encoder = MultiScaleEncoder::new(dims, seeding::derive(seed, "encoder"))?;
        let adapter = if text_dim != dims.hidden_dim {
            Some(TextAdapter::new(
                text_dim,
                dims.hidden_dim,
                seeding::derive(seed, "adapter"),
            )?)
        } else {
            None
        };
        Ok(PretrainedModel { encoder, adapter })
    }

    /// Flat parameter table: encoder tensors, then adapter tensors under `adapter.`.
    pub fn to_params(&self) -> ParamSet {
        let mut all = self.encoder.params().clone();
        if let Some(a) = &self.adapter {
            all.extend_prefixed(ADAPTER_PREFIX, a.params())
                .expect("adapter names never collide with encoder names");
        }
        all
    }

    pub fn from_params(dims: EncoderDims, params: &ParamSet) -> Result<Self> {
        let mut enc = ParamSet::new();
        for (name, m) in params.iter().filter(|(n, _)| !n.starts_with(ADAPTER_PREFIX)) {
            enc.push(name, m.clone())?;
        }
        let adapter_params = params.strip_prefix(ADAPTER_PREFIX);
        let adapter = if adapter_params.is_empty() {
            None
        } else {
            Some(TextAdapter::from_params(adapter_params)?)
        };
        if let Some(a) = &adapter {
            if a.hidden_dim() != dims.hidden_dim {
                return Err(Error::contract("adapter output width differs from the encoder width"));
            }
        }
        Ok(PretrainedModel {
            encoder: MultiScaleEncoder::from_params(dims, enc)?,
            adapter,
        })
    }

    /// Text rows mapped into the encoder's space.
    pub fn text_representations(&self, texts: &Matrix) -> Result<Matrix> {
        match &self.adapter {
            Some(a) => a.forward(texts),
            None if texts.cols() == self.encoder.dims().hidden_dim => Ok(texts.clone()),
            None => Err(Error::Dimension {
                op: "text_representations",
                left: texts.shape(),
                right: (texts.rows(), self.encoder.dims().hidden_dim),
            }),
        }
    }
}

/// Encodes every item at its task granularity. Instances run in parallel;
/// the output keeps item order.
pub fn encode_items(
    encoder: &MultiScaleEncoder,
    datasets: &[DomainDataset],
    items: &[BatchItem],
) -> Result<(Matrix, Vec<EncodeCache>)> {
    let encoded: Vec<(Vec<f64>, EncodeCache)> = items
        .par_iter()
        .map(|it| encoder.task_representation(&datasets[it.dataset].instances[it.instance].input()))
        .collect::<Result<_>>()?;
    let d = encoder.dims().hidden_dim;
    let mut x = Vec::with_capacity(items.len() * d);
    let mut caches = Vec::with_capacity(items.len());
    for (row, cache) in encoded {
        x.extend(row);
        caches.push(cache);
    }
    Ok((Matrix::from_vec(items.len(), d, x)?, caches))
}

fn text_rows(datasets: &[DomainDataset], items: &[BatchItem]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = items
        .iter()
        .map(|it| {
            let ds = &datasets[it.dataset];
            ds.text_row(ds.instances[it.instance].text_index)
        })
        .collect();
    Matrix::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: PretrainedModel,
    pub centers: DomainCenters,
    pub weights: DomainWeightMatrix,
    pub losses: Vec<EpochLoss>,
}

fn check_datasets(datasets: &[DomainDataset], dims: &EncoderDims) -> Result<usize> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::EmptyData("pretraining needs at least one domain".into()))?;
    let text_dim = first.text_dim();
    for ds in datasets {
        if let Some((instance, v)) = ds.violations().into_iter().next() {
            return Err(Error::Validation {
                instance,
                field: v.field.to_string(),
                message: format!("domain `{}`: {}", ds.domain, v.message),
            });
        }
        if ds.text_dim() != text_dim {
            return Err(Error::contract(format!(
                "domain `{}` has text width {}, expected {text_dim}",
                ds.domain,
                ds.text_dim()
            )));
        }
        if let Some(fd) = ds.feature_dim() {
            if fd != dims.input_dim {
                return Err(Error::contract(format!(
                    "domain `{}` has feature width {fd}, encoder expects {}",
                    ds.domain, dims.input_dim
                )));
            }
        }
    }
    Ok(text_dim)
}

/// Gradients of one batch's loss for the encoder and the adapter.
fn batch_gradients(
    model: &PretrainedModel,
    weights: &DomainWeightMatrix,
    datasets: &[DomainDataset],
    items: &[BatchItem],
    temperature: f64,
) -> Result<(f64, ParamSet, Option<ParamSet>)> {
    let (x, caches) = encode_items(&model.encoder, datasets, items)?;
    let raw_text = text_rows(datasets, items)?;
    let text = model.text_representations(&raw_text)?;
    let domains: Vec<usize> = items.iter().map(|it| it.dataset).collect();
    let out = dr_clip_loss(&x, &text, &domains, &weights.w_graph, &weights.w_text, temperature)?;

    let per_instance: Vec<ParamSet> = caches
        .par_iter()
        .enumerate()
        .map(|(i, c)| model.encoder.backward(c, out.grad_graph.row(i)).map(|g| g.params))
        .collect::<Result<_>>()?;
    let mut enc_grads = model.encoder.params().zeros_like();
    for g in &per_instance {
        enc_grads.axpy(1.0, g)?;
    }
    let adapter_grads = match &model.adapter {
        Some(a) => Some(a.backward(&raw_text, &out.grad_text)?),
        None => None,
    };
    Ok((out.loss, enc_grads, adapter_grads))
}

/// Computes centers and weights once, then runs `epochs` passes of
/// mixed-domain batches, stepping encoder and adapter after every batch.
pub fn pretrain_loop(
    config: &PretrainConfig,
    dims: EncoderDims,
    datasets: &[DomainDataset],
) -> Result<PretrainOutcome> {
    config.validate()?;
    dims.validate()?;
    let text_dim = check_datasets(datasets, &dims)?;

    let centers = compute_domain_centers(
        datasets,
        config.center_cap,
        &mut seeding::stream(config.seed, "centers"),
    )?;
    let weights = DomainWeightMatrix::from_centers(&centers)?;
    let mut model = PretrainedModel::new(dims, text_dim, config.seed)?;
    let mut enc_opt = OptimizerState::new(config.optimizer, config.learning_rate, model.encoder.params())?;
    let mut adapter_opt = match &model.adapter {
        Some(a) => Some(OptimizerState::new(config.optimizer, config.learning_rate, a.params())?),
        None => None,
    };

    let mut batches = iterate_epochs(
        datasets,
        config.batch_size,
        config.epochs,
        seeding::derive(config.seed, "batches"),
    )?;
    let per_epoch = batches.batches_per_epoch();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let batch = batches
                .next()
                .ok_or_else(|| Error::contract("batch stream ended early"))?;
            let (loss, enc_grads, adapter_grads) =
                batch_gradients(&model, &weights, datasets, &batch.items, config.temperature)?;
            sum += loss;
            enc_opt.step(model.encoder.params_mut(), &enc_grads)?;
            if let (Some(a), Some(opt), Some(g)) = (model.adapter.as_mut(), adapter_opt.as_mut(), adapter_grads) {
                opt.step(a.params_mut(), &g)?;
            }
        }
        losses.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: sum / per_epoch as f64,
        });
    }
    Ok(PretrainOutcome {
        model,
        centers,
        weights,
        losses,
    })
}

/// Unweighted contrastive loss of one whole split treated as a single batch.
pub fn split_contrastive_loss(
    model: &PretrainedModel,
    dataset: &DomainDataset,
    split: SplitKind,
    temperature: f64,
) -> Result<f64> {
    let items: Vec<BatchItem> = dataset
        .split_indices(split)
        .iter()
        .map(|&i| BatchItem {
            dataset: 0,
            instance: i,
        })
        .collect();
    let single = std::slice::from_ref(dataset);
    let (x, _) = encode_items(&model.encoder, single, &items)?;
    let text = model.text_representations(&text_rows(single, &items)?)?;
    let ones = Matrix::filled(1, 1, 1.0);
    Ok(dr_clip_loss(&x, &text, &vec![0; items.len()], &ones, &ones, temperature)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub pool_size: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

/// Graph-to-text retrieval over a pool drawn from the held-out instances
/// (validation and test). Equal scores rank by pool position.
pub fn evaluate_retrieval<R: Rng + ?Sized>(
    model: &PretrainedModel,
    dataset: &DomainDataset,
    pool_size: usize,
    rng: &mut R,
) -> Result<RetrievalScores> {
    let held_out = dataset.split.held_out();
    if pool_size == 0 || pool_size > held_out.len() {
        return Err(Error::contract(format!(
            "retrieval pool of {pool_size} from {} held-out instances in `{}`",
            held_out.len(),
            dataset.domain
        )));
    }
    let mut pool: Vec<usize> = sample(rng, held_out.len(), pool_size)
        .into_iter()
        .map(|k| held_out[k])
        .collect();
    pool.sort_unstable();
    let items: Vec<BatchItem> = pool
        .iter()
        .map(|&i| BatchItem {
            dataset: 0,
            instance: i,
        })
        .collect();
    let single = std::slice::from_ref(dataset);
    let (x, _) = encode_items(&model.encoder, single, &items)?;
    let text = model.text_representations(&text_rows(single, &items)?)?;
    let s = row_cosine_similarity(&x, &text)?;
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for i in 0..pool_size {
        let own = s.get(i, i);
        let rank = 1
            + (0..pool_size)
                .filter(|&j| {
                    let v = s.get(i, j);
                    v > own || (v == own && j < i)
                })
                .count();
        hit1 += usize::from(rank <= 1);
        hit5 += usize::from(rank <= 5);
    }
    Ok(RetrievalScores {
        pool_size,
        recall_at_1: hit1 as f64 / pool_size as f64,
        recall_at_5: hit5 as f64 / pool_size as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::TaskKind;
    use crate::synthgen::{generate_domain, DomainSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_domains() -> Vec<DomainDataset> {
        ["a", "b"]
            .iter()
            .enumerate()
            .map(|(k, name)| {
                generate_domain(&DomainSpec {
                    domain: name.to_string(),
                    task: [TaskKind::Node, TaskKind::Graph][k],
                    num_instances: 24,
                    classes: 3,
                    nodes: (3, 5),
                    feature_dim: 4,
                    text_dim: 6,
                    feature_noise: 0.2,
                    text_noise: 0.1,
                    label_noise: 0.0,
                    split: (0.5, 0.25),
                    seed: k as u64 + 10,
                })
                .unwrap()
            })
            .collect()
    }

    fn dims() -> EncoderDims {
        EncoderDims {
            input_dim: 4,
            hidden_dim: 5,
            layers: 2,
        }
    }

    fn config() -> PretrainConfig {
        PretrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.01,
            temperature: 0.2,
            seed: 4,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let data = small_domains();
        let cfg = PretrainConfig {
            learning_rate: 0.0,
            ..config()
        };
        let out = pretrain_loop(&cfg, dims(), &data).unwrap();
        let fresh = PretrainedModel::new(dims(), 6, cfg.seed).unwrap();
        assert_eq!(out.model.to_params(), fresh.to_params());
        assert_eq!(out.losses.len(), 3);
    }

    #[test]
    fn same_seed_same_losses() {
        let data = small_domains();
        let a = pretrain_loop(&config(), dims(), &data).unwrap();
        let b = pretrain_loop(&config(), dims(), &data).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model.to_params(), b.model.to_params());
    }

    #[test]
    fn model_params_round_trip() {
        let m = PretrainedModel::new(dims(), 6, 1).unwrap();
        let back = PretrainedModel::from_params(dims(), &m.to_params()).unwrap();
        assert_eq!(back.to_params(), m.to_params());
        assert!(back.adapter.is_some());
        let no_adapter = PretrainedModel::new(dims(), 5, 1).unwrap();
        assert!(no_adapter.adapter.is_none());
    }

    #[test]
    fn single_candidate_pool_is_always_found() {
        let data = small_domains();
        let m = PretrainedModel::new(dims(), 6, 1).unwrap();
        let r = evaluate_retrieval(&m, &data[0], 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.recall_at_1, 1.0);
    }

    #[test]
    fn oversized_pool_is_contract_error() {
        let data = small_domains();
        let m = PretrainedModel::new(dims(), 6, 1).unwrap();
        let held = data[0].split.held_out().len();
        let r = evaluate_retrieval(&m, &data[0], held + 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
