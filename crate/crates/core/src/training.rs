//! Adam, mini-batching, the training loop and the binary checkpoint format.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Example};
use crate::encoding::{encode_example, EncodedInput};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{init_params, loss_and_grad, trainable_set, ModelConfig, ModelParams};
use crate::numerics::{Matrix, Scalar};
use crate::text::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_first_k: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub use_position_embeddings: bool,
    pub use_segment_embeddings: bool,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            freeze_first_k: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            use_position_embeddings: true,
            use_segment_embeddings: true,
            max_len: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.adam_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    /// The model configuration actually trained: the embedding switches and
    /// `max_len` come from this config, the vocabulary size from `vocab`.
    pub fn effective_model_config(&self, base: &ModelConfig, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            max_len: self.max_len,
            vocab_size: vocab.len(),
            use_position_embeddings: self.use_position_embeddings,
            use_segment_embeddings: self.use_segment_embeddings,
            ..base.clone()
        }
    }
}

/// First/second moment estimates for the trainable groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Indexed like [`ModelParams::groups`]; `None` for frozen groups.
    moments: Vec<Option<(Matrix<T>, Matrix<T>)>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>, trainable: &BTreeSet<String>) -> Self {
        AdamState {
            moments: params
                .groups()
                .into_iter()
                .map(|(name, m)| {
                    trainable.contains(&name).then(|| {
                        (Matrix::zeros(m.rows(), m.cols()), Matrix::zeros(m.rows(), m.cols()))
                    })
                })
                .collect(),
            step: 0,
        }
    }

    pub fn is_trainable(&self, group_index: usize) -> bool {
        matches!(self.moments.get(group_index), Some(Some(_)))
    }
}

/// One bias-corrected Adam update of every trainable group.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let grad_groups = grads.groups();
    let mut param_groups = params.groups_mut();
    if grad_groups.len() != param_groups.len() || state.moments.len() != param_groups.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: (param_groups.len(), 1),
            right: (grad_groups.len(), state.moments.len()),
        });
    }
    for (((name, p), (_, g)), moments) in param_groups.iter().zip(&grad_groups).zip(&state.moments) {
        let shapes_ok = p.shape() == g.shape()
            && moments.as_ref().is_none_or(|(m, v)| m.shape() == p.shape() && v.shape() == p.shape());
        if !shapes_ok {
            return Err(Error::Config(format!(
                "adam_step: group {name} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = config.adam_beta1;
    let b2 = config.adam_beta2;
    let step_size = T::from_f64_lossy(config.learning_rate / (1.0 - b1.powi(t)));
    let v_correction = T::from_f64_lossy(1.0 / (1.0 - b2.powi(t)));
    let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let eps = T::from_f64_lossy(config.adam_eps);
    let one = T::one();

    for (((_, p), (_, g)), moments) in param_groups
        .iter_mut()
        .zip(&grad_groups)
        .zip(state.moments.iter_mut())
    {
        let Some((m, v)) = moments else { continue };
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * *gi;
            *vi = b2 * *vi + (one - b2) * *gi * *gi;
            *pi -= step_size * *mi / ((*vi * v_correction).sqrt() + eps);
        }
    }
    Ok(())
}

/// Shuffles `0..n` with `epoch_seed` and cuts it into batches; the last
/// batch may be short.
pub fn make_batches(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// An encoded training example with its gold cell.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub encoded: EncodedInput,
    pub answer_index: usize,
}

/// Encodes a dataset, dropping examples longer than `max_len`.
/// Returns the items and the number skipped.
pub fn encode_dataset(examples: &[Example], vocab: &Vocab, max_len: usize) -> (Vec<TrainItem>, usize) {
    let mut skipped = 0;
    let items = examples
        .iter()
        .enumerate()
        .filter_map(|(i, e)| match encode_example(e, vocab, max_len) {
            Some(encoded) => Some(TrainItem {
                id: format!("{i}:{}", e.table.table_id),
                encoded,
                answer_index: e.answer_index,
            }),
            None => {
                skipped += 1;
                None
            }
        })
        .collect();
    (items, skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub skipped_examples: usize,
    pub wallclock_seconds: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

/// Owns the parameters and optimizer state for a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams<f32>,
    pub state: AdamState<f32>,
    grads: ModelParams<f32>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig, params: ModelParams<f32>) -> Result<Self> {
        model_config.validate()?;
        train_config.validate()?;
        let trainable = trainable_set(&model_config, train_config.freeze_first_k)?;
        Ok(Trainer {
            state: AdamState::new(&params, &trainable),
            grads: params.zeros_like(),
            model_config,
            train_config,
            params,
        })
    }

    /// Fresh parameters from `train_config.seed`.
    pub fn from_seed(model_config: ModelConfig, train_config: TrainConfig) -> Result<Self> {
        let params = init_params(&model_config, train_config.seed)?;
        Self::new(model_config, train_config, params)
    }

    /// Forward/backward over `batch`, then one Adam step on the mean gradient.
    /// Statistics are from the pre-update forward passes.
    pub fn step(&mut self, batch: &[&TrainItem], epoch: usize, batch_index: usize) -> Result<BatchStats> {
        self.grads.groups_mut().into_iter().for_each(|(_, m)| m.fill_zero());
        let mut stats = BatchStats::default();
        for item in batch {
            let (loss, fwd) = loss_and_grad(
                &item.encoded,
                &self.params,
                &self.model_config,
                item.answer_index,
                self.train_config.freeze_first_k,
                &mut self.grads,
            )?;
            if !loss.is_finite() {
                return Err(Error::TrainingAborted {
                    epoch,
                    batch: batch_index,
                    example_id: item.id.clone(),
                });
            }
            stats.loss_sum += f64::from(loss);
            stats.correct += usize::from(fwd.pointer.argmax() == item.answer_index);
            stats.count += 1;
        }
        if stats.count == 0 {
            return Ok(stats);
        }
        let inv = 1.0 / stats.count as f32;
        self.grads.groups_mut().into_iter().for_each(|(_, m)| m.scale(inv));
        adam_step(&mut self.params, &self.grads, &mut self.state, &self.train_config)?;
        if !self.params.is_finite() {
            return Err(Error::TrainingAborted {
                epoch,
                batch: batch_index,
                example_id: batch[0].id.clone(),
            });
        }
        Ok(stats)
    }

    /// One shuffled pass over `items`.
    pub fn epoch(&mut self, items: &[TrainItem], epoch: usize) -> Result<BatchStats> {
        let batches = make_batches(
            items.len(),
            self.train_config.batch_size,
            derive_seed(self.train_config.seed, epoch, usize::MAX),
        );
        let mut total = BatchStats::default();
        for (b, indices) in batches.iter().enumerate() {
            let batch: Vec<&TrainItem> = indices.iter().map(|&i| &items[i]).collect();
            let s = self.step(&batch, epoch, b)?;
            total.loss_sum += s.loss_sum;
            total.correct += s.correct;
            total.count += s.count;
        }
        Ok(total)
    }
}

/// Where and when [`train`] writes checkpoints, plus a per-epoch hook.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_path: Option<&'a Path>,
    pub checkpoint_every_epoch: bool,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model_config: ModelConfig,
    pub params: ModelParams<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub skipped: usize,
}

pub fn train(
    dataset: &[Example],
    vocab: &Vocab,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let config = train_config.effective_model_config(model_config, vocab);
    let (items, skipped) = encode_dataset(dataset, vocab, train_config.max_len);
    if items.is_empty() {
        return Err(Error::Config(format!(
            "no trainable examples ({} given, {skipped} skipped)",
            dataset.len()
        )));
    }
    let mut trainer = Trainer::from_seed(config.clone(), train_config.clone())?;
    let digest = vocab.digest();
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(train_config.epochs);
    for epoch in 1..=train_config.epochs {
        let stats = trainer.epoch(&items, epoch)?;
        let m = EpochMetrics {
            epoch,
            mean_loss: stats.loss_sum / stats.count as f64,
            train_accuracy: stats.correct as f64 / stats.count as f64,
            skipped_examples: skipped,
            wallclock_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(hook) = options.on_epoch.as_mut() {
            hook(&m);
        }
        metrics.push(m);
        if let Some(path) = options.checkpoint_path {
            if options.checkpoint_every_epoch || epoch == train_config.epochs {
                save_checkpoint(path, &trainer.params, &config, train_config, &digest)?;
            }
        }
    }
    Ok(TrainOutcome {
        model_config: config,
        params: trainer.params,
        metrics,
        skipped,
    })
}

pub fn write_metrics_jsonl<W: Write>(mut writer: W, metrics: &[EpochMetrics]) -> std::io::Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut writer, m)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"T2A1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredConfigs {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab_digest: [u8; 32],
    pub params: ModelParams<f32>,
}

/// Serializes a checkpoint: magic, version, configs (length-prefixed JSON),
/// vocabulary digest, then each group as (name, rows, cols, f32 LE values).
pub fn encode_checkpoint(
    params: &ModelParams<f32>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    vocab_digest: &[u8; 32],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.n_values() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let configs = serde_json::to_vec(&StoredConfigs {
        model: model_config.clone(),
        train: train_config.clone(),
    })
    .expect("configs serialize");
    out.extend_from_slice(&(configs.len() as u32).to_le_bytes());
    out.extend_from_slice(&configs);
    out.extend_from_slice(vocab_digest);
    let groups = params.groups();
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (name, m) in groups {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses checkpoint bytes. When `expected_vocab` is given, its digest must
/// match the stored one.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected_vocab: Option<&Vocab>,
) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32()? as usize;
    let configs: StoredConfigs = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("configs: {e}")))?;
    let vocab_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if let Some(vocab) = expected_vocab {
        if vocab.digest() != vocab_digest {
            return Err(CheckpointError::VocabDigestMismatch);
        }
    }
    configs
        .model
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let mut params = ModelParams::<f32>::zeros(&configs.model);
    let n_groups = r.u32()? as usize;
    let expected = params.groups().len();
    if n_groups != expected {
        return Err(CheckpointError::Corrupt(format!(
            "{n_groups} parameter groups, expected {expected}"
        )));
    }
    for (name, m) in params.groups_mut() {
        let name_len = r.u32()? as usize;
        let stored = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("group name is not UTF-8".into()))?;
        if stored != name {
            return Err(CheckpointError::Corrupt(format!(
                "group {stored:?} where {name:?} was expected"
            )));
        }
        let shape = (r.u32()? as usize, r.u32()? as usize);
        if shape != m.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "group {name} has shape {shape:?}, expected {:?}",
                m.shape()
            )));
        }
        let raw = r.take(shape.0 * shape.1 * 4)?;
        for (dst, chunk) in m.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            r.bytes.len()
        )));
    }
    Ok(Checkpoint {
        model_config: configs.model,
        train_config: configs.train,
        vocab_digest,
        params,
    })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    vocab_digest: &[u8; 32],
) -> Result<()> {
    let bytes = encode_checkpoint(params, model_config, train_config, vocab_digest);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected_vocab: Option<&Vocab>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected_vocab).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
