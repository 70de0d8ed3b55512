//! Teacher fine-tuning and the student distillation loop.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{hidden_on_batches, rd_on_batches, RdSample};
use crate::data::Dataset;
use crate::error::{FsdError, Result};
use crate::losses::{cross_entropy, objective, LossKind, LossTerms, LossWeights, ObjectiveInputs};
use crate::memory::{init_student_memory, post_train_teacher_memory, ClusteringReport, MemoryBank, DEFAULT_KMEANS_EPOCHS, STUDENT_MEMORY_STD};
use crate::model::{argmax_rows, forward, forward_eval, Batch, EncoderConfig, EncoderParams};
use crate::numerics::{Graph, Tensor};
use crate::optim::{Adam, AdamSettings};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamSettings,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(FsdError::Config("batch_size must be >= 2".into()));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: usize,
    /// Mean cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Per-epoch shuffled index chunks from the run's shuffle stream.
fn epoch_orders(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = stream(seed, Stream::Shuffle);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            Dataset::chunks(&order, batch_size)
        })
        .collect()
}

fn step_error(step: usize, e: FsdError) -> FsdError {
    match e {
        FsdError::NonFinite { op } => FsdError::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Predicted classes for every example, in dataset order.
pub fn predict(params: &EncoderParams, config: &EncoderConfig, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(batch_size.max(1)) {
        let (logits, _) = forward_eval(params, config, &data.batch(c)?)?;
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}

pub fn accuracy(params: &EncoderParams, config: &EncoderConfig, data: &Dataset, batch_size: usize) -> Result<f64> {
    let preds = predict(params, config, data, batch_size)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Cross-entropy fine-tuning of a freshly initialised or given teacher.
pub fn fine_tune_teacher(
    init: EncoderParams,
    config: &EncoderConfig,
    settings: &TrainSettings,
    data: &Dataset,
) -> Result<(EncoderParams, TeacherReport)> {
    settings.validate()?;
    init.check(config)?;
    let mut params = init;
    let mut adam = Adam::new(settings.optim.clone(), params.entries().into_iter().map(|(_, t)| t));
    let mut drop_rng = stream(settings.seed, Stream::Dropout);
    let mut epoch_loss = Vec::with_capacity(settings.epochs);
    let mut step = 0;
    for chunks in epoch_orders(data.len(), settings.batch_size, settings.epochs, settings.seed) {
        let mut total = 0.0;
        for idx in &chunks {
            step += 1;
            let batch = data.batch(idx)?;
            let loss = ce_step(&mut params, config, &batch, &mut adam, &mut drop_rng).map_err(|e| step_error(step, e))?;
            total += loss;
        }
        epoch_loss.push(total / chunks.len().max(1) as f64);
    }
    let train_accuracy = accuracy(&params, config, data, 64)?;
    Ok((
        params,
        TeacherReport {
            steps: step,
            epoch_loss,
            train_accuracy,
        },
    ))
}

fn ce_step(
    params: &mut EncoderParams,
    config: &EncoderConfig,
    batch: &Batch,
    adam: &mut Adam,
    drop_rng: &mut ChaCha20Rng,
) -> Result<f64> {
    let grads = {
        let g = Graph::new();
        let w = params.to_params(&g);
        let out = forward(&w, config, batch, Some(drop_rng))?;
        let loss = cross_entropy(&out.logits, &batch.labels)?;
        g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = w.entries().into_iter().map(|(_, v)| v.grad()).collect();
        (loss.item(), grads)
    };
    let mut tensors = params.tensors_mut();
    adam.update(&mut tensors, &grads.1)?;
    Ok(grads.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySettings {
    /// Number of centroids `|C|`.
    pub size: usize,
    pub kmeans_epochs: usize,
    pub student_std: f64,
    /// Learning rate of the student memory; the model's rate when absent.
    #[serde(default)]
    pub student_lr: Option<f64>,
}

impl Default for MemorySettings {
    fn default() -> Self {
        MemorySettings {
            size: 8,
            kmeans_epochs: DEFAULT_KMEANS_EPOCHS,
            student_std: STUDENT_MEMORY_STD,
            student_lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub kind: LossKind,
    pub weights: LossWeights,
    pub optim: AdamSettings,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub memory: MemorySettings,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(FsdError::Config("batch_size must be >= 2".into()));
        }
        if self.kind.uses_global() && self.memory.size < 2 {
            return Err(FsdError::Config("memory size must be >= 2".into()));
        }
        if self.memory.student_lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(FsdError::Config("memory student_lr must be positive".into()));
        }
        self.weights.validate(self.kind)?;
        self.optim.validate()
    }
}

/// Scalars logged after one optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub terms: LossTerms,
    pub batch_accuracy: f64,
}

/// Evaluation-mode teacher outputs for every training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    logits: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    n_classes: usize,
    seq_len: usize,
    d_model: usize,
}

impl TeacherCache {
    pub fn build(params: &EncoderParams, config: &EncoderConfig, data: &Dataset) -> Result<Self> {
        let mut logits = Vec::with_capacity(data.len());
        let mut hidden = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for c in idx.chunks(64) {
            let (l, h) = forward_eval(params, config, &data.batch(c)?)?;
            for i in 0..c.len() {
                logits.push(l.row(i).to_vec());
                hidden.push(h.row(i).to_vec());
            }
        }
        Ok(TeacherCache {
            logits,
            hidden,
            n_classes: config.n_classes,
            seq_len: config.max_seq_len,
            d_model: config.d_model,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Teacher logits `[B, K]` and features `[B, W, D]` for the given examples.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let logits = idx.iter().flat_map(|&i| self.logits[i].iter().copied()).collect();
        let hidden = idx.iter().flat_map(|&i| self.hidden[i].iter().copied()).collect();
        Ok((
            Tensor::new([idx.len(), self.n_classes], logits)?,
            Tensor::new([idx.len(), self.seq_len, self.d_model], hidden)?,
        ))
    }

    /// Flattened `[N, W·D]` features of every example, the k-means input.
    pub fn features(&self) -> Result<Tensor> {
        let data = self.hidden.iter().flatten().copied().collect();
        Tensor::new([self.len(), self.seq_len * self.d_model], data)
    }
}

/// A fine-tuned teacher with its cached training-set outputs and optional memory.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub params: EncoderParams,
    pub config: EncoderConfig,
    pub cache: TeacherCache,
    pub memory: Option<MemoryBank>,
}

impl Teacher {
    pub fn new(params: EncoderParams, config: EncoderConfig, data: &Dataset) -> Result<Self> {
        params.check(&config)?;
        let cache = TeacherCache::build(&params, &config, data)?;
        Ok(Teacher {
            params,
            config,
            cache,
            memory: None,
        })
    }

    /// Clusters the cached features into a frozen memory and attaches it.
    pub fn post_train_memory(&mut self, settings: &MemorySettings, seed: u64) -> Result<ClusteringReport> {
        let (bank, report) = post_train_teacher_memory(&self.cache.features()?, settings.size, settings.kmeans_epochs, seed)?;
        self.memory = Some(bank);
        Ok(report)
    }
}

/// Fixed evaluation batches on which RD is tracked during training.
#[derive(Debug, Clone)]
pub struct RdProbe {
    pub batches: Vec<Batch>,
    /// Log RD every this many steps (and at the first and last step).
    pub every: usize,
    /// Keep a copy of the student at every probed step.
    pub keep_snapshots: bool,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: EncoderParams,
    pub student_memory: Option<MemoryBank>,
    pub metrics: Vec<MetricsRecord>,
    pub rd_curve: Vec<RdSample>,
    pub snapshots: Vec<(usize, EncoderParams)>,
}

/// Trains a student against `L = L_VKD + β L_κ` (or plain cross-entropy for noDS).
pub fn distill(
    teacher: &Teacher,
    student_init: EncoderParams,
    student_config: &EncoderConfig,
    config: &DistillConfig,
    data: &Dataset,
    probe: Option<&RdProbe>,
) -> Result<DistillOutcome> {
    config.validate()?;
    student_init.check(student_config)?;
    if teacher.cache.len() != data.len() {
        return Err(FsdError::MissingDependency(
            "teacher outputs were cached for a different dataset".into(),
        ));
    }
    let kind = config.kind;
    let teacher_memory = if kind.uses_global() {
        Some(teacher.memory.as_ref().ok_or_else(|| {
            FsdError::MissingDependency(format!("{kind} needs a post-trained teacher memory"))
        })?)
    } else {
        None
    };
    let mut student = student_init;
    let mut student_memory = match teacher_memory {
        Some(m) => Some(init_student_memory(m.size(), m.width(), config.memory.student_std, config.seed)?),
        None => None,
    };
    let mut tensors: Vec<&Tensor> = student.entries().into_iter().map(|(_, t)| t).collect();
    if let Some(m) = &student_memory {
        tensors.push(&m.centroids);
    }
    let n_tensors = tensors.len();
    let mut adam = Adam::new(config.optim.clone(), tensors);
    if let (Some(_), Some(lr)) = (&student_memory, config.memory.student_lr) {
        adam.set_lr(n_tensors - 1, lr);
    }
    let mut drop_rng = stream(config.seed, Stream::Dropout);

    let probe_hidden = match probe {
        Some(p) => Some(hidden_on_batches(&teacher.params, &teacher.config, &p.batches)?),
        None => None,
    };
    let mut rd_curve = Vec::new();
    let mut snapshots = Vec::new();
    let mut observe = |step: usize, s: &EncoderParams| -> Result<()> {
        if let (Some(p), Some(ht)) = (probe, &probe_hidden) {
            rd_curve.push(rd_on_batches(step, ht, s, student_config, &p.batches)?);
            if p.keep_snapshots {
                snapshots.push((step, s.clone()));
            }
        }
        Ok(())
    };
    observe(0, &student)?;

    let mut metrics = Vec::new();
    let orders = epoch_orders(data.len(), config.batch_size, config.epochs, config.seed);
    let total_steps: usize = orders.iter().map(|o| o.len()).sum();
    let mut step = 0;
    for (epoch, chunks) in orders.into_iter().enumerate() {
        for idx in &chunks {
            step += 1;
            let batch = data.batch(idx)?;
            let record = distill_step(
                teacher,
                teacher_memory,
                &mut student,
                student_memory.as_mut(),
                student_config,
                config,
                idx,
                &batch,
                &mut adam,
                &mut drop_rng,
            )
            .map_err(|e| step_error(step, e))?;
            metrics.push(MetricsRecord {
                step,
                epoch,
                terms: record.0,
                batch_accuracy: record.1,
            });
            if let Some(p) = probe {
                if step == total_steps || (p.every > 0 && step % p.every == 0) {
                    observe(step, &student)?;
                }
            }
        }
    }
    Ok(DistillOutcome {
        student,
        student_memory,
        metrics,
        rd_curve,
        snapshots,
    })
}

#[allow(clippy::too_many_arguments)]
fn distill_step(
    teacher: &Teacher,
    teacher_memory: Option<&MemoryBank>,
    student: &mut EncoderParams,
    student_memory: Option<&mut MemoryBank>,
    student_config: &EncoderConfig,
    config: &DistillConfig,
    idx: &[usize],
    batch: &Batch,
    adam: &mut Adam,
    drop_rng: &mut ChaCha20Rng,
) -> Result<(LossTerms, f64)> {
    let cached = if config.kind.uses_teacher() {
        Some(teacher.cache.batch(idx)?)
    } else {
        None
    };
    let (terms, acc, grads) = {
        let g = Graph::new();
        let w = student.to_params(&g);
        let ms = student_memory.as_ref().map(|m| g.param(m.centroids.clone()));
        let out = forward(&w, student_config, batch, Some(drop_rng))?;
        let inputs = ObjectiveInputs {
            labels: &batch.labels,
            student_logits: out.logits,
            student_hidden: out.hidden,
            teacher_logits: cached.as_ref().map(|c| &c.0),
            teacher_hidden: cached.as_ref().map(|c| &c.1),
            teacher_memory: teacher_memory.map(|m| &m.centroids),
            student_memory: ms,
        };
        let (loss, terms) = objective(config.kind, &config.weights, &inputs)?;
        if !loss.item().is_finite() {
            return Err(FsdError::NonFinite { op: "loss" });
        }
        g.backward(loss)?;
        let mut grads: Vec<Option<Tensor>> = w.entries().into_iter().map(|(_, v)| v.grad()).collect();
        if let Some(ms) = ms {
            grads.push(ms.grad());
        }
        let preds = argmax_rows(&out.logits.value());
        let hits = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        (terms, hits as f64 / batch.size() as f64, grads)
    };
    let mut tensors = student.tensors_mut();
    if let Some(m) = student_memory {
        tensors.push(&mut m.centroids);
    }
    adam.update(&mut tensors, &grads)?;
    Ok((terms, acc))
}
