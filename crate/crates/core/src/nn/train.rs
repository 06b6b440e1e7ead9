//! Desk-scale training loop: seeded shuffling, gradient accumulation, Adam
//! with decoupled decay under the warm-restart cosine schedule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use super::layers::Mode;
use super::loss::{batch_loss_and_grad, LossKind};
use super::model::Model;
use super::optim::{adam_step, cosine_lr, AdamState};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::preprocess;
use crate::signalio::{self, TraceFormat};
use crate::timefreq::{self, WaveletSpec};

fn default_lr() -> f64 {
    3e-4
}
fn default_wd() -> f64 {
    0.2
}
fn default_tau0() -> u64 {
    5000
}
fn default_batch() -> usize {
    10
}
fn default_accum() -> usize {
    3
}
fn default_epochs() -> usize {
    10
}
fn default_loss() -> LossKind {
    LossKind::PolyLoss
}
fn default_epsilon() -> f64 {
    2.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr_max: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_tau0")]
    pub tau0: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_accum")]
    pub grad_accum: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many optimizer steps, whichever comes first.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: default_lr(),
            weight_decay: default_wd(),
            tau0: default_tau0(),
            batch_size: default_batch(),
            grad_accum: default_accum(),
            epochs: default_epochs(),
            max_steps: None,
            loss: default_loss(),
            epsilon: default_epsilon(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0) {
            return Err(Error::Domain(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if self.tau0 == 0 {
            return Err(Error::Domain("tau0 must be at least 1".into()));
        }
        if self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::Domain("batch size and grad_accum must be at least 1".into()));
        }
        Ok(())
    }
}

/// One labeled training example: a single-channel image and its class.
#[derive(Debug, Clone)]
pub struct Example {
    /// (1, H, W)
    pub input: Tensor,
    pub label: usize,
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn stack_batch(examples: &[Example], indices: &[usize]) -> Result<Tensor> {
    let shape = examples[indices[0]].input.shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * examples[indices[0]].input.numel());
    for &i in indices {
        if examples[i].input.shape() != shape {
            return Err(Error::Shape("examples disagree on input shape".into()));
        }
        data.extend_from_slice(examples[i].input.data());
    }
    let mut full = vec![indices.len()];
    full.extend_from_slice(&shape);
    Tensor::from_vec(&full, data)
}

/// Train in place. Gradients from each mini-batch are mean-reduced, summed
/// across `grad_accum` batches and averaged again, so an accumulated step
/// equals one step on the mean gradient of the accumulated batches.
pub fn train(model: &mut Model, examples: &[Example], config: &TrainConfig) -> Result<Vec<StepLog>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("no training examples".into()));
    }
    model.set_mode(Mode::Train);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut state = AdamState::new(&model.params_mut());
    let mut logs = Vec::new();
    let mut micro = 0usize;
    let mut micro_loss = 0.0;
    let mut steps = 0usize;
    let mut indices: Vec<usize> = (0..examples.len()).collect();

    'outer: for _epoch in 0..config.epochs {
        indices.shuffle(&mut shuffle_rng);
        for batch in indices.chunks(config.batch_size) {
            let x = stack_batch(examples, batch)?;
            let targets: Vec<usize> = batch.iter().map(|&i| examples[i].label).collect();
            let logits = model.forward(&x)?;
            let (loss, dlogits) = batch_loss_and_grad(&logits, &targets, config.loss, config.epsilon)?;
            model.backward(&dlogits)?;
            micro += 1;
            micro_loss += loss;
            if micro == config.grad_accum {
                let scale = 1.0 / config.grad_accum as f64;
                let mut params = model.params_mut();
                for p in params.iter_mut() {
                    for g in p.grad.data_mut() {
                        *g *= scale;
                    }
                }
                let lr = cosine_lr(steps as u64, config.lr_max, config.tau0);
                adam_step(&mut params, &mut state, lr, config.weight_decay);
                model.zero_grads();
                steps += 1;
                logs.push(StepLog {
                    step: steps,
                    lr,
                    loss: micro_loss / config.grad_accum as f64,
                });
                micro = 0;
                micro_loss = 0.0;
                if config.max_steps.is_some_and(|cap| steps >= cap) {
                    break 'outer;
                }
            }
        }
    }
    model.set_mode(Mode::Eval);
    Ok(logs)
}

/// Fraction of examples whose argmax probability matches the label.
pub fn accuracy(model: &mut Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no examples".into()));
    }
    let mut correct = 0usize;
    for e in examples {
        let mut shape = vec![1];
        shape.extend_from_slice(e.input.shape());
        let x = e.input.clone().reshape(&shape)?;
        let proba = model.predict_proba(&x)?;
        let pred = if proba[0][1] >= proba[0][0] { 1 } else { 0 };
        if pred == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn grid_to_example(grid: &timefreq::ScalogramGrid, label: usize) -> Result<Example> {
    Ok(Example {
        input: Tensor::from_vec(&[1, grid.rows, grid.cols], grid.values.clone())?,
        label,
    })
}

/// Load every train-split manifest entry as a classifier input.
///
/// Entries pointing at `.sgram` grid files load directly; waveform entries
/// run the dataset pipeline (sanitize, resample to 250 Hz, wavelet
/// transform, 300x300 grid).
pub fn load_examples(manifest_path: &Path, split: &str) -> Result<Vec<Example>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let entries = signalio::load_manifest(manifest_path)?;
    let mut examples = Vec::new();
    for entry in entries.iter().filter(|e| e.split == split) {
        let label = match entry.class.as_str() {
            "normal" => 0,
            "abnormal" => 1,
            other => return Err(Error::Format(format!("unknown class {other}"))),
        };
        let path = base.join(&entry.chunk);
        let is_grid = path.extension().and_then(|e| e.to_str()) == Some("sgram");
        if is_grid {
            examples.push(grid_to_example(&timefreq::load_grid(&path)?, label)?);
        } else {
            let trace = signalio::load_trace(&path, TraceFormat::from_path(&path))?;
            let trace = preprocess::fill_empty(&trace);
            let trace = preprocess::resample(&trace, 250.0)?;
            let grid = timefreq::cwt(&trace, &WaveletSpec::default_grid())?;
            examples.push(grid_to_example(&timefreq::to_grid_300(&grid)?, label)?);
        }
    }
    Ok(examples)
}

/// Manifest-driven training: returns the trained model and its step log.
pub fn train_demo(
    manifest_path: &Path,
    graph: ModelGraph,
    config: &TrainConfig,
) -> Result<(Model, Vec<StepLog>)> {
    let examples = load_examples(manifest_path, "train")?;
    if examples.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} has no train-split entries",
            manifest_path.display()
        )));
    }
    let mut model = Model::from_graph(graph, config.seed)?;
    let logs = train(&mut model, &examples, config)?;
    Ok((model, logs))
}

/// Synthetic two-class dataset for training smoke tests. The blob
/// populations are disjoint: class 0 grids carry one small dim blob, class 1
/// grids one large bright blob, at random positions over faint noise. The
/// signal survives global pooling, so any of the classifier graphs can
/// separate it.
pub fn synthetic_blob_examples(count: usize, hw: usize, seed: u64) -> Vec<Example> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = i % 2;
            let mut data = vec![0.0; hw * hw];
            for v in &mut data {
                *v = rng.random_range(0.0..0.1);
            }
            let (blob, lo, hi) = if label == 0 { (3, 0.4, 0.5) } else { (6, 0.9, 1.0) };
            let cy = rng.random_range(0..hw - blob);
            let cx = rng.random_range(0..hw - blob);
            for dy in 0..blob {
                for dx in 0..blob {
                    data[(cy + dy) * hw + (cx + dx)] = rng.random_range(lo..hi);
                }
            }
            Example {
                input: Tensor::from_vec(&[1, hw, hw], data).unwrap(),
                label,
            }
        })
        .collect()
}
