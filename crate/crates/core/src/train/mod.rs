//! Losses, optimizer, the training loop and checkpoints.
//!
//! Both phases share one loop. Each step draws an MT batch; when contrastive
//! items are supplied it also draws a contrastive batch and descends the
//! joint loss. Random streams are split by purpose (MT batch order,
//! contrastive batch order, dropout) so adding the contrastive term never
//! shifts the MT draws.

mod checkpoint;
mod loss;
mod optim;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{cl_loss, hinge, joint_loss, mt_loss, ContrastiveItem};
pub use optim::{adam_step, AdamConfig, AdamState};

use crate::autodiff::{param_grads, Graph, Scalar};
use crate::error::{Error, Result};
use crate::model::{Input, Model};
use crate::rng::{fnv1a, StreamRng};
use crate::tokenizer::{EncodedExample, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Mt,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Items per contrastive batch.
    pub cl_batch_size: usize,
    pub max_steps: usize,
    /// Steps between validation passes.
    pub eval_every: usize,
    pub patience: usize,
    pub alpha: f64,
    pub eta: f64,
    pub seed: u64,
    pub phase: Phase,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_size: 32,
            cl_batch_size: 16,
            max_steps: 2000,
            eval_every: 100,
            patience: 3,
            alpha: 0.5,
            eta: 1.0,
            seed: 0,
            phase: Phase::Mt,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta {} must be non-negative", self.eta));
        }
        if self.batch_size == 0 || self.cl_batch_size == 0 || self.eval_every == 0 {
            return bad("batch sizes and eval_every must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mt_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cl_loss: Option<f64>,
}

/// One validation pass; losses are averages over the steps since the
/// previous pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub mt_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cl_loss: Option<f64>,
    pub val_mt_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxSteps,
    EarlyStopping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation MT loss of the starting parameters.
    pub initial_val_mt_loss: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub stop: StopReason,
    /// Step whose parameters were returned (0 = the starting parameters).
    pub best_step: usize,
}

impl TrainHistory {
    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.evals {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    rng: StreamRng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(seed: u64, label: &str, n: usize) -> Self {
        Sampler {
            rng: StreamRng::labeled(seed, label),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.sort_unstable();
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Token-mean NLL over a data set in inference mode.
pub fn evaluate_mt_loss<F: Scalar>(model: &Model<F>, data: &[EncodedExample], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let inputs: Vec<Input> = chunk.iter().map(Input::from).collect();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &inputs)?;
        let tok = model.token_log_probs(&mut g, &fwd)?;
        total -= g.value(tok).data().iter().map(|v| v.to_f64()).sum::<f64>();
        count += fwd.labels.iter().filter(|&&l| l != PAD).count();
    }
    Ok(total / count as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Trains `model` in place and returns the history. With `valid`, training
/// stops once more than `patience` consecutive validation passes fail to
/// improve; the MT phase then restores the best-validation parameters. With
/// `contrastive`, each step descends the joint loss.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    adam: &mut AdamState<F>,
    train_set: &[EncodedExample],
    contrastive: Option<&[ContrastiveItem]>,
    valid: Option<&[EncodedExample]>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(c) = contrastive {
        if c.is_empty() {
            return Err(Error::Empty("contrastive set"));
        }
    }
    let opt = config.adam();
    let mut mt_sampler = Sampler::new(config.seed, "mt-batches", train_set.len());
    let mut cl_sampler = contrastive.map(|c| Sampler::new(config.seed, "cl-batches", c.len()));
    let dropout_seed = config.seed ^ fnv1a(b"dropout");

    let mut history = TrainHistory {
        initial_val_mt_loss: None,
        steps: Vec::new(),
        evals: Vec::new(),
        stop: StopReason::MaxSteps,
        best_step: 0,
    };
    let mut best = match valid {
        Some(v) => Some((evaluate_mt_loss(model, v, config.batch_size)?, model.params().clone(), adam.clone())),
        None => None,
    };
    history.initial_val_mt_loss = best.as_ref().map(|b| b.0);
    let mut bad_evals = 0usize;
    let mut since_eval_mt = Vec::new();
    let mut since_eval_cl = Vec::new();

    for step in 1..=config.max_steps {
        let idx = mt_sampler.next_batch(config.batch_size);
        let batch: Vec<Input> = idx.iter().map(|&i| Input::from(&train_set[i])).collect();
        let mut g = Graph::training(StreamRng::new(dropout_seed, step as u64));
        let mt = mt_loss(&mut g, model, &batch)?;
        let mut record = StepRecord {
            step,
            mt_loss: g.value(mt).item().to_f64(),
            cl_loss: None,
        };
        let loss = match (contrastive, cl_sampler.as_mut()) {
            (Some(items), Some(s)) => {
                let cidx = s.next_batch(config.cl_batch_size);
                let cb: Vec<&ContrastiveItem> = cidx.iter().map(|&i| &items[i]).collect();
                let cl = cl_loss(&mut g, model, &cb, config.eta)?;
                record.cl_loss = Some(g.value(cl).item().to_f64());
                joint_loss(&mut g, mt, cl, config.alpha)?
            }
            _ => mt,
        };
        let grads = g.backward(loss)?;
        let grads = param_grads(&g, &grads, model.params());
        drop(g);
        adam_step(model.params_mut(), &grads, adam, &opt)?;
        since_eval_mt.push(record.mt_loss);
        if let Some(c) = record.cl_loss {
            since_eval_cl.push(c);
        }
        history.steps.push(record);

        if step % config.eval_every == 0 || step == config.max_steps {
            let val = match valid {
                Some(v) => evaluate_mt_loss(model, v, config.batch_size)?,
                None => f64::NAN,
            };
            history.evals.push(EvalRecord {
                step,
                mt_loss: mean(&since_eval_mt),
                cl_loss: (!since_eval_cl.is_empty()).then(|| mean(&since_eval_cl)),
                val_mt_loss: val,
            });
            since_eval_mt.clear();
            since_eval_cl.clear();
            if let Some((best_val, best_params, best_adam)) = best.as_mut() {
                if val < *best_val {
                    *best_val = val;
                    *best_params = model.params().clone();
                    *best_adam = adam.clone();
                    history.best_step = step;
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                    if bad_evals > config.patience {
                        history.stop = StopReason::EarlyStopping;
                        break;
                    }
                }
            }
        }
    }
    match best {
        // Fine-tuning keeps the parameters it stopped with: validation MT
        // loss decides when to stop, not which step to return.
        Some(_) if config.phase == Phase::Finetune => history.best_step = history.steps.len(),
        Some((_, params, best_adam)) => {
            *model.params_mut() = params;
            *adam = best_adam;
        }
        None => history.best_step = history.steps.len(),
    }
    Ok(history)
}
