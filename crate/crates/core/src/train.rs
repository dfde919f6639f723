//! Seeded mini-batch training with Adam and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::exec::Exec;
use crate::mask::{self, MaskedLossBreakdown};
use crate::model::{self, EncoderConfig, ModelParams, Variant};
use crate::tensor::Tensor;
use crate::{rng, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Sub-stream of the run seed used for epoch shuffling; stream 0 is not used
/// so that parameter init (which uses the raw seed) stays independent.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lambda: 0.1,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            variant: Variant::Masked,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config(
                "batch_size, max_epochs and patience must be positive",
            ));
        }
        Ok(())
    }
}

/// Adam moments for every parameter tensor, in `named_tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.first.len() {
            return Err(Error::shape("gradient list does not match parameters"));
        }
        for (t, g) in tensors.iter().zip(grads) {
            if t.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
        }
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (((theta, g), m), v) in tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let (theta, m, v) = (theta.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    /// Last epoch run (1-based).
    pub stopping_epoch: usize,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

impl TrainRecord {
    /// `epoch,train_loss,val_loss,val_acc`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc
            ));
        }
        out
    }
}

impl PartialEq for TrainRecord {
    /// Compares everything except wall-clock time.
    fn eq(&self, other: &Self) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
                    && a.val_acc.to_bits() == b.val_acc.to_bits()
            })
            && self.stopping_epoch == other.stopping_epoch
            && self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
    }
}

/// Loss breakdown and parameter gradients of `ℓ_total` for one sample.
pub fn sample_gradients(
    params: &ModelParams,
    sample: &Sample,
    lambda: f64,
) -> Result<(MaskedLossBreakdown, Vec<Tensor>)> {
    let mut fp = model::forward(params, &sample.image, params.variant())?;
    let pre = fp.tape.softmax_cross_entropy(fp.logits, sample.label)?;
    let breakdown = match fp.mask {
        Some(m) => mask::total_loss(&mut fp.tape, pre, m, lambda)?,
        None => MaskedLossBreakdown::unregularized(&fp.tape, pre),
    };
    let mut grads = fp.tape.backward(breakdown.total_var)?;
    Ok((
        breakdown,
        fp.params.iter().map(|&v| grads.take(v)).collect(),
    ))
}

/// Mean `ℓ_pre` (cross-entropy only) over `samples`.
pub fn prediction_loss(params: &ModelParams, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("cannot compute a loss over an empty split"));
    }
    let losses = exec.map(samples, |s| -> Result<f64> {
        let mut fp = model::forward(params, &s.image, params.variant())?;
        let pre = fp.tape.softmax_cross_entropy(fp.logits, s.label)?;
        Ok(fp.tape.value(pre).item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    /// Accuracy and confusion counts from parallel prediction/label lists.
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::config("cannot evaluate an empty split"));
        }
        if predictions.len() != labels.len() {
            return Err(Error::input("prediction and label counts differ"));
        }
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        let mut correct = 0;
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= n_classes || l >= n_classes {
                return Err(Error::input(format!(
                    "class index out of range for {n_classes} classes"
                )));
            }
            confusion[l][p] += 1;
            correct += usize::from(p == l);
        }
        let total = predictions.len();
        Ok(Self {
            accuracy: correct as f64 / total as f64,
            correct,
            total,
            confusion,
        })
    }
}

/// Argmax predictions (ties to the lowest class) for every sample.
pub fn predict_classes(params: &ModelParams, samples: &[Sample], exec: Exec) -> Result<Vec<usize>> {
    exec.map(samples, |s| {
        model::predict(params, &s.image).map(|l| l.argmax())
    })
    .into_iter()
    .collect()
}

pub fn evaluate(params: &ModelParams, samples: &[Sample], exec: Exec) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let predictions = predict_classes(params, samples, exec)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Evaluation::from_predictions(&predictions, &labels, params.config.n_classes)
}

/// Trains one model. Single-threaded and fully determined by
/// `(config, model_config, train, val)`.
///
/// Each epoch shuffles the training split, takes one Adam step per batch on
/// the batch-mean gradient of `ℓ_total`, then scores the validation split by
/// mean `ℓ_pre`. Training stops once the best validation loss is `patience`
/// epochs old; the parameters of the best epoch are returned.
pub fn train(
    config: &TrainConfig,
    model_config: &EncoderConfig,
    train: &[Sample],
    val: &[Sample],
) -> Result<(ModelParams, TrainRecord)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config(
            "training needs nonempty train and val splits",
        ));
    }
    for s in train.iter().chain(val) {
        if s.label >= model_config.n_classes {
            return Err(Error::config(format!(
                "label {} of {} is out of range for {} classes",
                s.label, s.path, model_config.n_classes
            )));
        }
    }

    let started = Instant::now();
    let mut params = ModelParams::init(model_config, config.variant, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = rng::rng(rng::derive_seed(config.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut sum: Option<Vec<Tensor>> = None;
            for &i in chunk {
                let (loss, grads) = sample_gradients(&params, &train[i], config.lambda)?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                epoch_loss += loss.total;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&grads)
                        .for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = sum.expect("chunks are nonempty");
            let inv = 1.0 / chunk.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            adam.step(&mut params, &grads, config.learning_rate)?;
        }

        let val_loss = prediction_loss(&params, val, Exec::Sequential)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
            });
        }
        let val_acc = evaluate(&params, val, Exec::Sequential)?.accuracy;
        epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_acc,
        });

        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let record = TrainRecord {
        stopping_epoch: epochs.len(),
        best_epoch: best.2,
        stopped_early,
        epochs,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((best.1, record))
}
