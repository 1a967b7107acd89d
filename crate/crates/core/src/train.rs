//! Mini-batch SGD with momentum and a step-decay learning rate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsmError};
use crate::model::{AttentionSource, Checkpoint, HeadModel, ModelConfig, TrainingState};
use crate::tensor::{Tape, Tensor};
use crate::tsm::{resample_temporal, VideoMap};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// The learning rate is divided by this every `decay_interval` iterations.
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Drop probability on the classifier input; 0 disables dropout.
    pub dropout: f64,
    /// Multiplier on the attention branch's learning rate.
    pub attention_lr_scale: f64,
    /// Epochs during which the attention branch stays frozen.
    pub attention_warmup_epochs: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            decay_factor: 10.0,
            decay_interval: 500,
            batch_size: 32,
            max_epochs: 30,
            momentum: 0.9,
            weight_decay: 0.0,
            dropout: 0.0,
            attention_lr_scale: 1.0,
            attention_warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TsmError::Argument(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.decay_factor > 1.0 && self.decay_factor.is_finite()) {
            return bad("decay_factor must exceed 1");
        }
        if self.decay_interval == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("decay_interval, batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.attention_lr_scale >= 0.0 && self.attention_lr_scale.is_finite()) {
            return bad("attention_lr_scale must be non-negative");
        }
        Ok(())
    }
}

/// `base_lr / decay_factor^⌊iteration / decay_interval⌋`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    let decays = iteration / cfg.decay_interval.max(1);
    cfg.base_lr / cfg.decay_factor.powf(decays as f64)
}

/// Parameters for `config`, reproducible from `seed`.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<HeadModel> {
    HeadModel::init(ModelConfig { seed, ..config.clone() })
}

/// In-place momentum update on a flat buffer: `v ← μv − lr·g; θ ← θ + v`.
pub fn momentum_update(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *t += *v;
    }
}

/// One SGD-with-momentum step over every model parameter.
pub fn sgd_step(
    model: &mut HeadModel,
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    velocity: &mut [Tensor],
) -> Result<()> {
    let params = model.params_mut();
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(TsmError::dim(
            "sgd_step",
            format!(
                "{} parameters, {} gradients, {} momentum buffers",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if g.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
            return Err(TsmError::dim(
                "sgd_step",
                format!("gradient for {} has shape {:?}", p.name, g.shape()),
            ));
        }
        momentum_update(p.tensor.data_mut(), g.data(), v.data_mut(), lr, momentum);
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Iterations completed at the end of the epoch.
    pub iteration: u64,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,iteration,lr,loss,accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.iteration, r.lr, r.loss, r.accuracy
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

/// Stateful training loop; owns the model, momentum buffers and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: HeadModel,
    cfg: TrainConfig,
    velocity: Vec<Tensor>,
    iteration: u64,
    epoch: u64,
}

struct Example {
    input: Tensor,
    label: usize,
}

impl Trainer {
    pub fn new(model: HeadModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            cfg,
            velocity,
            iteration: 0,
            epoch: 0,
        })
    }

    /// Continue from a checkpoint; counters and momentum carry over when stored.
    pub fn resume(checkpoint: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut trainer = Self::new(checkpoint.model, cfg)?;
        if let Some(state) = checkpoint.state {
            if state.velocity.len() != trainer.velocity.len() {
                return Err(TsmError::dim("resume", "momentum buffers do not match the model"));
            }
            trainer.velocity = state.velocity;
            trainer.iteration = state.iteration;
            trainer.epoch = state.epoch;
        }
        Ok(trainer)
    }

    pub fn model(&self) -> &HeadModel {
        &self.model
    }

    pub fn into_model(self) -> HeadModel {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            state: Some(TrainingState {
                iteration: self.iteration,
                epoch: self.epoch,
                velocity: self.velocity.clone(),
            }),
        }
    }

    fn prepare(&self, dataset: &[VideoMap]) -> Result<Vec<Example>> {
        if dataset.is_empty() {
            return Err(TsmError::Argument("training set is empty".into()));
        }
        let cfg = self.model.config();
        dataset
            .iter()
            .map(|m| {
                if m.width() != cfg.feature_dim {
                    return Err(TsmError::dim(
                        "train",
                        format!(
                            "map {} has width {}, model expects {}",
                            m.source_id,
                            m.width(),
                            cfg.feature_dim
                        ),
                    ));
                }
                if m.label >= cfg.num_classes {
                    return Err(TsmError::Index {
                        context: format!("label of {}", m.source_id),
                        index: m.label,
                        size: cfg.num_classes,
                    });
                }
                Ok(Example {
                    input: resample_temporal(m, cfg.t_fixed)?.to_tensor(),
                    label: m.label,
                })
            })
            .collect()
    }

    /// Train until `max_epochs` epochs have run in total.
    pub fn fit(&mut self, dataset: &[VideoMap]) -> Result<TrainLog> {
        let examples = self.prepare(dataset)?;
        let mut log = TrainLog::default();
        while self.epoch < self.cfg.max_epochs {
            log.epochs.push(self.run_epoch(&examples)?);
        }
        Ok(log)
    }

    /// Train for `epochs` more epochs regardless of `max_epochs`.
    pub fn fit_epochs(&mut self, dataset: &[VideoMap], epochs: u64) -> Result<TrainLog> {
        let examples = self.prepare(dataset)?;
        let mut log = TrainLog::default();
        for _ in 0..epochs {
            log.epochs.push(self.run_epoch(&examples)?);
        }
        Ok(log)
    }

    fn run_epoch(&mut self, examples: &[Example]) -> Result<EpochRecord> {
        // Each epoch draws from its own stream so a resumed run sees the same order.
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = lr_at(self.iteration, &self.cfg);
        for batch in order.chunks(self.cfg.batch_size) {
            lr = lr_at(self.iteration, &self.cfg);
            let mut grads: Vec<Tensor> = self
                .model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
                .collect::<Result<_>>()?;
            for &i in batch {
                let ex = &examples[i];
                let (loss, hit) = self.accumulate(ex, &mut grads, &mut rng)?;
                if !loss.is_finite() {
                    return Err(TsmError::Numerical {
                        iteration: self.iteration,
                        message: format!("loss is {loss}"),
                    });
                }
                loss_sum += loss;
                correct += usize::from(hit);
            }
            let scale = 1.0 / batch.len() as f64;
            let attention_scale = if self.epoch < self.cfg.attention_warmup_epochs {
                0.0
            } else {
                self.cfg.attention_lr_scale
            };
            for (g, p) in grads.iter_mut().zip(self.model.params()) {
                let decay = if p.name.ends_with(".bias") {
                    0.0
                } else {
                    self.cfg.weight_decay
                };
                let scale = if p.name.starts_with("attention") {
                    attention_scale * scale
                } else {
                    scale
                };
                for (gv, &pv) in g.data_mut().iter_mut().zip(p.tensor.data()) {
                    *gv = *gv * scale + decay * pv;
                }
            }
            sgd_step(&mut self.model, &grads, lr, self.cfg.momentum, &mut self.velocity)?;
            if self.model.params().iter().any(|p| !p.tensor.is_finite()) {
                return Err(TsmError::Numerical {
                    iteration: self.iteration,
                    message: "parameters became non-finite".into(),
                });
            }
            self.iteration += 1;
        }
        self.epoch += 1;
        let n = examples.len() as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            iteration: self.iteration,
            lr,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        })
    }

    fn accumulate(&self, ex: &Example, grads: &mut [Tensor], rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
        let tape = Tape::new();
        let mask = (self.cfg.dropout > 0.0).then(|| {
            let keep = 1.0 - self.cfg.dropout;
            let n = self.model.config().classifier_inputs();
            Tensor::vector(
                (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect(),
            )
        });
        let fwd = self
            .model
            .forward_masked(&tape, &ex.input, AttentionSource::Learned, mask)?;
        let logits = fwd.logits.to_tensor();
        let hit = argmax(logits.data()) == ex.label;
        let loss = fwd.logits.softmax_cross_entropy(ex.label)?;
        let value = loss.value().item()?;
        let table = tape.backward(loss)?;
        for (acc, var) in grads.iter_mut().zip(&fwd.params) {
            if let Some(g) = table.get(*var) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        Ok((value, hit))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Train a freshly initialized model on `dataset`.
pub fn train(dataset: &[VideoMap], cfg: &TrainConfig, model_config: &ModelConfig) -> Result<(HeadModel, TrainLog)> {
    let model = HeadModel::init(model_config.clone())?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let log = trainer.fit(dataset)?;
    Ok((trainer.into_model(), log))
}
