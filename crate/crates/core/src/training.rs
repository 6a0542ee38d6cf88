//! Training regimes: standard empirical-risk minimization, multi-epoch
//! adversarial training (inner maximization by PGD), and the one-epoch
//! tiny-learning-rate frozen-backbone front-end recipe.
//!
//! All regimes run plain SGD (optional momentum) over batches whose order
//! is shuffled per epoch from the run seed; everything is deterministic
//! given `(seed, data order)`. The inner-attack stream is separate from
//! the data-order stream, so disabling the attack leaves the parameter
//! trajectory of the remaining steps bit-identical.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::LinfBall;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::GradientBundle;
use crate::models::{CompositeModel, Model};
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

/// Inner-maximization settings for adversarial regimes. `alpha` defaults
/// to `epsilon / 4`; training uses a single restart.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InnerAttack {
    pub epsilon: f32,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
}

impl InnerAttack {
    pub fn new(epsilon: f32, steps: usize) -> Self {
        InnerAttack { epsilon, steps, alpha: None }
    }

    fn step_size(&self) -> f32 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_attack: Option<InnerAttack>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f32, batch_size: usize, seed: u64) -> Self {
        TrainConfig { epochs, lr, batch_size, momentum: 0.0, inner_attack: None, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("train", format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch size must be >= 1"));
        }
        Ok(())
    }
}

/// One epoch of the training record; `clean_acc` is measured on the
/// training data itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub clean_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss before the first step.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.loss)
    }
}

// ── SGD ─────────────────────────────────────────────────────────────

struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    fn apply(&mut self, model: &mut Model, grads: &GradientBundle) {
        for (name, grad) in &grads.param_grads {
            let step: Vec<f32> = if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
                for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                    *vi = self.momentum * *vi + gi;
                }
                v.data().to_vec()
            } else {
                grad.data().to_vec()
            };
            let param = match model {
                Model::Graph(g) => g.param_mut(name),
                Model::Composite(c) => {
                    if let Some(rest) = name.strip_prefix("front.") {
                        c.front_mut().param_mut(rest)
                    } else if let Some(rest) = name.strip_prefix("back.") {
                        // Reached only when the backbone is unfrozen.
                        c.back_mut().param_mut(rest)
                    } else {
                        None
                    }
                }
                Model::Ensemble(_) => None,
            };
            if let Some(p) = param {
                for (w, s) in p.value.data_mut().iter_mut().zip(&step) {
                    *w -= self.lr * s;
                }
            }
        }
    }
}

fn mean_loss_and_acc(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let n = data.len();
    let mut total_loss = 0.0f64;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = data.batch(chunk);
        let logits = model.logits(&batch)?;
        total_loss +=
            crate::kernels::cross_entropy_fwd(logits.data(), &labels, labels.len(), logits.example_len())
                * labels.len() as f64;
        for (p, &y) in logits.argmax_rows().iter().zip(&labels) {
            if *p == y {
                correct += 1;
            }
        }
    }
    Ok((total_loss / n as f64, correct as f64 / n as f64))
}

/// Batched inner maximization: single-restart signed-gradient PGD from a
/// random point in the ball around each example. With `epsilon == 0` or
/// `steps == 0` the ball degenerates and the clean batch is returned, which
/// makes adversarial training coincide with standard training step for
/// step under one seed.
fn perturb_batch(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    attack: &InnerAttack,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    if attack.epsilon <= 0.0 || attack.steps == 0 {
        return Ok(batch.clone());
    }
    let ball = LinfBall::new(batch.clone(), attack.epsilon)?;
    let mut x = ball.sample_uniform(rng);
    let alpha = attack.step_size();
    for _ in 0..attack.steps {
        let (_, grad) = model.grad_input(&x, labels)?;
        ball.step_signed(&mut x, &grad, alpha);
    }
    Ok(x)
}

fn run_epochs(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    attack: Option<&InnerAttack>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    let (initial_loss, _) = mean_loss_and_acc(model, data, cfg.batch_size)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = substream(cfg.seed, &[tag::DATA_ORDER, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = data.batch(chunk);
            let batch = match attack {
                Some(a) => {
                    let mut attack_rng =
                        substream(cfg.seed, &[tag::ATTACK, epoch as u64, batch_idx as u64]);
                    perturb_batch(model, &batch, &labels, a, &mut attack_rng)?
                }
                None => batch,
            };
            let (loss, grads) = model.backward_trainable(&batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, step: batch_idx });
            }
            sgd.apply(model, &grads);
            epoch_loss += loss * labels.len() as f64;
            seen += labels.len();
        }
        let (_, clean_acc) = mean_loss_and_acc(model, data, cfg.batch_size)?;
        history.push(EpochRecord { epoch, loss: epoch_loss / seen as f64, clean_acc });
    }

    Ok(TrainHistory { initial_loss, epochs: history })
}

/// Standard empirical-risk minimization on clean data.
pub fn train_standard(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("train_standard", "epochs must be >= 1"));
    }
    run_epochs(model, data, cfg, None)
}

/// Adversarial training: every batch is replaced by PGD-perturbed examples
/// before the descent step (approximate inner maximization).
pub fn train_adversarial(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("train_adversarial", "epochs must be >= 1"));
    }
    let attack = cfg
        .inner_attack
        .ok_or_else(|| Error::invalid("train_adversarial", "inner attack settings required"))?;
    run_epochs(model, data, cfg, Some(&attack))
}

/// The front-end recipe: adversarial training of the front-end only,
/// against a frozen backbone, for at most one epoch, with batch-norm
/// statistics frozen. Backbone parameters and BN buffers are bitwise
/// untouched.
pub fn train_frontend(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    let composite: &CompositeModel = model
        .as_composite()
        .ok_or_else(|| Error::invalid("train_frontend", "expected a composite model"))?;
    if !composite.back_frozen() {
        return Err(Error::invalid("train_frontend", "backbone must be frozen (recipe violation)"));
    }
    if cfg.epochs > 1 {
        return Err(Error::invalid("train_frontend", format!("recipe trains for at most one epoch, got {}", cfg.epochs)));
    }
    if !composite.front().bn_all_frozen_stats() {
        return Err(Error::invalid("train_frontend", "front-end batch-norm must use frozen statistics"));
    }
    let attack = cfg
        .inner_attack
        .ok_or_else(|| Error::invalid("train_frontend", "inner attack settings required"))?;
    if cfg.epochs == 0 {
        let (initial_loss, _) = mean_loss_and_acc(model, data, cfg.batch_size)?;
        return Ok(TrainHistory { initial_loss, epochs: vec![] });
    }
    run_epochs(model, data, cfg, Some(&attack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dataset_synth, Split, SynthKind, SynthSpec};
    use crate::models::{build_mlp, frontend_new, CompositeModel, FrontEndConfig, Init};

    fn blob_data(n: usize) -> Dataset {
        let spec = SynthSpec {
            kind: SynthKind::Blobs,
            n,
            classes: 2,
            height: 6,
            width: 6,
            margin: 0.3,
            seed: 11,
        };
        dataset_synth(&spec, Split::Train).unwrap()
    }

    #[test]
    fn standard_training_separates_blobs() {
        let data = blob_data(80);
        let mut model = Model::Graph(build_mlp(&[1, 6, 6], &[16], 2, 5).unwrap());
        let cfg = TrainConfig::new(20, 0.1, 16, 7);
        let hist = train_standard(&mut model, &data, &cfg).unwrap();
        assert!(hist.final_loss() < hist.initial_loss);
        assert!(hist.epochs.last().unwrap().clean_acc >= 0.99);
    }

    #[test]
    fn zero_lr_is_a_precondition_error() {
        let data = blob_data(20);
        let mut model = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        let cfg = TrainConfig::new(1, 0.0, 8, 7);
        assert!(train_standard(&mut model, &data, &cfg).is_err());
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let data = blob_data(40);
        let cfg = TrainConfig::new(3, 0.05, 8, 13);
        let mut a = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        let mut b = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        train_standard(&mut a, &data, &cfg).unwrap();
        train_standard(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.param_bytes(), b.param_bytes());
    }

    #[test]
    fn zero_epsilon_adversarial_equals_standard() {
        let data = blob_data(40);
        let mut adv_cfg = TrainConfig::new(3, 0.05, 8, 13);
        adv_cfg.inner_attack = Some(InnerAttack::new(0.0, 7));
        let std_cfg = TrainConfig::new(3, 0.05, 8, 13);
        let mut a = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        let mut b = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        train_adversarial(&mut a, &data, &adv_cfg).unwrap();
        train_standard(&mut b, &data, &std_cfg).unwrap();
        assert_eq!(a.param_bytes(), b.param_bytes());
    }

    #[test]
    fn zero_steps_adversarial_equals_standard() {
        let data = blob_data(40);
        let mut adv_cfg = TrainConfig::new(2, 0.05, 8, 13);
        adv_cfg.inner_attack = Some(InnerAttack::new(0.1, 0));
        let std_cfg = TrainConfig::new(2, 0.05, 8, 13);
        let mut a = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        let mut b = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        train_adversarial(&mut a, &data, &adv_cfg).unwrap();
        train_standard(&mut b, &data, &std_cfg).unwrap();
        assert_eq!(a.param_bytes(), b.param_bytes());
    }

    #[test]
    fn history_length_equals_epochs() {
        let data = blob_data(20);
        let mut model = Model::Graph(build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap());
        let mut cfg = TrainConfig::new(4, 0.05, 8, 3);
        cfg.inner_attack = Some(InnerAttack::new(0.05, 3));
        let hist = train_adversarial(&mut model, &data, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 4);
    }

    #[test]
    fn frontend_recipe_leaves_backbone_bitwise_unchanged() {
        let data = blob_data(40);
        let mut backbone = Model::Graph(build_mlp(&[1, 6, 6], &[16], 2, 5).unwrap());
        train_standard(&mut backbone, &data, &TrainConfig::new(10, 0.1, 8, 7)).unwrap();
        let back_graph = backbone.into_graph().unwrap();
        let back_bytes = back_graph.param_bytes();

        let fe = frontend_new(&[1, 6, 6], &FrontEndConfig::default(), 21).unwrap();
        let mut composite = Model::Composite(CompositeModel::new(fe, back_graph, true).unwrap());
        let mut cfg = TrainConfig::new(1, 1e-4, 8, 9);
        cfg.inner_attack = Some(InnerAttack::new(0.1, 3));
        train_frontend(&mut composite, &data, &cfg).unwrap();

        let c = composite.as_composite().unwrap();
        assert_eq!(c.back().param_bytes(), back_bytes);
    }

    #[test]
    fn frontend_recipe_rejects_unfrozen_backbone_and_long_training() {
        let data = blob_data(20);
        let fe = frontend_new(&[1, 6, 6], &FrontEndConfig::default(), 21).unwrap();
        let back = build_mlp(&[1, 6, 6], &[8], 2, 5).unwrap();
        let mut unfrozen = Model::Composite(CompositeModel::new(fe.clone(), back.clone(), false).unwrap());
        let mut cfg = TrainConfig::new(1, 1e-4, 8, 9);
        cfg.inner_attack = Some(InnerAttack::new(0.1, 3));
        assert!(train_frontend(&mut unfrozen, &data, &cfg).is_err());

        let mut frozen = Model::Composite(CompositeModel::new(fe, back, true).unwrap());
        cfg.epochs = 2;
        assert!(train_frontend(&mut frozen, &data, &cfg).is_err());
    }

    #[test]
    fn zero_epoch_frontend_keeps_zero_init_identity() {
        let data = blob_data(20);
        let mut backbone = Model::Graph(build_mlp(&[1, 6, 6], &[16], 2, 5).unwrap());
        train_standard(&mut backbone, &data, &TrainConfig::new(5, 0.1, 8, 7)).unwrap();
        let back_graph = backbone.into_graph().unwrap();

        let cfg_fe = FrontEndConfig { init: Init::Zero, ..FrontEndConfig::default() };
        let fe = frontend_new(&[1, 6, 6], &cfg_fe, 1).unwrap();
        let mut composite =
            Model::Composite(CompositeModel::new(fe, back_graph.clone(), true).unwrap());
        let mut cfg = TrainConfig::new(0, 1e-4, 8, 9);
        cfg.inner_attack = Some(InnerAttack::new(0.1, 3));
        train_frontend(&mut composite, &data, &cfg).unwrap();

        let (bx, _) = data.batch(&(0..data.len()).collect::<Vec<_>>());
        let composite_logits = composite.logits(&bx).unwrap();
        let backbone_logits = back_graph.logits(&bx).unwrap();
        assert_eq!(composite_logits.data(), backbone_logits.data());
    }
}
