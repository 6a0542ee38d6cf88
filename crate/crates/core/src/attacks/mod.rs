//! Attack suite: PGD family, zero-order PGD, EOT gradient averaging,
//! SQUARE-style black-box search, front-end bypass (BPDA), and transfer
//! attacks. Every attack declares a required threat level and reaches the
//! target only through a [`TargetHandle`], which enforces the level and
//! counts every forward and gradient evaluation.

mod ball;
mod pgd;
mod square;
mod transfer;
mod zero_order;

pub use ball::LinfBall;
pub use pgd::{bpda_pgd, eot_grad, eot_pgd, pgd, PgdConfig};
pub use square::{square_attack, SquareConfig};
pub use transfer::transfer_attack;
pub use zero_order::{zero_order_grad, zero_order_pgd, BlockSpec, ZoConfig};

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CompositeModel, Model};
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

/// Attacker access level, ordered by strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ThreatLevel {
    /// Hard predictions only.
    BlackBoxLabels,
    /// Soft labels, hence loss values.
    BlackBoxScores,
    /// Input gradients in addition to scores.
    Gradient,
    /// Architecture and weights, but not test-time random draws.
    FullTrainTime,
}

impl ThreatLevel {
    pub fn name(self) -> &'static str {
        match self {
            ThreatLevel::BlackBoxLabels => "black-box-labels",
            ThreatLevel::BlackBoxScores => "black-box-scores",
            ThreatLevel::Gradient => "gradient",
            ThreatLevel::FullTrainTime => "full-train-time",
        }
    }
}

/// Gate between an attack and its target model. Refuses calls above the
/// granted threat level and counts the ones it lets through.
pub struct TargetHandle<'a> {
    model: &'a Model,
    granted: ThreatLevel,
    forward_queries: Cell<u64>,
    grad_queries: Cell<u64>,
}

impl<'a> TargetHandle<'a> {
    pub fn new(model: &'a Model, granted: ThreatLevel) -> Self {
        TargetHandle { model, granted, forward_queries: Cell::new(0), grad_queries: Cell::new(0) }
    }

    fn require(&self, attack: &'static str, required: ThreatLevel) -> Result<()> {
        if self.granted < required {
            return Err(Error::ThreatViolation {
                attack,
                required: required.name(),
                granted: self.granted.name(),
            });
        }
        Ok(())
    }

    /// Hard prediction for a single example.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.require("predict", ThreatLevel::BlackBoxLabels)?;
        self.forward_queries.set(self.forward_queries.get() + 1);
        Ok(self.model.predict(x)?[0])
    }

    /// Loss value, the score-level oracle.
    pub fn loss(&self, x: &Tensor, y: usize) -> Result<f64> {
        self.require("loss query", ThreatLevel::BlackBoxScores)?;
        self.forward_queries.set(self.forward_queries.get() + 1);
        self.model.loss(x, &[y])
    }

    /// Loss and input gradient.
    pub fn grad(&self, x: &Tensor, y: usize) -> Result<(f64, Tensor)> {
        self.require("gradient query", ThreatLevel::Gradient)?;
        self.grad_queries.set(self.grad_queries.get() + 1);
        self.model.grad_input(x, &[y])
    }

    /// The front/back decomposition; needs full train-time access.
    pub fn composite(&self) -> Result<&'a CompositeModel> {
        self.require("front-end bypass", ThreatLevel::FullTrainTime)?;
        self.model.as_composite().ok_or_else(|| {
            Error::invalid("bpda", "target has no front/back decomposition")
        })
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn forward_queries(&self) -> u64 {
        self.forward_queries.get()
    }

    pub fn grad_queries(&self) -> u64 {
        self.grad_queries.get()
    }

    /// Every forward plus every gradient evaluation.
    pub fn queries(&self) -> u64 {
        self.forward_queries.get() + self.grad_queries.get()
    }
}

/// Per-example attack result. `queries` counts every forward and gradient
/// evaluation made through the target handle during the search; the final
/// success determination is the experimenter's evaluation and is separate
/// (except for transfer attacks, where deployment is the single query).
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    pub success: bool,
    pub final_loss: f64,
    pub steps: usize,
    pub queries: u64,
    pub loss_trace: Vec<f64>,
}

/// Evaluates the success flag: untargeted attacks succeed when the
/// prediction differs from the true label, targeted ones when it equals
/// the target. For ensembles this is one deployed draw.
pub fn judge_success(model: &Model, x_hat: &Tensor, y: usize, target: Option<usize>) -> Result<bool> {
    let pred = model.predict(x_hat)?[0];
    Ok(match target {
        Some(t) => pred == t,
        None => pred != y,
    })
}

// ── attack specification ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// No perturbation; measures clean accuracy.
    Clean,
    Pgd,
    ZoPgd,
    Square,
    Bpda,
    Transfer,
    EotPgd,
}

impl AttackKind {
    pub fn required_level(self) -> ThreatLevel {
        match self {
            AttackKind::Clean => ThreatLevel::BlackBoxLabels,
            AttackKind::Square | AttackKind::ZoPgd => ThreatLevel::BlackBoxScores,
            AttackKind::Pgd | AttackKind::EotPgd => ThreatLevel::Gradient,
            AttackKind::Bpda | AttackKind::Transfer => ThreatLevel::FullTrainTime,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AttackKind::Clean => "no-attack",
            AttackKind::Pgd => "pgd",
            AttackKind::ZoPgd => "zo-pgd",
            AttackKind::Square => "square",
            AttackKind::Bpda => "bpda",
            AttackKind::Transfer => "transfer",
            AttackKind::EotPgd => "eot-pgd",
        }
    }
}

/// Serializable attack description. Unset fields resolve to per-kind
/// defaults; the resolved values are echoed into every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_init: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eot_draws: Option<usize>,
    /// Finite-difference probe step for zero-order attacks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<f32>,
    /// Zero-order block group size; 1 means singleton blocks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_group: Option<usize>,
    /// Step-halving on loss stagnation (loss-adaptive PGD variant).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub adaptive: bool,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, epsilon: f32) -> Self {
        AttackSpec {
            kind,
            epsilon,
            steps: None,
            alpha: None,
            restarts: None,
            budget: None,
            p_init: None,
            eot_draws: None,
            probe: None,
            block_group: None,
            adaptive: false,
        }
    }

    /// Fills every unset field with its per-kind default. Defaults: PGD 50
    /// steps x 5 restarts, zero-order 10 x 1 with group size 5, BPDA 10 x 5,
    /// SQUARE budget 5000, EOT 20 draws; step size eps/8 everywhere.
    pub fn resolve(&self) -> AttackSpec {
        let mut r = self.clone();
        let (steps, restarts) = match self.kind {
            AttackKind::Pgd | AttackKind::EotPgd | AttackKind::Transfer => (50, 5),
            AttackKind::ZoPgd => (10, 1),
            AttackKind::Bpda => (10, 5),
            AttackKind::Clean | AttackKind::Square => (0, 1),
        };
        r.steps = Some(self.steps.unwrap_or(steps));
        r.restarts = Some(self.restarts.unwrap_or(restarts));
        r.alpha = Some(self.alpha.unwrap_or(self.epsilon / 8.0));
        r.budget = Some(self.budget.unwrap_or(5000));
        r.p_init = Some(self.p_init.unwrap_or(0.8));
        r.eot_draws = Some(self.eot_draws.unwrap_or(20));
        r.probe = Some(self.probe.unwrap_or(0.01));
        r.block_group = Some(self.block_group.unwrap_or(5));
        r
    }
}

/// Runs one resolved attack against one example. `source` is consulted
/// only by transfer attacks. The per-example stream is derived from
/// `(seed, example_index)`, so batches can fan out across workers.
pub fn run_attack(
    spec: &AttackSpec,
    model: &Model,
    source: Option<&Model>,
    x: &Tensor,
    y: usize,
    seed: u64,
    example_index: u64,
) -> Result<AttackOutcome> {
    let spec = spec.resolve();
    let mut rng = substream(seed, &[tag::ATTACK, example_index]);
    let handle = TargetHandle::new(model, spec.kind.required_level());
    match spec.kind {
        AttackKind::Clean => {
            let success = judge_success(model, x, y, None)?;
            Ok(AttackOutcome {
                adversarial: x.clone(),
                success,
                final_loss: model.loss(x, &[y])?,
                steps: 0,
                queries: 0,
                loss_trace: vec![],
            })
        }
        AttackKind::Pgd => {
            let ball = LinfBall::new(x.clone(), spec.epsilon)?;
            let cfg = PgdConfig {
                steps: spec.steps.unwrap(),
                alpha: spec.alpha.unwrap(),
                restarts: spec.restarts.unwrap(),
                targeted: None,
                adaptive: spec.adaptive,
            };
            pgd(&handle, &ball, y, &cfg, &mut rng)
        }
        AttackKind::EotPgd => {
            let ball = LinfBall::new(x.clone(), spec.epsilon)?;
            let cfg = PgdConfig {
                steps: spec.steps.unwrap(),
                alpha: spec.alpha.unwrap(),
                restarts: spec.restarts.unwrap(),
                targeted: None,
                adaptive: spec.adaptive,
            };
            eot_pgd(&handle, &ball, y, &cfg, spec.eot_draws.unwrap(), &mut rng)
        }
        AttackKind::ZoPgd => {
            let ball = LinfBall::new(x.clone(), spec.epsilon)?;
            let cfg = ZoConfig {
                steps: spec.steps.unwrap(),
                alpha: spec.alpha.unwrap(),
                restarts: spec.restarts.unwrap(),
                probe: spec.probe.unwrap(),
                blocks: BlockSpec::RandomGroups { group_size: spec.block_group.unwrap() },
            };
            zero_order_pgd(&handle, &ball, y, &cfg, &mut rng)
        }
        AttackKind::Square => {
            let ball = LinfBall::new(x.clone(), spec.epsilon)?;
            let cfg = SquareConfig { budget: spec.budget.unwrap(), p_init: spec.p_init.unwrap() };
            square_attack(&handle, &ball, y, &cfg, &mut rng)
        }
        AttackKind::Bpda => {
            let ball = LinfBall::new(x.clone(), spec.epsilon)?;
            let cfg = PgdConfig {
                steps: spec.steps.unwrap(),
                alpha: spec.alpha.unwrap(),
                restarts: spec.restarts.unwrap(),
                targeted: None,
                adaptive: spec.adaptive,
            };
            bpda_pgd(&handle, &ball, y, &cfg, &mut rng)
        }
        AttackKind::Transfer => {
            let source = source.ok_or_else(|| {
                Error::invalid("transfer", "transfer attack requires a source model")
            })?;
            let ball = LinfBall::new(x.clone(), spec.epsilon)?;
            let mut inner = spec.clone();
            inner.kind = AttackKind::Pgd;
            transfer_attack(source, model, &ball, y, &inner, &mut rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_mlp;

    #[test]
    fn threat_gate_blocks_gradient_at_score_level() {
        let model = Model::Graph(build_mlp(&[4], &[6], 2, 1).unwrap());
        let handle = TargetHandle::new(&model, ThreatLevel::BlackBoxScores);
        let x = Tensor::full(vec![1, 4], 0.5);
        assert!(handle.loss(&x, 0).is_ok());
        let err = handle.grad(&x, 0).unwrap_err();
        assert!(matches!(err, Error::ThreatViolation { .. }));
    }

    #[test]
    fn handle_counts_every_evaluation() {
        let model = Model::Graph(build_mlp(&[4], &[6], 2, 1).unwrap());
        let handle = TargetHandle::new(&model, ThreatLevel::Gradient);
        let x = Tensor::full(vec![1, 4], 0.5);
        handle.loss(&x, 0).unwrap();
        handle.loss(&x, 1).unwrap();
        handle.grad(&x, 0).unwrap();
        assert_eq!(handle.forward_queries(), 2);
        assert_eq!(handle.grad_queries(), 1);
        assert_eq!(handle.queries(), 3);
    }

    #[test]
    fn spec_resolution_echoes_defaults() {
        let spec = AttackSpec::new(AttackKind::Pgd, 0.1).resolve();
        assert_eq!(spec.steps, Some(50));
        assert_eq!(spec.restarts, Some(5));
        assert!((spec.alpha.unwrap() - 0.0125).abs() < 1e-7);
    }

    #[test]
    fn attack_spec_json_round_trip() {
        let spec = AttackSpec::new(AttackKind::ZoPgd, 8.0 / 255.0);
        let json = serde_json::to_string(&spec).unwrap();
        let back: AttackSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.kind, AttackKind::ZoPgd);
        assert!(json.contains("\"zo-pgd\""));
    }
}
