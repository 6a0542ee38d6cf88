//! Transfer attack: generate on a source model with full access, deploy
//! against the target as a black box.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::Model;

use super::{pgd, AttackKind, AttackOutcome, AttackSpec, LinfBall, PgdConfig, TargetHandle, ThreatLevel};

/// Runs `inner` with full access to `source`, then judges the resulting
/// example on `target` with a single deployment query. Only that query is
/// counted; the source-side search is free for the attacker.
pub fn transfer_attack(
    source: &Model,
    target: &Model,
    ball: &LinfBall,
    y: usize,
    inner: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    if source.input_shape() != target.input_shape() {
        return Err(Error::ShapeMismatch {
            context: "transfer: source and target input shapes differ",
            expected: target.input_shape().to_vec(),
            got: source.input_shape().to_vec(),
        });
    }
    let inner = inner.resolve();
    let source_handle = TargetHandle::new(source, ThreatLevel::FullTrainTime);
    let generated = match inner.kind {
        AttackKind::Pgd => {
            let cfg = PgdConfig {
                steps: inner.steps.unwrap(),
                alpha: inner.alpha.unwrap(),
                restarts: inner.restarts.unwrap(),
                targeted: None,
                adaptive: inner.adaptive,
            };
            pgd(&source_handle, ball, y, &cfg, rng)?
        }
        other => {
            return Err(Error::invalid(
                "transfer",
                format!("unsupported inner attack {:?}", other.label()),
            ));
        }
    };

    // Single deployment query: one forward on the target decides success
    // and records the target-side loss.
    let logits = target.logits(&generated.adversarial)?;
    let pred = logits.argmax_rows()[0];
    let final_loss = crate::kernels::cross_entropy_fwd(logits.data(), &[y], 1, logits.example_len());
    Ok(AttackOutcome {
        adversarial: generated.adversarial,
        success: pred != y,
        final_loss,
        steps: generated.steps,
        queries: 1,
        loss_trace: generated.loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, OutputMode};
    use crate::rng::substream;
    use crate::tensor::Tensor;

    fn linear_model(w: &[f32]) -> Model {
        let d = w.len();
        let mut b = GraphBuilder::new(vec![d]);
        let mut weights = w.to_vec();
        weights.extend(w.iter().map(|v| -v));
        let wt = Tensor::new(vec![2, d], weights).unwrap();
        let out = b.dense(b.input(), wt, Tensor::zeros(vec![2])).unwrap();
        Model::Graph(b.finish(out, OutputMode::Logits))
    }

    /// A classifier that ignores its input: constant logits via zero
    /// weights and fixed biases.
    fn constant_model(d: usize, winner: usize) -> Model {
        let mut b = GraphBuilder::new(vec![d]);
        let wt = Tensor::zeros(vec![2, d]);
        let mut bias = vec![0.0; 2];
        bias[winner] = 5.0;
        let out = b.dense(b.input(), wt, Tensor::new(vec![2], bias).unwrap()).unwrap();
        Model::Graph(b.finish(out, OutputMode::Logits))
    }

    #[test]
    fn self_transfer_equals_inner_attack_success() {
        let model = linear_model(&[2.0, -1.5]);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let ball = LinfBall::new(x, 0.3).unwrap();
        let spec = AttackSpec::new(AttackKind::Pgd, 0.3);
        let mut rng = substream(7, &[0]);
        let out = transfer_attack(&model, &model, &ball, 0, &spec, &mut rng).unwrap();
        // Deploying back on the source is exactly the inner attack's result.
        let direct = model.predict(&out.adversarial).unwrap()[0];
        assert_eq!(out.success, direct != 0);
        assert_eq!(out.queries, 1);
    }

    #[test]
    fn constant_target_ignores_the_example() {
        let source = linear_model(&[2.0, -1.5]);
        let target = constant_model(2, 1);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let ball = LinfBall::new(x, 0.3).unwrap();
        let spec = AttackSpec::new(AttackKind::Pgd, 0.3);
        let mut rng = substream(8, &[0]);
        let out = transfer_attack(&source, &target, &ball, 0, &spec, &mut rng).unwrap();
        // The constant classifier predicts class 1 regardless, so the
        // untargeted attack on label 0 always "succeeds".
        assert!(out.success);
    }
}
