//! Score-based random search with square-shaped proposals.
//!
//! Simplified variant of the SQUARE attack: each proposal rewrites a
//! random square patch to `x ± eps` (per-channel random sign, clamped to
//! the pixel range) and is accepted only if it strictly increases the
//! loss. The square side follows a halving schedule over the query
//! budget. The contract is score-based random search that defeats masked
//! gradients on single models, not parity with the original schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{judge_success, AttackOutcome, LinfBall, TargetHandle};

#[derive(Debug, Clone)]
pub struct SquareConfig {
    pub budget: u64,
    /// Initial fraction of pixels covered by a proposal square.
    pub p_init: f64,
}

fn side_for(p: f64, h: usize, w: usize) -> usize {
    let side = ((p * (h * w) as f64).sqrt()).round() as usize;
    side.clamp(1, h.min(w))
}

/// Fraction-of-budget milestones at which the square side halves.
fn schedule(p_init: f64, used: u64, budget: u64) -> f64 {
    let frac = if budget == 0 { 1.0 } else { used as f64 / budget as f64 };
    let halvings = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8].iter().filter(|&&m| frac >= m).count();
    p_init / (1u64 << halvings) as f64
}

pub fn square_attack(
    handle: &TargetHandle<'_>,
    ball: &LinfBall,
    y: usize,
    cfg: &SquareConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    let x = ball.center();
    let shape = x.shape().to_vec();
    // Images are [1, C, H, W]; flat inputs are treated as a 1 x d strip.
    let (c, h, w) = match shape.len() {
        4 => (shape[1], shape[2], shape[3]),
        _ => (1, 1, x.example_len()),
    };
    if cfg.budget == 0 {
        let success = judge_success(handle.model(), x, y, None)?;
        return Ok(AttackOutcome {
            adversarial: x.clone(),
            success,
            final_loss: 0.0,
            steps: 0,
            queries: 0,
            loss_trace: vec![],
        });
    }

    let mut best = x.clone();
    let mut best_loss = handle.loss(&best, y)?;
    let mut trace = vec![best_loss];
    let mut accepted = 0usize;
    let eps = ball.radius();

    while handle.queries() < cfg.budget {
        let side = side_for(schedule(cfg.p_init, handle.queries(), cfg.budget), h, w);
        let row = rng.gen_range(0..=h - side);
        let col = rng.gen_range(0..=w - side);
        let mut proposal = best.clone();
        for ch in 0..c {
            let sign: f32 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for dy in 0..side {
                for dx in 0..side {
                    let idx = (ch * h + row + dy) * w + col + dx;
                    let center = x.data()[idx];
                    proposal.data_mut()[idx] = (center + sign * eps).clamp(
                        (center - eps).max(0.0),
                        (center + eps).min(1.0),
                    );
                }
            }
        }
        let loss = handle.loss(&proposal, y)?;
        if loss > best_loss {
            best = proposal;
            best_loss = loss;
            accepted += 1;
        }
        trace.push(best_loss);
    }

    debug_assert!(ball.contains(&best));
    let success = judge_success(handle.model(), &best, y, None)?;
    Ok(AttackOutcome {
        adversarial: best,
        success,
        final_loss: best_loss,
        steps: accepted,
        queries: handle.queries(),
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ThreatLevel;
    use crate::graph::{GraphBuilder, OutputMode};
    use crate::models::Model;
    use crate::rng::substream;

    fn linear_model(w: &[f32]) -> Model {
        let d = w.len();
        let mut b = GraphBuilder::new(vec![d]);
        let mut weights = w.to_vec();
        weights.extend(w.iter().map(|v| -v));
        let wt = Tensor::new(vec![2, d], weights).unwrap();
        let out = b.dense(b.input(), wt, Tensor::zeros(vec![2])).unwrap();
        Model::Graph(b.finish(out, OutputMode::Logits))
    }

    #[test]
    fn zero_budget_returns_clean_input() {
        let model = linear_model(&[1.0, -1.0]);
        let handle = TargetHandle::new(&model, ThreatLevel::BlackBoxScores);
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.6]).unwrap();
        let ball = LinfBall::new(x.clone(), 0.1).unwrap();
        let cfg = SquareConfig { budget: 0, p_init: 0.8 };
        let mut rng = substream(5, &[0]);
        let out = square_attack(&handle, &ball, 0, &cfg, &mut rng).unwrap();
        assert_eq!(out.adversarial.data(), x.data());
        assert_eq!(out.queries, 0);
    }

    #[test]
    fn never_exceeds_budget_and_trace_is_monotone() {
        let model = linear_model(&[0.7, -0.4]);
        let handle = TargetHandle::new(&model, ThreatLevel::BlackBoxScores);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let ball = LinfBall::new(x, 0.1).unwrap();
        let cfg = SquareConfig { budget: 123, p_init: 0.8 };
        let mut rng = substream(6, &[0]);
        let out = square_attack(&handle, &ball, 0, &cfg, &mut rng).unwrap();
        assert!(out.queries <= 123);
        assert!(out.loss_trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(ball.contains(&out.adversarial));
    }
}
