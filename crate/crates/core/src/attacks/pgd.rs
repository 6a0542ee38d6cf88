//! Projected gradient descent and its variants: multi-restart signed-step
//! PGD, the front-end bypass (straight-through) variant, and EOT gradient
//! averaging for randomized targets.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{judge_success, AttackOutcome, LinfBall, TargetHandle};

#[derive(Debug, Clone)]
pub struct PgdConfig {
    pub steps: usize,
    pub alpha: f32,
    pub restarts: usize,
    /// Present for targeted attacks: the class to steer towards. Targeted
    /// runs minimize the target-class loss instead of maximizing the
    /// true-class loss.
    pub targeted: Option<usize>,
    /// Halve the step size when the loss stagnates (loss-adaptive variant).
    pub adaptive: bool,
}

impl PgdConfig {
    fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::invalid("pgd", format!("step size must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("pgd", "steps must be >= 1"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("pgd", "restarts must be >= 1"));
        }
        Ok(())
    }

    fn improves(&self, candidate: f64, best: f64) -> bool {
        if self.targeted.is_some() {
            candidate < best
        } else {
            candidate > best
        }
    }
}

/// One restart of signed-gradient ascent with a caller-supplied gradient
/// oracle; the oracle returns the loss at the queried point and its input
/// gradient. Returns the final iterate and the per-step loss trace.
fn pgd_restart<G>(
    ball: &LinfBall,
    start: Tensor,
    cfg: &PgdConfig,
    mut grad_oracle: G,
) -> Result<(Tensor, Vec<f64>)>
where
    G: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let mut x = ball.project(&start);
    let mut alpha = cfg.alpha;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut stagnant = 0usize;
    let mut best_seen = f64::NEG_INFINITY;
    for _ in 0..cfg.steps {
        let (loss, grad) = grad_oracle(&x)?;
        trace.push(loss);
        let objective = if cfg.targeted.is_some() { -loss } else { loss };
        if cfg.adaptive {
            if objective > best_seen + 1e-12 {
                best_seen = objective;
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant >= 5 {
                    alpha *= 0.5;
                    stagnant = 0;
                }
            }
        }
        let step = if cfg.targeted.is_some() { -alpha } else { alpha };
        ball.step_signed(&mut x, &grad, step);
    }
    Ok((x, trace))
}

/// Multi-restart PGD driven by a gradient oracle and judged by a loss
/// oracle. Restarts start from uniform random points in the ball; the
/// restart with the extremal final loss wins.
#[allow(clippy::too_many_arguments)]
fn pgd_core<G, L>(
    handle: &TargetHandle<'_>,
    ball: &LinfBall,
    y: usize,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
    mut grad_oracle: G,
    mut loss_oracle: L,
) -> Result<AttackOutcome>
where
    G: FnMut(&Tensor) -> Result<(f64, Tensor)>,
    L: FnMut(&Tensor) -> Result<f64>,
{
    cfg.validate()?;
    let mut best: Option<(Tensor, f64, Vec<f64>)> = None;
    for _ in 0..cfg.restarts {
        let start = ball.sample_uniform(rng);
        let (x_hat, mut trace) = pgd_restart(ball, start, cfg, &mut grad_oracle)?;
        let final_loss = loss_oracle(&x_hat)?;
        trace.push(final_loss);
        let better = match &best {
            Some((_, loss, _)) => cfg.improves(final_loss, *loss),
            None => true,
        };
        if better {
            best = Some((x_hat, final_loss, trace));
        }
    }
    let (adversarial, final_loss, loss_trace) = best.expect("restarts >= 1");
    debug_assert!(ball.contains(&adversarial));
    let success = judge_success(handle.model(), &adversarial, y, cfg.targeted)?;
    Ok(AttackOutcome {
        adversarial,
        success,
        final_loss,
        steps: cfg.steps * cfg.restarts,
        queries: handle.queries(),
        loss_trace,
    })
}

/// Standard PGD: signed steps along the target's own input gradient.
pub fn pgd(
    handle: &TargetHandle<'_>,
    ball: &LinfBall,
    y: usize,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    let y_eff = cfg.targeted.unwrap_or(y);
    pgd_core(
        handle,
        ball,
        y,
        cfg,
        rng,
        |x| handle.grad(x, y_eff),
        |x| handle.loss(x, y_eff),
    )
}

/// Mean of `draws` independent gradient queries. Against a randomized
/// ensemble each query re-draws a member, so this estimates the expected
/// gradient (expectation-over-transformation).
pub fn eot_grad(
    handle: &TargetHandle<'_>,
    x: &Tensor,
    y: usize,
    draws: usize,
) -> Result<(f64, Tensor)> {
    if draws < 1 {
        return Err(Error::invalid("eot_grad", "draws must be >= 1"));
    }
    let mut mean_grad = Tensor::zeros(x.shape().to_vec());
    let mut mean_loss = 0.0;
    for _ in 0..draws {
        let (loss, grad) = handle.grad(x, y)?;
        mean_loss += loss;
        for (m, g) in mean_grad.data_mut().iter_mut().zip(grad.data()) {
            *m += g;
        }
    }
    let inv = 1.0 / draws as f32;
    for m in mean_grad.data_mut() {
        *m *= inv;
    }
    Ok((mean_loss / draws as f64, mean_grad))
}

/// PGD with EOT-averaged gradients (untargeted).
pub fn eot_pgd(
    handle: &TargetHandle<'_>,
    ball: &LinfBall,
    y: usize,
    cfg: &PgdConfig,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    if draws < 1 {
        return Err(Error::invalid("eot_pgd", "draws must be >= 1"));
    }
    pgd_core(
        handle,
        ball,
        y,
        cfg,
        rng,
        |x| eot_grad(handle, x, y, draws),
        |x| handle.loss(x, y),
    )
}

/// Front-end bypass PGD. The update direction is the sign of the bare
/// backbone's gradient at the raw iterate, skipping the front-end entirely
/// (the straight-through estimator for a near-identity front-end), while
/// loss bookkeeping and the success check run the full composite.
pub fn bpda_pgd(
    handle: &TargetHandle<'_>,
    ball: &LinfBall,
    y: usize,
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    let composite = handle.composite()?;
    let backbone = composite.back();
    let y_eff = cfg.targeted.unwrap_or(y);
    pgd_core(
        handle,
        ball,
        y,
        cfg,
        rng,
        |x| {
            // Direction from the backbone alone; loss reported from the
            // composite so traces and restart selection reflect the real
            // objective.
            let (_, bundle) = backbone.backward_ce(x, &[y_eff])?;
            let loss = handle.loss(x, y_eff)?;
            Ok((loss, bundle.input_grad))
        },
        |x| handle.loss(x, y_eff),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ThreatLevel;
    use crate::graph::{GraphBuilder, OutputMode};
    use crate::models::Model;
    use crate::rng::substream;

    /// Binary linear model: logits = [w.x, -w.x].
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
    fn linear_model_reaches_ball_corner_in_one_big_step() {
        // For label 0 the loss increases by decreasing w.x, so the optimum
        // sits at x - eps*sign(w) (clamped); one step with alpha >= eps
        // lands exactly there.
        let model = linear_model(&[1.0, -2.0]);
        let handle = TargetHandle::new(&model, ThreatLevel::Gradient);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let ball = LinfBall::new(x, 0.1).unwrap();
        let cfg = PgdConfig { steps: 1, alpha: 0.2, restarts: 1, targeted: None, adaptive: false };
        let mut rng = substream(1, &[0]);
        let out = pgd(&handle, &ball, 0, &cfg, &mut rng).unwrap();
        assert_eq!(out.adversarial.data(), &[0.4, 0.6]);
        assert!(ball.contains(&out.adversarial));
    }

    #[test]
    fn degenerate_ball_returns_center() {
        let model = linear_model(&[1.0, 1.0]);
        let handle = TargetHandle::new(&model, ThreatLevel::Gradient);
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let ball = LinfBall::new(x.clone(), 1e-7).unwrap();
        let cfg = PgdConfig { steps: 5, alpha: 0.1, restarts: 2, targeted: None, adaptive: false };
        let mut rng = substream(2, &[0]);
        let out = pgd(&handle, &ball, 0, &cfg, &mut rng).unwrap();
        assert!(out.adversarial.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn zero_step_size_rejected() {
        let model = linear_model(&[1.0]);
        let handle = TargetHandle::new(&model, ThreatLevel::Gradient);
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let ball = LinfBall::new(x, 0.1).unwrap();
        let cfg = PgdConfig { steps: 1, alpha: 0.0, restarts: 1, targeted: None, adaptive: false };
        let mut rng = substream(3, &[0]);
        assert!(pgd(&handle, &ball, 0, &cfg, &mut rng).is_err());
    }

    #[test]
    fn eot_single_member_equals_plain_gradient() {
        let model = linear_model(&[0.8, -0.3]);
        let handle = TargetHandle::new(&model, ThreatLevel::Gradient);
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.6]).unwrap();
        let (_, g1) = eot_grad(&handle, &x, 0, 1).unwrap();
        let (_, g7) = eot_grad(&handle, &x, 0, 7).unwrap();
        let (_, exact) = handle.grad(&x, 0).unwrap();
        assert_eq!(g1.data(), exact.data());
        assert!(g7.max_abs_diff(&exact) < 1e-6);
    }

    #[test]
    fn eot_rejects_zero_draws() {
        let model = linear_model(&[1.0]);
        let handle = TargetHandle::new(&model, ThreatLevel::Gradient);
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        assert!(eot_grad(&handle, &x, 0, 0).is_err());
    }
}
