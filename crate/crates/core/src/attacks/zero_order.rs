//! Zero-order (finite-difference) gradient estimation and the PGD variant
//! built on it. Loss probes are the only oracle used, so the attack runs
//! at the score access level.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{judge_success, AttackOutcome, LinfBall, TargetHandle};

/// Pixel grouping for block-wise estimation. Blocks must partition the
/// pixel set.
#[derive(Debug, Clone)]
pub enum BlockSpec {
    /// One block per pixel: the classic two-sided difference per coordinate.
    Singleton,
    /// Pixels shuffled by the attack stream and chunked into groups; the
    /// grouping is re-randomized every step.
    RandomGroups { group_size: usize },
    /// Caller-provided blocks, validated as a partition.
    Explicit(Vec<Vec<usize>>),
}

impl BlockSpec {
    fn materialize(&self, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
        match self {
            BlockSpec::Singleton => Ok((0..dim).map(|i| vec![i]).collect()),
            BlockSpec::RandomGroups { group_size } => {
                if *group_size == 0 {
                    return Err(Error::BadBlockSpec { detail: "group size 0".into() });
                }
                let mut idx: Vec<usize> = (0..dim).collect();
                idx.shuffle(rng);
                Ok(idx.chunks(*group_size).map(|c| c.to_vec()).collect())
            }
            BlockSpec::Explicit(blocks) => {
                validate_partition(blocks, dim)?;
                Ok(blocks.clone())
            }
        }
    }
}

fn validate_partition(blocks: &[Vec<usize>], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    let mut count = 0usize;
    for b in blocks {
        for &i in b {
            if i >= dim {
                return Err(Error::BadBlockSpec { detail: format!("index {i} out of range {dim}") });
            }
            if seen[i] {
                return Err(Error::BadBlockSpec { detail: format!("pixel {i} appears twice") });
            }
            seen[i] = true;
            count += 1;
        }
    }
    if count != dim {
        return Err(Error::BadBlockSpec {
            detail: format!("blocks cover {count} of {dim} pixels"),
        });
    }
    Ok(())
}

/// Block-wise two-sided finite-difference gradient estimate of a loss
/// oracle at `x`. For block `b`:
/// `estimate = [L(x + a*1_b) - L(x - a*1_b)] / (2a|b|)`, broadcast to each
/// pixel of the block. Costs two oracle calls per block. Probes are not
/// projected; the attacker may query any point.
pub fn zero_order_grad<L>(
    mut loss: L,
    x: &Tensor,
    probe: f32,
    blocks: &[Vec<usize>],
) -> Result<Tensor>
where
    L: FnMut(&Tensor) -> Result<f64>,
{
    if probe <= 0.0 {
        return Err(Error::invalid("zero_order_grad", format!("probe step must be > 0, got {probe}")));
    }
    validate_partition(blocks, x.len())?;
    let mut estimate = Tensor::zeros(x.shape().to_vec());
    let mut point = x.clone();
    for block in blocks {
        for &i in block {
            point.data_mut()[i] = x.data()[i] + probe;
        }
        let up = loss(&point)?;
        for &i in block {
            point.data_mut()[i] = x.data()[i] - probe;
        }
        let down = loss(&point)?;
        for &i in block {
            point.data_mut()[i] = x.data()[i];
        }
        let g = ((up - down) / (2.0 * probe as f64 * block.len() as f64)) as f32;
        for &i in block {
            estimate.data_mut()[i] = g;
        }
    }
    Ok(estimate)
}

#[derive(Debug, Clone)]
pub struct ZoConfig {
    pub steps: usize,
    pub alpha: f32,
    pub restarts: usize,
    pub probe: f32,
    pub blocks: BlockSpec,
}

/// PGD where the analytic gradient is replaced by the block-wise estimate.
/// The grouping is re-randomized per step from the attack stream.
/// `steps == 0` returns the clean input.
pub fn zero_order_pgd(
    handle: &TargetHandle<'_>,
    ball: &LinfBall,
    y: usize,
    cfg: &ZoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    if cfg.steps == 0 {
        let x = ball.center().clone();
        let success = judge_success(handle.model(), &x, y, None)?;
        return Ok(AttackOutcome {
            adversarial: x,
            success,
            final_loss: 0.0,
            steps: 0,
            queries: 0,
            loss_trace: vec![],
        });
    }
    if cfg.alpha <= 0.0 || cfg.restarts == 0 {
        return Err(Error::invalid("zero_order_pgd", "alpha must be > 0 and restarts >= 1"));
    }
    let dim = ball.center().len();
    let mut best: Option<(Tensor, f64, Vec<f64>)> = None;
    for _ in 0..cfg.restarts {
        let mut x = ball.sample_uniform(rng);
        let mut trace = Vec::with_capacity(cfg.steps + 1);
        for _ in 0..cfg.steps {
            let blocks = cfg.blocks.materialize(dim, rng)?;
            trace.push(handle.loss(&x, y)?);
            let grad = zero_order_grad(|p| handle.loss(p, y), &x, cfg.probe, &blocks)?;
            ball.step_signed(&mut x, &grad, cfg.alpha);
        }
        let final_loss = handle.loss(&x, y)?;
        trace.push(final_loss);
        if best.as_ref().map_or(true, |(_, l, _)| final_loss > *l) {
            best = Some((x, final_loss, trace));
        }
    }
    let (adversarial, final_loss, loss_trace) = best.expect("restarts >= 1");
    let success = judge_success(handle.model(), &adversarial, y, None)?;
    Ok(AttackOutcome {
        adversarial,
        success,
        final_loss,
        steps: cfg.steps * cfg.restarts,
        queries: handle.queries(),
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor1(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![1, n], v).unwrap()
    }

    #[test]
    fn singleton_blocks_exact_for_linear_loss() {
        // L(x) = 2.5 x0 - 1.25 x1; all values dyadic so the quotient is
        // exact in floating point.
        let c = [2.5f64, -1.25];
        let loss = |x: &Tensor| Ok(c[0] * x.data()[0] as f64 + c[1] * x.data()[1] as f64);
        let x = tensor1(vec![0.5, 0.25]);
        let blocks = vec![vec![0], vec![1]];
        let g = zero_order_grad(loss, &x, 0.25, &blocks).unwrap();
        assert_eq!(g.data(), &[2.5, -1.25]);
    }

    #[test]
    fn central_difference_exact_for_quadratic() {
        // L(x) = x^2 at x = 1 with probe 0.1: (1.21 - 0.81) / 0.2 = 2.
        let loss = |x: &Tensor| Ok((x.data()[0] as f64).powi(2));
        let x = tensor1(vec![1.0]);
        let g = zero_order_grad(loss, &x, 0.1, &[vec![0]]).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn block_estimate_averages_coefficients() {
        // L = 3 x0 + 5 x1, one block of both pixels -> both estimated 4.
        let loss = |x: &Tensor| Ok(3.0 * x.data()[0] as f64 + 5.0 * x.data()[1] as f64);
        let x = tensor1(vec![0.5, 0.5]);
        let g = zero_order_grad(loss, &x, 0.25, &[vec![0, 1]]).unwrap();
        assert_eq!(g.data(), &[4.0, 4.0]);
    }

    #[test]
    fn non_partition_is_rejected() {
        let loss = |_: &Tensor| Ok(0.0);
        let x = tensor1(vec![0.5, 0.5]);
        let overlapping = vec![vec![0, 1], vec![1]];
        assert!(matches!(
            zero_order_grad(loss, &x, 0.1, &overlapping),
            Err(Error::BadBlockSpec { .. })
        ));
        let incomplete = vec![vec![0]];
        assert!(zero_order_grad(|_| Ok(0.0), &x, 0.1, &incomplete).is_err());
    }
}
