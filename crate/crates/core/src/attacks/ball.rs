//! L-infinity perturbation constraint around a clean example.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The feasible set `{y : |y - x|_inf <= eps} ∩ [0,1]^d`.
#[derive(Debug, Clone)]
pub struct LinfBall {
    center: Tensor,
    radius: f32,
}

impl LinfBall {
    pub fn new(center: Tensor, radius: f32) -> Result<Self> {
        if !(radius > 0.0 && radius <= 1.0) {
            return Err(Error::invalid("linf_ball", format!("radius must be in (0, 1], got {radius}")));
        }
        Ok(LinfBall { center, radius })
    }

    pub fn center(&self) -> &Tensor {
        &self.center
    }

    pub fn radius(&self) -> f32 {
        self.radius
    }

    fn bounds(&self, i: usize) -> (f32, f32) {
        let c = self.center.data()[i];
        ((c - self.radius).max(0.0), (c + self.radius).min(1.0))
    }

    /// Elementwise clamp onto `[x - eps, x + eps] ∩ [0, 1]`. Idempotent.
    pub fn project(&self, y: &Tensor) -> Tensor {
        debug_assert_eq!(y.shape(), self.center.shape());
        let mut out = y.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (lo, hi) = self.bounds(i);
            *v = v.clamp(lo, hi);
        }
        out
    }

    /// Membership with a 1e-7 slack on the radius.
    pub fn contains(&self, y: &Tensor) -> bool {
        if y.shape() != self.center.shape() {
            return false;
        }
        y.data().iter().zip(self.center.data()).all(|(&v, &c)| {
            (v - c).abs() <= self.radius + 1e-7 && (0.0..=1.0).contains(&v)
        })
    }

    /// Uniform sample over the feasible set (restart initialization).
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Tensor {
        let mut out = self.center.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (lo, hi) = self.bounds(i);
            *v = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        }
        out
    }

    /// In-place signed step of size `alpha` followed by projection.
    pub fn step_signed(&self, x: &mut Tensor, direction: &Tensor, alpha: f32) {
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let d = direction.data()[i];
            // sign(0) treated as 0: no movement on that coordinate.
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            let (lo, hi) = self.bounds(i);
            *v = (*v + alpha * s).clamp(lo, hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(center: Vec<f32>, eps: f32) -> LinfBall {
        LinfBall::new(Tensor::new(vec![1, center.len()], center).unwrap(), eps).unwrap()
    }

    #[test]
    fn projection_clamps_to_radius() {
        let b = ball(vec![0.5], 0.1);
        let y = Tensor::new(vec![1, 1], vec![0.75]).unwrap();
        assert_eq!(b.project(&y).data(), &[0.6]);
    }

    #[test]
    fn projection_is_identity_inside() {
        let b = ball(vec![0.5], 0.1);
        let y = Tensor::new(vec![1, 1], vec![0.55]).unwrap();
        let p = b.project(&y);
        assert_eq!(p.data(), y.data());
        assert_eq!(b.project(&p).data(), p.data());
    }

    #[test]
    fn projection_respects_pixel_range() {
        let b = ball(vec![0.05], 0.1);
        let y = Tensor::new(vec![1, 1], vec![-0.2]).unwrap();
        assert_eq!(b.project(&y).data(), &[0.0]);
    }

    #[test]
    fn zero_radius_rejected() {
        assert!(LinfBall::new(Tensor::full(vec![1, 2], 0.5), 0.0).is_err());
    }

    #[test]
    fn samples_stay_inside() {
        let b = ball(vec![0.02, 0.98, 0.5], 0.1);
        let mut rng = crate::rng::substream(4, &[1]);
        for _ in 0..200 {
            let s = b.sample_uniform(&mut rng);
            assert!(b.contains(&s));
        }
    }
}
