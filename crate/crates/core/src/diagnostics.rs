//! Gradient-masking evidence suite: confidence intervals for sampled
//! accuracies, gradient tracing along PGD trajectories, radius sweeps,
//! and the three-indicator masking report.

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec, LinfBall};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{clean_accuracy_counts, evaluate_attack};
use crate::models::Model;
use crate::rng::{substream, tag};

/// Accuracy over a sampled test set with a 99% normal-approximation
/// binomial interval. The interval is absent at 0% or 100% accuracy,
/// where the sample variance is zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub accuracy: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci99: Option<f64>,
}

const Z_99: f64 = 2.576;

/// 99% CI half-width `z * sqrt(p(1-p)/n)` for `correct` successes in `n`.
pub fn confidence_interval(correct: usize, n: usize) -> Result<AccuracyEstimate> {
    if n == 0 {
        return Err(Error::invalid("confidence_interval", "n must be >= 1"));
    }
    if correct > n {
        return Err(Error::invalid("confidence_interval", format!("correct {correct} > n {n}")));
    }
    let p = correct as f64 / n as f64;
    let ci99 = if p == 0.0 || p == 1.0 {
        None
    } else {
        Some(Z_99 * (p * (1.0 - p) / n as f64).sqrt())
    };
    Ok(AccuracyEstimate { accuracy: p, n, ci99 })
}

// ── gradient tracing ────────────────────────────────────────────────

/// Aggregate statistics of every input gradient recorded along PGD
/// trajectories. `mean` and `median` average the per-image signed
/// statistics; `small_fraction` and the quantiles pool all values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientTraceReport {
    pub nan_count: usize,
    pub inf_count: usize,
    /// Fraction of |g| below 0.01 over the pooled dump.
    pub small_fraction: f64,
    /// Mean over images of the per-image mean gradient.
    pub mean: f64,
    /// Mean over images of the per-image median gradient.
    pub median: f64,
    /// Nearest-rank quantiles of |g| over the pooled dump.
    pub q01: f64,
    pub q50: f64,
    pub q99: f64,
    pub images: usize,
    pub steps_per_image: usize,
}

pub struct TraceResult {
    pub report: GradientTraceReport,
    /// Per-image signed gradient values, concatenated across steps; kept
    /// so the aggregation can be recomputed independently.
    pub dump: Vec<Vec<f32>>,
}

/// Nearest-rank quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f32], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1] as f64
}

/// Runs single-restart PGD on every example, recording each step's input
/// gradient. Fails loudly on the first non-finite gradient (naming image
/// and step) unless `fail_on_nonfinite` is false, in which case the
/// offending values are counted instead.
pub fn gradient_trace(
    model: &Model,
    data: &Dataset,
    spec: &AttackSpec,
    seed: u64,
    fail_on_nonfinite: bool,
) -> Result<TraceResult> {
    let spec = spec.resolve();
    let steps = spec.steps.unwrap().max(1);
    let alpha = spec.alpha.unwrap();
    let mut dump: Vec<Vec<f32>> = Vec::with_capacity(data.len());
    let mut nan_count = 0usize;
    let mut inf_count = 0usize;

    for i in 0..data.len() {
        let x0 = data.image(i);
        let y = data.label(i);
        let ball = LinfBall::new(x0, spec.epsilon)?;
        let mut rng = substream(seed, &[tag::ATTACK, i as u64]);
        let mut x = ball.sample_uniform(&mut rng);
        let mut values = Vec::with_capacity(steps * x.len());
        for step in 0..steps {
            let (_, grad) = model.grad_input(&x, &[y])?;
            for &g in grad.data() {
                if g.is_nan() {
                    if fail_on_nonfinite {
                        return Err(Error::NonFinite {
                            context: format!("NaN gradient at image {i}, step {step}"),
                        });
                    }
                    nan_count += 1;
                } else if g.is_infinite() {
                    if fail_on_nonfinite {
                        return Err(Error::NonFinite {
                            context: format!("infinite gradient at image {i}, step {step}"),
                        });
                    }
                    inf_count += 1;
                }
            }
            values.extend_from_slice(grad.data());
            ball.step_signed(&mut x, &grad, alpha);
        }
        dump.push(values);
    }

    let report = aggregate_trace(&dump, nan_count, inf_count, steps);
    Ok(TraceResult { report, dump })
}

/// Aggregation over a gradient dump; public so tests can recompute it
/// from the raw values and compare exactly.
pub fn aggregate_trace(
    dump: &[Vec<f32>],
    nan_count: usize,
    inf_count: usize,
    steps_per_image: usize,
) -> GradientTraceReport {
    let mut pooled_abs: Vec<f32> = Vec::new();
    let mut per_image_mean = Vec::with_capacity(dump.len());
    let mut per_image_median = Vec::with_capacity(dump.len());
    for values in dump {
        let finite: Vec<f32> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            per_image_mean.push(0.0);
            per_image_median.push(0.0);
            continue;
        }
        let mean = finite.iter().map(|&v| v as f64).sum::<f64>() / finite.len() as f64;
        let mut sorted = finite.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[(sorted.len() - 1) / 2] as f64;
        per_image_mean.push(mean);
        per_image_median.push(median);
        pooled_abs.extend(finite.iter().map(|v| v.abs()));
    }
    pooled_abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let small = pooled_abs.iter().filter(|&&v| v < 0.01).count();
    let total = pooled_abs.len().max(1);
    GradientTraceReport {
        nan_count,
        inf_count,
        small_fraction: small as f64 / total as f64,
        mean: per_image_mean.iter().sum::<f64>() / per_image_mean.len().max(1) as f64,
        median: per_image_median.iter().sum::<f64>() / per_image_median.len().max(1) as f64,
        q01: quantile_sorted(&pooled_abs, 0.01),
        q50: quantile_sorted(&pooled_abs, 0.50),
        q99: quantile_sorted(&pooled_abs, 0.99),
        images: dump.len(),
        steps_per_image,
    }
}

// ── radius sweep ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub radius: f32,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci99: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    /// Mean accuracy decline per unit radius, a crude masking indicator:
    /// genuinely robust models decline fast towards chance, masked ones
    /// barely decline.
    pub fn decline_slope(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) if b.radius > a.radius => {
                (a.accuracy - b.accuracy) / (b.radius - a.radius) as f64
            }
            _ => 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("radius,accuracy,ci99\n");
        for p in &self.points {
            match p.ci99 {
                Some(ci) => out.push_str(&format!("{},{},{}\n", p.radius, p.accuracy, ci)),
                None => out.push_str(&format!("{},{},\n", p.radius, p.accuracy)),
            }
        }
        out
    }

    /// Minimal standalone SVG line plot of the curve.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, ml, mb) = (480.0f64, 320.0f64, 50.0f64, 40.0f64);
        let max_r = self.points.last().map_or(1.0, |p| p.radius as f64).max(1e-9);
        let sx = |r: f64| ml + r / max_r * (w - ml - 20.0);
        let sy = |a: f64| (h - mb) - a * (h - mb - 20.0);
        let mut path = String::new();
        for (i, p) in self.points.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            path.push_str(&format!("{cmd}{:.1},{:.1} ", sx(p.radius as f64), sy(p.accuracy)));
        }
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\">\n",
                "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
                "<text x=\"{tx}\" y=\"16\" font-size=\"13\" text-anchor=\"middle\">{title}</text>\n",
                "<line x1=\"{ml}\" y1=\"{y0}\" x2=\"{xr}\" y2=\"{y0}\" stroke=\"black\"/>\n",
                "<line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{y0}\" stroke=\"black\"/>\n",
                "<text x=\"{tx}\" y=\"{h}\" dy=\"-6\" font-size=\"11\" text-anchor=\"middle\">attack radius (0 to {maxr:.3})</text>\n",
                "<text x=\"14\" y=\"{my}\" font-size=\"11\" transform=\"rotate(-90 14 {my})\" text-anchor=\"middle\">accuracy</text>\n",
                "<path d=\"{path}\" fill=\"none\" stroke=\"#c23\" stroke-width=\"2\"/>\n",
                "</svg>\n"
            ),
            w = w,
            h = h,
            tx = (w + ml) / 2.0,
            title = title,
            ml = ml,
            y0 = h - mb,
            xr = w - 20.0,
            maxr = max_r,
            my = (h - mb) / 2.0,
            path = path.trim_end(),
        )
    }
}

/// Robust accuracy at each radius. Radius 0 is the clean-accuracy
/// evaluator, bit for bit; other radii run the given attack kind.
pub fn epsilon_sweep(
    model: &Model,
    data: &Dataset,
    spec: &AttackSpec,
    radii: &[f32],
    seed: u64,
) -> Result<SweepCurve> {
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("epsilon_sweep", "radii must be strictly ascending"));
    }
    if radii.first().is_some_and(|&r| r < 0.0) {
        return Err(Error::invalid("epsilon_sweep", "radii must be non-negative"));
    }
    let mut points = Vec::with_capacity(radii.len());
    for &radius in radii {
        let (correct, n) = if radius == 0.0 {
            clean_accuracy_counts(model, data)?
        } else {
            let mut s = spec.clone();
            s.epsilon = radius;
            let eval = evaluate_attack(model, None, data, &s, seed)?;
            (eval.correct, eval.n)
        };
        let est = confidence_interval(correct, n)?;
        points.push(SweepPoint { radius, accuracy: est.accuracy, ci99: est.ci99 });
    }
    Ok(SweepCurve { points })
}

/// Default sweep grid: 8 log-spaced radii from `eps/4` to 1.
pub fn default_radii(eps: f32) -> Vec<f32> {
    let lo = (eps / 4.0).max(1e-4) as f64;
    let ratio = (1.0 / lo).powf(1.0 / 7.0);
    (0..8).map(|i| (lo * ratio.powi(i)).min(1.0) as f32).collect()
}

// ── masking report ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskingThresholds {
    /// Gap in accuracy points (0..1 scale) above which an indicator fires.
    pub black_box_gap: f64,
    pub bpda_gap: f64,
}

impl Default for MaskingThresholds {
    fn default() -> Self {
        MaskingThresholds { black_box_gap: 0.20, bpda_gap: 0.20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskingReport {
    pub clean: AccuracyEstimate,
    pub pgd: AccuracyEstimate,
    pub zero_order: AccuracyEstimate,
    pub square: AccuracyEstimate,
    /// Absent when the model has no front/back decomposition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpda: Option<AccuracyEstimate>,
    /// PGD accuracy minus the best black-box accuracy; black-box attacks
    /// beating gradient attacks by a wide margin indicates masking.
    pub black_box_gap: f64,
    /// PGD accuracy minus BPDA accuracy; zero without a front-end.
    pub bpda_gap: f64,
    /// Accuracy decline per unit radius for the model under test.
    pub sweep_slope: f64,
    /// Same slope for the reference adversarially-trained model, if given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_slope: Option<f64>,
    pub sweep: SweepCurve,
    pub thresholds: MaskingThresholds,
    pub masking_suspected: bool,
}

/// Computes the three masking indicators for one model at one radius:
/// the radius sweep, the black-box-vs-gradient gap, and the BPDA gap.
pub fn masking_report(
    model: &Model,
    reference: Option<&Model>,
    data: &Dataset,
    epsilon: f32,
    thresholds: MaskingThresholds,
    seed: u64,
) -> Result<MaskingReport> {
    let estimate = |correct: usize, n: usize| confidence_interval(correct, n);

    let (cc, cn) = clean_accuracy_counts(model, data)?;
    let clean = estimate(cc, cn)?;

    let pgd_eval = evaluate_attack(model, None, data, &AttackSpec::new(AttackKind::Pgd, epsilon), seed)?;
    let pgd = estimate(pgd_eval.correct, pgd_eval.n)?;

    let zo_eval = evaluate_attack(model, None, data, &AttackSpec::new(AttackKind::ZoPgd, epsilon), seed)?;
    let zero_order = estimate(zo_eval.correct, zo_eval.n)?;

    let sq_eval = evaluate_attack(model, None, data, &AttackSpec::new(AttackKind::Square, epsilon), seed)?;
    let square = estimate(sq_eval.correct, sq_eval.n)?;

    let bpda = if model.as_composite().is_some() {
        let e = evaluate_attack(model, None, data, &AttackSpec::new(AttackKind::Bpda, epsilon), seed)?;
        Some(estimate(e.correct, e.n)?)
    } else {
        None
    };

    let radii = default_radii(epsilon);
    let sweep = epsilon_sweep(model, data, &AttackSpec::new(AttackKind::Pgd, epsilon), &radii, seed)?;
    let reference_slope = match reference {
        Some(r) => Some(
            epsilon_sweep(r, data, &AttackSpec::new(AttackKind::Pgd, epsilon), &radii, seed)?
                .decline_slope(),
        ),
        None => None,
    };

    let best_black_box = zero_order.accuracy.min(square.accuracy);
    let black_box_gap = pgd.accuracy - best_black_box;
    let bpda_gap = bpda.map_or(0.0, |b| pgd.accuracy - b.accuracy);
    let masking_suspected =
        black_box_gap >= thresholds.black_box_gap || bpda_gap >= thresholds.bpda_gap;

    Ok(MaskingReport {
        clean,
        pgd,
        zero_order,
        square,
        bpda,
        black_box_gap,
        bpda_gap,
        sweep_slope: sweep.decline_slope(),
        reference_slope,
        sweep,
        thresholds,
        masking_suspected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_absent_at_perfect_accuracy() {
        let est = confidence_interval(50, 50).unwrap();
        assert!(est.ci99.is_none());
        let est = confidence_interval(0, 1).unwrap();
        assert_eq!(est.accuracy, 0.0);
        assert!(est.ci99.is_none());
    }

    #[test]
    fn ci_half_width_closed_form() {
        // p = 0.5, n = 500: 2.576 * sqrt(0.25/500) ~= 0.0576.
        let est = confidence_interval(250, 500).unwrap();
        let ci = est.ci99.unwrap();
        assert!((ci - 0.057_6).abs() < 5e-4, "{ci}");
    }

    #[test]
    fn ci_rejects_empty_sample() {
        assert!(confidence_interval(0, 0).is_err());
    }

    #[test]
    fn ci_is_maximal_at_half_and_shrinks_with_n() {
        for n in [40usize, 100, 400] {
            let mid = confidence_interval(n / 2, n).unwrap().ci99.unwrap();
            for c in 1..n {
                let ci = confidence_interval(c, n).unwrap().ci99.unwrap();
                assert!(ci <= mid + 1e-12);
            }
        }
        let a = confidence_interval(20, 40).unwrap().ci99.unwrap();
        let b = confidence_interval(200, 400).unwrap().ci99.unwrap();
        assert!(b < a);
    }

    #[test]
    fn quantiles_match_independent_sort() {
        let dump = vec![vec![0.5f32, -0.2, 3.0], vec![0.001, -4.0, 0.3]];
        let report = aggregate_trace(&dump, 0, 0, 1);
        let mut pooled: Vec<f32> = dump.iter().flatten().map(|v| v.abs()).collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(report.q01, quantile_sorted(&pooled, 0.01));
        assert_eq!(report.q50, quantile_sorted(&pooled, 0.50));
        assert_eq!(report.q99, quantile_sorted(&pooled, 0.99));
    }

    #[test]
    fn default_radii_are_ascending_and_capped() {
        let radii = default_radii(8.0 / 255.0);
        assert_eq!(radii.len(), 8);
        assert!(radii.windows(2).all(|w| w[1] > w[0]));
        assert!(*radii.last().unwrap() <= 1.0);
    }

    #[test]
    fn sweep_rejects_unsorted_radii() {
        let model = Model::Graph(crate::models::build_mlp(&[1, 4, 4], &[4], 2, 1).unwrap());
        let data = crate::data::dataset_synth(
            &crate::data::SynthSpec {
                kind: crate::data::SynthKind::Blobs,
                n: 4,
                classes: 2,
                height: 4,
                width: 4,
                margin: 0.2,
                seed: 1,
            },
            crate::data::Split::Test,
        )
        .unwrap();
        let spec = AttackSpec::new(AttackKind::Pgd, 0.1);
        assert!(epsilon_sweep(&model, &data, &spec, &[0.2, 0.1], 1).is_err());
    }
}
