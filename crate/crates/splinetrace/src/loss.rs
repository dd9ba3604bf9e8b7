//! Composite training objective: parameter MSE + end-of-sequence BCE +
//! curve-consistency, each weighted.
//!
//! The curve term compares the two curves at uniformly spaced parameters. In
//! the tracked (training) form both curves are evaluated on the *target's*
//! knot vector, so the term is an exact quadratic in the predicted control
//! points: gradients match central differences to machine-level accuracy, and
//! no derivative of basis functions with respect to knots is ever needed. The
//! standalone [`curvature_consistency`] metric samples each curve on its own
//! domain.

use crate::autodiff::{Tape, Tensor, TensorValue};
use crate::bspline::{basis, SplineCurve};
use crate::error::{Error, Result};
use crate::model::{to_spline, TeacherForcedOutput, TokenSequence};

pub const EOS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub n_curve_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 1.0,
            lambda_b: 0.1,
            lambda_c: 1.0,
            n_curve_samples: 64,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_a < 0.0 || self.lambda_b < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::domain("loss weights must be non-negative"));
        }
        if self.lambda_a + self.lambda_b + self.lambda_c <= 0.0 {
            return Err(Error::domain("at least one loss weight must be positive"));
        }
        if self.n_curve_samples < 2 {
            return Err(Error::domain("need at least 2 curve samples"));
        }
        Ok(())
    }
}

/// Per-term breakdown; `total` is the weighted sum of the raw terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mse_term: f64,
    pub bce_term: f64,
    pub curvature_term: f64,
    /// True when the sequence was too short to build a spline, so the
    /// curvature term was left out of the total.
    pub curvature_skipped: bool,
}

/// Mean over tokens of squared knot error plus squared point error.
pub fn mse_params(pred: &TokenSequence, target: &TokenSequence) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::domain(format!(
            "sequence length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let l = pred.len() as f64;
    let mut acc = 0.0;
    for (p, t) in pred.tokens.iter().zip(&target.tokens) {
        let dx = p.point.x - t.point.x;
        let dy = p.point.y - t.point.y;
        let dk = p.knot - t.knot;
        acc += dx * dx + dy * dy + dk * dk;
    }
    Ok(acc / l)
}

/// Mean binary cross-entropy with probabilities clamped at `EOS_CLAMP`.
pub fn bce_eos(pred_probs: &[f64], target_flags: &[f64]) -> Result<f64> {
    if pred_probs.len() != target_flags.len() {
        return Err(Error::domain("eos probability/flag length mismatch"));
    }
    let mut acc = 0.0;
    for (&p, &s) in pred_probs.iter().zip(target_flags) {
        let p = p.clamp(EOS_CLAMP, 1.0 - EOS_CLAMP);
        acc += -s * p.ln() - (1.0 - s) * (1.0 - p).ln();
    }
    Ok(acc / pred_probs.len() as f64)
}

/// Mean squared distance between the two curves at `n` uniform parameters,
/// each curve sampled over its own valid range.
pub fn curvature_consistency(pred: &SplineCurve, target: &SplineCurve, n: usize) -> Result<f64> {
    let a = pred.sample_uniform(n)?;
    let b = target.sample_uniform(n)?;
    let acc: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| {
            let dx = p.x - q.x;
            let dy = p.y - q.y;
            dx * dx + dy * dy
        })
        .sum();
    Ok(acc / n as f64)
}

/// Basis matrix of the target curve at its `n` uniform parameters: row k holds
/// `B_{i,p}(t_k)` for every control index i.
fn basis_matrix(target_curve: &SplineCurve, n: usize) -> Result<TensorValue> {
    let params = target_curve.uniform_params(n)?;
    let l = target_curve.control_points.len();
    let p = target_curve.degree;
    let mut data = Vec::with_capacity(n * l);
    for &t in &params {
        for i in 0..l {
            data.push(basis(i, p, t, &target_curve.knots)?);
        }
    }
    Ok(TensorValue::new(vec![n, l], data))
}

/// Tracked composite loss for one teacher-forced sample.
///
/// Returns the scalar loss tensor (for backward) plus the value report.
pub fn composite_loss_tracked(
    tape: &Tape,
    pred: &TeacherForcedOutput,
    target: &TokenSequence,
    weights: &LossWeights,
    degree: usize,
) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    let l = target.len();
    if pred.points.rows() != l {
        return Err(Error::domain("teacher-forced prediction length mismatch"));
    }
    let lf = l as f64;

    // parameter mse
    let tgt_points = Tensor::from_rows(
        &target
            .tokens
            .iter()
            .map(|t| vec![t.point.x, t.point.y])
            .collect::<Vec<_>>(),
    );
    let tgt_knots = Tensor::from_rows(
        &target.tokens.iter().map(|t| vec![t.knot]).collect::<Vec<_>>(),
    );
    let dp = tape.sub(&pred.points, &tgt_points)?;
    let dk = tape.sub(&pred.knots, &tgt_knots)?;
    let sq_p = tape.sum(&tape.mul(&dp, &dp)?)?;
    let sq_k = tape.sum(&tape.mul(&dk, &dk)?)?;
    let mse = tape.scale(&tape.add(&sq_p, &sq_k)?, 1.0 / lf)?;

    // end-of-sequence bce
    let flags: Vec<f64> = target.tokens.iter().map(|t| t.eos_prob).collect();
    let s = Tensor::from_rows(&flags.iter().map(|&f| vec![f]).collect::<Vec<_>>());
    let one_minus_s = Tensor::from_rows(&flags.iter().map(|&f| vec![1.0 - f]).collect::<Vec<_>>());
    let p = tape.clamp(&pred.eos_probs, EOS_CLAMP, 1.0 - EOS_CLAMP)?;
    let log_p = tape.log(&p)?;
    let one_minus_p = tape.add_scalar(&tape.scale(&p, -1.0)?, 1.0)?;
    let log_q = tape.log(&one_minus_p)?;
    let pos = tape.mul(&s, &log_p)?;
    let neg = tape.mul(&one_minus_s, &log_q)?;
    let bce = tape.scale(&tape.sum(&tape.add(&pos, &neg)?)?, -1.0 / lf)?;

    // curve consistency on the target's knot grid
    let (curvature, curvature_skipped) = if l >= degree + 1 {
        let target_curve = to_spline(target, degree)?;
        let bmat = Tensor::constant(basis_matrix(&target_curve, weights.n_curve_samples)?);
        let pred_curve_pts = tape.matmul(&bmat, &pred.points)?;
        let tgt_curve_pts = tape.matmul(&bmat, &tgt_points)?;
        let d = tape.sub(&pred_curve_pts, &tgt_curve_pts)?;
        let term = tape.scale(
            &tape.sum(&tape.mul(&d, &d)?)?,
            1.0 / weights.n_curve_samples as f64,
        )?;
        (term, false)
    } else {
        (Tensor::constant(TensorValue::scalar(0.0)), true)
    };

    let total = {
        let a = tape.scale(&mse, weights.lambda_a)?;
        let b = tape.scale(&bce, weights.lambda_b)?;
        let c = tape.scale(&curvature, weights.lambda_c)?;
        tape.add(&tape.add(&a, &b)?, &c)?
    };
    let report = LossReport {
        total: total.scalar_value(),
        mse_term: mse.scalar_value(),
        bce_term: bce.scalar_value(),
        curvature_term: curvature.scalar_value(),
        curvature_skipped,
    };
    Ok((total, report))
}

/// Value-only composite loss between two materialized token sequences.
pub fn composite_loss(
    pred: &TokenSequence,
    target: &TokenSequence,
    weights: &LossWeights,
    degree: usize,
) -> Result<LossReport> {
    weights.validate()?;
    let mse = mse_params(pred, target)?;
    let probs: Vec<f64> = pred.tokens.iter().map(|t| t.eos_prob).collect();
    let flags: Vec<f64> = target.tokens.iter().map(|t| t.eos_prob).collect();
    let bce = bce_eos(&probs, &flags)?;
    let (curv, skipped) = if target.len() >= degree + 1 {
        let target_curve = to_spline(target, degree)?;
        let bmat = basis_matrix(&target_curve, weights.n_curve_samples)?;
        let l = target.len();
        let n = weights.n_curve_samples;
        let mut acc = 0.0;
        for k in 0..n {
            let mut px = 0.0;
            let mut py = 0.0;
            let mut tx = 0.0;
            let mut ty = 0.0;
            for i in 0..l {
                let b = bmat.data[k * l + i];
                px += b * pred.tokens[i].point.x;
                py += b * pred.tokens[i].point.y;
                tx += b * target.tokens[i].point.x;
                ty += b * target.tokens[i].point.y;
            }
            acc += (px - tx) * (px - tx) + (py - ty) * (py - ty);
        }
        (acc / n as f64, false)
    } else {
        (0.0, true)
    };
    Ok(LossReport {
        total: weights.lambda_a * mse + weights.lambda_b * bce + weights.lambda_c * curv,
        mse_term: mse,
        bce_term: bce,
        curvature_term: curv,
        curvature_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{fit_spline, Point2, Polyline};
    use crate::model::SplineToken;

    fn seq(points: &[(f64, f64)], knots: &[f64]) -> TokenSequence {
        let n = points.len();
        TokenSequence {
            tokens: points
                .iter()
                .zip(knots)
                .enumerate()
                .map(|(i, (&(x, y), &k))| SplineToken {
                    point: Point2::new(x, y),
                    knot: k,
                    eos_prob: if i + 1 == n { 1.0 } else { 0.0 },
                })
                .collect(),
            terminated: true,
        }
    }

    fn smooth_seq(len: usize, offset: (f64, f64)) -> TokenSequence {
        let pts: Vec<(f64, f64)> = (0..len)
            .map(|i| {
                let s = i as f64 / (len - 1) as f64;
                (
                    0.15 + 0.7 * s + offset.0,
                    0.5 + 0.2 * (std::f64::consts::PI * s).sin() + offset.1,
                )
            })
            .collect();
        let knots: Vec<f64> = (0..len)
            .map(|i| {
                if i < 4 {
                    0.0
                } else {
                    (i - 3) as f64 / (len - 3) as f64 * 0.9
                }
            })
            .collect();
        seq(&pts, &knots)
    }

    #[test]
    fn mse_examples() {
        let a = smooth_seq(6, (0.0, 0.0));
        assert_eq!(mse_params(&a, &a).unwrap(), 0.0);

        let p = seq(&[(0.3, 0.4)], &[0.2]);
        let mut t = p.clone();
        t.tokens[0].point = Point2::new(0.2, 0.4);
        let v = mse_params(&p, &t).unwrap();
        assert!((v - 0.01).abs() < 1e-15, "{v}");
        assert_eq!(v, mse_params(&t, &p).unwrap());

        let short = seq(&[(0.1, 0.1)], &[0.0]);
        assert!(mse_params(&a, &short).is_err());
    }

    #[test]
    fn bce_examples() {
        let near = bce_eos(&[0.999999], &[1.0]).unwrap();
        assert!(near < 1.1e-6, "{near}");
        let half = bce_eos(&[0.5], &[1.0]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let half0 = bce_eos(&[0.5], &[0.0]).unwrap();
        assert!((half0 - std::f64::consts::LN_2).abs() < 1e-12);
        // clamping keeps saturated predictions finite
        assert!(bce_eos(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn curvature_examples() {
        let a = to_spline(&smooth_seq(8, (0.0, 0.0)), 3).unwrap();
        assert_eq!(curvature_consistency(&a, &a, 16).unwrap(), 0.0);

        let b = to_spline(&smooth_seq(8, (0.1, 0.0)), 3).unwrap();
        let v = curvature_consistency(&a, &b, 32).unwrap();
        assert!((v - 0.01).abs() < 1e-10, "{v}");
    }

    #[test]
    fn curvature_riemann_stability() {
        // halving vs doubling the sample count moves the value by < 5%
        let mut worst = 0.0f64;
        for s in 0..50u64 {
            let mut rng = crate::rng::rng_from(s);
            use rand::Rng;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let pts: Vec<Point2> = (0..80)
                    .map(|i| {
                        let u = i as f64 / 79.0;
                        Point2::new(
                            0.1 + 0.8 * u,
                            0.5 + rng.gen_range(0.1..0.25) * (std::f64::consts::PI * u).sin(),
                        )
                    })
                    .collect();
                fit_spline(&Polyline::new(pts).unwrap(), 3, 7).unwrap().curve
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let v32 = curvature_consistency(&a, &b, 32).unwrap();
            let v64 = curvature_consistency(&a, &b, 64).unwrap();
            let v128 = curvature_consistency(&a, &b, 128).unwrap();
            worst = worst.max((v32 / v64 - 1.0).abs());
            worst = worst.max((v128 / v64 - 1.0).abs());
        }
        assert!(worst < 0.05, "worst relative change {worst}");
    }

    fn tracked_pred_from(seq: &TokenSequence, tape: &Tape) -> TeacherForcedOutput {
        let points = tape.leaf(TensorValue::new(
            vec![seq.len(), 2],
            seq.tokens.iter().flat_map(|t| [t.point.x, t.point.y]).collect(),
        ));
        let knots = tape.leaf(TensorValue::new(
            vec![seq.len(), 1],
            seq.tokens.iter().map(|t| t.knot).collect(),
        ));
        let eos = Tensor::constant(TensorValue::new(
            vec![seq.len(), 1],
            seq.tokens.iter().map(|t| t.eos_prob).collect(),
        ));
        TeacherForcedOutput {
            points,
            knots,
            eos_probs: eos,
        }
    }

    #[test]
    fn composite_identity_and_linearity() {
        let target = smooth_seq(8, (0.0, 0.0));
        let tape = Tape::new();
        let pred = tracked_pred_from(&target, &tape);
        let (_, report) =
            composite_loss_tracked(&tape, &pred, &target, &LossWeights::default(), 3).unwrap();
        // all terms vanish up to the eos clamp epsilon
        assert!(report.total <= 1e-5, "{report:?}");
        assert_eq!(report.mse_term, 0.0);
        assert_eq!(report.curvature_term, 0.0);

        // λ_b = λ_c = 0 reduces the total to λ_a * mse exactly
        let shifted = smooth_seq(8, (0.05, -0.02));
        let pred = tracked_pred_from(&shifted, &tape);
        let w = LossWeights {
            lambda_a: 2.0,
            lambda_b: 0.0,
            lambda_c: 0.0,
            ..LossWeights::default()
        };
        let (_, report) = composite_loss_tracked(&tape, &pred, &target, &w, 3).unwrap();
        assert!((report.total - 2.0 * report.mse_term).abs() < 1e-15);

        // decomposition holds to 1e-12
        let w = LossWeights::default();
        let (_, report) = composite_loss_tracked(&tape, &pred, &target, &w, 3).unwrap();
        let recomposed = w.lambda_a * report.mse_term
            + w.lambda_b * report.bce_term
            + w.lambda_c * report.curvature_term;
        assert!((report.total - recomposed).abs() < 1e-12);
        assert!(report.mse_term >= 0.0 && report.bce_term >= 0.0 && report.curvature_term >= 0.0);
    }

    #[test]
    fn composite_pure_matches_tracked() {
        let target = smooth_seq(9, (0.0, 0.0));
        let pred_seq = smooth_seq(9, (0.03, 0.01));
        let tape = Tape::new();
        let pred = tracked_pred_from(&pred_seq, &tape);
        let (_, tracked) =
            composite_loss_tracked(&tape, &pred, &target, &LossWeights::default(), 3).unwrap();
        let pure = composite_loss(&pred_seq, &target, &LossWeights::default(), 3).unwrap();
        assert!((tracked.mse_term - pure.mse_term).abs() < 1e-12);
        assert!((tracked.curvature_term - pure.curvature_term).abs() < 1e-12);
        assert!((tracked.total - pure.total).abs() < 1e-10);
    }

    #[test]
    fn short_sequences_skip_curvature() {
        let target = seq(&[(0.1, 0.1), (0.2, 0.2), (0.3, 0.3)], &[0.0, 0.0, 0.0]);
        let tape = Tape::new();
        let pred = tracked_pred_from(&target, &tape);
        let (_, report) =
            composite_loss_tracked(&tape, &pred, &target, &LossWeights::default(), 3).unwrap();
        assert!(report.curvature_skipped);
        assert_eq!(report.curvature_term, 0.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        use crate::autodiff::{grad_check, GradCheckConfig};
        use crate::image::GrayImage;
        use crate::model::SplineTransformer;
        use crate::transformer::ModelConfig;

        let model = SplineTransformer::init(ModelConfig::gradcheck(), 31).unwrap();
        let mut img = GrayImage::new(16, 16);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = crate::rng::counter_uniform(13, i as u64);
        }
        let target = smooth_seq(6, (0.0, 0.0));
        let weights = LossWeights {
            n_curve_samples: 16,
            ..LossWeights::default()
        };
        let params: Vec<(String, TensorValue)> = model.params.entries().to_vec();
        let f = |tape: &Tape, leaves: &[Tensor]| {
            let mut by_name = std::collections::HashMap::new();
            for ((name, _), leaf) in params.iter().zip(leaves) {
                by_name.insert(name.clone(), leaf.clone());
            }
            let bound = crate::model::Bound::from_map(by_name);
            let out = model.teacher_forced_forward(tape, &bound, &img, &target)?;
            let (loss, _) = composite_loss_tracked(tape, &out, &target, &weights, 3)?;
            Ok(loss)
        };
        let report = grad_check(
            &f,
            &params,
            &GradCheckConfig {
                max_components: Some(2),
                seed: 5,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.pass(), "worst {:?}", report.ranked()[0]);
    }
}
