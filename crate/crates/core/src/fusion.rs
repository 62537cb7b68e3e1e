//! Per-sample knowledge-fusion ratio policies and the convex loss
//! combination. The learned policy reads a geometric feature through a
//! sigmoid-headed network; the fixed, annealed, class-wise, and loss-gap
//! policies reconstruct the baseline families from their stated behavior.

use crate::error::{Error, Result};
use crate::geometry::{FeatureMode, GeometryFeature};
use crate::numcore::loss::LossValue;
use crate::numcore::net::{forward, ModelParams};
use crate::numcore::tensor::Tensor;

/// Keeps the learned ratio strictly inside (0,1) even when the sigmoid
/// saturates in f64.
const ALPHA_MIN: f64 = 1e-12;
const ALPHA_MAX: f64 = 1.0 - 1e-12;

/// Fusion-ratio policy selection plus its parameters.
#[derive(Debug, Clone)]
pub enum RatioPolicy {
    /// One pre-set ratio for every sample.
    Fixed { alpha: f64 },
    /// Linear decay from 1 to 0 over a step horizon.
    Annealed { horizon: u64 },
    /// Ratio equals the frozen teacher's training accuracy on the sample's class.
    ClassWise { class_accuracy: Vec<f64> },
    /// Sigmoid of the gain-scaled gap between student and teacher cross-entropy.
    Wls { gain: f64 },
    /// Learned from the trilateral geometry by a sigmoid-headed network.
    Tgeo {
        omega: ModelParams,
        mode: FeatureMode,
    },
}

impl RatioPolicy {
    pub fn kind_name(&self) -> &'static str {
        match self {
            RatioPolicy::Fixed { .. } => "fixed",
            RatioPolicy::Annealed { .. } => "annealed",
            RatioPolicy::ClassWise { .. } => "class_wise",
            RatioPolicy::Wls { .. } => "wls",
            RatioPolicy::Tgeo { .. } => "tgeo",
        }
    }
}

/// Validated fixed policy.
pub fn fixed_ratio(alpha0: f64) -> Result<RatioPolicy> {
    if !(0.0..=1.0).contains(&alpha0) {
        return Err(Error::Config(format!(
            "fixed fusion ratio must lie in [0,1], got {alpha0}"
        )));
    }
    Ok(RatioPolicy::Fixed { alpha: alpha0 })
}

/// Linear schedule from 1 at step 0 to 0 at the horizon; steps past the
/// horizon clamp to 0.
pub fn annealed_ratio(step: u64, horizon: u64) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Config("anneal horizon must be at least 1".into()));
    }
    if step >= horizon {
        return Ok(0.0);
    }
    Ok(1.0 - step as f64 / horizon as f64)
}

/// Ratio equals the teacher's accuracy on the sample's class.
pub fn class_wise_ratio(class_accuracy: &[f64], class_index: usize) -> Result<f64> {
    if class_index >= class_accuracy.len() {
        return Err(Error::Config(format!(
            "class {class_index} out of range for {} accuracies",
            class_accuracy.len()
        )));
    }
    let a = class_accuracy[class_index];
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Config(format!("class accuracy {a} outside [0,1]")));
    }
    Ok(a)
}

/// Sigmoid of the gain-scaled cross-entropy gap: the ratio rises when the
/// teacher outperforms the student on the sample.
pub fn wls_ratio(student_ce: f64, teacher_ce: f64, gain: f64) -> Result<f64> {
    if !(gain > 0.0) {
        return Err(Error::Config(format!("wls gain must be positive, got {gain}")));
    }
    if student_ce < 0.0 || teacher_ce < 0.0 {
        return Err(Error::Config("cross-entropy values must be nonnegative".into()));
    }
    Ok(1.0 / (1.0 + (-gain * (student_ce - teacher_ce)).exp()))
}

/// Learned ratio: forward pass of the fusion network on the geometric
/// feature. The final activation must be a sigmoid, which keeps the output
/// strictly inside (0,1).
pub fn tgeo_ratio(omega: &ModelParams, delta: &GeometryFeature) -> Result<f64> {
    if omega.input_dim() != delta.delta.len() {
        return Err(Error::Config(format!(
            "fusion net expects width {}, feature has {}",
            omega.input_dim(),
            delta.delta.len()
        )));
    }
    if omega.output_dim() != 1 {
        return Err(Error::Config("fusion net must emit a single ratio".into()));
    }
    if omega.layers.last().unwrap().activation != crate::numcore::net::Activation::Sigmoid {
        return Err(Error::Config("fusion net head must be a sigmoid".into()));
    }
    let out = forward(omega, delta.delta.as_slice())?;
    Ok(out[0].clamp(ALPHA_MIN, ALPHA_MAX))
}

/// Convex combination of the two losses with its bookkeeping.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub alpha: f64,
    pub kd_part: f64,
    pub gt_part: f64,
    pub grad_logits: Tensor,
}

/// value = alpha * kd + (1 - alpha) * gt, gradient combined the same way.
pub fn combine(alpha: f64, kd: &LossValue, gt: &LossValue) -> Result<CombinedLoss> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "fusion ratio must lie in [0,1], got {alpha}"
        )));
    }
    if kd.grad_logits.len() != gt.grad_logits.len() {
        return Err(Error::Config("kd/gt gradient widths differ".into()));
    }
    let grad: Vec<f64> = kd
        .grad_logits
        .as_slice()
        .iter()
        .zip(gt.grad_logits.as_slice())
        .map(|(k, g)| alpha * k + (1.0 - alpha) * g)
        .collect();
    Ok(CombinedLoss {
        value: alpha * kd.value + (1.0 - alpha) * gt.value,
        alpha,
        kd_part: kd.value,
        gt_part: gt.value,
        grad_logits: Tensor::vector(grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_class_averages, build_feature, PredictionTriplet};
    use crate::numcore::loss::{ce_loss_class, kd_loss};
    use crate::numcore::net::{init_params, Activation, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_pair() -> (LossValue, LossValue) {
        let kd = kd_loss(&[0.4, -0.2], &[1.0, -1.0], 2.0).unwrap();
        let gt = ce_loss_class(&[0.4, -0.2], 0).unwrap();
        (kd, gt)
    }

    fn small_feature(c: usize) -> GeometryFeature {
        let probs = Tensor::from_vec(vec![c, c], {
            let mut v = vec![0.1 / (c - 1) as f64; c * c];
            for i in 0..c {
                v[i * c + i] = 0.9;
            }
            v
        })
        .unwrap();
        let labels: Vec<usize> = (0..c).collect();
        let table = build_class_averages(&probs, &labels).unwrap();
        let s = vec![1.0 / c as f64; c];
        let tr = PredictionTriplet::new(s.clone(), s, 0).unwrap();
        build_feature(&tr, &table, FeatureMode::R3).unwrap()
    }

    #[test]
    fn combine_endpoints_are_exact() {
        let (kd, gt) = loss_pair();
        let c0 = combine(0.0, &kd, &gt).unwrap();
        assert_eq!(c0.value, gt.value);
        assert_eq!(c0.grad_logits.as_slice(), gt.grad_logits.as_slice());
        let c1 = combine(1.0, &kd, &gt).unwrap();
        assert_eq!(c1.value, kd.value);
        assert_eq!(c1.grad_logits.as_slice(), kd.grad_logits.as_slice());
    }

    #[test]
    fn combine_midpoint_arithmetic() {
        let kd = LossValue {
            value: 2.0,
            grad_logits: Tensor::vector(vec![1.0, -1.0]).unwrap(),
        };
        let gt = LossValue {
            value: 1.0,
            grad_logits: Tensor::vector(vec![0.5, 0.5]).unwrap(),
        };
        let c = combine(0.3, &kd, &gt).unwrap();
        assert!((c.value - 1.3).abs() < 1e-15);
        assert!((c.value - (c.alpha * c.kd_part + (1.0 - c.alpha) * c.gt_part)).abs() < 1e-12);
    }

    #[test]
    fn combine_is_affine_in_alpha() {
        let (kd, gt) = loss_pair();
        for alpha in [0.0, 0.37, 1.0] {
            let c = combine(alpha, &kd, &gt).unwrap();
            let expect = gt.value + alpha * (kd.value - gt.value);
            assert!((c.value - expect).abs() < 1e-12);
        }
        assert!(combine(1.5, &kd, &gt).is_err());
        assert!(combine(-0.1, &kd, &gt).is_err());
    }

    #[test]
    fn annealed_schedule_endpoints_and_monotonicity() {
        assert_eq!(annealed_ratio(0, 100).unwrap(), 1.0);
        assert_eq!(annealed_ratio(100, 100).unwrap(), 0.0);
        assert_eq!(annealed_ratio(150, 100).unwrap(), 0.0);
        assert_eq!(annealed_ratio(50, 100).unwrap(), 0.5);
        let mut prev = 1.0;
        for step in 0..=120 {
            let a = annealed_ratio(step, 100).unwrap();
            assert!(a <= prev);
            prev = a;
        }
        assert!(annealed_ratio(0, 0).is_err());
    }

    #[test]
    fn class_wise_lookup() {
        assert_eq!(class_wise_ratio(&[1.0, 0.5], 0).unwrap(), 1.0);
        assert_eq!(class_wise_ratio(&[0.0, 0.5], 0).unwrap(), 0.0);
        assert_eq!(class_wise_ratio(&[0.9, 0.5, 0.7], 2).unwrap(), 0.7);
        assert!(class_wise_ratio(&[0.9], 1).is_err());
    }

    #[test]
    fn wls_behavior() {
        assert_eq!(wls_ratio(1.0, 1.0, 1.0).unwrap(), 0.5);
        let a = wls_ratio(1.0, 0.5, 2.0).unwrap();
        assert!((a - 0.7310585786300049).abs() < 1e-12);
        assert!(wls_ratio(50.0, 0.0, 1.0).unwrap() > 0.999);
        // strictly increasing in (student_ce - teacher_ce)
        let mut prev = 0.0;
        for (s, t) in [(0.0, 2.0), (0.5, 1.0), (1.0, 1.0), (1.5, 1.0), (3.0, 1.0)] {
            let a = wls_ratio(s, t, 1.0).unwrap();
            assert!(a > prev, "({s},{t}) gave {a} <= {prev}");
            prev = a;
        }
        assert!(wls_ratio(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn zero_fusion_net_emits_half() {
        let c = 3;
        let feat = small_feature(c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut omega = init_params(
            &[9 * c, 8, 1],
            &[Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        for l in omega.layers.iter_mut() {
            l.weight.as_mut_slice().fill(0.0);
            l.bias.as_mut_slice().fill(0.0);
        }
        assert_eq!(tgeo_ratio(&omega, &feat).unwrap(), 0.5);
    }

    #[test]
    fn tgeo_ratio_monotone_in_head_bias_and_strictly_inside_unit_interval() {
        let c = 2;
        let feat = small_feature(c);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut omega = init_params(
            &[9 * c, 4, 1],
            &[Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        let mut prev = 0.0;
        for bias in [-40.0, -4.0, 0.0, 4.0, 40.0] {
            let n = omega.layers.len();
            omega.layers[n - 1].bias.as_mut_slice()[0] = bias;
            let a = tgeo_ratio(&omega, &feat).unwrap();
            assert!(a > 0.0 && a < 1.0, "alpha {a} escaped (0,1)");
            assert!(a > prev);
            prev = a;
        }
        assert!(prev > 0.999999);
    }

    #[test]
    fn tgeo_ratio_matches_hand_forward() {
        // 1-layer sigmoid net on a C=2 feature, recomputed by hand.
        let c = 2;
        let feat = small_feature(c);
        let w: Vec<f64> = (0..9 * c).map(|i| 0.05 * (i as f64 - 9.0)).collect();
        let omega = ModelParams {
            layers: vec![Layer {
                weight: Tensor::from_vec(vec![1, 9 * c], w.clone()).unwrap(),
                bias: Tensor::vector(vec![0.2]).unwrap(),
                activation: Activation::Sigmoid,
            }],
        };
        let pre: f64 = w
            .iter()
            .zip(feat.delta.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + 0.2;
        let expect = 1.0 / (1.0 + (-pre).exp());
        let got = tgeo_ratio(&omega, &feat).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn tgeo_ratio_rejects_mismatched_nets() {
        let feat = small_feature(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wrong_width = init_params(&[7, 1], &[Activation::Sigmoid], &mut rng);
        assert!(tgeo_ratio(&wrong_width, &feat).is_err());
        let wrong_head = init_params(&[18, 1], &[Activation::Identity], &mut rng);
        assert!(tgeo_ratio(&wrong_head, &feat).is_err());
    }

    #[test]
    fn fixed_ratio_validation() {
        assert!(fixed_ratio(0.2).is_ok());
        assert!(fixed_ratio(-0.01).is_err());
        assert!(fixed_ratio(1.01).is_err());
    }
}
