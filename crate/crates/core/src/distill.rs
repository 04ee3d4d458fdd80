//! Forward evaluation of the composite distillation loss
//! `lambda_cls * CE + lambda_logits * KD + lambda_feat * feature MSE`.
//!
//! Losses are accumulated in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{matmul_f32, FloatMatrix, FloatVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillWeights {
    pub lambda_cls: f64,
    pub lambda_logits: f64,
    pub lambda_feat: f64,
    pub temperature: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_logits: 1.0,
            lambda_feat: 1.0,
            temperature: 1.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_cls, self.lambda_logits, self.lambda_feat];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Maps student features (`student_dim` wide) into the teacher's width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjection {
    pub matrix: FloatMatrix,
}

fn log_softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&v| v as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &FloatVector, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok(-log_softmax(logits.data(), 1.0)[label])
}

/// `T^2 * KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kd_divergence(
    student_logits: &FloatVector,
    teacher_logits: &FloatVector,
    temperature: f64,
) -> Result<f64> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::dims(
            "kd_divergence",
            teacher_logits.len(),
            student_logits.len(),
        ));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if !(student_logits.is_finite() && teacher_logits.is_finite()) {
        return Err(Error::NonFinite("kd_divergence".into()));
    }
    let log_s = log_softmax(student_logits.data(), temperature);
    let log_t = log_softmax(teacher_logits.data(), temperature);
    let kl: f64 = log_t
        .iter()
        .zip(&log_s)
        .map(|(&lt, &ls)| lt.exp() * (lt - ls))
        .sum();
    // Rounding can leave a tiny negative residue.
    Ok(temperature * temperature * kl.max(0.0))
}

/// Mean squared error between `student · proj` and `teacher`.
pub fn feature_loss(
    student_feat: &FloatMatrix,
    teacher_feat: &FloatMatrix,
    proj: &FeatureProjection,
) -> Result<f64> {
    let projected = matmul_f32(student_feat, &proj.matrix)?;
    if projected.shape() != teacher_feat.shape() {
        return Err(Error::dims(
            "feature_loss",
            format!("{:?}", teacher_feat.shape()),
            format!("{:?}", projected.shape()),
        ));
    }
    let n = projected.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sse: f64 = projected
        .data()
        .iter()
        .zip(teacher_feat.data())
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(sse / n as f64)
}

/// Component losses for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub kd: f64,
    pub feat: f64,
}

pub fn total_loss(parts: LossParts, w: &DistillWeights) -> f64 {
    w.lambda_cls * parts.ce + w.lambda_logits * parts.kd + w.lambda_feat * parts.feat
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f32]) -> FloatVector {
        FloatVector::new(x.to_vec())
    }

    #[test]
    fn cross_entropy_examples() {
        for c in [2usize, 9, 11] {
            let ce = cross_entropy(&FloatVector::zeros(c), 0).unwrap();
            assert!((ce - (c as f64).ln()).abs() < 1e-12);
        }
        assert!(cross_entropy(&v(&[80.0, -80.0]), 0).unwrap() < 1e-12);
        let ce = cross_entropy(&v(&[3f32.ln(), 0.0]), 1).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&v(&[0.0, 1.0]), 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn kd_examples() {
        let x = v(&[0.3, -1.2, 2.0]);
        assert_eq!(kd_divergence(&x, &x, 2.0).unwrap(), 0.0);
        let kd = kd_divergence(&v(&[0.0, 0.0]), &v(&[3f32.ln(), 0.0]), 1.0).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kd - want).abs() < 1e-6, "{kd} vs {want}");
        assert!((kd - 0.1308).abs() < 1e-4);
        assert!(kd_divergence(&v(&[0.0]), &v(&[0.0, 1.0]), 1.0).is_err());
        assert!(kd_divergence(&x, &x, 0.0).is_err());
    }

    #[test]
    fn feature_loss_examples() {
        let id = FeatureProjection {
            matrix: FloatMatrix::identity(2),
        };
        let s = FloatMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let t = FloatMatrix::from_rows(&[vec![2.0, 4.0]]).unwrap();
        assert_eq!(feature_loss(&s, &t, &id).unwrap(), 2.5);
        assert_eq!(feature_loss(&s, &s, &id).unwrap(), 0.0);
        let ones = FloatMatrix::from_fn(3, 2, |_, _| 1.0);
        assert_eq!(
            feature_loss(&FloatMatrix::zeros(3, 2), &ones, &id).unwrap(),
            1.0
        );
        assert!(feature_loss(&s, &ones, &id).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts {
            ce: 4f64.ln(),
            kd: 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln(),
            feat: 2.5,
        };
        let zero = DistillWeights {
            lambda_cls: 0.0,
            lambda_logits: 0.0,
            lambda_feat: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(parts, &zero), 0.0);
        let ce_only = DistillWeights {
            lambda_cls: 1.0,
            ..zero
        };
        assert_eq!(total_loss(parts, &ce_only), parts.ce);
        let sum = total_loss(parts, &DistillWeights::default());
        assert!((sum - (parts.ce + parts.kd + parts.feat)).abs() < 1e-12);
        assert!(DistillWeights {
            temperature: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits(n: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(-20.0f32..20.0, n)
        }

        proptest! {
            #[test]
            fn kd_non_negative(
                (s, t) in (1usize..12).prop_flat_map(|n| (logits(n), logits(n))),
                temp in 0.1f64..10.0,
            ) {
                prop_assert!(kd_divergence(&v(&s), &v(&t), temp).unwrap() >= 0.0);
            }

            #[test]
            fn kd_shift_invariant(s in logits(6), c in -5.0f32..5.0, temp in 0.5f64..4.0) {
                let shifted: Vec<f32> = s.iter().map(|x| x + c).collect();
                prop_assert!(kd_divergence(&v(&s), &v(&shifted), temp).unwrap() < 1e-9);
            }

            #[test]
            fn kd_positive_unless_shift(
                s in proptest::collection::vec(-5.0f32..5.0, 2..8),
                i in 0usize..8,
                d in prop_oneof![-3.0f32..-0.5, 0.5f32..3.0],
                temp in 0.5f64..4.0,
            ) {
                let mut t = s.clone();
                t[i % s.len()] += d;
                prop_assert!(kd_divergence(&v(&s), &v(&t), temp).unwrap() > 0.0);
            }

            #[test]
            fn cross_entropy_non_negative(s in logits(5), label in 0usize..5) {
                prop_assert!(cross_entropy(&v(&s), label).unwrap() >= 0.0);
            }

            #[test]
            fn total_linear_in_lambda(a in 0.0f64..5.0, b in 0.0f64..5.0) {
                let parts = LossParts { ce: 1.3, kd: 0.2, feat: 0.7 };
                let w = |l| DistillWeights { lambda_cls: l, ..Default::default() };
                let lhs = total_loss(parts, &w(a + b)) - total_loss(parts, &w(a));
                prop_assert!((lhs - b * parts.ce).abs() < 1e-9);
            }
        }
    }
}
