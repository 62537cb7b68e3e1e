use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Scalar loss plus its exact gradient with respect to the student logits.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Tensor,
}

fn check_logits(z: &[f64], what: &str) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::Config(format!("{what} needs at least 2 classes")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {what}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// log(sum(exp(z))) with max-subtraction.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_softmax_scaled(z: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|v| v - lse).collect()
}

/// Temperature-scaled softmax, stabilized by max-subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_logits(logits, "logits")?;
    check_tau(tau)?;
    Ok(log_softmax_scaled(logits, tau)
        .iter()
        .map(|v| v.exp())
        .collect())
}

/// Soft-label distillation loss: tau^2-scaled KL divergence between the
/// temperature-softened teacher and student distributions, teacher as the
/// reference. The gradient flows only into the student logits; the teacher
/// is frozen.
pub fn kd_loss(z_s: &[f64], z_t: &[f64], tau: f64) -> Result<LossValue> {
    check_logits(z_s, "student logits")?;
    check_logits(z_t, "teacher logits")?;
    check_tau(tau)?;
    if z_s.len() != z_t.len() {
        return Err(Error::Config(format!(
            "student/teacher class counts differ: {} vs {}",
            z_s.len(),
            z_t.len()
        )));
    }
    let log_p = log_softmax_scaled(z_t, tau);
    let log_q = log_softmax_scaled(z_s, tau);
    let mut value = 0.0;
    for (lp, lq) in log_p.iter().zip(&log_q) {
        let p = lp.exp();
        if p > 0.0 {
            value += p * (lp - lq);
        }
    }
    value *= tau * tau;
    // KL is nonnegative; tiny negative round-off is clipped.
    if value < 0.0 {
        value = 0.0;
    }
    let grad: Vec<f64> = log_q
        .iter()
        .zip(&log_p)
        .map(|(lq, lp)| tau * (lq.exp() - lp.exp()))
        .collect();
    Ok(LossValue {
        value,
        grad_logits: Tensor::vector(grad)?,
    })
}

fn one_hot_index(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::Config("label vector has multiple ones".into()));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Config(format!("label vector entry {v} is not 0 or 1")));
        }
    }
    hot.ok_or_else(|| Error::Config("label vector has no one".into()))
}

/// Ground-truth cross-entropy: -log softmax probability of the true class.
/// Gradient is softmax(z) - y exactly.
pub fn ce_loss(z_s: &[f64], y: &[f64]) -> Result<LossValue> {
    check_logits(z_s, "student logits")?;
    if z_s.len() != y.len() {
        return Err(Error::Config(format!(
            "logit/label widths differ: {} vs {}",
            z_s.len(),
            y.len()
        )));
    }
    let class = one_hot_index(y)?;
    let log_q = log_softmax_scaled(z_s, 1.0);
    let value = (-log_q[class]).max(0.0);
    let grad: Vec<f64> = log_q
        .iter()
        .zip(y)
        .map(|(lq, yv)| lq.exp() - yv)
        .collect();
    Ok(LossValue {
        value,
        grad_logits: Tensor::vector(grad)?,
    })
}

/// Cross-entropy against a plain class index.
pub fn ce_loss_class(z_s: &[f64], class: usize) -> Result<LossValue> {
    if class >= z_s.len() {
        return Err(Error::Config(format!(
            "class {class} out of range for {} logits",
            z_s.len()
        )));
    }
    let mut y = vec![0.0; z_s.len()];
    y[class] = 1.0;
    ce_loss(z_s, &y)
}
