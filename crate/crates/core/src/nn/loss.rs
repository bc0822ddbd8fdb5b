use crate::error::{Error, Result};

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(-log_softmax(logits)[label])
}

fn check_kl_args(teacher: &[f64], student: &[f64], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")));
    }
    if teacher.len() != student.len() {
        return Err(Error::mismatch("kl logits", teacher.len(), student.len()));
    }
    Ok(())
}

fn tempered(logits: &[f64], tau: f64) -> Vec<f64> {
    logits.iter().map(|z| z / tau).collect()
}

/// `τ² · KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kl_temperature(teacher: &[f64], student: &[f64], tau: f64) -> Result<f64> {
    check_kl_args(teacher, student, tau)?;
    let lp = log_softmax(&tempered(teacher, tau));
    let lq = log_softmax(&tempered(student, tau));
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| if a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum();
    Ok(tau * tau * kl.max(0.0))
}

/// Gradient of [`kl_temperature`] with respect to the student logits: `τ (q − p)`.
pub fn kl_temperature_grad(teacher: &[f64], student: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_kl_args(teacher, student, tau)?;
    let p = softmax(&tempered(teacher, tau));
    let q = softmax(&tempered(student, tau));
    Ok(q.iter().zip(&p).map(|(qi, pi)| tau * (qi - pi)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_is_zero() {
        for tau in [0.5, 1.0, 4.0] {
            assert_eq!(kl_temperature(&[1.0, -2.0, 0.3], &[1.0, -2.0, 0.3], tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_hand_value() {
        // p = (1/2, 1/2), q = (3/4, 1/4): KL = ½ln(2/3) + ½ln 2 = ½ln(4/3).
        let v = kl_temperature(&[0.0, 0.0], &[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((v - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((v - 0.143_841_036_225_890_2).abs() < 1e-12);
    }

    #[test]
    fn kl_extreme_logits_stay_finite() {
        let v = kl_temperature(&[10.0, 0.0], &[0.0, 10.0], 1.0).unwrap();
        assert!(v.is_finite() && v > 5.0);
        let v = kl_temperature(&[1000.0, -1000.0], &[-1000.0, 1000.0], 1.0).unwrap();
        assert!(v.is_finite() && v > 100.0);
        assert!(cross_entropy(&[1000.0, -1000.0], 1).unwrap().is_finite());
    }

    #[test]
    fn kl_rejects_bad_temperature() {
        assert!(kl_temperature(&[0.0], &[0.0], 0.0).is_err());
        assert!(kl_temperature(&[0.0], &[0.0], -1.0).is_err());
        assert!(kl_temperature(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let t = [0.3, -1.2, 2.0, 0.1];
        let s = [1.0, 0.4, -0.7, 0.2];
        for tau in [0.7, 1.0, 2.5] {
            let g = kl_temperature_grad(&t, &s, tau).unwrap();
            for i in 0..s.len() {
                let h = 1e-5;
                let mut sp = s;
                let mut sm = s;
                sp[i] += h;
                sm[i] -= h;
                let fd = (kl_temperature(&t, &sp, tau).unwrap() - kl_temperature(&t, &sm, tau).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + g[i].abs()), "{fd} vs {}", g[i]);
            }
        }
    }
}
