use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Weighted binary cross-entropy `−[w·y·ln p + (1−y)·ln(1−p)]`.
pub fn bce_loss(p: f64, y: u8, pos_weight: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("probability {p} is outside (0, 1)")));
    }
    if y > 1 {
        return Err(Error::Argument(format!("label {y} is not 0 or 1")));
    }
    let y = f64::from(y);
    Ok(-(pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// [`bce_loss`] evaluated on the logit `z` with `p = σ(z)`.
pub(crate) fn bce_from_logit(z: f64, y: f64, pos_weight: f64) -> f64 {
    // −ln σ(z) = softplus(−z), −ln(1−σ(z)) = softplus(z)
    pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z)
}

/// `∂ bce_from_logit / ∂z`.
pub(crate) fn bce_from_logit_grad(z: f64, y: f64, pos_weight: f64) -> f64 {
    let p = sigmoid(z);
    pos_weight * y * (p - 1.0) + (1.0 - y) * p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(0.5, 1, 1.0).unwrap() - ln2).abs() < 1e-12);
        assert!((bce_loss(0.5, 1, 2.0).unwrap() - 1.38629).abs() < 1e-5);
        assert!(bce_loss(1.0 - 1e-12, 1, 1.0).unwrap() < 1e-11);
        assert!(bce_loss(1e-12, 0, 1.0).unwrap() < 1e-11);
        assert!(bce_loss(0.0, 1, 1.0).is_err());
        assert!(bce_loss(1.0, 0, 1.0).is_err());
        assert!(bce_loss(0.3, 2, 1.0).is_err());
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        for &z in &[-8.0, -3.2, -0.1, 0.0, 0.7, 4.0, 9.0] {
            for y in [0u8, 1] {
                let p = sigmoid(z);
                let direct = bce_loss(p, y, 1.7).unwrap();
                let via_logit = bce_from_logit(z, f64::from(y), 1.7);
                assert!((direct - via_logit).abs() < 1e-9 * direct.max(1.0), "z={z} y={y}");
                let h = 1e-6;
                let fd = (bce_from_logit(z + h, f64::from(y), 1.7)
                    - bce_from_logit(z - h, f64::from(y), 1.7))
                    / (2.0 * h);
                assert!((fd - bce_from_logit_grad(z, f64::from(y), 1.7)).abs() < 1e-7);
            }
        }
        // far from zero, ln(1 + e^z) ≈ z + e^−z
        assert!((bce_from_logit(25.0, 0.0, 1.0) - (25.0 + (-25.0f64).exp())).abs() < 1e-12);
        assert!((bce_from_logit(-25.0, 1.0, 2.0) - 2.0 * (25.0 + (-25.0f64).exp())).abs() < 1e-12);
        assert!(bce_from_logit(800.0, 0.0, 1.0).is_finite());
        assert!(bce_from_logit(-800.0, 1.0, 1.0).is_finite());
    }
}
