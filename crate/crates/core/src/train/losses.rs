use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::{Real, Tensor};

/// `alpha * CE(clean) + (1 - alpha) * CE(adv)` with batch-mean cross-entropies.
pub fn hybrid_loss<T: Real>(
    logits_clean: &Tensor<T>,
    logits_adv: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
) -> Result<f64> {
    if logits_clean.shape() != logits_adv.shape() {
        return Err(Error::precondition(format!(
            "branch logits {:?} vs {:?}",
            logits_clean.shape(),
            logits_adv.shape()
        )));
    }
    let (c, _) = loss::cross_entropy(logits_clean, labels)?;
    let (a, _) = loss::cross_entropy(logits_adv, labels)?;
    Ok(alpha * c + (1.0 - alpha) * a)
}

/// Batch mean of `KL(softmax(clean) || softmax(adv))`.
pub fn kl_regularizer<T: Real>(logits_clean: &Tensor<T>, logits_adv: &Tensor<T>) -> Result<f64> {
    Ok(loss::kl_divergence(logits_clean, logits_adv)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_class_zero_logits() {
        let z = Tensor::<f64>::zeros(&[3, 2]);
        let l = hybrid_loss(&z, &z, &[0, 1, 1], 0.5).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn alpha_interpolates_linearly() {
        let c = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.2, 0.3, 2.0]).unwrap();
        let a = Tensor::from_vec(&[2, 3], vec![-1.0, 2.0, 0.5, 0.0, 0.0, 0.1]).unwrap();
        let y = [0, 2];
        let ce_c = loss::cross_entropy(&c, &y).unwrap().0;
        let ce_a = loss::cross_entropy(&a, &y).unwrap().0;
        assert_eq!(hybrid_loss(&c, &a, &y, 1.0).unwrap(), ce_c);
        assert_eq!(hybrid_loss(&c, &a, &y, 0.0).unwrap(), ce_a);
        for alpha in [0.25, 0.5] {
            let want = alpha * ce_c + (1.0 - alpha) * ce_a;
            assert!((hybrid_loss(&c, &a, &y, alpha).unwrap() - want).abs() < 1e-15);
        }
        assert!(hybrid_loss(&c, &Tensor::zeros(&[1, 3]), &y, 0.5).is_err());
    }

    #[test]
    fn kl_hand_example() {
        // softmax((ln 9, 0)) = (0.9, 0.1)
        let p = Tensor::from_vec(&[1, 2], vec![9f64.ln(), 0.0]).unwrap();
        let q = Tensor::<f64>::zeros(&[1, 2]);
        let want = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_regularizer(&p, &q).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3681).abs() < 1e-4);
        assert_eq!(kl_regularizer(&p, &p).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn kl_is_non_negative(a in proptest::collection::vec(-20.0f64..20.0, 5), b in proptest::collection::vec(-20.0f64..20.0, 5)) {
            let p = Tensor::from_vec(&[1, 5], a).unwrap();
            let q = Tensor::from_vec(&[1, 5], b).unwrap();
            prop_assert!(kl_regularizer(&p, &q).unwrap() >= 0.0);
        }
    }
}
