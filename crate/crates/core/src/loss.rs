//! Softmax cross-entropy and KL divergence on logit batches, with gradients.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn rows<T: Real>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    Ok((logits.dim(0), logits.dim(1)))
}

pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, k) = rows(logits)?;
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = logits.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
            log_softmax(&row).into_iter().map(f64::exp).collect()
        })
        .collect())
}

/// Per-sample cross-entropy `-log softmax(logits)[label]`.
pub fn per_sample_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, k) = rows(logits)?;
    if labels.len() != n {
        return Err(Error::precondition(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    (0..n)
        .map(|i| {
            let y = labels[i];
            if y >= k {
                return Err(Error::precondition(format!("label {y} outside {k} classes")));
            }
            let row: Vec<f64> = logits.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
            Ok(-log_softmax(&row)[y])
        })
        .collect()
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = rows(logits)?;
    let per = per_sample_cross_entropy(logits, labels)?;
    let loss = per.iter().sum::<f64>() / n as f64;
    let probs = softmax(logits)?;
    let mut grad = Vec::with_capacity(n * k);
    for (i, p) in probs.iter().enumerate() {
        for (j, &pj) in p.iter().enumerate() {
            let t = if j == labels[i] { 1.0 } else { 0.0 };
            grad.push(T::c((pj - t) / n as f64));
        }
    }
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

/// Batch mean of `KL(softmax(p_logits) || softmax(q_logits))` with gradients for both inputs.
pub fn kl_divergence<T: Real>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::precondition(format!(
            "KL between {:?} and {:?}",
            p_logits.shape(),
            q_logits.shape()
        )));
    }
    let (n, k) = rows(p_logits)?;
    let mut total = 0.0;
    let mut dp = Vec::with_capacity(n * k);
    let mut dq = Vec::with_capacity(n * k);
    for i in 0..n {
        let a: Vec<f64> = p_logits.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = q_logits.data()[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
        let lp = log_softmax(&a);
        let lq = log_softmax(&b);
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
        let l: Vec<f64> = lp.iter().zip(&lq).map(|(x, y)| x - y).collect();
        let kl: f64 = p.iter().zip(&l).map(|(pi, li)| pi * li).sum();
        // Rounding can push an exact zero slightly negative.
        total += kl.max(0.0);
        for j in 0..k {
            dp.push(T::c(p[j] * (l[j] - kl) / n as f64));
            dq.push(T::c((q[j] - p[j]) / n as f64));
        }
    }
    Ok((
        total / n as f64,
        Tensor::from_vec(p_logits.shape(), dp)?,
        Tensor::from_vec(q_logits.shape(), dq)?,
    ))
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let z = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, g) = cross_entropy(&z, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // each row sums to zero
        for row in g.data().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let a = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![-0.7, 0.2, 0.9, 0.0, 1.1, 0.3]).unwrap();
        let (_, da, db) = kl_divergence(&a, &b).unwrap();
        let h = 1e-6;
        for j in 0..6 {
            let mut ap = a.clone();
            ap.data_mut()[j] += h;
            let mut am = a.clone();
            am.data_mut()[j] -= h;
            let fd = (kl_divergence(&ap, &b).unwrap().0 - kl_divergence(&am, &b).unwrap().0) / (2.0 * h);
            assert!((fd - da.data()[j]).abs() < 1e-7, "dp[{j}]");
            let mut bp = b.clone();
            bp.data_mut()[j] += h;
            let mut bm = b.clone();
            bm.data_mut()[j] -= h;
            let fd = (kl_divergence(&a, &bp).unwrap().0 - kl_divergence(&a, &bm).unwrap().0) / (2.0 * h);
            assert!((fd - db.data()[j]).abs() < 1e-7, "dq[{j}]");
        }
    }

    #[test]
    fn bad_labels_rejected() {
        let z = Tensor::<f32>::zeros(&[2, 3]);
        assert!(cross_entropy(&z, &[0]).is_err());
        assert!(cross_entropy(&z, &[0, 3]).is_err());
    }
}
