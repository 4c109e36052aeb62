use crate::error::{Error, Result};

/// Floor applied to the reference distribution before taking logs in
/// [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// A probability vector: non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "probability {i} is {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Distribution(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Distribution(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_input(v: &[f64], temperature: f64) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(())
}

/// `exp(v_i / τ) / Σ_j exp(v_j / τ)`, max-shifted.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Distribution> {
    check_input(v, temperature)?;
    Ok(Distribution(softmax_unchecked(v, temperature)))
}

/// `log softmax(v / τ)`.
pub fn log_softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_input(v, temperature)?;
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = v.iter().map(|x| (x - max) / temperature).collect();
    let log_z = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|s| s - log_z).collect())
}

pub(crate) fn softmax_unchecked(v: &[f64], temperature: f64) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Pulls a gradient on `p = softmax(v / τ)` back onto `v`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], temperature: f64) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner) / temperature)
        .collect()
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln(0 / q) = 0` and `q` floored at
/// [`KL_FLOOR`].
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "kl_divergence: {} vs {} entries",
            p.len(),
            q.len()
        )));
    }
    let kl = p
        .probs()
        .iter()
        .zip(q.probs())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum::<f64>();
    // Rounding can leave a tiny negative value for p == q.
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_constant_is_uniform() {
        let d = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_logs_recovers_weights() {
        let v = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        let d = softmax(&v, 1.0).unwrap();
        for (p, want) in d.probs().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        // 50-digit evaluation: [1 - 5.08e-435, 5.08e-435], which rounds to [1, 0].
        let d = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[], 1.0).is_err());
        assert!(softmax(&[f64::NAN, 1.0], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let half = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);
        let onehot = Distribution::new(vec![1.0, 0.0]).unwrap();
        assert!((kl_divergence(&onehot, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_high_precision_sum() {
        // 50-digit mpmath evaluation of 0.3 ln(0.3/0.6) + 0.7 ln(0.7/0.4).
        let p = Distribution::new(vec![0.3, 0.7]).unwrap();
        let q = Distribution::new(vec![0.6, 0.4]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 0.18378689738681228).abs() < 1e-15);
    }

    #[test]
    fn kl_length_mismatch() {
        let a = Distribution::uniform(2);
        let b = Distribution::uniform(3);
        assert!(kl_divergence(&a, &b).is_err());
    }

    #[test]
    fn kl_zero_reference_is_floored() {
        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        let q = Distribution::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!(kl.is_finite());
        assert!((kl - 0.5 * (0.5f64.ln() + 0.5f64.ln() - KL_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let v = [0.3, -1.2, 2.0, 0.7];
        let g = [0.5, -0.25, 1.0, 2.0];
        let tau = 0.7;
        let f = |x: &[f64]| -> f64 {
            softmax(x, tau).unwrap().probs().iter().zip(&g).map(|(p, g)| p * g).sum()
        };
        let p = softmax(&v, tau).unwrap();
        let analytic = softmax_backward(p.probs(), &g, tau);
        for i in 0..v.len() {
            let h = 1e-6;
            let mut plus = v;
            plus[i] += h;
            let mut minus = v;
            minus[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-9, "{fd} vs {}", analytic[i]);
        }
    }

    fn distribution(n: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("all zero", |w| {
            let total: f64 = w.iter().sum();
            (total > 1e-6).then(|| {
                Distribution::new(w.into_iter().map(|x| x / total).collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn softmax_is_always_a_distribution(
            v in prop::collection::vec(-1e3f64..1e3, 1..40),
            tau in 1e-3f64..1e6,
        ) {
            let d = softmax(&v, tau).unwrap();
            prop_assert!(Distribution::new(d.into_vec()).is_ok());
        }

        #[test]
        fn kl_is_nonnegative_and_zero_on_identity(
            (p, q) in (1usize..12).prop_flat_map(|n| (distribution(n), distribution(n))),
        ) {
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap() < 1e-12);
            let max_gap = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if max_gap > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
