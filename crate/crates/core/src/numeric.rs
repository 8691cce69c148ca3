//! Small numeric helpers shared across modules.

/// Neumaier-compensated running sum.
///
/// Sums computed in different orders agree to a few ulps, which keeps
/// parallel and serial reductions interchangeable.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Compensated mean; `None` for an empty input.
pub fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let mut acc = CompensatedSum::new();
    let mut n = 0usize;
    for v in values {
        acc.add(v);
        n += 1;
    }
    (n > 0).then(|| acc.value() / n as f64)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax of `logits`. Fails on non-finite input.
pub fn softmax(logits: &[f64]) -> Option<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return None;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Some(out)
}

/// Log-probabilities of the softmax of `logits`, via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Option<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return None;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + total.ln();
    Some(logits.iter().map(|l| l - log_z).collect())
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive_on_cancellation() {
        let values = [1e16, 1.0, -1e16, 1.0];
        let acc: CompensatedSum = values.iter().copied().collect();
        assert_eq!(acc.value(), 2.0);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(softmax(&[f64::NAN, 0.0]).is_none());
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let logits = [0.3, -2.0, 5.5, 1.0];
        let p = softmax(&logits).unwrap();
        let lp = log_softmax(&logits).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-14);
        }
        let extreme = log_softmax(&[0.0, -2000.0]).unwrap();
        assert!((extreme[1] + 2000.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-500.0f64..500.0, 1..20)) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            proptest::prop_assert_eq!(argmax(&p), argmax(&logits));
        }
    }
}
