//! Evaluation metrics: base/new/overall accuracy, the harmonic H score,
//! exact Mann-Whitney AUROC and ROC curve points.
//!
//! Base examples are the positive class for every score-based metric: a
//! higher score means "more likely a base class".

use std::fmt::Write as _;

use crate::data::{LabeledExample, SpaceTag};
use crate::error::{Error, Result};

/// Harmonic mean of base and new accuracy, with `H(0, 0) = 0`.
pub fn harmonic_h(acc_base: f64, acc_new: f64) -> Result<f64> {
    for (name, v) in [("acc_base", acc_base), ("acc_new", acc_new)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("{name}={v} not in [0, 1]")));
        }
    }
    if acc_base + acc_new == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * acc_base * acc_new / (acc_base + acc_new))
}

/// Accuracy summary of one method on one test set.
///
/// `acc_base` / `acc_new` are `None` when the test set has no example of
/// that space; `h_metric` is then `None` as well.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc_base: Option<f64>,
    pub acc_new: Option<f64>,
    pub acc_overall: f64,
    pub h_metric: Option<f64>,
    pub auroc: Option<f64>,
    pub n_base: usize,
    pub n_new: usize,
}

impl EvalReport {
    pub fn with_auroc(mut self, auroc: f64) -> Self {
        self.auroc = Some(auroc);
        self
    }
}

/// Scores `predict` on every test example over the full class space.
pub fn evaluate<F>(mut predict: F, test: &[LabeledExample]) -> Result<EvalReport>
where
    F: FnMut(&LabeledExample) -> Result<usize>,
{
    if test.is_empty() {
        return Err(Error::OutOfRange("empty test set".into()));
    }
    let (mut hit_base, mut hit_new, mut n_base, mut n_new) = (0usize, 0usize, 0usize, 0usize);
    for example in test {
        let correct = predict(example)? == example.label;
        match example.space {
            SpaceTag::Base => {
                n_base += 1;
                hit_base += usize::from(correct);
            }
            SpaceTag::New => {
                n_new += 1;
                hit_new += usize::from(correct);
            }
        }
    }
    let ratio = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
    let acc_base = ratio(hit_base, n_base);
    let acc_new = ratio(hit_new, n_new);
    let h_metric = match (acc_base, acc_new) {
        (Some(b), Some(n)) => Some(harmonic_h(b, n)?),
        _ => None,
    };
    Ok(EvalReport {
        acc_base,
        acc_new,
        acc_overall: (hit_base + hit_new) as f64 / test.len() as f64,
        h_metric,
        auroc: None,
        n_base,
        n_new,
    })
}

fn check_scores(base_scores: &[f64], new_scores: &[f64]) -> Result<()> {
    if base_scores.is_empty() || new_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if base_scores.iter().chain(new_scores).any(|s| s.is_nan()) {
        return Err(Error::OutOfRange("NaN score".into()));
    }
    Ok(())
}

/// Integer pair counts `(base > new, base == new)` over all base/new pairs.
pub(crate) fn pair_counts(base_scores: &[f64], new_scores: &[f64]) -> (u64, u64) {
    let mut sorted_new = new_scores.to_vec();
    sorted_new.sort_by(f64::total_cmp);
    let mut greater = 0u64;
    let mut ties = 0u64;
    for &b in base_scores {
        let below = sorted_new.partition_point(|&n| n < b);
        let at_or_below = sorted_new.partition_point(|&n| n <= b);
        greater += below as u64;
        ties += (at_or_below - below) as u64;
    }
    (greater, ties)
}

/// Exact AUROC as the normalized Mann-Whitney statistic.
pub fn auroc(base_scores: &[f64], new_scores: &[f64]) -> Result<f64> {
    check_scores(base_scores, new_scores)?;
    let (greater, ties) = pair_counts(base_scores, new_scores);
    let pairs = base_scores.len() as u64 * new_scores.len() as u64;
    Ok((2 * greater + ties) as f64 / (2 * pairs) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve ordered from the `+inf` sentinel down to `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// `threshold,fpr,tpr` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        out
    }
}

/// ROC points at every distinct score plus `+inf` / `-inf` sentinels.
/// A score counts as positive when it is `>=` the threshold.
pub fn roc_points(base_scores: &[f64], new_scores: &[f64]) -> Result<RocCurve> {
    check_scores(base_scores, new_scores)?;
    let mut thresholds: Vec<f64> = base_scores.iter().chain(new_scores).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut base = base_scores.to_vec();
    let mut new = new_scores.to_vec();
    base.sort_by(|a, b| b.total_cmp(a));
    new.sort_by(|a, b| b.total_cmp(a));
    let (nb, nn) = (base.len() as f64, new.len() as f64);

    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 });
    let (mut ib, mut in_) = (0usize, 0usize);
    for &t in &thresholds {
        while ib < base.len() && base[ib] >= t {
            ib += 1;
        }
        while in_ < new.len() && new[in_] >= t {
            in_ += 1;
        }
        points.push(RocPoint { threshold: t, fpr: in_ as f64 / nn, tpr: ib as f64 / nb });
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fpr: 1.0, tpr: 1.0 });
    Ok(RocCurve { points })
}

/// Column order of [`eval_csv_row`].
pub const EVAL_CSV_HEADER: &str = "run_id,method,seed,acc_base,acc_new,acc_overall,h,auroc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One `run_id,method,seed,acc_base,acc_new,acc_overall,h,auroc` row
/// (no trailing newline). Undefined values are left empty.
pub fn eval_csv_row(run_id: &str, method: &str, seed: u64, report: &EvalReport) -> String {
    format!(
        "{run_id},{method},{seed},{},{},{},{},{}",
        opt(report.acc_base),
        opt(report.acc_new),
        report.acc_overall,
        opt(report.h_metric),
        opt(report.auroc)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn example(label: usize, space: SpaceTag) -> LabeledExample {
        LabeledExample { feature: vec![0.0], label, space }
    }

    fn mixed_test_set() -> Vec<LabeledExample> {
        vec![
            example(0, SpaceTag::Base),
            example(1, SpaceTag::Base),
            example(1, SpaceTag::Base),
            example(2, SpaceTag::New),
            example(3, SpaceTag::New),
        ]
    }

    #[test]
    fn h_examples() {
        assert_abs_diff_eq!(harmonic_h(0.7, 0.7).unwrap(), 0.7, epsilon = 1e-15);
        assert_eq!(harmonic_h(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_h(0.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(harmonic_h(0.8, 0.6).unwrap(), 0.96 / 1.4, epsilon = 1e-15);
        assert_abs_diff_eq!(harmonic_h(0.8, 0.6).unwrap(), 0.685714285714, epsilon = 1e-12);
        assert!(harmonic_h(1.2, 0.5).is_err());
        assert!(harmonic_h(0.5, -0.1).is_err());
    }

    #[test]
    fn perfect_predictor() {
        let test = mixed_test_set();
        let r = evaluate(|e| Ok(e.label), &test).unwrap();
        assert_eq!(r.acc_base, Some(1.0));
        assert_eq!(r.acc_new, Some(1.0));
        assert_eq!(r.acc_overall, 1.0);
        assert_eq!(r.h_metric, Some(1.0));
        assert_eq!((r.n_base, r.n_new), (3, 2));
    }

    #[test]
    fn constant_base_predictor_has_zero_h() {
        let test = mixed_test_set();
        let r = evaluate(|_| Ok(1), &test).unwrap();
        assert_eq!(r.acc_new, Some(0.0));
        assert_eq!(r.h_metric, Some(0.0));
        assert_abs_diff_eq!(r.acc_base.unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn overall_is_weighted_by_base_fraction() {
        let test = mixed_test_set();
        let r = evaluate(|e| Ok(if e.label == 2 { 2 } else { 0 }), &test).unwrap();
        let alpha = 3.0 / 5.0;
        let expect = alpha * r.acc_base.unwrap() + (1.0 - alpha) * r.acc_new.unwrap();
        assert_abs_diff_eq!(r.acc_overall, expect, epsilon = 1e-15);
    }

    #[test]
    fn missing_space_is_flagged() {
        let test = vec![example(0, SpaceTag::Base)];
        let r = evaluate(|_| Ok(0), &test).unwrap();
        assert_eq!(r.acc_new, None);
        assert_eq!(r.h_metric, None);
        assert!(evaluate(|_| Ok(0), &[]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.5, 0.5], &[0.5, 0.3, 0.5]).unwrap(), 0.5);
        // pairs: (0.9,0.5) (0.9,0.1) (0.4,0.1) win, (0.4,0.5) loses
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&[], &[0.1]), Err(Error::EmptyScores));
        assert_eq!(auroc(&[0.1], &[]), Err(Error::EmptyScores));
    }

    #[test]
    fn roc_perfect_separation_hits_corner() {
        let roc = roc_points(&[0.9, 0.8], &[0.2, 0.1]).unwrap();
        assert!(roc.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(roc.area(), 1.0);
    }

    #[test]
    fn roc_single_value_is_diagonal() {
        let roc = roc_points(&[0.4, 0.4], &[0.4]).unwrap();
        let coords: Vec<(f64, f64)> = roc.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(coords, vec![(0.0, 0.0), (1.0, 1.0), (1.0, 1.0)]);
        assert_eq!(roc.points.len(), 1 + 2);
        assert_eq!(roc.area(), 0.5);
    }

    #[test]
    fn roc_csv_layout() {
        let roc = roc_points(&[0.9, 0.4], &[0.5, 0.1]).unwrap();
        let csv = roc.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "threshold,fpr,tpr");
        assert_eq!(lines.len(), 1 + 4 + 2);
        assert_eq!(lines[1], "inf,0,0");
        assert_eq!(lines[6], "-inf,1,1");
    }

    #[test]
    fn eval_row_format() {
        let r = EvalReport {
            acc_base: Some(0.5),
            acc_new: None,
            acc_overall: 0.25,
            h_metric: None,
            auroc: Some(0.75),
            n_base: 2,
            n_new: 0,
        };
        assert_eq!(eval_csv_row("r1", "zs", 3, &r), "r1,zs,3,0.5,,0.25,,0.75");
    }

    proptest::proptest! {
        #[test]
        fn auroc_ignores_monotone_transforms(
            base in proptest::collection::vec(-5i32..5, 1..30),
            new in proptest::collection::vec(-5i32..5, 1..30),
        ) {
            let b: Vec<f64> = base.iter().map(|&x| f64::from(x)).collect();
            let n: Vec<f64> = new.iter().map(|&x| f64::from(x)).collect();
            let squash = |v: &[f64]| v.iter().map(|x| (x / 3.0).exp() * 2.0 + 1.0).collect::<Vec<_>>();
            let a = auroc(&b, &n).unwrap();
            proptest::prop_assert_eq!(a, auroc(&squash(&b), &squash(&n)).unwrap());
            // swapping roles mirrors the statistic
            proptest::prop_assert!((a + auroc(&n, &b).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn harmonic_h_lies_between_min_and_max(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let h = harmonic_h(a, b).unwrap();
            proptest::prop_assert!(h <= a.max(b) + 1e-15);
            proptest::prop_assert!(h >= a.min(b) - 1e-15);
        }

        #[test]
        fn evaluate_ignores_example_order(
            labels in proptest::collection::vec(0usize..4, 1..40),
            shift in 0usize..40,
        ) {
            let examples: Vec<LabeledExample> = labels
                .iter()
                .map(|&l| LabeledExample {
                    feature: vec![l as f64],
                    label: l,
                    space: if l < 2 { SpaceTag::Base } else { SpaceTag::New },
                })
                .collect();
            // a fixed rule that gets classes 0 and 3 right
            let rule = |e: &LabeledExample| Ok(if e.label == 0 || e.label == 3 { e.label } else { 0 });
            let mut rotated = examples.clone();
            rotated.rotate_left(shift % examples.len());
            proptest::prop_assert_eq!(evaluate(rule, &examples).unwrap(), evaluate(rule, &rotated).unwrap());
        }
    }
}
