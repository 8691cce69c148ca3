//! Otsu and AUROC against exhaustive reference computations.

use openworld::decoop::{otsu_threshold, OTSU_TIE_TOLERANCE};
use openworld::metrics::{auroc, roc_points};
use openworld::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tries every cut between distinct sorted values, recomputing both class
/// means from scratch each time.
fn otsu_brute_force(scores: &[f64]) -> Option<f64> {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let n = scores.len() as f64;
    let mut cuts = Vec::new();
    for w in distinct.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let low: Vec<f64> = scores.iter().copied().filter(|&s| s < t).collect();
        let high: Vec<f64> = scores.iter().copied().filter(|&s| s > t).collect();
        let mu = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let w0 = low.len() as f64 / n;
        let w1 = high.len() as f64 / n;
        cuts.push((t, w0 * w1 * (mu(&low) - mu(&high)).powi(2)));
    }
    let best = cuts.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    cuts.iter().find(|c| c.1 >= best - OTSU_TIE_TOLERANCE * best.abs()).map(|c| c.0)
}

fn random_multiset(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=64);
    // a coarse grid on half the draws forces repeated values
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            if coarse {
                f64::from(rng.random_range(0..6)) / 5.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect()
}

#[test]
fn otsu_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let scores = random_multiset(&mut rng);
        match otsu_brute_force(&scores) {
            Some(t) => assert_eq!(otsu_threshold(&scores).unwrap(), t, "{scores:?}"),
            None => assert_eq!(otsu_threshold(&scores), Err(Error::DegenerateScores)),
        }
    }
}

#[test]
fn otsu_breaks_exact_ties_towards_the_smaller_cut() {
    // mirror-symmetric samples give two cuts of equal variance
    let scores = [0.0, 0.0, 1.0, 2.0, 2.0];
    assert_eq!(otsu_threshold(&scores).unwrap(), otsu_brute_force(&scores).unwrap());
    assert_eq!(otsu_threshold(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
}

fn auroc_brute_force(base: &[f64], new: &[f64]) -> f64 {
    let (mut greater, mut ties) = (0u64, 0u64);
    for &b in base {
        for &n in new {
            if b > n {
                greater += 1;
            } else if b == n {
                ties += 1;
            }
        }
    }
    let pairs = base.len() as u64 * new.len() as u64;
    (2 * greater + ties) as f64 / (2 * pairs) as f64
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..50);
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| if coarse { f64::from(rng.random_range(-3..4)) } else { rng.random_range(-1.0..1.0) })
        .collect()
}

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let base = random_scores(&mut rng);
        let new = random_scores(&mut rng);
        let exact = auroc(&base, &new).unwrap();
        assert_eq!(exact, auroc_brute_force(&base, &new));
        let area = roc_points(&base, &new).unwrap().area();
        assert!((area - exact).abs() <= 1e-12, "area {area} vs {exact}");
    }
}

#[test]
fn roc_curve_is_monotone_with_sentinels() {
    let curve = roc_points(&[0.9, 0.4, 0.4], &[0.4, 0.1]).unwrap();
    let first = curve.points.first().unwrap();
    let last = curve.points.last().unwrap();
    assert_eq!((first.threshold, first.fpr, first.tpr), (f64::INFINITY, 0.0, 0.0));
    assert_eq!((last.threshold, last.fpr, last.tpr), (f64::NEG_INFINITY, 1.0, 1.0));
    for w in curve.points.windows(2) {
        assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold);
    }
    assert!(auroc(&[], &[1.0]).is_err());
}
