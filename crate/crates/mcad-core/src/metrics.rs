//! Evaluation metrics: image-level AUROC (Mann-Whitney with 0.5 tie
//! credit), pixel-level AUPR (threshold sweep with ties grouped), and the
//! two toy-experiment diagnostics quantifying the identity-shortcut and
//! inter-class-interference phenomena.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("scores and labels must have equal nonzero length")]
    LengthMismatch,
    #[error("metric needs both classes present (got {positives} positives of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("interference index needs at least 2 class means")]
    TooFewMeans,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Scores with binary labels (1 = anomalous).
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch);
        }
        Ok(ScoredSet { scores, labels })
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Probability that a random anomalous score exceeds a random normal score,
/// ties counted half.
pub fn auroc(s: &ScoredSet) -> Result<f64, MetricsError> {
    let pos = s.positives();
    let neg = s.scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass {
            positives: pos,
            total: s.scores.len(),
        });
    }
    // Rank-sum form with average ranks over ties.
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s.scores[idx[j + 1]] == s.scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if s.labels[k] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under precision-recall: descending threshold sweep over distinct
/// scores (ties grouped), `sum (R_t - R_prev) * P_t`, positives = anomalous.
pub fn aupr(s: &ScoredSet) -> Result<f64, MetricsError> {
    let pos = s.positives();
    if pos == 0 {
        return Err(MetricsError::SingleClass {
            positives: 0,
            total: s.scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut area = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s.scores[idx[j + 1]] == s.scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if s.labels[k] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// Fraction of grid cells *outside* the normal region whose score falls
/// below `threshold`. High values mean the model reconstructs everything —
/// the identity shortcut.
pub fn shortcut_index(grid: &[f64], normal_region: &[bool], threshold: f64) -> f64 {
    assert_eq!(grid.len(), normal_region.len(), "grid/mask size mismatch");
    let mut below = 0usize;
    let mut total = 0usize;
    for (v, &inside) in grid.iter().zip(normal_region) {
        if !inside {
            total += 1;
            if *v < threshold {
                below += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        below as f64 / total as f64
    }
}

/// Score at inter-class midpoints relative to the mean score at the class
/// means themselves (denominator floored). A LOW ratio means the space
/// between classes is wrongly treated as normal — inter-class interference.
pub fn interference_index(
    mut score_fn: impl FnMut(f64, f64) -> f64,
    class_means: &[(f64, f64)],
) -> Result<f64, MetricsError> {
    if class_means.len() < 2 {
        return Err(MetricsError::TooFewMeans);
    }
    let mut mid_sum = 0.0;
    let mut mid_count = 0usize;
    for i in 0..class_means.len() {
        for j in i + 1..class_means.len() {
            let (a, b) = (class_means[i], class_means[j]);
            mid_sum += score_fn(0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1));
            mid_count += 1;
        }
    }
    let mean_err: f64 = class_means
        .iter()
        .map(|&(x, y)| score_fn(x, y))
        .sum::<f64>()
        / class_means.len() as f64;
    Ok((mid_sum / mid_count as f64) / mean_err.max(1e-6))
}

/// One row of the fixed-header metrics CSV.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub run_id: String,
    pub dataset: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "run_id,dataset,seed,metric,value";

/// Append rows to a metrics CSV, writing the header if the file is new.
pub fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), MetricsError> {
    let new = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.run_id, r.dataset, r.seed, r.metric, r.value
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    /// O(n^2) pairwise oracle with explicit 0.5 tie credit.
    fn auroc_bruteforce(s: &ScoredSet) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0usize;
        for i in 0..s.scores.len() {
            for j in 0..s.scores.len() {
                if s.labels[i] != 0 && s.labels[j] == 0 {
                    pairs += 1;
                    if s.scores[i] > s.scores[j] {
                        num += 1.0;
                    } else if s.scores[i] == s.scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs as f64
    }

    /// Exhaustive threshold sweep recomputing precision/recall from scratch
    /// at every distinct score.
    fn aupr_bruteforce(s: &ScoredSet) -> f64 {
        let mut thresholds: Vec<f64> = s.scores.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = s.labels.iter().filter(|&&l| l != 0).count() as f64;
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for i in 0..s.scores.len() {
                if s.scores[i] >= t {
                    if s.labels[i] != 0 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / pos;
            let precision = tp / (tp + fp);
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    fn random_set(n: usize, p: f64, tie_prob: f64, seed: u64) -> ScoredSet {
        let mut s = RngStream::from_seed(seed).split("set");
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if s.uniform() < tie_prob {
                (s.below(5) as f64) / 4.0
            } else {
                s.normal()
            };
            scores.push(v);
            labels.push(u8::from(s.uniform() < p));
        }
        // Ensure both classes.
        labels[0] = 0;
        labels[1] = 1;
        ScoredSet::new(scores, labels).unwrap()
    }

    #[test]
    fn auroc_perfect_separation_is_one() {
        let s = ScoredSet::new(vec![0.1, 0.2, 0.9, 1.7], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let s = ScoredSet::new(vec![3.0; 6], vec![0, 1, 0, 1, 0, 1]).unwrap();
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_errors() {
        let s = ScoredSet::new(vec![1.0, 2.0], vec![1, 1]).unwrap();
        assert!(matches!(
            auroc(&s),
            Err(MetricsError::SingleClass { .. })
        ));
    }

    #[test]
    fn auroc_matches_bruteforce_with_ties() {
        for seed in 0..20 {
            let s = random_set(50, 0.4, 0.5, seed);
            let fast = auroc(&s).unwrap();
            let slow = auroc_bruteforce(&s);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_label_flip_complements_without_ties() {
        for seed in 100..110 {
            let mut s = random_set(60, 0.3, 0.0, seed);
            let a = auroc(&s).unwrap();
            for l in &mut s.labels {
                *l = 1 - *l;
            }
            let b = auroc(&s).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aupr_perfect_separation_is_one() {
        let s = ScoredSet::new(vec![0.1, 0.2, 0.9, 1.7], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(aupr(&s).unwrap(), 1.0);
    }

    #[test]
    fn aupr_random_scores_near_positive_rate() {
        let n = 10_000;
        let p = 0.2;
        let mut s = RngStream::from_seed(55).split("rand");
        let scores: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(s.uniform() < p)).collect();
        let set = ScoredSet::new(scores, labels).unwrap();
        let v = aupr(&set).unwrap();
        assert!((v - p).abs() < 0.05, "aupr {v} vs positive rate {p}");
    }

    #[test]
    fn aupr_matches_exhaustive_sweep() {
        for seed in 200..220 {
            let s = random_set(30, 0.35, 0.4, seed);
            let fast = aupr(&s).unwrap();
            let slow = aupr_bruteforce(&s);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn aupr_without_positives_errors() {
        let s = ScoredSet::new(vec![1.0, 2.0], vec![0, 0]).unwrap();
        assert!(aupr(&s).is_err());
    }

    #[test]
    fn shortcut_index_extremes() {
        let grid = vec![5.0, 5.0, 5.0, 0.0];
        let mask = vec![false, false, false, true];
        assert_eq!(shortcut_index(&grid, &mask, 1.0), 0.0);
        assert_eq!(shortcut_index(&grid, &mask, 10.0), 1.0);
    }

    #[test]
    fn interference_index_geometry_and_constant() {
        // Squared distance to the nearest mean: zero at means (floored
        // denominator), large at the midpoint.
        let means = [(-2.0, 0.0), (2.0, 0.0)];
        let sqdist = |x: f64, y: f64| {
            means
                .iter()
                .map(|&(mx, my)| (x - mx) * (x - mx) + (y - my) * (y - my))
                .fold(f64::MAX, f64::min)
        };
        let r = interference_index(sqdist, &means).unwrap();
        assert!(r > 1e5, "expected huge ratio, got {r}");

        let r = interference_index(|_, _| 3.0, &means).unwrap();
        assert!((r - 1.0).abs() < 1e-12);

        assert!(interference_index(|_, _| 1.0, &means[..1]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_and_aupr_equal_oracles(seed in 0u64..500) {
            let s = random_set(40, 0.3, 0.3, seed);
            prop_assert!((auroc(&s).unwrap() - auroc_bruteforce(&s)).abs() < 1e-12);
            prop_assert!((aupr(&s).unwrap() - aupr_bruteforce(&s)).abs() < 1e-12);
        }

        #[test]
        fn metrics_invariant_under_increasing_transform(seed in 0u64..200) {
            let s = random_set(40, 0.3, 0.3, seed);
            let t = ScoredSet::new(
                s.scores.iter().map(|&v| (0.5 * v).exp() + 2.0 * v).collect(),
                s.labels.clone(),
            ).unwrap();
            prop_assert!((auroc(&s).unwrap() - auroc(&t).unwrap()).abs() < 1e-12);
            prop_assert!((aupr(&s).unwrap() - aupr(&t).unwrap()).abs() < 1e-12);
        }
    }
}
