//! Multi-class evaluation: macro one-vs-rest ROC AUC with midrank tie
//! handling, plus argmax accuracy as an auxiliary diagnostic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores must be a nonempty n x k matrix with k >= 2, got {0:?}")]
    BadScores(Vec<usize>),
    #[error("scores have {rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("AUC is undefined when every label is the same class")]
    SingleClassLabels,
}

/// Class scores (not necessarily normalized) paired with true labels.
#[derive(Debug, Clone)]
pub struct ScoredPredictions {
    scores: Tensor,
    labels: Vec<usize>,
}

impl ScoredPredictions {
    pub fn new(scores: Tensor, labels: Vec<usize>) -> Result<Self, MetricsError> {
        let shape = scores.shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] < 2 {
            return Err(MetricsError::BadScores(shape));
        }
        if shape[0] != labels.len() {
            return Err(MetricsError::LengthMismatch {
                rows: shape[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
            return Err(MetricsError::LabelOutOfRange {
                label: bad,
                classes: shape[1],
            });
        }
        Ok(ScoredPredictions { scores, labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Binary ROC AUC of one score column via the Mann-Whitney statistic with
/// midranks for tied scores.
fn binary_auc_midrank(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n = scores.len();
    let pos = positives.iter().filter(|&&p| p).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the mean rank of the run.
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positives[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// One-vs-rest AUC per class, `None` for classes absent from the labels.
pub fn per_class_auc(preds: &ScoredPredictions) -> Result<Vec<Option<f64>>, MetricsError> {
    let k = preds.classes();
    let n = preds.n();
    let first = preds.labels[0];
    if preds.labels.iter().all(|&y| y == first) {
        return Err(MetricsError::SingleClassLabels);
    }
    let mut out = Vec::with_capacity(k);
    for class in 0..k {
        if !preds.labels.contains(&class) {
            out.push(None);
            continue;
        }
        let column: Vec<f64> = (0..n).map(|i| preds.scores.at2(i, class)).collect();
        let positives: Vec<bool> = preds.labels.iter().map(|&y| y == class).collect();
        out.push(binary_auc_midrank(&column, &positives));
    }
    Ok(out)
}

/// Macro-average one-vs-rest AUC over the classes present in the labels.
pub fn multiclass_auc(preds: &ScoredPredictions) -> Result<f64, MetricsError> {
    let per_class = per_class_auc(preds)?;
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Fraction of rows whose argmax score matches the label; argmax ties are
/// broken by the lowest class index.
pub fn accuracy(preds: &ScoredPredictions) -> f64 {
    let n = preds.n();
    let k = preds.classes();
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..k {
            let s = preds.scores.at2(i, c);
            if s > best.0 {
                best = (s, c);
            }
        }
        if best.1 == preds.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Per-task AUC and accuracy over one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAuc {
    pub distribution: Option<f64>,
    pub morphology: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub distribution_auc: Option<f64>,
    pub morphology_auc: Option<f64>,
    pub per_class_auc: PerClassAuc,
    pub accuracy: TaskAccuracy,
    pub n_nodes: usize,
    pub n_graphs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassAuc {
    pub distribution: Vec<Option<f64>>,
    pub morphology: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub distribution: f64,
    pub morphology: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds(rows: &[Vec<f64>], labels: &[usize]) -> ScoredPredictions {
        ScoredPredictions::new(Tensor::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation_is_one() {
        let p = preds(
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
            &[0, 0, 1, 1],
        );
        assert_eq!(multiclass_auc(&p).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_are_chance_via_midranks() {
        let p = preds(
            &[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]],
            &[0, 1, 0, 1],
        );
        assert_eq!(multiclass_auc(&p).unwrap(), 0.5);
    }

    #[test]
    fn three_class_hand_case_matches_pair_counting() {
        let rows = vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.2, 0.2, 0.6],
            vec![0.4, 0.4, 0.2],
            vec![0.1, 0.6, 0.3],
            vec![0.3, 0.1, 0.6],
        ];
        let labels = vec![0, 1, 2, 0, 1, 2];
        let p = preds(&rows, &labels);
        let got = multiclass_auc(&p).unwrap();
        let want = reference::pair_counting_multiclass_auc(p.scores(), &labels).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn all_identical_labels_error() {
        let p = preds(&[vec![0.1, 0.9], vec![0.8, 0.2]], &[1, 1]);
        assert!(matches!(
            multiclass_auc(&p),
            Err(MetricsError::SingleClassLabels)
        ));
    }

    #[test]
    fn absent_class_is_excluded_from_macro() {
        let p = preds(
            &[vec![0.9, 0.05, 0.05], vec![0.1, 0.8, 0.1], vec![0.7, 0.2, 0.1]],
            &[0, 1, 0],
        );
        let per = per_class_auc(&p).unwrap();
        assert!(per[0].is_some() && per[1].is_some() && per[2].is_none());
    }

    #[test]
    fn accuracy_one_hot_and_adversarial() {
        let p = preds(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        assert_eq!(accuracy(&p), 1.0);
        let p = preds(&[vec![0.0, 1.0], vec![0.0, 1.0]], &[0, 0]);
        assert_eq!(accuracy(&p), 0.0);
    }

    #[test]
    fn accuracy_ties_break_to_lowest_class() {
        let p = preds(&[vec![0.5, 0.5]], &[0]);
        assert_eq!(accuracy(&p), 1.0);
        let p = preds(&[vec![0.5, 0.5]], &[1]);
        assert_eq!(accuracy(&p), 0.0);
    }

    #[test]
    fn accuracy_matches_direct_count_on_seeded_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.gen_range(0..3)).collect();
        let p = preds(&rows, &labels);
        let mut count = 0;
        for (row, &y) in rows.iter().zip(&labels) {
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == y {
                count += 1;
            }
        }
        assert_eq!(accuracy(&p), count as f64 / 40.0);
    }

    proptest! {
        /// Strictly increasing transforms of one class column leave that
        /// class's one-vs-rest AUC unchanged.
        #[test]
        fn monotone_transform_invariance(
            seed in 0u64..500,
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let base = per_class_auc(&preds(&rows, &labels)).unwrap();

            let transformed: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r[1] = (r[1] * scale + shift).exp();
                    r
                })
                .collect();
            let after = per_class_auc(&preds(&transformed, &labels)).unwrap();
            prop_assert!((base[1].unwrap() - after[1].unwrap()).abs() < 1e-12);
        }

        /// Negating scores maps each per-class AUC a to 1 - a.
        #[test]
        fn complement_symmetry(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 15;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| (rng.gen::<f64>() * 4.0).round() / 4.0).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let base = per_class_auc(&preds(&rows, &labels)).unwrap();
            let negated: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            let after = per_class_auc(&preds(&negated, &labels)).unwrap();
            for (a, b) in base.iter().zip(&after) {
                prop_assert!((a.unwrap() - (1.0 - b.unwrap())).abs() < 1e-12);
            }
        }

        /// Midrank AUC equals exhaustive pair counting.
        #[test]
        fn pair_counting_equivalence(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(6..60);
            let k = rng.gen_range(2..5);
            // Quantized scores so ties actually occur.
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| (rng.gen::<f64>() * 5.0).round() / 5.0).collect())
                .collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            labels[0] = 0;
            labels[1] = 1; // ensure at least two classes
            let p = preds(&rows, &labels);
            let got = multiclass_auc(&p).unwrap();
            let want = reference::pair_counting_multiclass_auc(p.scores(), &labels).unwrap();
            prop_assert!((got - want).abs() < 1e-12);
        }
    }
}
