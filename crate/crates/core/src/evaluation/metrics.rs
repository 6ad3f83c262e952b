use serde::{Deserialize, Serialize};

use super::EvalError;

/// `m[i][j]` counts samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u64>>", into = "Vec<Vec<u64>>")]
pub struct ConfusionMatrix {
    c: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self { c: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(EvalError::InvalidMatrix(format!("confusion matrix must be square, got {c} rows of lengths {:?}", rows.iter().map(Vec::len).collect::<Vec<_>>())));
        }
        Ok(Self { c, counts: rows.into_iter().flatten().collect() })
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.c + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.c + pred] += 1;
    }

    /// Number of samples whose true class is `i` (support).
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.c..(i + 1) * self.c].iter().sum()
    }

    /// Number of samples predicted as `j`.
    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.c).map(|i| self.get(i, j)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self) -> Vec<u64> {
        (0..self.c).map(|i| self.row_sum(i)).collect()
    }

    pub fn correct(&self) -> u64 {
        (0..self.c).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.c.max(1)).map(<[u64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<u64>>> for ConfusionMatrix {
    type Error = EvalError;

    fn try_from(rows: Vec<Vec<u64>>) -> Result<Self, Self::Error> {
        Self::from_rows(rows)
    }
}

impl From<ConfusionMatrix> for Vec<Vec<u64>> {
    fn from(cm: ConfusionMatrix) -> Self {
        cm.rows()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&p, &y) in preds.iter().zip(labels) {
        if let Some(&id) = [y, p].iter().find(|&&id| id >= num_classes) {
            return Err(EvalError::IdOutOfRange { id, num_classes });
        }
        cm.add(y, p);
    }
    Ok(cm)
}

/// `m[i][i] / col_i`, 0 when nothing was predicted as `i`.
pub fn per_class_precision(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.c).map(|i| ratio(cm.get(i, i), cm.col_sum(i))).collect()
}

/// `m[i][i] / row_i`, 0 for classes without support.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.c).map(|i| ratio(cm.get(i, i), cm.row_sum(i))).collect()
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    per_class_precision(cm)
        .into_iter()
        .zip(per_class_recall(cm))
        .map(|(p, r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect()
}

/// Unweighted mean over all classes, zero-support classes included.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = per_class_f1(cm);
    if f1.is_empty() {
        return 0.0;
    }
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    per_class_f1(cm).iter().zip(cm.support()).map(|(f, s)| f * s as f64).sum::<f64>() / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Weighted,
}

impl Averaging {
    pub fn score(self, cm: &ConfusionMatrix) -> f64 {
        match self {
            Averaging::Macro => macro_f1(cm),
            Averaging::Weighted => weighted_f1(cm),
        }
    }
}

impl std::str::FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "macro" => Ok(Averaging::Macro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(format!("unknown averaging {other:?} (expected macro or weighted)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn hand_counted_matrix() {
        let cm = confusion_matrix(&[1, 1], &[0, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![0, 1], vec![0, 1]]);
        let cm = confusion_matrix(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert_eq!(per_class_f1(&cm), vec![1.0; 3]);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 2), Err(EvalError::LengthMismatch { preds: 1, labels: 2 })));
        assert!(matches!(confusion_matrix(&[0, 2], &[0, 1], 2), Err(EvalError::IdOutOfRange { id: 2, .. })));
        assert!(ConfusionMatrix::from_rows(vec![vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn two_by_two_scores() {
        let cm = ConfusionMatrix::from_rows(vec![vec![3, 1], vec![2, 4]]).unwrap();
        let p = per_class_precision(&cm);
        let r = per_class_recall(&cm);
        let f = per_class_f1(&cm);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.8).abs() < 1e-12);
        assert!((r[0] - 0.75).abs() < 1e-12 && (r[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f[1] - 0.7272727272727273).abs() < 1e-12);
        assert!((macro_f1(&cm) - 0.696969696969697).abs() < 1e-12);
        assert!((weighted_f1(&cm) - 0.703030303030303).abs() < 1e-12);
    }

    #[test]
    fn empty_class_scores_zero() {
        let cm = confusion_matrix(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(per_class_f1(&cm), vec![1.0, 0.0, 0.0]);
        assert!((macro_f1(&cm) - 1.0 / 3.0).abs() < 1e-15);
        let cm = ConfusionMatrix::from_rows(vec![vec![1, 0], vec![0, 0]]).unwrap();
        assert!((macro_f1(&cm) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn json_is_nested_rows() {
        let cm = ConfusionMatrix::from_rows(vec![vec![3, 1], vec![2, 4]]).unwrap();
        let s = serde_json::to_string(&cm).unwrap();
        assert_eq!(s, "[[3,1],[2,4]]");
        assert_eq!(serde_json::from_str::<ConfusionMatrix>(&s).unwrap(), cm);
    }

    fn pairs() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..7).prop_flat_map(|c| (Just(c), prop::collection::vec((0..c, 0..c), 0..60)))
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_permutation_invariant((c, pairs) in pairs(), seed in any::<u64>()) {
            let (p, y): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion_matrix(&p, &y, c).unwrap();
            prop_assert_eq!(cm.total() as usize, pairs.len());
            for v in per_class_precision(&cm).into_iter().chain(per_class_recall(&cm)).chain(per_class_f1(&cm)) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let f1 = per_class_f1(&cm);
            prop_assert_eq!(macro_f1(&cm), f1.iter().sum::<f64>() / c as f64);

            let mut shuffled = pairs.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
            let (p2, y2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let cm2 = confusion_matrix(&p2, &y2, c).unwrap();
            prop_assert_eq!(&cm, &cm2);
            prop_assert_eq!(macro_f1(&cm), macro_f1(&cm2));
        }

        #[test]
        fn fixing_a_mistake_never_lowers_that_class((c, pairs) in pairs(), pick in any::<prop::sample::Index>()) {
            let wrong: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].0 != pairs[i].1).collect();
            prop_assume!(!wrong.is_empty());
            let i = wrong[pick.index(wrong.len())];
            let (p, y): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let before = per_class_f1(&confusion_matrix(&p, &y, c).unwrap());
            let mut fixed = p.clone();
            fixed[i] = y[i];
            let after = per_class_f1(&confusion_matrix(&fixed, &y, c).unwrap());
            prop_assert!(after[y[i]] >= before[y[i]] - 1e-15);
        }
    }
}
