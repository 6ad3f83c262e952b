use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    #[default]
    InverseFrequency,
    /// `(1 - beta) / (1 - beta^n)` per class.
    EffectiveNumber,
}

impl ClassWeighting {
    pub const NAMES: [&'static str; 3] = ["none", "inverse_frequency", "effective_number"];
}

impl std::str::FromStr for ClassWeighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(Self::None),
            "inverse_frequency" => Ok(Self::InverseFrequency),
            "effective_number" => Ok(Self::EffectiveNumber),
            other => Err(format!("unknown class weighting {other:?} (expected one of {})", Self::NAMES.join(", "))),
        }
    }
}

/// Positive per-class loss weights with mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&w| w as f32).collect()
    }
}

pub fn compute_class_weights(counts: &[usize], scheme: ClassWeighting, beta: f64) -> Result<ClassWeights, TrainError> {
    if counts.iter().all(|&c| c == 0) {
        return Err(TrainError::AllZeroCounts);
    }
    let c = counts.len() as f64;
    let total: usize = counts.iter().sum();
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&n| {
            (n > 0).then(|| match scheme {
                ClassWeighting::None => 1.0,
                ClassWeighting::InverseFrequency => total as f64 / (c * n as f64),
                ClassWeighting::EffectiveNumber => (1.0 - beta) / (1.0 - beta.powi(n as i32)),
            })
        })
        .collect();
    if scheme == ClassWeighting::None {
        return Ok(ClassWeights::uniform(counts.len()));
    }
    let max = raw.iter().flatten().fold(f64::MIN, |m, &w| m.max(w));
    let filled: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(max)).collect();
    let mean = filled.iter().sum::<f64>() / c;
    Ok(ClassWeights(filled.into_iter().map(|w| w / mean).collect()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn documented_cases() {
        for scheme in [ClassWeighting::None, ClassWeighting::InverseFrequency, ClassWeighting::EffectiveNumber] {
            assert_eq!(compute_class_weights(&[10, 10], scheme, 0.999).unwrap().values(), &[1.0, 1.0]);
        }
        let w = compute_class_weights(&[30, 10], ClassWeighting::InverseFrequency, 0.999).unwrap();
        assert!((w.values()[0] - 0.5).abs() < 1e-12 && (w.values()[1] - 1.5).abs() < 1e-12);
        assert_eq!(compute_class_weights(&[30, 10, 0], ClassWeighting::None, 0.999).unwrap().values(), &[1.0; 3]);
        assert!(matches!(compute_class_weights(&[0, 0], ClassWeighting::InverseFrequency, 0.999), Err(TrainError::AllZeroCounts)));
    }

    #[test]
    fn zero_count_gets_largest_weight() {
        let w = compute_class_weights(&[20, 30, 0], ClassWeighting::InverseFrequency, 0.999).unwrap();
        let raw = [50.0 / 60.0, 50.0 / 90.0, 50.0 / 60.0];
        let mean: f64 = raw.iter().sum::<f64>() / 3.0;
        for (got, r) in w.values().iter().zip(raw) {
            assert!((got - r / mean).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_number_matches_formula() {
        let beta: f64 = 0.99;
        let w = compute_class_weights(&[100, 5], ClassWeighting::EffectiveNumber, beta).unwrap();
        let raw = [(1.0 - beta) / (1.0 - beta.powi(100)), (1.0 - beta) / (1.0 - beta.powi(5))];
        let mean = (raw[0] + raw[1]) / 2.0;
        assert!((w.values()[0] - raw[0] / mean).abs() < 1e-12);
        assert!((w.values()[1] - raw[1] / mean).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_positive_mean_one(counts in prop::collection::vec(0usize..500, 2..10), eff in any::<bool>()) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let scheme = if eff { ClassWeighting::EffectiveNumber } else { ClassWeighting::InverseFrequency };
            let w = compute_class_weights(&counts, scheme, 0.999).unwrap();
            prop_assert!(w.values().iter().all(|&v| v > 0.0));
            let mean = w.values().iter().sum::<f64>() / counts.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
            // Rarer (nonzero) classes never get less weight.
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] > 0 && counts[j] > 0 && counts[i] < counts[j] {
                        prop_assert!(w.values()[i] >= w.values()[j] - 1e-12);
                    }
                }
            }
        }
    }
}
