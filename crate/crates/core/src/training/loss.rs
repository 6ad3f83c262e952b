use super::{ClassWeights, TrainError};
use crate::autograd::{Graph, Var};

/// `mean_i w[y_i] * CE(softmax(z_i), smoothed one-hot(y_i))`, where the
/// smoothed target puts `1 - s + s/C` on the true class and `s/C` elsewhere.
pub fn weighted_cross_entropy(
    g: &Graph,
    logits: &Var,
    labels: &[usize],
    weights: &ClassWeights,
    smoothing: f32,
) -> Result<Var, TrainError> {
    let [n, c] = logits.shape() else {
        return Err(TrainError::ShapeMismatch(format!("logits must be (N, C), got {:?}", logits.shape())));
    };
    if *n != labels.len() || *n == 0 {
        return Err(TrainError::ShapeMismatch(format!("{n} logit rows for {} labels", labels.len())));
    }
    if weights.len() != *c {
        return Err(TrainError::ShapeMismatch(format!("{} class weights for {c} classes", weights.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= *c) {
        return Err(TrainError::LabelOutOfRange { label, num_classes: *c });
    }
    if !(0.0..0.5).contains(&smoothing) {
        return Err(TrainError::InvalidConfig(format!("label smoothing {smoothing} outside [0, 0.5)")));
    }
    Ok(g.weighted_cross_entropy(logits, labels, &weights.to_f32(), smoothing))
}
