//! Top-1 accuracy of a global model.

use crate::data::Dataset;
use crate::error::{input_err, Result};
use crate::nn::{predict, ModelParams, ModelTopology};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor<f32>) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best }))
        .collect())
}

/// Fraction of test samples whose arg-max logit equals the label, with batch
/// norm at the running statistics.
pub fn evaluate_accuracy(topology: &ModelTopology, model: &ModelParams<f32>, test_set: &Dataset) -> Result<f64> {
    if test_set.is_empty() {
        return input_err("cannot evaluate on an empty test set");
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < test_set.len() {
        let count = EVAL_BATCH.min(test_set.len() - start);
        let logits = predict(topology, model, &test_set.images.slice_batch(start, count)?)?;
        correct += argmax_rows(&logits)?
            .iter()
            .zip(&test_set.labels[start..start + count])
            .filter(|(p, l)| p == l)
            .count();
        start += count;
    }
    Ok(correct as f64 / test_set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        let t = Tensor::new(vec![3, 3], vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0, 3.0, -1.0, 3.0]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![0, 1, 0]);
    }
}
