//! Shared classifier interface and accuracy / sensitivity measurements.

use rayon::prelude::*;

use crate::backbone::{Backbone, LossSpec};
use crate::datastore::Dataset;
use crate::error::Result;
use crate::math::{self, Matrix};

/// Anything mapping an input image to a class distribution.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Gradient of `-log p_target(x)` with respect to `x`.
    fn target_loss_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>>;

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(math::argmax(&self.predict_proba(x)?))
    }
}

impl Classifier for Backbone {
    fn num_classes(&self) -> usize {
        Backbone::num_classes(self)
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Backbone::predict_proba(self, x)
    }

    fn target_loss_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.input_gradient(x, &LossSpec::CrossEntropy(target))
    }
}

/// Top-1 predictions for a batch of inputs, in order.
pub fn predict_all<M: Classifier + ?Sized>(model: &M, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
    inputs.par_iter().map(|x| model.predict(x)).collect()
}

/// Top-1 accuracy on `data`.
pub fn accuracy<M: Classifier + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    let correct: usize = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(usize::from(model.predict(data.image(i))? == data.label(i))))
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of `inputs` classified as `labels`.
pub fn accuracy_on<M: Classifier + ?Sized>(
    model: &M,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    let preds = predict_all(model, inputs)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Spectral norm of `jacobian(x)` for each image of `data`.
pub fn jacobian_spectral_norms<F>(data: &Dataset, jacobian: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Matrix> + Sync,
{
    (0..data.len())
        .into_par_iter()
        .map(|i| Ok(math::spectral_norm(&jacobian(data.image(i))?)))
        .collect()
}
