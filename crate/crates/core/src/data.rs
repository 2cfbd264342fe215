//! Labeled dense datasets and minibatches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled dataset stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    input_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::shape(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            input_dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn empty(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }

    pub fn minibatch(&self, indices: &[usize]) -> Result<Minibatch> {
        let subset = self.subset(indices);
        Minibatch::new(subset.input_dim, subset.num_classes, subset.features, subset.labels)
    }

    /// Concatenates datasets with identical dimensions.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::invalid("cannot concatenate zero datasets"))?;
        let mut out = first.clone();
        for part in iter {
            if part.input_dim != out.input_dim || part.num_classes != out.num_classes {
                return Err(Error::shape("datasets differ in input_dim or num_classes"));
            }
            out.features.extend_from_slice(&part.features);
            out.labels.extend_from_slice(&part.labels);
        }
        Ok(out)
    }
}

/// A nonempty batch of samples with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    input_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Minibatch {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("minibatch must contain at least one sample"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::shape(format!(
                "minibatch has {} feature values for {} labels of width {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            input_dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_features_and_bad_labels() {
        assert!(Dataset::new(2, 2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(Dataset::new(2, 2, vec![0.0; 4], vec![0, 2]).is_err());
        assert!(Minibatch::new(2, 2, vec![], vec![]).is_err());
    }

    #[test]
    fn subset_preserves_rows() {
        let ds = Dataset::new(2, 3, vec![0., 1., 2., 3., 4., 5.], vec![0, 1, 2]).unwrap();
        let s = ds.subset(&[2, 0]);
        assert_eq!(s.row(0), &[4., 5.]);
        assert_eq!(s.labels(), &[2, 0]);
        assert_eq!(ds.class_counts(), vec![1, 1, 1]);
    }
}
