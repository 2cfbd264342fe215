//! Update deviation, model evaluation and summary statistics.

use serde::{Deserialize, Serialize};

use crate::contrastive::cosine_similarity;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{norm, std_dev, TOLERANCES};
use crate::tensor_nn::{forward_logits, softmax_cross_entropy, ModelParams};

/// Sum over updates of `1 - cos(update, mean update)`.
///
/// Callers pass only participants' updates. An all-zero mean yields 0.
pub fn deviation(updates: &[&[f64]]) -> Result<f64> {
    let first = updates
        .first()
        .ok_or_else(|| Error::invalid("deviation needs at least one update"))?;
    let dim = first.len();
    if updates.iter().any(|u| u.len() != dim) {
        return Err(Error::shape("updates differ in length"));
    }
    let mut mean = vec![0.0; dim];
    for u in updates {
        for (m, v) in mean.iter_mut().zip(u.iter()) {
            *m += v;
        }
    }
    let n = updates.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    if norm(&mean) <= TOLERANCES.zero_norm {
        log::warn!("mean update is zero; deviation reported as 0");
        return Ok(0.0);
    }
    let mut dev = 0.0;
    for u in updates {
        dev += 1.0 - cosine_similarity(u, &mean)?;
    }
    Ok(dev.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Argmax accuracy and mean cross-entropy over `dataset`.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..dataset.len() {
        let logits = forward_logits(params, dataset.row(i))?;
        let label = dataset.label(i);
        if label >= logits.len() {
            return Err(Error::invalid(format!("label {label} outside model classes")));
        }
        // first maximum wins ties
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            .0;
        if pred == label {
            correct += 1;
        }
        loss += softmax_cross_entropy(&logits, label).0;
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Mean of the five largest values; fewer than five values are all averaged.
pub fn top5_mean(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::invalid("top-5 mean of an empty series"));
    }
    if series.len() < 5 {
        log::warn!("series has {} values; top-5 mean uses all of them", series.len());
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..sorted.len().min(5)];
    Ok(top.iter().sum::<f64>() / top.len() as f64)
}

/// Empirical CDF as `(value, fraction <= value)` at each distinct value.
pub fn node_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::invalid("CDF of an empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    Ok(out)
}

/// Standard deviation of successive differences over the last `window` values.
pub fn round_to_round_std(series: &[f64], window: usize) -> Option<f64> {
    let tail = &series[series.len().saturating_sub(window)..];
    if tail.len() < 2 {
        return None;
    }
    let diffs: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    Some(std_dev(&diffs))
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub participants: usize,
    /// `None` when nobody trained this round.
    pub deviation: Option<f64>,
    pub psi: Option<f64>,
    pub train: Evaluation,
    pub test: Evaluation,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::{Activation, Architecture};
    use proptest::prelude::*;

    #[test]
    fn deviation_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!(deviation(&[&a, &a, &a]).unwrap().abs() < 1e-15);
        assert!(deviation(&[&a]).unwrap().abs() < 1e-15);
        let d = deviation(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((d - 2.0 * (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(deviation(&[&[1.0, 0.0], &[-1.0, 0.0]]).unwrap(), 0.0);
        assert!(deviation(&[]).is_err());
    }

    #[test]
    fn top5_examples() {
        assert_eq!(top5_mean(&[0.7; 9]).unwrap(), 0.7);
        assert_eq!(top5_mean(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), 4.0);
        assert_eq!(top5_mean(&[6.0, 1.0, 4.0, 2.0, 5.0, 3.0]).unwrap(), 4.0);
        assert_eq!(top5_mean(&[1.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(node_cdf(&[0.3]).unwrap(), vec![(0.3, 1.0)]);
        assert_eq!(node_cdf(&[1.0, 0.0]).unwrap(), vec![(0.0, 0.5), (1.0, 1.0)]);
        assert_eq!(node_cdf(&[1.0, 1.0]).unwrap(), vec![(1.0, 1.0)]);
    }

    #[test]
    fn round_to_round_std_uses_differences() {
        assert_eq!(round_to_round_std(&[1.0, 2.0, 3.0, 4.0], 10), Some(0.0));
        assert_eq!(round_to_round_std(&[5.0, 0.0, 1.0, 0.0], 3), Some(1.0));
        assert_eq!(round_to_round_std(&[1.0], 10), None);
    }

    fn tiny_model() -> ModelParams {
        let arch = Architecture {
            input_dim: 2,
            encoder: vec![2],
            projection: vec![2],
            classifier: vec![2],
            activation: Activation::Identity,
        };
        let mut p = ModelParams::zeros(&arch).unwrap();
        for l in 0..3 {
            p.layer_weights_mut(l).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        p
    }

    #[test]
    fn evaluate_examples() {
        let p = tiny_model();
        let one = Dataset::new(2, 2, vec![2.0, 0.0], vec![0]).unwrap();
        assert_eq!(evaluate(&p, &one).unwrap().accuracy, 1.0);

        let zero = ModelParams::zeros(p.architecture()).unwrap();
        let ds = Dataset::new(2, 2, vec![2.0, 0.0, 0.1, 0.7, -1.0, 3.0], vec![0, 1, 1]).unwrap();
        assert!((evaluate(&zero, &ds).unwrap().loss - 2f64.ln()).abs() < 1e-15);

        // per-sample oracle
        let e = evaluate(&p, &ds).unwrap();
        let mut loss = 0.0;
        let mut correct = 0;
        for i in 0..ds.len() {
            let x = ds.row(i);
            let (a, b) = (x[0], x[1]);
            let lse = (a.exp() + b.exp()).ln();
            loss += lse - x[ds.label(i)];
            if (a >= b) == (ds.label(i) == 0) {
                correct += 1;
            }
        }
        assert!((e.loss - loss / 3.0).abs() < 1e-14);
        assert_eq!(e.accuracy, correct as f64 / 3.0);
        assert!(evaluate(&p, &Dataset::empty(2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn deviation_invariances(
            ups in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
            c in 0.01f64..50.0,
        ) {
            let refs: Vec<&[f64]> = ups.iter().map(Vec::as_slice).collect();
            let base = deviation(&refs).unwrap();
            prop_assert!(base >= 0.0);
            let scaled: Vec<Vec<f64>> = ups.iter().map(|u| u.iter().map(|v| v * c).collect()).collect();
            let srefs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
            prop_assert!((deviation(&srefs).unwrap() - base).abs() < 1e-9);
            let mut rev = refs.clone();
            rev.reverse();
            prop_assert!((deviation(&rev).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn cdf_is_monotone(values in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let cdf = node_cdf(&values).unwrap();
            for w in cdf.windows(2) {
                prop_assert!(w[0].0 < w[1].0);
                prop_assert!(w[0].1 < w[1].1);
            }
            prop_assert_eq!(cdf.last().unwrap().1, 1.0);
        }
    }
}
