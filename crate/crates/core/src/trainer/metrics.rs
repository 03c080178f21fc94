use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::Model;

/// Classification metrics over one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Overall fraction correct.
    pub weighted_accuracy: f64,
    /// Mean per-class recall over the classes present in the labels.
    pub unweighted_accuracy: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub n: usize,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Evaluation("cannot evaluate an empty set".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Evaluation(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(Error::Evaluation(format!("class index out of range: {y} / {p}")));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        let mut recall_sum = 0.0;
        let mut present = 0;
        for (c, row) in confusion.iter().enumerate() {
            let total: usize = row.iter().sum();
            if total > 0 {
                recall_sum += row[c] as f64 / total as f64;
                present += 1;
            }
        }
        Ok(Self {
            weighted_accuracy: correct as f64 / labels.len() as f64,
            unweighted_accuracy: recall_sum / present as f64,
            confusion,
            n: labels.len(),
        })
    }
}

/// Thread cap for evaluation, from `MMFUSE_THREADS`.
pub fn eval_threads() -> Option<usize> {
    std::env::var("MMFUSE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn predict_all(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    let run = || -> Result<Vec<usize>> { dataset.utterances.par_iter().map(|u| model.predict(u)).collect() };
    match eval_threads() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Evaluation(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Argmax predictions scored against the dataset labels.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty dataset".into()));
    }
    let preds = predict_all(model, dataset)?;
    let labels: Vec<usize> = dataset.utterances.iter().map(|u| u.label().index()).collect();
    Metrics::from_predictions(&labels, &preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 1];
        let m = Metrics::from_predictions(&y, &y).unwrap();
        assert_eq!((m.weighted_accuracy, m.unweighted_accuracy), (1.0, 1.0));
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(m.confusion[i][j], 0);
                }
            }
        }
    }

    #[test]
    fn hand_counted_case() {
        let m = Metrics::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(m.weighted_accuracy, 0.75);
        assert_eq!(m.unweighted_accuracy, 0.75);
        assert_eq!(m.confusion[0], [1, 1, 0, 0]);
        assert_eq!(m.confusion[1], [0, 2, 0, 0]);
        let total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = Metrics::from_predictions(&y, &[2; 40]).unwrap();
        assert_eq!(m.weighted_accuracy, 0.25);
        assert_eq!(m.unweighted_accuracy, 0.25);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(matches!(Metrics::from_predictions(&[], &[]), Err(Error::Evaluation(_))));
    }
}
