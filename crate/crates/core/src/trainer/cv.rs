use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{evaluate, train, EpochRecord, Metrics, TrainConfig};
use crate::augment::{AugmentConfig, AugmentedView};
use crate::data::{make_folds, Dataset};
use crate::error::Result;
use crate::model::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_session: u32,
    pub train_sessions: Vec<u32>,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
    /// Utterances that contributed gradients in this fold.
    pub train_ids: BTreeSet<String>,
    /// Utterances the fold metrics were computed on.
    pub test_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Arithmetic mean of the per-fold weighted accuracies.
    pub mean_wa: f64,
    pub mean_ua: f64,
}

/// Leave-one-session-out cross-validation with a fresh model per fold.
pub fn cross_validate(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    augment: &AugmentConfig,
    pairs: Option<&BTreeMap<String, AugmentedView>>,
) -> Result<CvReport> {
    cross_validate_with(dataset, model_config, train_config, augment, pairs, |_, _| Ok(()))
}

/// [`cross_validate`] with a callback receiving each finished fold and its
/// trained model.
pub fn cross_validate_with<F>(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    augment: &AugmentConfig,
    pairs: Option<&BTreeMap<String, AugmentedView>>,
    mut on_fold: F,
) -> Result<CvReport>
where
    F: FnMut(&FoldResult, &Model) -> Result<()>,
{
    let plan = make_folds(dataset, dataset.sessions().len())?;
    let mut folds = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        let train_set = dataset.subset_sessions(&fold.train_sessions);
        let test_set = dataset.subset_sessions(&[fold.test_session]);
        let mut model = Model::new(model_config.clone(), train_config.seed)?;
        let outcome = train(&mut model, &train_set, train_config, augment, pairs)?;
        let metrics = evaluate(&model, &test_set)?;
        let result = FoldResult {
            test_session: fold.test_session,
            train_sessions: fold.train_sessions.clone(),
            metrics,
            history: outcome.history,
            train_ids: outcome.seen_ids,
            test_ids: test_set.utterances.iter().map(|u| u.id.clone()).collect(),
        };
        on_fold(&result, &model)?;
        folds.push(result);
    }
    let k = folds.len() as f64;
    let mean_wa = folds.iter().map(|f| f.metrics.weighted_accuracy).sum::<f64>() / k;
    let mean_ua = folds.iter().map(|f| f.metrics.unweighted_accuracy).sum::<f64>() / k;
    Ok(CvReport { folds, mean_wa, mean_ua })
}
