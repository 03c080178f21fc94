use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_sessions: Vec<u32>,
    pub test_session: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Leave-one-session-out plan: fold `i` tests on the `i`-th session (in
/// ascending order) and trains on all others.
pub fn make_folds(dataset: &Dataset, k: usize) -> Result<FoldPlan> {
    let sessions = dataset.sessions();
    if sessions.len() != k {
        return Err(Error::Config(format!(
            "fold count {k} does not match the {} distinct sessions in the dataset",
            sessions.len()
        )));
    }
    let folds = sessions
        .iter()
        .map(|&test| Fold {
            train_sessions: sessions.iter().copied().filter(|&s| s != test).collect(),
            test_session: test,
        })
        .collect();
    Ok(FoldPlan { folds })
}
