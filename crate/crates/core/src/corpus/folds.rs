use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One topic-level train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    /// 1-based.
    pub fold_index: usize,
    pub train_topics: BTreeSet<u32>,
    pub test_topics: BTreeSet<u32>,
}

/// Sorts topics ascending and cuts them into `k` contiguous blocks; fold `i`
/// tests on block `i` and trains on the rest. When the topic count is not a
/// multiple of `k`, the earliest blocks take one extra topic each.
pub fn make_folds(topic_ids: &[u32], k: usize) -> Result<Vec<FoldSpec>> {
    let topics: Vec<u32> = topic_ids
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if k == 0 {
        return Err(Error::Config("fold count k must be at least 1".into()));
    }
    if k > topics.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} topic(s)",
            topics.len()
        )));
    }
    let (base, extra) = (topics.len() / k, topics.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let test: BTreeSet<u32> = topics[start..start + len].iter().copied().collect();
        let train = topics.iter().copied().filter(|t| !test.contains(t)).collect();
        folds.push(FoldSpec {
            fold_index: i + 1,
            train_topics: train,
            test_topics: test,
        });
        start += len;
    }
    Ok(folds)
}

/// The fixed analysis split: the first `n_train` ascending topics train, the
/// remainder test.
pub fn analysis_split(topic_ids: &[u32], n_train: usize) -> Result<FoldSpec> {
    let topics: Vec<u32> = topic_ids
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if n_train == 0 || n_train >= topics.len() {
        return Err(Error::Config(format!(
            "analysis split needs 0 < n_train < {} topics, got {n_train}",
            topics.len()
        )));
    }
    Ok(FoldSpec {
        fold_index: 0,
        train_topics: topics[..n_train].iter().copied().collect(),
        test_topics: topics[n_train..].iter().copied().collect(),
    })
}
