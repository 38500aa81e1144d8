use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Granularity, Label};

/// Result of document-level sampling, with the shortfall made explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocLevelSample {
    pub dataset: Dataset,
    pub causal: usize,
    pub requested_negatives: usize,
    pub available_negatives: usize,
    pub drawn_negatives: usize,
}

impl DocLevelSample {
    pub fn shortfall(&self) -> usize {
        self.requested_negatives - self.drawn_negatives
    }
}

/// Keeps every causal inter-sentence pair and `min(n_neg, available)`
/// non-causal inter-sentence pairs drawn without replacement. The draw is a
/// pure function of the dataset order, `n_neg` and `seed`.
pub fn sample_doc_level(dataset: &Dataset, n_neg: usize, seed: u64) -> DocLevelSample {
    let inter: Vec<_> = dataset
        .pairs
        .iter()
        .filter(|p| p.granularity == Granularity::InterSentence)
        .collect();
    let negatives: Vec<usize> = inter
        .iter()
        .enumerate()
        .filter(|(_, p)| p.label == Label::NonCausal)
        .map(|(i, _)| i)
        .collect();
    let amount = n_neg.min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; inter.len()];
    for i in rand::seq::index::sample(&mut rng, negatives.len(), amount) {
        keep[negatives[i]] = true;
    }
    let mut causal = 0;
    let pairs = inter
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let is_causal = p.label == Label::Causal;
            causal += usize::from(is_causal);
            is_causal || keep[*i]
        })
        .map(|(_, p)| (*p).clone())
        .collect();
    DocLevelSample {
        dataset: Dataset {
            pairs,
            source_kind: dataset.source_kind,
            provenance: dataset.provenance.clone(),
        },
        causal,
        requested_negatives: n_neg,
        available_negatives: negatives.len(),
        drawn_negatives: amount,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::corpus::{DatasetKind, EventMention, EventPair, Provenance};

    fn pool(n_causal: usize, n_neg: usize) -> Dataset {
        let mk = |i: usize, label| {
            let a = EventMention {
                surface: "a".into(),
                char_span: (0, 1),
                sentence_index: 0,
            };
            let b = EventMention {
                surface: "b".into(),
                char_span: (2, 3),
                sentence_index: 1,
            };
            EventPair {
                pair_id: format!("p{i:04}"),
                dataset: DatasetKind::Synthetic,
                topic_id: 1,
                doc_id: format!("d{i:04}"),
                context_text: "a b".into(),
                event_a: a,
                event_b: b,
                label,
                granularity: Granularity::InterSentence,
            }
        };
        let mut pairs: Vec<EventPair> = (0..n_causal).map(|i| mk(i, Label::Causal)).collect();
        pairs.extend((n_causal..n_causal + n_neg).map(|i| mk(i, Label::NonCausal)));
        Dataset {
            pairs,
            source_kind: DatasetKind::Synthetic,
            provenance: Provenance {
                loader_version: "t".into(),
                source_digest: "x".into(),
            },
        }
    }

    #[test]
    fn shortfall_keeps_everything() {
        let s = sample_doc_level(&pool(2, 5), 9, 1);
        assert_eq!(s.dataset.pairs.len(), 7);
        assert_eq!(s.drawn_negatives, 5);
        assert_eq!(s.shortfall(), 4);
    }

    #[test]
    fn same_seed_same_selection() {
        let data = pool(3, 100);
        let ids = |s: &DocLevelSample| -> BTreeSet<String> {
            s.dataset.pairs.iter().map(|p| p.pair_id.clone()).collect()
        };
        let a = sample_doc_level(&data, 10, 42);
        let b = sample_doc_level(&data, 10, 42);
        assert_eq!(ids(&a), ids(&b));
        assert_eq!(a.dataset.pairs.len(), 13);
        assert_eq!(a.causal, 3);
        let c = sample_doc_level(&data, 10, 43);
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn intra_sentence_pairs_are_excluded() {
        let mut data = pool(1, 3);
        data.pairs[0].granularity = Granularity::IntraSentence;
        let s = sample_doc_level(&data, 10, 0);
        assert_eq!(s.causal, 0);
        assert_eq!(s.dataset.pairs.len(), 3);
    }
}
