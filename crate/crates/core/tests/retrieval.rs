mod common;

use affectagent::envsynth::Modality;
use affectagent::retrieval::EvidenceIndex;
use common::*;
use proptest::prelude::*;

#[test]
fn knn_equals_brute_force_ranking() {
    let (mismatches, worst) = retrieval_oracle(200);
    assert_eq!(mismatches, 0);
    assert!(worst <= 1e-12, "{worst:e}");
}

proptest! {
    #[test]
    fn lists_are_sorted_unique_and_bounded(seed in any::<u64>(), k in 1usize..40) {
        let mut r = rng(seed);
        let corpus = random_corpus(&mut r, 60);
        let index = EvidenceIndex::build(corpus.clone()).unwrap();
        let q = randn(&mut r, index.dim(), 1.0);
        for m in Modality::ALL {
            let hits = index.knn(&q, m, k).unwrap();
            prop_assert_eq!(hits.len(), k.min(corpus.len()));
            for w in hits.windows(2) {
                prop_assert!(w[0].sim > w[1].sim || (w[0].sim == w[1].sim && w[0].id < w[1].id));
            }
            let mut ids: Vec<u64> = hits.iter().map(|h| h.id).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), hits.len());
        }
    }
}
