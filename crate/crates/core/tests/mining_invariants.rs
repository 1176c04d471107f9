mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refine_core::{select_negatives, EmbeddingVector, NegativeMiningConfig, VectorStore};

#[test]
fn fuzzed_stores_never_break_mining_rules() {
    let cfg = NegativeMiningConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut banded = 0;
    for _ in 0..200 {
        let n = rng.random_range(6..=120);
        let dim = rng.random_range(2..=12);
        let entries = oracles::random_entries(&mut rng, n, dim);
        let mut store = VectorStore::new(dim);
        for (id, v) in &entries {
            store
                .insert(id.clone(), EmbeddingVector::new(v.clone()).unwrap())
                .unwrap();
        }
        let query = oracles::random_entries(&mut rng, 1, dim).remove(0).1;
        let positive = entries[rng.random_range(0..n)].0.clone();
        let sel = select_negatives(
            &EmbeddingVector::new(query.clone()).unwrap(),
            &store,
            &positive,
            &cfg,
        )
        .unwrap();
        banded += usize::from(!sel.used_fallback);
        assert!(sel.doc_ids.len() <= cfg.negatives_per_query);
        let violation = oracles::mining_violation(
            &entries,
            &query,
            &positive,
            &sel.doc_ids,
            cfg.retrieve_depth,
            cfg.exclude_top,
            (cfg.band_low, cfg.band_high),
        );
        assert!(violation.is_none(), "{violation:?}");
    }
    // The fuzz must exercise both paths to mean anything.
    assert!(banded > 20 && banded < 200, "{banded}");
}
