use proptest::prelude::*;

use spectree::cost_model::{byte_count, flop_count};
use spectree::oracle::{covered_nodes, is_root_chain};
use spectree::verify_sim::{commit, linearize, verify_tree, ContextKey, Decoding, SimCache};
use spectree::{
    beam_expand, best_first_expand, fit_static_calibration, top_k_truncate, CandidateLatticeF32,
    CostModelParams, DraftTree, DraftTreeF32, LatencyQuery, MarginalBlock, MarginalBlockF32, SyntheticPair,
    SyntheticPairConfig, TargetRule,
};

fn block_strategy(max_gamma: usize, max_vocab: usize) -> impl Strategy<Value = MarginalBlock<f64>> {
    (1..=max_gamma, 2..=max_vocab).prop_flat_map(|(g, v)| {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, v), g).prop_map(|rows| {
            let rows = rows
                .into_iter()
                .map(|r| {
                    let r: Vec<f64> = r.into_iter().map(|x| x + 1e-3).collect();
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|x| x / s).collect()
                })
                .collect();
            MarginalBlock::from_rows(rows).unwrap()
        })
    })
}

fn ancestors(tree: &DraftTree<f64>, mut i: usize) -> Vec<usize> {
    let mut out = vec![i];
    while let Some(p) = tree.node(i).parent {
        out.push(p);
        i = p;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn best_first_trees_are_nested(block in block_strategy(6, 8), n in 1usize..40) {
        let lat = top_k_truncate(&block, 4.min(block.vocab_size())).unwrap();
        let big = best_first_expand(&lat, 60).unwrap();
        let small = best_first_expand(&lat, n).unwrap();
        let cut = big.truncated(small.budget());
        prop_assert_eq!(small.nodes(), cut.nodes());
        small.validate(Some(&lat)).unwrap();
    }

    #[test]
    fn mask_matches_parent_walk(block in block_strategy(5, 6), n in 1usize..90, prefix in 0usize..5) {
        let lat = top_k_truncate(&block, 6.min(block.vocab_size())).unwrap();
        let tree = best_first_expand(&lat, n).unwrap();
        let lin = linearize(&tree, prefix);
        for i in 0..tree.len() {
            let anc = ancestors(&tree, i);
            for j in 0..prefix + tree.len() {
                let want = j < prefix || anc.contains(&(j - prefix));
                prop_assert_eq!(lin.mask(i, j), want, "node {} column {}", i, j);
            }
        }
    }

    #[test]
    fn verified_commit_equals_autoregressive(
        block in block_strategy(6, 5),
        n in 1usize..60,
        seed in any::<u64>(),
        prompt in prop::collection::vec(0u32..5, 0..6),
    ) {
        let target = TargetRule::new(seed, 5);
        let lat = top_k_truncate(&block, 5.min(block.vocab_size())).unwrap();
        let tree = best_first_expand(&lat, n).unwrap();
        let cache = SimCache::new(&prompt);
        prop_assert_eq!(cache.key(), ContextKey::empty().extend(&prompt));
        let rec = verify_tree(&linearize(&tree, prompt.len()), cache.key(), &target, Decoding::Greedy);
        prop_assert!(is_root_chain(&tree, &rec.accepted_path));
        let next = commit(&cache, &rec, &tree).unwrap();
        let ar = target.ar_decode(&prompt, rec.accepted_len(), Decoding::Greedy);
        prop_assert_eq!(next.tokens(), &ar[..]);

        let drafted: Vec<_> = ar[prompt.len()..].to_vec();
        prop_assert_eq!(covered_nodes(&tree, &drafted), rec.accepted_path.clone());
    }

    #[test]
    fn beam_never_beats_best_first_at_equal_size(block in block_strategy(6, 6), w in 1usize..4, d in 1usize..6) {
        let lat = top_k_truncate(&block, 6.min(block.vocab_size())).unwrap();
        let beam = beam_expand(&lat, w, d.min(lat.gamma())).unwrap();
        let bf = best_first_expand(&lat, beam.budget().max(1)).unwrap();
        prop_assert!(bf.surrogate() >= beam.surrogate() - 1e-12);
    }

    #[test]
    fn f32_and_f64_agree(block in block_strategy(5, 6), n in 1usize..30) {
        let rows32: Vec<Vec<f32>> = block.rows().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
        let b32: MarginalBlockF32 = MarginalBlock::from_rows(rows32).unwrap();
        let l32: CandidateLatticeF32 = top_k_truncate(&b32, 4.min(b32.vocab_size())).unwrap();
        let t32: DraftTreeF32 = best_first_expand(&l32, n).unwrap();
        let t64 = best_first_expand(&top_k_truncate(&block, 4.min(block.vocab_size())).unwrap(), n).unwrap();
        prop_assert_eq!(t32.budget(), t64.budget());
        prop_assert!((t32.surrogate() as f64 - t64.surrogate()).abs() < 1e-4);
    }

    #[test]
    fn cost_counts_grow_with_tokens_and_context(s in 1u64..4096, c in 0u64..100_000, ds in 0u64..64, dc in 0u64..4096) {
        let p = CostModelParams::<f64>::preset("crossover").unwrap();
        let a = LatencyQuery::new(s, c).unwrap();
        let b = LatencyQuery::new(s + ds, c + dc).unwrap();
        prop_assert!(flop_count(&p, b) >= flop_count(&p, a));
        prop_assert!(byte_count(&p, b) >= byte_count(&p, a));
        if ds > 0 {
            prop_assert!(flop_count(&p, b) > flop_count(&p, a));
        }
    }

    #[test]
    fn calibration_never_worsens_rmse(pts in prop::collection::vec((1e-4f64..1e-1, 1e-4f64..1e-1), 2..40)) {
        prop_assume!(pts.iter().any(|p| p.0 != pts[0].0));
        let fit = fit_static_calibration(&pts).unwrap();
        prop_assert!(fit.rmse_after <= fit.rmse_before);
    }

    #[test]
    fn text_round_trips(block in block_strategy(4, 5), n in 1usize..25) {
        let back = MarginalBlock::<f64>::from_text(&block.to_text()).unwrap();
        prop_assert_eq!(&back, &block);
        let tree = best_first_expand(&top_k_truncate(&block, 5.min(block.vocab_size())).unwrap(), n).unwrap();
        let t = DraftTree::<f64>::from_text(&tree.to_text()).unwrap();
        prop_assert_eq!(t.nodes(), tree.nodes());
    }
}

#[test]
fn acceptance_rises_with_alignment() {
    let mut prev = 0.0;
    for alignment in [0.2, 0.5, 0.8, 1.0] {
        let pair = SyntheticPair::new(SyntheticPairConfig {
            alignment,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let mut ctx = ContextKey::empty();
        let mut total = 0.0;
        let cycles = 400;
        for c in 0..cycles {
            ctx = ctx.push(c as u32 % 64);
            let lat = top_k_truncate(&pair.draft(ctx, Decoding::Greedy), 8).unwrap();
            let tree = best_first_expand(&lat, 64).unwrap();
            let rec = verify_tree(&linearize(&tree, 1), ctx, pair.target(), Decoding::Greedy);
            total += rec.accepted_len() as f64;
        }
        let mean = total / cycles as f64;
        assert!(mean > prev, "alignment {alignment}: mean accepted {mean} not above {prev}");
        prev = mean;
    }
}
