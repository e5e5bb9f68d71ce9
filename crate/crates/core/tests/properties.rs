use std::collections::BTreeSet;

use fedrec_sim::attack::{self, CraftSettings};
use fedrec_sim::data::{self, SyntheticSpec};
use fedrec_sim::eval::{self, EvalUser};
use fedrec_sim::model::{self, FfnInit, GlobalParams, GradientUpdate, ModelShape};
use fedrec_sim::nn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> impl Strategy<Value = SyntheticSpec> {
    (10usize..40, 20usize..60, 0.0f64..2.0, any::<u64>()).prop_map(|(users, items, skew, seed)| SyntheticSpec {
        users,
        items,
        interactions: users * 6,
        skew,
        clusters: 3,
        affinity: 2.0,
        seed,
    })
}

fn small_global(seed: u64, items: usize) -> GlobalParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ModelShape {
        num_items: items,
        dim: 4,
        towers: vec![6, 3],
    };
    let mut g = GlobalParams::random(&shape, 0.5, FfnInit::FanIn, &mut rng).unwrap();
    for layer in &mut g.ffn.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(0.0..0.3));
    }
    g
}

fn user_vecs(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_splits_are_disjoint(spec in small_spec(), q in 1usize..4, seed in any::<u64>()) {
        let table = data::generate_synthetic(&spec).unwrap();
        let ds = data::build_dataset(&table, q, seed).unwrap();
        for u in &ds.users {
            let pos: BTreeSet<usize> = u.positives.iter().copied().collect();
            prop_assert_eq!(pos.len(), u.positives.len());
            prop_assert_eq!(u.negatives.len(), q * u.positives.len());
            if let Some(h) = u.holdout {
                prop_assert!(!pos.contains(&h));
                prop_assert!(!u.negatives.contains(&h));
            }
            prop_assert!(u.negatives.iter().all(|n| !pos.contains(n) && *n < ds.num_items));
        }
    }

    #[test]
    fn dataset_is_a_function_of_its_seeds(spec in small_spec(), seed in any::<u64>()) {
        let table = data::generate_synthetic(&spec).unwrap();
        prop_assert_eq!(&table, &data::generate_synthetic(&spec).unwrap());
        let a = data::build_dataset(&table, 4, seed).unwrap();
        let b = data::build_dataset(&table, 4, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn high_class_holds_the_top_tenth(counts in prop::collection::vec(0usize..50, 1..120)) {
        let labels = data::labels_from_counts(counts.clone(), [0.1, 0.55]).unwrap();
        let n = counts.len();
        let high = labels.items_in_class(labels.top_class());
        prop_assert_eq!(high.len(), (n as f64 * 0.1).ceil() as usize);
        let floor = high.iter().map(|&i| counts[i]).min().unwrap();
        let others = (0..n).filter(|i| !high.contains(i)).map(|i| counts[i]);
        prop_assert!(others.into_iter().all(|c| c <= floor));
    }

    #[test]
    fn top_k_is_a_prefix_of_the_full_sort(
        scores in prop::collection::vec(-3i32..3, 1..100),
        k in 1usize..110,
        excluded in prop::collection::btree_set(0usize..100, 0..20),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let mut order: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        prop_assert_eq!(model::top_k_from_scores(&scores, k, &excluded), order);
    }

    #[test]
    fn larger_k_extends_the_list(scores in prop::collection::vec(-1.0f64..1.0, 2..80), k in 1usize..79) {
        let none = BTreeSet::new();
        let short = model::top_k_from_scores(&scores, k, &none);
        let long = model::top_k_from_scores(&scores, k + 1, &none);
        prop_assert_eq!(&long[..short.len()], &short[..]);
    }

    #[test]
    fn scores_are_deterministic_probabilities(seed in any::<u64>(), item in 0usize..10, label in 0u8..2) {
        let g = small_global(seed, 10);
        let u = &user_vecs(seed ^ 1, 1, 4)[0];
        let s = g.score(u, item).unwrap();
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert_eq!(s.to_bits(), g.score(u, item).unwrap().to_bits());
        let (loss, grad) = nn::bce_with_logit(g.logit(u, item).unwrap(), f64::from(label));
        prop_assert!(loss.is_finite() && loss >= 0.0 && grad.is_finite());
    }

    #[test]
    fn ranking_metrics_are_bounded_and_monotone(spec in small_spec(), seed in any::<u64>(), target in 0usize..20) {
        let table = data::generate_synthetic(&spec).unwrap();
        let ds = data::build_dataset(&table, 1, seed).unwrap();
        let g = small_global(seed, ds.num_items);
        let emb = user_vecs(seed, ds.users.len(), 4);
        let users: Vec<EvalUser<'_>> = ds
            .users
            .iter()
            .zip(&emb)
            .map(|(data, e)| EvalUser { data, embedding: e })
            .collect();
        let mut last = (0.0, 0.0);
        for k in [1, 3, 5, 10, 20] {
            let m = eval::ranking_metrics(&g, &users, k, k, target).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.exposure_rate));
            prop_assert!((0.0..=1.0).contains(&m.hit_ratio));
            prop_assert!(m.exposure_rate >= last.0 && m.hit_ratio >= last.1);
            last = (m.exposure_rate, m.hit_ratio);
        }
    }

    #[test]
    fn gradient_kl_is_non_negative(
        a in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..5),
        b in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..5),
        bins in 1usize..40,
    ) {
        let kl = eval::grad_kl_divergence(&a, &b, bins).unwrap();
        prop_assert!(kl.is_finite() && kl >= 0.0);
        prop_assert!(eval::grad_kl_divergence(&a, &a, bins).unwrap().abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distance_term_pulls_toward_genuine_mean(seed in any::<u64>(), gamma in 0.5f64..5.0) {
        let g = small_global(seed, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut genuine = GradientUpdate::zeros_like(&g);
        for row in [1usize, 4] {
            genuine.item_rows.insert(row, (0..4).map(|_| rng.random_range(-0.5..0.5)).collect());
        }
        let user = &user_vecs(seed, 1, 4)[0];
        let craft = |gamma: f64| {
            let settings = CraftSettings { target: 6, alpha: 0.0, gamma, epochs: 10, lr: 0.05, p_norm: 2.0 };
            attack::craft_one(&g, user, &genuine, None, &settings, 0.01).unwrap().unwrap()
        };
        let free = craft(0.0);
        let bound = craft(gamma);
        prop_assert!(bound.final_loss.dis <= free.final_loss.dis + 1e-9);
        prop_assert!(bound.update.item_rows.contains_key(&6));
        prop_assert!(bound.update.item_rows.keys().all(|r| [1, 4, 6].contains(r)));
    }
}
