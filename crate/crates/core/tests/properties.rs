mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roomgraph_core::kgraph::EdgeType;
use roomgraph_core::metrics::evaluate;
use roomgraph_core::{
    embed_selfedges, forward, graph_stats, image_affinities, init_weights, mean_ap,
    propagation_matrix, topk_hit_ratio, AffinityMatrix, DenseMatrix, GcnConfig, GroundTruthMap,
    LossConfig, NodeId, SamplingIndex, SparseMatrix,
};

use common::*;

fn choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn edge_counts_follow_closed_forms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 6, 4, 6);
        let stats = graph_stats(&g.graph);
        prop_assert!(stats.n_nodes <= 100);
        let n_obj = stats.n_obj_nodes;
        let n_rooms = g.gt.rooms().len();
        let per_cat: BTreeMap<&str, usize> = g.split.categories.iter()
            .map(|(c, s)| (c.as_str(), s.train.len())).collect();
        let mut per_room: BTreeMap<&str, usize> = BTreeMap::new();
        for (c, n) in &per_cat {
            *per_room.entry(g.gt.gt_room(c).unwrap()).or_default() += n;
        }
        let same_object: usize = per_cat.values().map(|&n| choose2(n)).sum();
        let same_room: usize = per_room.iter().map(|(room, &n)| {
            let inside: usize = per_cat.iter()
                .filter(|(c, _)| g.gt.gt_room(c) == Some(*room))
                .map(|(_, &k)| choose2(k))
                .sum();
            choose2(n) - inside
        }).sum();
        prop_assert_eq!(stats.count(EdgeType::SelfLoop), n_obj);
        prop_assert_eq!(stats.count(EdgeType::SameObject), same_object);
        prop_assert_eq!(stats.count(EdgeType::SameRoom), same_room);
        prop_assert_eq!(stats.count(EdgeType::CorrectRoom), n_obj);
        prop_assert_eq!(stats.count(EdgeType::IncorrectRoom), n_obj * (n_rooms - 1));
    }

    #[test]
    fn propagation_is_symmetric_in_unit_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 5, 3, 5);
        let a = propagation_matrix(&g.graph).unwrap();
        prop_assert!(a.is_symmetric());
        prop_assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let dense = dense_propagation_oracle(g.graph.n_nodes(), g.graph.edges());
        for (i, row) in dense.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                prop_assert!((a.get(i, j) - v).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn selfedge_encoding_is_identity_propagation(seed in any::<u64>(), rows in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GcnConfig { in_dim: 5, hidden_dims: vec![7], out_dim: 4, seed };
        let model = init_weights(&cfg).unwrap();
        let x = random_features(&mut rng, rows, 5);
        let (h, _) = forward(&model, &SparseMatrix::identity(rows), &x).unwrap();
        prop_assert_eq!(embed_selfedges(&model, &x).unwrap(), h);
    }

    #[test]
    fn affinities_stay_in_cosine_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GcnConfig { in_dim: 6, hidden_dims: vec![], out_dim: 5, seed };
        let model = init_weights(&cfg).unwrap();
        let imgs = random_features(&mut rng, 9, 6);
        let rooms = random_features(&mut rng, 4, 6);
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let a = image_affinities(&model, &imgs, &names("i", 9), &rooms, &names("r", 4)).unwrap();
        prop_assert!(a.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>(), n_cat in 1usize..=20, n_rooms in 2usize..=17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rooms: Vec<String> = (0..n_rooms).map(|r| format!("r{r:02}")).collect();
        let cats: Vec<String> = (0..n_cat).map(|c| format!("c{c:02}")).collect();
        let truth: Vec<usize> = (0..n_cat).map(|_| rng.gen_range(0..n_rooms)).collect();
        let mut values = DenseMatrix::zeros(n_cat, n_rooms);
        for v in values.data_mut() {
            *v = f64::from(rng.gen_range(-4i32..=4)) / 4.0;
        }
        let gt = GroundTruthMap::from_assignments(
            &rooms,
            cats.iter().zip(&truth).map(|(c, &r)| (c.clone(), rooms[r].clone())),
        ).unwrap();
        let aff = AffinityMatrix { row_names: cats, col_names: rooms, values };

        let aps: Vec<f64> = (0..n_cat)
            .map(|i| ap_oracle(aff.values.row(i), &BTreeSet::from([truth[i]])))
            .collect();
        let map = mean_ap(&aff, &gt).unwrap();
        prop_assert!((map - aps.iter().sum::<f64>() / n_cat as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&map));
        prop_assert_eq!(map == 1.0, aps.iter().all(|&a| a == 1.0));

        // single relevant room: AP is the reciprocal rank
        let report = evaluate(&aff, &gt, &(1..=n_rooms).collect::<Vec<_>>()).unwrap();
        for row in &report.per_category {
            prop_assert_eq!(row.ap, 1.0 / row.rank as f64);
        }
        let mut prev = 0.0;
        for k in 1..=n_rooms {
            let h = topk_hit_ratio(&aff, &gt, k).unwrap();
            prop_assert!(h >= prev);
            prop_assert_eq!(h, report.hit_ratio[&k.to_string()]);
            prev = h;
        }
        prop_assert_eq!(prev, 1.0);
    }
}

/// Anchor frequencies over 10^5 draws against uniform over eligible rooms.
#[test]
fn anchors_are_uniform_over_eligible_rooms() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = loop {
        let g = random_graph(&mut rng, 6, 4, 4);
        let index = SamplingIndex::new(&g.graph).unwrap();
        if index.eligible_rooms().count() >= 3 && index.check_negatives(2).is_ok() {
            break g;
        }
    };
    let index = SamplingIndex::new(&g.graph).unwrap();
    let eligible: Vec<NodeId> = index.eligible_rooms().collect();
    let cfg = LossConfig {
        negatives: 2,
        batch_size: 1000,
        ..LossConfig::default()
    };
    let mut counts: BTreeMap<NodeId, f64> = BTreeMap::new();
    for _ in 0..100 {
        for b in index.sample(&cfg, &mut rng).unwrap() {
            *counts.entry(b.anchor).or_default() += 1.0;
            let mut seen = BTreeSet::new();
            assert!(b
                .negatives
                .iter()
                .all(|n| seen.insert(*n) && *n != b.positive));
        }
    }
    assert_eq!(counts.keys().copied().collect::<Vec<_>>(), eligible);
    let expected = 100_000.0 / eligible.len() as f64;
    let chi2: f64 = counts
        .values()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    // 0.999 quantile of chi-square with up to 3 degrees of freedom
    assert!(chi2 < 16.27, "chi2 {chi2} over {} rooms", eligible.len());
}
