//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roomgraph_core::features::{gather_rows, RoomFeatures};
use roomgraph_core::{
    build_graph, gen_synthetic, split_dataset, AffinityMatrix, DenseMatrix, GroundTruthMap,
    KnowledgeGraph, SplitRatios, SyntheticSpec,
};

/// A synthetic graph with `n_categories * 15` training images over 4 rooms,
/// plus its node features.
pub fn synthetic_graph(n_categories: usize, dim: usize) -> (KnowledgeGraph, DenseMatrix) {
    let spec = SyntheticSpec {
        n_categories,
        n_rooms: 4,
        images_per_category: 30,
        dim,
        cluster_separation: 4.0,
        noise_sigma: 0.5,
        seed: 1,
        room_features: RoomFeatures::OneHot,
    };
    let data = gen_synthetic(&spec).expect("valid spec");
    let counts = data.manifest.image_counts().expect("numbered images");
    let split = split_dataset(&counts, SplitRatios::default(), 1).expect("split");
    let graph = build_graph(&split, &data.gt, &data.scores, 1).expect("graph");
    let x = gather_rows(&data.features, &data.manifest, graph.nodes())
        .expect("rows")
        .to_dense();
    (graph, x)
}

pub fn random_dense(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape")
}

/// Random category-by-room affinities with a ground truth per row.
pub fn random_affinities(
    n_categories: usize,
    n_rooms: usize,
    seed: u64,
) -> (AffinityMatrix, GroundTruthMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rooms: Vec<String> = (0..n_rooms).map(|r| format!("room_{r:02}")).collect();
    let cats: Vec<String> = (0..n_categories)
        .map(|c| format!("object_{c:04}"))
        .collect();
    let gt = GroundTruthMap::from_assignments(
        &rooms,
        cats.iter()
            .map(|c| (c.clone(), rooms[rng.gen_range(0..n_rooms)].clone())),
    )
    .expect("assignments");
    let aff = AffinityMatrix {
        row_names: cats,
        col_names: rooms,
        values: random_dense(n_categories, n_rooms, seed + 1),
    };
    (aff, gt)
}
