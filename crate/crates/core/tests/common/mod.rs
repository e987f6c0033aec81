//! Brute-force reference implementations and random instance generators
//! shared by the integration tests. Nothing here calls the code it checks.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use roomgraph_core::features::gather_rows;
use roomgraph_core::{
    build_graph, compute_soft_scores, ground_truth_map, split_dataset, AnnotationRecord,
    DatasetSplit, DenseMatrix, Edge, EdgeType, FeatureManifest, FeatureMatrix, GcnModel,
    GroundTruthMap, KnowledgeGraph, NodeKind, SoftScoreTable, SplitRatios,
};

type Q = Ratio<i64>;

fn q_to_f64(q: Q) -> f64 {
    // both parts are far below 2^53, so one IEEE division rounds correctly
    *q.numer() as f64 / *q.denom() as f64
}

/// Reference soft scores: `(pos, neg, max_pos)` per (object, room).
pub fn soft_scores_oracle(
    records: &[AnnotationRecord],
) -> BTreeMap<(String, String), (f64, f64, f64)> {
    let mut per_pair: BTreeMap<(String, String), Vec<(Q, Q)>> = BTreeMap::new();
    for r in records {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for &k in &r.ranks {
            if k > 0 {
                pos.push(Q::new(1, i64::from(k)));
            } else if k < 0 {
                neg.push(Q::new(1, -i64::from(k)));
            }
        }
        let mean = |v: &[Q]| {
            if v.is_empty() {
                Q::from_integer(0)
            } else {
                v.iter().fold(Q::from_integer(0), |a, b| a + b) / v.len() as i64
            }
        };
        per_pair
            .entry((r.object_id.clone(), r.room_id.clone()))
            .or_default()
            .push((mean(&pos), mean(&neg)));
    }
    per_pair
        .into_iter()
        .map(|(k, recs)| {
            let n = recs.len() as i64;
            let pos = recs.iter().fold(Q::from_integer(0), |a, r| a + r.0) / n;
            let neg = recs.iter().fold(Q::from_integer(0), |a, r| a + r.1) / n;
            let max = recs.iter().map(|r| r.0).max().unwrap();
            (k, (q_to_f64(pos), q_to_f64(neg), q_to_f64(max)))
        })
        .collect()
}

/// Reference ground truth: strict maximum of the per-room best receptacle,
/// scanning rooms in sorted order. `None` when an object has no positive.
pub fn ground_truth_oracle(
    scores: &BTreeMap<(String, String), (f64, f64, f64)>,
    rooms: &[String],
) -> Option<BTreeMap<String, String>> {
    let mut rooms = rooms.to_vec();
    rooms.sort();
    let objects: BTreeSet<&String> = scores.keys().map(|(o, _)| o).collect();
    let mut out = BTreeMap::new();
    for o in objects {
        let mut best: Option<(&String, f64)> = None;
        for r in &rooms {
            let v = scores.get(&(o.clone(), r.clone())).map_or(0.0, |s| s.2);
            if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
                best = Some((r, v));
            }
        }
        out.insert(o.clone(), best?.0.clone());
    }
    Some(out)
}

/// Random annotation set. Every object gets at least one positive rank.
pub fn random_annotations<R: Rng>(
    rng: &mut R,
    max_objects: usize,
    max_rooms: usize,
    max_receptacles: usize,
    max_annotators: usize,
) -> (Vec<AnnotationRecord>, Vec<String>) {
    let n_obj = rng.gen_range(1..=max_objects);
    let n_rooms = rng.gen_range(1..=max_rooms);
    let n_ann = rng.gen_range(1..=max_annotators);
    let rooms: Vec<String> = (0..n_rooms).map(|r| format!("room{r}")).collect();
    let recs_per_room: Vec<usize> = (0..n_rooms)
        .map(|_| rng.gen_range(1..=max_receptacles))
        .collect();
    let mut records = Vec::new();
    for o in 0..n_obj {
        let start = records.len();
        for (r, room) in rooms.iter().enumerate() {
            let n = recs_per_room[r] as i32;
            for k in 0..recs_per_room[r] {
                // the first object lists every receptacle, fixing room sizes
                if o > 0 && rng.gen_bool(0.2) {
                    continue;
                }
                let ranks = (0..n_ann)
                    .map(|_| match rng.gen_range(0..3) {
                        0 => 0,
                        1 => rng.gen_range(1..=n),
                        _ => -rng.gen_range(1..=n),
                    })
                    .collect();
                records.push(AnnotationRecord {
                    object_id: format!("obj{o}"),
                    room_id: room.clone(),
                    receptacle_id: format!("rec{k}"),
                    ranks,
                });
            }
        }
        let has_pos = records[start..]
            .iter()
            .any(|r| r.ranks.iter().any(|&k| k > 0));
        if !has_pos {
            // guaranteed placement so the set has a ground truth
            let room = rng.gen_range(0..n_rooms);
            let rec = format!("rec{}", rng.gen_range(0..recs_per_room[room]));
            match records[start..]
                .iter_mut()
                .find(|r| r.room_id == rooms[room] && r.receptacle_id == rec)
            {
                Some(r) => r.ranks[0] = 1,
                None => records.push(AnnotationRecord {
                    object_id: format!("obj{o}"),
                    room_id: rooms[room].clone(),
                    receptacle_id: rec,
                    ranks: vec![1],
                }),
            }
        }
    }
    // record order must not matter
    records.shuffle(rng);
    (records, rooms)
}

/// Per-type edge counts by enumerating every unordered pair of training
/// images, indexed by edge type code 1..=5.
pub fn edge_count_oracle(split: &DatasetSplit, gt: &GroundTruthMap) -> [usize; 6] {
    let mut imgs: Vec<(&str, &str)> = Vec::new();
    for (cat, s) in &split.categories {
        for _ in &s.train {
            imgs.push((cat, gt.gt_room(cat).unwrap()));
        }
    }
    let mut c = [0usize; 6];
    c[1] = imgs.len();
    for i in 0..imgs.len() {
        for j in 0..imgs.len() {
            if i >= j {
                continue;
            }
            if imgs[i].0 == imgs[j].0 {
                c[2] += 1;
            } else if imgs[i].1 == imgs[j].1 {
                c[3] += 1;
            }
        }
    }
    c[4] = imgs.len();
    c[5] = imgs.len() * (gt.rooms().len() - 1);
    c
}

/// Dense `D^{-1/2}(A⁺ + I)D^{-1/2}` built straight from the edge list.
pub fn dense_propagation_oracle(n: usize, edges: &[Edge]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for e in edges {
        if e.etype == EdgeType::SelfLoop {
            continue;
        }
        let w = e.weight.max(0.0);
        a[e.u.0][e.v.0] += w;
        a[e.v.0][e.u.0] += w;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i][j] /= (d[i] * d[j]).sqrt();
        }
    }
    a
}

/// Naive-loop forward pass: ReLU on every layer but the last.
pub fn dense_forward_oracle(adj: &[Vec<f64>], x: &DenseMatrix, model: &GcnModel) -> Vec<Vec<f64>> {
    let n = adj.len();
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let last = model.n_layers() - 1;
    for (l, w) in model.weights().iter().enumerate() {
        let (din, dout) = w.shape();
        let mut ah = vec![vec![0.0; din]; n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..din {
                    ah[i][j] += adj[i][k] * h[k][j];
                }
            }
        }
        let mut z = vec![vec![0.0; dout]; n];
        for i in 0..n {
            for j in 0..dout {
                for k in 0..din {
                    z[i][j] += ah[i][k] * w.get(k, j);
                }
                if l < last && z[i][j] < 0.0 {
                    z[i][j] = 0.0;
                }
            }
        }
        h = z;
    }
    h
}

/// Exhaustive AP: walks the full ranking and averages precision at every
/// relevant position. The ranking compares every pair of rooms directly.
pub fn ap_oracle(scores: &[f64], relevant: &BTreeSet<usize>) -> f64 {
    let n = scores.len();
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut position = vec![0usize; n];
    for a in 0..n {
        position[a] = (0..n).filter(|&b| b != a && beats(b, a)).count();
    }
    let mut ranking = vec![0usize; n];
    for (room, &p) in position.iter().enumerate() {
        ranking[p] = room;
    }
    let mut sum = 0.0;
    for k in 1..=n {
        if relevant.contains(&ranking[k - 1]) {
            let hits = ranking[..k].iter().filter(|r| relevant.contains(r)).count();
            sum += hits as f64 / k as f64;
        }
    }
    sum / relevant.len() as f64
}

/// A random annotation-driven graph with every image in the training split.
pub struct RandomGraph {
    pub split: DatasetSplit,
    pub gt: GroundTruthMap,
    pub scores: SoftScoreTable,
    pub graph: KnowledgeGraph,
}

pub fn random_graph<R: Rng>(
    rng: &mut R,
    max_objects: usize,
    max_rooms: usize,
    max_images: usize,
) -> RandomGraph {
    let (records, rooms) = random_annotations(rng, max_objects, max_rooms, 3, 6);
    let scores = compute_soft_scores(&records).unwrap();
    let gt = ground_truth_map(&scores, &rooms).unwrap();
    let counts: BTreeMap<String, usize> = scores
        .objects()
        .into_iter()
        .map(|o| (o, rng.gen_range(1..=max_images)))
        .collect();
    let ratios = SplitRatios {
        train: 1,
        val: 0,
        test: 0,
    };
    let split = split_dataset(&counts, ratios, rng.gen()).unwrap();
    let graph = build_graph(&split, &gt, &scores, rng.gen()).unwrap();
    RandomGraph {
        split,
        gt,
        scores,
        graph,
    }
}

/// Graph-node features drawn from a standard-normal-ish uniform box.
pub fn random_features<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> DenseMatrix {
    DenseMatrix::from_vec(
        rows,
        dim,
        (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Feature rows for the graph's nodes, in graph order.
pub fn graph_features(
    features: &FeatureMatrix,
    manifest: &FeatureManifest,
    graph: &KnowledgeGraph,
) -> DenseMatrix {
    gather_rows(features, manifest, graph.nodes())
        .unwrap()
        .to_dense()
}

pub fn image_nodes(graph: &KnowledgeGraph) -> Vec<&NodeKind> {
    graph
        .nodes()
        .iter()
        .filter(|n| matches!(n, NodeKind::Image { .. }))
        .collect()
}
