//! Room-anchored contrastive loss with edge-weight modulation.
//!
//! For an anchor room `a`, a positive image `p` placed in that room and `K`
//! negative images placed elsewhere,
//!
//! ```text
//! L = −exp(−w_p) · ( s_p / T − log Σ_i exp(s_i / T) )
//! ```
//!
//! where `s` are cosine similarities of embeddings to the anchor and `w_p`
//! is the weight of the positive's correct-room edge. The denominator holds
//! only the negatives, so `L` can be negative.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgraph::{EdgeType, KnowledgeGraph, NodeId};
use crate::linalg::{dot, l2_norm, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// Negatives per sample (`K`).
    pub negatives: usize,
    /// Samples per batch (`M`).
    pub batch_size: usize,
    /// Adds the positive term to the log-sum-exp.
    pub include_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            negatives: 10,
            batch_size: 32,
            include_positive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.negatives == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "negatives and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub anchor: NodeId,
    pub positive: NodeId,
    pub negatives: Vec<NodeId>,
    /// Weight of the positive's correct-room edge to the anchor.
    pub weight_pos: f64,
}

/// Per-room positive pools and their complements, read off the
/// correct-room edges of a graph.
#[derive(Debug, Clone)]
pub struct SamplingIndex {
    /// `(room node, [(image node, edge weight)])` for rooms with ≥ 1 image.
    eligible: Vec<(NodeId, Vec<(NodeId, f64)>)>,
    /// Images whose ground-truth room differs, aligned with `eligible`.
    outside: Vec<Vec<NodeId>>,
}

impl SamplingIndex {
    pub fn new(graph: &KnowledgeGraph) -> Result<Self> {
        let mut by_room: BTreeMap<NodeId, Vec<(NodeId, f64)>> = BTreeMap::new();
        for e in graph
            .edges()
            .iter()
            .filter(|e| e.etype == EdgeType::CorrectRoom)
        {
            by_room.entry(e.v).or_default().push((e.u, e.weight));
        }
        if by_room.is_empty() {
            return Err(Error::Sampling("no room has any training image".into()));
        }
        let eligible: Vec<_> = by_room.into_iter().collect();
        let outside = eligible
            .iter()
            .map(|(room, _)| {
                eligible
                    .iter()
                    .filter(|(r, _)| r != room)
                    .flat_map(|(_, imgs)| imgs.iter().map(|&(n, _)| n))
                    .collect::<Vec<_>>()
            })
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect();
        Ok(Self { eligible, outside })
    }

    pub fn eligible_rooms(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.eligible.iter().map(|(r, _)| *r)
    }

    /// Fails unless every eligible anchor has at least `k` outside images.
    pub fn check_negatives(&self, k: usize) -> Result<()> {
        for ((room, _), out) in self.eligible.iter().zip(&self.outside) {
            if out.len() < k {
                return Err(Error::Sampling(format!(
                    "room node {room} has {} outside images, fewer than K = {k}",
                    out.len()
                )));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        cfg: &LossConfig,
        rng: &mut R,
    ) -> Result<Vec<SampleBatch>> {
        self.check_negatives(cfg.negatives)?;
        Ok((0..cfg.batch_size)
            .map(|_| {
                let a = rng.gen_range(0..self.eligible.len());
                let (anchor, pool) = &self.eligible[a];
                let (positive, weight_pos) = pool[rng.gen_range(0..pool.len())];
                let out = &self.outside[a];
                let negatives = index::sample(rng, out.len(), cfg.negatives)
                    .into_iter()
                    .map(|i| out[i])
                    .collect();
                SampleBatch {
                    anchor: *anchor,
                    positive,
                    negatives,
                    weight_pos,
                }
            })
            .collect())
    }
}

/// Draws `M` samples: anchor uniform over rooms holding ≥ 1 training image,
/// positive uniform within the anchor room, `K` negatives uniformly without
/// replacement from the images of other rooms.
pub fn sample_batch<R: Rng + ?Sized>(
    index: &SamplingIndex,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<Vec<SampleBatch>> {
    index.sample(cfg, rng)
}

/// Loss value and its partial derivatives with respect to the similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLoss {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: Vec<f64>,
}

/// Evaluates the loss on precomputed similarities with a max-shifted
/// log-sum-exp.
pub fn loss_from_similarities(
    sim_pos: f64,
    sim_neg: &[f64],
    weight_pos: f64,
    temperature: f64,
    include_positive: bool,
) -> SimilarityLoss {
    let scale = (-weight_pos).exp();
    let pos_logit = sim_pos / temperature;
    let logits: Vec<f64> = sim_neg.iter().map(|s| s / temperature).collect();
    let mut max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if include_positive {
        max = max.max(pos_logit);
    }
    let mut z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let pos_exp = (pos_logit - max).exp();
    if include_positive {
        z += pos_exp;
    }
    let lse = max + z.ln();
    let loss = -scale * (pos_logit - lse);
    let d_neg = logits
        .iter()
        .map(|l| scale * ((l - max).exp() / z) / temperature)
        .collect();
    let mut d_pos = -scale / temperature;
    if include_positive {
        d_pos += scale * (pos_exp / z) / temperature;
    }
    SimilarityLoss { loss, d_pos, d_neg }
}

/// Gradient rows keyed by node index.
pub type RowGrads = BTreeMap<usize, Vec<f64>>;

fn add_row(grads: &mut RowGrads, row: usize, scaled: f64, v: &[f64]) {
    let g = grads.entry(row).or_insert_with(|| vec![0.0; v.len()]);
    for (gi, vi) in g.iter_mut().zip(v) {
        *gi += scaled * vi;
    }
}

fn checked_row(emb: &DenseMatrix, node: NodeId) -> Result<(&[f64], f64)> {
    if node.0 >= emb.rows() {
        return Err(Error::Shape(format!(
            "node {node} outside the {} embedding rows",
            emb.rows()
        )));
    }
    let row = emb.row(node.0);
    let norm = l2_norm(row);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm(format!("embedding row {}", node.0)));
    }
    Ok((row, norm))
}

/// Loss of one sample and its gradient with respect to the anchor, positive
/// and negative embedding rows (the only rows it touches).
pub fn contrastive_loss(
    emb: &DenseMatrix,
    batch: &SampleBatch,
    temperature: f64,
) -> Result<(f64, RowGrads)> {
    contrastive_loss_with(emb, batch, temperature, false)
}

pub fn contrastive_loss_with(
    emb: &DenseMatrix,
    batch: &SampleBatch,
    temperature: f64,
    include_positive: bool,
) -> Result<(f64, RowGrads)> {
    let (a, na) = checked_row(emb, batch.anchor)?;
    let others: Vec<(usize, &[f64], f64)> = std::iter::once(batch.positive)
        .chain(batch.negatives.iter().copied())
        .map(|n| checked_row(emb, n).map(|(r, norm)| (n.0, r, norm)))
        .collect::<Result<_>>()?;
    let sims: Vec<f64> = others
        .iter()
        .map(|(_, b, nb)| dot(a, b) / (na * nb))
        .collect();
    let sl = loss_from_similarities(
        sims[0],
        &sims[1..],
        batch.weight_pos,
        temperature,
        include_positive,
    );

    // ∂s/∂a = b/(|a||b|) − s·a/|a|²,  ∂s/∂b = a/(|a||b|) − s·b/|b|²
    let mut grads = RowGrads::new();
    let coeffs = std::iter::once(sl.d_pos).chain(sl.d_neg.iter().copied());
    for (((row, b, nb), s), d) in others.iter().zip(&sims).zip(coeffs) {
        add_row(&mut grads, batch.anchor.0, d / (na * nb), b);
        add_row(&mut grads, batch.anchor.0, -d * s / (na * na), a);
        add_row(&mut grads, *row, d / (na * nb), a);
        add_row(&mut grads, *row, -d * s / (nb * nb), b);
    }
    Ok((sl.loss, grads))
}

/// Mean loss over the samples; gradients are scaled by `1/M` and
/// accumulated per row in sample order.
pub fn mean_batch_loss(
    emb: &DenseMatrix,
    batches: &[SampleBatch],
    temperature: f64,
) -> Result<(f64, RowGrads)> {
    mean_batch_loss_with(emb, batches, temperature, false)
}

pub fn mean_batch_loss_with(
    emb: &DenseMatrix,
    batches: &[SampleBatch],
    temperature: f64,
    include_positive: bool,
) -> Result<(f64, RowGrads)> {
    if batches.is_empty() {
        return Err(Error::Sampling("empty batch list".into()));
    }
    let m = batches.len() as f64;
    let mut total = 0.0;
    let mut grads = RowGrads::new();
    for b in batches {
        let (l, g) = contrastive_loss_with(emb, b, temperature, include_positive)?;
        total += l;
        for (row, v) in g {
            add_row(&mut grads, row, 1.0 / m, &v);
        }
    }
    Ok((total / m, grads))
}

/// Scatters sparse row gradients into a dense `rows × cols` matrix.
pub fn scatter_rows(grads: &RowGrads, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(rows, cols);
    for (&r, v) in grads {
        if r >= rows || v.len() != cols {
            return Err(Error::Shape(format!(
                "gradient row {r} does not fit {rows}x{cols}"
            )));
        }
        out.row_mut(r).copy_from_slice(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NodeKind;
    use crate::kgraph::Edge;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_emb(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
        DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// `rooms[i]` images in room i; node order images then rooms.
    fn room_graph(rooms: &[usize]) -> KnowledgeGraph {
        let n_img: usize = rooms.iter().sum();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut i = 0;
        for (r, &count) in rooms.iter().enumerate() {
            for k in 0..count {
                nodes.push(NodeKind::Image {
                    category: format!("c{r}"),
                    image: k,
                });
                edges.push(Edge {
                    u: NodeId(i),
                    v: NodeId(n_img + r),
                    weight: 0.5 + 0.1 * r as f64,
                    etype: EdgeType::CorrectRoom,
                });
                i += 1;
            }
        }
        for r in 0..rooms.len() {
            nodes.push(NodeKind::Room {
                name: format!("r{r}"),
            });
        }
        edges.sort_by_key(|e| (e.u, e.v));
        KnowledgeGraph::from_parts(nodes, edges, 0.0).unwrap()
    }

    #[test]
    fn equal_similarities_give_zero_loss() {
        let sl = loss_from_similarities(0.3, &[0.3], 0.0, 0.01, false);
        assert_eq!(sl.loss, 0.0);
    }

    #[test]
    fn weight_scales_loss() {
        let base = loss_from_similarities(0.4, &[0.1, -0.2, 0.7], 0.0, 0.5, false).loss;
        for w in [0.3, 1.0, 2.5] {
            let l = loss_from_similarities(0.4, &[0.1, -0.2, 0.7], w, 0.5, false).loss;
            assert_eq!(l, (-w).exp() * base);
        }
    }

    #[test]
    fn reference_value() {
        // exact value of −(0.9 − ln(e^0.1 + e^0.2)) to 20 digits
        let l = loss_from_similarities(0.9, &[0.1, 0.2], 0.0, 1.0, false).loss;
        assert!((l - (-0.055_603_339_926_429_1)).abs() < 1e-15);
    }

    #[test]
    fn large_logits_stay_finite() {
        let sl = loss_from_similarities(-1.0, &[1.0, 0.99], 0.0, 0.001, false);
        assert!(sl.loss.is_finite() && sl.loss > 1000.0);
        assert!(sl.d_neg.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn include_positive_makes_loss_nonnegative() {
        let sl = loss_from_similarities(0.9, &[0.1, 0.2], 0.0, 1.0, true);
        assert!(sl.loss > 0.0);
    }

    #[test]
    fn forced_negative_choice() {
        let g = room_graph(&[1, 1]);
        let index = SamplingIndex::new(&g).unwrap();
        let cfg = LossConfig {
            negatives: 1,
            batch_size: 50,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for b in index.sample(&cfg, &mut rng).unwrap() {
            let other = if b.anchor == NodeId(2) {
                NodeId(1)
            } else {
                NodeId(0)
            };
            assert_eq!(b.negatives, vec![other]);
            assert_ne!(b.positive, other);
        }
    }

    #[test]
    fn empty_room_never_anchors_and_k_is_checked() {
        let mut g = room_graph(&[2, 0, 3]);
        let index = SamplingIndex::new(&g).unwrap();
        let eligible: Vec<NodeId> = index.eligible_rooms().collect();
        assert_eq!(eligible, vec![NodeId(5), NodeId(7)]);
        let cfg = LossConfig {
            negatives: 2,
            batch_size: 200,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = index.sample(&cfg, &mut rng).unwrap();
        assert!(batches.iter().all(|b| b.anchor != NodeId(6)));
        for b in &batches {
            let mut n = b.negatives.clone();
            n.sort();
            n.dedup();
            assert_eq!(n.len(), 2);
        }
        let cfg = LossConfig {
            negatives: 3,
            ..cfg
        };
        assert!(matches!(
            index.sample(&cfg, &mut rng),
            Err(Error::Sampling(_))
        ));
        g = room_graph(&[0, 0]);
        assert!(SamplingIndex::new(&g).is_err());
    }

    #[test]
    fn zero_row_is_an_error() {
        let emb =
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let b = SampleBatch {
            anchor: NodeId(0),
            positive: NodeId(2),
            negatives: vec![NodeId(1)],
            weight_pos: 0.0,
        };
        assert!(matches!(
            contrastive_loss(&emb, &b, 1.0),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn batch_mean_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = random_emb(&mut rng, 8, 4);
        let b = SampleBatch {
            anchor: NodeId(7),
            positive: NodeId(0),
            negatives: vec![NodeId(3), NodeId(5)],
            weight_pos: 0.6,
        };
        let single = contrastive_loss(&emb, &b, 0.1).unwrap();
        assert_eq!(mean_batch_loss(&emb, std::slice::from_ref(&b), 0.1).unwrap(), single);
        let (dup, _) = mean_batch_loss(&emb, &[b.clone(), b.clone()], 0.1).unwrap();
        assert_eq!(dup, single.0);
        assert!(mean_batch_loss(&emb, &[], 0.1).is_err());

        let batches: Vec<SampleBatch> = (0..4)
            .map(|i| SampleBatch {
                anchor: NodeId(6 + i % 2),
                positive: NodeId(i),
                negatives: vec![NodeId(4), NodeId(5)],
                weight_pos: 0.1 * i as f64,
            })
            .collect();
        let (mean, _) = mean_batch_loss(&emb, &batches, 0.2).unwrap();
        let direct: f64 = batches
            .iter()
            .map(|b| contrastive_loss(&emb, b, 0.2).unwrap().0)
            .sum::<f64>()
            / 4.0;
        assert!((mean - direct).abs() < 1e-15);
    }

    #[test]
    fn gradient_touches_only_sampled_rows_and_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut emb = random_emb(&mut rng, 9, 5);
        let b = SampleBatch {
            anchor: NodeId(8),
            positive: NodeId(1),
            negatives: vec![NodeId(2), NodeId(4), NodeId(6)],
            weight_pos: 0.7,
        };
        for include_positive in [false, true] {
            let (_, grads) = contrastive_loss_with(&emb, &b, 0.3, include_positive).unwrap();
            assert_eq!(
                grads.keys().copied().collect::<Vec<_>>(),
                vec![1, 2, 4, 6, 8]
            );
            let h = 1e-6;
            for (&row, g) in &grads {
                for j in 0..5 {
                    let orig = emb.get(row, j);
                    emb.set(row, j, orig + h);
                    let up = contrastive_loss_with(&emb, &b, 0.3, include_positive)
                        .unwrap()
                        .0;
                    emb.set(row, j, orig - h);
                    let down = contrastive_loss_with(&emb, &b, 0.3, include_positive)
                        .unwrap()
                        .0;
                    emb.set(row, j, orig);
                    let fd = (up - down) / (2.0 * h);
                    let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
                    assert!(rel < 1e-4, "row {row} col {j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn scatter_places_rows() {
        let mut g = RowGrads::new();
        g.insert(2, vec![1.0, 2.0]);
        let d = scatter_rows(&g, 3, 2).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(scatter_rows(&g, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn shift_invariance(
            sp in -1.0f64..1.0,
            sn in proptest::collection::vec(-1.0f64..1.0, 1..12),
            w in 0.0f64..2.0,
            t in prop_oneof![Just(0.01), 0.05f64..2.0],
            c in prop_oneof![Just(-5.0), Just(1.0), Just(10.0)],
        ) {
            let l0 = loss_from_similarities(sp, &sn, w, t, false).loss;
            let shifted: Vec<f64> = sn.iter().map(|s| s + c).collect();
            let l1 = loss_from_similarities(sp + c, &shifted, w, t, false).loss;
            prop_assert!((l0 - l1).abs() < 1e-9 * l0.abs().max(1.0));
        }

        #[test]
        fn monotone_in_similarities(
            sp in -0.9f64..0.9,
            sn in proptest::collection::vec(-0.9f64..0.9, 1..6),
            w in 0.0f64..2.0,
            t in 0.05f64..2.0,
            pick in any::<prop::sample::Index>(),
        ) {
            let l = loss_from_similarities(sp, &sn, w, t, false).loss;
            let up = loss_from_similarities(sp + 0.05, &sn, w, t, false).loss;
            prop_assert!(up < l);
            let mut more = sn.clone();
            more[pick.index(sn.len())] += 0.05;
            prop_assert!(loss_from_similarities(sp, &more, w, t, false).loss > l);
        }
    }
}
