//! The typed, weighted, undirected knowledge graph over training images and
//! rooms, and its normalized propagation matrix.
//!
//! Node order is canonical: image nodes grouped by category (sorted), each
//! category's training images in split order, then room nodes sorted.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{GroundTruthMap, SoftScoreTable};
use crate::error::{Error, Result};
use crate::features::{DatasetSplit, NodeKind, SplitPart};
use crate::linalg::SparseMatrix;

const EDGE_MAGIC: &[u8; 4] = b"KGE1";
const EDGE_RECORD_BYTES: usize = 13;

/// Same-room edge weights are drawn uniformly from this range.
pub const SAME_ROOM_WEIGHT: (f64, f64) = (0.5, 0.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EdgeType {
    SelfLoop = 1,
    SameObject = 2,
    SameRoom = 3,
    CorrectRoom = 4,
    IncorrectRoom = 5,
}

impl EdgeType {
    pub const ALL: [EdgeType; 5] = [
        EdgeType::SelfLoop,
        EdgeType::SameObject,
        EdgeType::SameRoom,
        EdgeType::CorrectRoom,
        EdgeType::IncorrectRoom,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(usize::from(code).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown edge type {code}")))
    }

    fn weight_ok(self, w: f64, tol: f64) -> bool {
        match self {
            EdgeType::SelfLoop | EdgeType::SameObject => (w - 1.0).abs() <= tol,
            EdgeType::SameRoom => w >= SAME_ROOM_WEIGHT.0 - tol && w <= SAME_ROOM_WEIGHT.1 + tol,
            EdgeType::CorrectRoom => w > 0.0 && w <= 1.0 + tol,
            EdgeType::IncorrectRoom => w <= 0.0,
        }
    }
}

/// Undirected edge stored once with `u <= v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub weight: f64,
    pub etype: EdgeType,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeGraph {
    nodes: Vec<NodeKind>,
    n_obj_nodes: usize,
    edges: Vec<Edge>,
}

/// JSON node manifest written next to the binary edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeManifest {
    pub n_obj_nodes: usize,
    pub n_room_nodes: usize,
    pub nodes: Vec<NodeKind>,
}

impl KnowledgeGraph {
    /// Assembles a graph from parts, checking node layout and edge
    /// invariants. `tol` bounds the weight-range slack (for `f32` payloads).
    pub fn from_parts(nodes: Vec<NodeKind>, edges: Vec<Edge>, tol: f64) -> Result<Self> {
        let n_obj_nodes = nodes
            .iter()
            .take_while(|n| matches!(n, NodeKind::Image { .. }))
            .count();
        if nodes[n_obj_nodes..]
            .iter()
            .any(|n| matches!(n, NodeKind::Image { .. }))
        {
            return Err(Error::Format("image nodes must precede room nodes".into()));
        }
        for e in &edges {
            if e.u > e.v || e.v.0 >= nodes.len() {
                return Err(Error::Format(format!(
                    "edge ({}, {}) is not ordered or out of range",
                    e.u, e.v
                )));
            }
            if !e.weight.is_finite() || !e.etype.weight_ok(e.weight, tol) {
                return Err(Error::Format(format!(
                    "edge ({}, {}) of type {} has weight {}",
                    e.u,
                    e.v,
                    e.etype.code(),
                    e.weight
                )));
            }
        }
        Ok(Self {
            nodes,
            n_obj_nodes,
            edges,
        })
    }

    pub fn nodes(&self) -> &[NodeKind] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeKind {
        &self.nodes[id.0]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_obj_nodes(&self) -> usize {
        self.n_obj_nodes
    }

    pub fn n_room_nodes(&self) -> usize {
        self.nodes.len() - self.n_obj_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn room_nodes(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .skip(self.n_obj_nodes)
            .filter_map(|(i, n)| match n {
                NodeKind::Room { name } => Some((NodeId(i), name.as_str())),
                NodeKind::Image { .. } => None,
            })
    }

    pub fn manifest(&self) -> NodeManifest {
        NodeManifest {
            n_obj_nodes: self.n_obj_nodes,
            n_room_nodes: self.n_room_nodes(),
            nodes: self.nodes.clone(),
        }
    }

    /// Writes `<dir>/graph.json` and `<dir>/edges.kge`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("graph.json");
        let file = File::create(&json).map_err(Error::io(&json))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.manifest())?;
        w.write_all(b"\n").map_err(Error::io(&json))?;
        w.flush().map_err(Error::io(&json))?;

        let kge = dir.join("edges.kge");
        let file = File::create(&kge).map_err(Error::io(&kge))?;
        write_edges(&self.edges, BufWriter::new(file)).map_err(Error::io(&kge))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = dir.join("graph.json");
        let file = File::open(&json).map_err(Error::io(&json))?;
        let manifest: NodeManifest = serde_json::from_reader(BufReader::new(file))?;
        let kge = dir.join("edges.kge");
        let file = File::open(&kge).map_err(Error::io(&kge))?;
        let edges = read_edges(BufReader::new(file))?;
        let g = Self::from_parts(manifest.nodes, edges, 1e-6)?;
        if g.n_obj_nodes != manifest.n_obj_nodes || g.n_room_nodes() != manifest.n_room_nodes {
            return Err(Error::Format("graph manifest node counts disagree".into()));
        }
        Ok(g)
    }
}

/// `b"KGE1"`, `u64` count, then per edge `u32 u, u32 v, f32 weight, u8 etype`,
/// all little-endian.
pub fn write_edges<W: Write>(edges: &[Edge], mut w: W) -> std::io::Result<()> {
    w.write_all(EDGE_MAGIC)?;
    w.write_all(&(edges.len() as u64).to_le_bytes())?;
    for e in edges {
        w.write_all(&(e.u.0 as u32).to_le_bytes())?;
        w.write_all(&(e.v.0 as u32).to_le_bytes())?;
        w.write_all(&(e.weight as f32).to_le_bytes())?;
        w.write_all(&[e.etype.code()])?;
    }
    w.flush()
}

pub fn read_edges<R: Read>(mut r: R) -> Result<Vec<Edge>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading edges: {e}")))?;
    if bytes.len() < 12 {
        return Err(Error::Format("edge list header truncated".into()));
    }
    if &bytes[..4] != EDGE_MAGIC {
        return Err(Error::BadMagic {
            expected: "KGE1".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != count * EDGE_RECORD_BYTES {
        return Err(Error::Shape(format!(
            "edge list declares {count} records, payload has {} bytes",
            body.len()
        )));
    }
    body.chunks_exact(EDGE_RECORD_BYTES)
        .map(|c| {
            Ok(Edge {
                u: NodeId(u32::from_le_bytes(c[0..4].try_into().unwrap()) as usize),
                v: NodeId(u32::from_le_bytes(c[4..8].try_into().unwrap()) as usize),
                weight: f64::from(f32::from_le_bytes(c[8..12].try_into().unwrap())),
                etype: EdgeType::from_code(c[12])?,
            })
        })
        .collect()
}

/// Builds the five-edge-type graph over the training images of `split`.
///
/// Same-room weights are drawn from the seeded generator in canonical edge
/// order, so only they depend on `seed`.
pub fn build_graph(
    split: &DatasetSplit,
    gt: &GroundTruthMap,
    scores: &SoftScoreTable,
    seed: u64,
) -> Result<KnowledgeGraph> {
    let rooms = gt.rooms();
    let room_index: BTreeMap<&str, usize> = rooms
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();

    let mut nodes = split.nodes(SplitPart::Train);
    let n_img = nodes.len();
    // per image node: (category, gt room index, positive weight)
    let mut info: Vec<(&str, usize, f64)> = Vec::with_capacity(n_img);
    let mut cache: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (cat, _) in split.categories.iter().filter(|(_, s)| !s.train.is_empty()) {
        let room = gt
            .gt_room(cat)
            .ok_or_else(|| Error::MissingGroundTruth(cat.clone()))?;
        let pos = scores
            .pair(cat, room)
            .map(|s| s.pos_score)
            .filter(|&p| p > 0.0)
            .ok_or_else(|| Error::MissingGroundTruth(cat.clone()))?;
        cache.insert(cat, (room_index[room], pos));
    }
    for n in &nodes {
        let NodeKind::Image { category, .. } = n else {
            unreachable!()
        };
        let (room, pos) = cache[category.as_str()];
        info.push((category.as_str(), room, pos));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let room_node = |r: usize| NodeId(n_img + r);
    for i in 0..n_img {
        let (cat_i, room_i, pos_i) = info[i];
        edges.push(Edge {
            u: NodeId(i),
            v: NodeId(i),
            weight: 1.0,
            etype: EdgeType::SelfLoop,
        });
        for (j, &(cat_j, room_j, _)) in info.iter().enumerate().skip(i + 1) {
            if cat_i == cat_j {
                edges.push(Edge {
                    u: NodeId(i),
                    v: NodeId(j),
                    weight: 1.0,
                    etype: EdgeType::SameObject,
                });
            } else if room_i == room_j {
                edges.push(Edge {
                    u: NodeId(i),
                    v: NodeId(j),
                    weight: rng.gen_range(SAME_ROOM_WEIGHT.0..=SAME_ROOM_WEIGHT.1),
                    etype: EdgeType::SameRoom,
                });
            }
        }
        for (r, room) in rooms.iter().enumerate() {
            if r == room_i {
                edges.push(Edge {
                    u: NodeId(i),
                    v: room_node(r),
                    weight: pos_i,
                    etype: EdgeType::CorrectRoom,
                });
            } else {
                let neg = gt.negative_weight(cat_i, room).unwrap_or(0.0);
                edges.push(Edge {
                    u: NodeId(i),
                    v: room_node(r),
                    weight: if neg == 0.0 { 0.0 } else { -neg },
                    etype: EdgeType::IncorrectRoom,
                });
            }
        }
    }
    nodes.extend(rooms.iter().map(|r| NodeKind::Room { name: r.clone() }));
    KnowledgeGraph::from_parts(nodes, edges, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTypeStats {
    pub etype: u8,
    pub count: usize,
    pub min_weight: Option<f64>,
    pub max_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_obj_nodes: usize,
    pub n_room_nodes: usize,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub per_type: Vec<EdgeTypeStats>,
}

impl GraphStats {
    pub fn count(&self, etype: EdgeType) -> usize {
        self.per_type[usize::from(etype.code()) - 1].count
    }
}

pub fn graph_stats(g: &KnowledgeGraph) -> GraphStats {
    let mut per_type: Vec<EdgeTypeStats> = EdgeType::ALL
        .iter()
        .map(|t| EdgeTypeStats {
            etype: t.code(),
            count: 0,
            min_weight: None,
            max_weight: None,
        })
        .collect();
    for e in &g.edges {
        let s = &mut per_type[usize::from(e.etype.code()) - 1];
        s.count += 1;
        s.min_weight = Some(s.min_weight.map_or(e.weight, |m| m.min(e.weight)));
        s.max_weight = Some(s.max_weight.map_or(e.weight, |m| m.max(e.weight)));
    }
    GraphStats {
        n_obj_nodes: g.n_obj_nodes,
        n_room_nodes: g.n_room_nodes(),
        n_nodes: g.n_nodes(),
        n_edges: g.edges.len(),
        per_type,
    }
}

/// Symmetrically normalized adjacency `D^{-1/2}(A⁺ + I)D^{-1/2}` in CSR form.
pub type PropagationMatrix = SparseMatrix;

/// Negative weights are clamped to zero. Every node carries exactly one unit
/// self loop: the `I` term, which stored self-loop edges coincide with
/// rather than add to. Degrees are therefore at least 1.
pub fn propagation_matrix(g: &KnowledgeGraph) -> Result<PropagationMatrix> {
    let n = g.n_nodes();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * g.edges.len() + n);
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    for e in &g.edges {
        if e.etype == EdgeType::SelfLoop {
            continue;
        }
        let w = e.weight.max(0.0);
        if w == 0.0 {
            continue;
        }
        triplets.push((e.u.0, e.v.0, w));
        if e.u != e.v {
            triplets.push((e.v.0, e.u.0, w));
        }
    }
    let a = SparseMatrix::from_triplets(n, n, triplets)?;
    let degree: Vec<f64> = (0..n)
        .map(|r| a.row_entries(r).map(|(_, v)| v).sum())
        .collect();
    let mut values = Vec::with_capacity(a.nnz());
    for r in 0..n {
        for (c, v) in a.row_entries(r) {
            values.push(v / (degree[r] * degree[c]).sqrt());
        }
    }
    SparseMatrix::new(n, n, a.indptr().to_vec(), a.indices().to_vec(), values)
}
