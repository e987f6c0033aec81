//! Node feature matrices, dataset splits and the synthetic generator.
//!
//! Feature files (`AFM1`) are `b"AFM1"`, `u32` row count, `u32` dimension,
//! then `rows * dim` little-endian `f32` values. A JSON sidecar maps each
//! row to the node it describes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::annotations::{ground_truth_map, GroundTruthMap, ReceptacleScore, SoftScoreTable};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

const FEATURE_MAGIC: &[u8; 4] = b"AFM1";

/// Row-major `f32` node features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_rows * dim {
            return Err(Error::Shape(format!(
                "{n_rows}x{dim} features need {} values, got {}",
                n_rows * dim,
                data.len()
            )));
        }
        if dim > 0 {
            if let Some(row) = data
                .chunks(dim)
                .position(|r| r.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite { row });
            }
        }
        Ok(Self { n_rows, dim, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n_rows {
                return Err(Error::Shape(format!(
                    "feature row {i} out of range for {} rows",
                    self.n_rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            n_rows: indices.len(),
            dim: self.dim,
            data,
        })
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_vec(
            self.n_rows,
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn checksum(&self) -> u64 {
        xxhash_rust::xxh3::xxh3_64(&self.payload_bytes())
    }
}

pub fn write_features<W: Write>(m: &FeatureMatrix, mut w: W) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(m.n_rows as u32).to_le_bytes())?;
    w.write_all(&(m.dim as u32).to_le_bytes())?;
    w.write_all(&m.payload_bytes())?;
    w.flush()
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading features: {e}")))?;
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "feature header needs 12 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: "AFM1".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let n_rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != n_rows * dim * 4 {
        return Err(Error::Shape(format!(
            "header declares {n_rows}x{dim} ({} bytes), payload has {} bytes",
            n_rows * dim * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(n_rows, dim, data)
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(Error::io(path))?;
    let m = read_features(BufReader::new(file))?;
    log::debug!(
        "loaded {} ({}x{}), payload xxh3 {:#018x}",
        path.display(),
        m.n_rows,
        m.dim,
        m.checksum()
    );
    Ok(m)
}

pub fn save_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    write_features(m, BufWriter::new(file)).map_err(Error::io(path))
}

/// What a feature row (and a graph node) stands for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NodeKind {
    Image { category: String, image: usize },
    Room { name: String },
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Image { category, image } => write!(f, "{category}/{image}"),
            NodeKind::Room { name } => write!(f, "room:{name}"),
        }
    }
}

/// Sidecar mapping feature row index → node.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub rows: Vec<NodeKind>,
}

impl FeatureManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(Error::io(path))
    }

    pub fn index(&self) -> HashMap<&NodeKind, usize> {
        self.rows.iter().enumerate().map(|(i, k)| (k, i)).collect()
    }

    /// Image count per category. Image indices must be `0..n` per category.
    pub fn image_counts(&self) -> Result<BTreeMap<String, usize>> {
        let mut seen: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for row in &self.rows {
            if let NodeKind::Image { category, image } = row {
                seen.entry(category.clone()).or_default().push(*image);
            }
        }
        seen.into_iter()
            .map(|(cat, mut imgs)| {
                imgs.sort_unstable();
                if imgs.iter().enumerate().any(|(i, &v)| i != v) {
                    return Err(Error::Format(format!(
                        "images of category `{cat}` are not numbered 0..{}",
                        imgs.len()
                    )));
                }
                Ok((cat, imgs.len()))
            })
            .collect()
    }

    pub fn rooms(&self) -> Vec<String> {
        let mut rooms: Vec<String> = self
            .rows
            .iter()
            .filter_map(|r| match r {
                NodeKind::Room { name } => Some(name.clone()),
                NodeKind::Image { .. } => None,
            })
            .collect();
        rooms.sort();
        rooms
    }
}

/// Rows of `features` for the requested nodes, in the requested order.
pub fn gather_rows(
    features: &FeatureMatrix,
    manifest: &FeatureManifest,
    nodes: &[NodeKind],
) -> Result<FeatureMatrix> {
    if manifest.rows.len() != features.n_rows() {
        return Err(Error::Shape(format!(
            "manifest lists {} rows, feature matrix has {}",
            manifest.rows.len(),
            features.n_rows()
        )));
    }
    let index = manifest.index();
    let rows = nodes
        .iter()
        .map(|n| {
            index
                .get(n)
                .copied()
                .ok_or_else(|| Error::Format(format!("no feature row for node {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    features.select_rows(&rows)
}

/// Integer split ratio `train:val:test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 15,
            val: 5,
            test: 10,
        }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("split ratio `{s}` is not of the form a:b:c"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let p = |x: &str| x.trim().parse::<u32>().map_err(|_| bad());
        let r = Self {
            train: p(parts[0])?,
            val: p(parts[1])?,
            test: p(parts[2])?,
        };
        if r.train == 0 {
            return Err(Error::Config(format!(
                "split ratio `{s}` has no training share"
            )));
        }
        Ok(r)
    }
}

impl SplitRatios {
    /// Sizes for `n` images: cumulative boundaries `round(n·a/s)` and
    /// `round(n·(a+b)/s)`. Exact when `n` equals the ratio sum.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let total = u64::from(self.train) + u64::from(self.val) + u64::from(self.test);
        if total == 0 || self.train == 0 {
            return Err(Error::Config(format!("degenerate split ratio {self}")));
        }
        let boundary = |share: u64| ((n as u64 * share * 2 + total) / (2 * total)) as usize;
        let b1 = boundary(u64::from(self.train));
        let b2 = boundary(u64::from(self.train) + u64::from(self.val));
        let sizes = (b1, b2 - b1, n - b2);
        let starved = |part: u32, size: usize| part > 0 && size == 0;
        if starved(self.train, sizes.0) || starved(self.val, sizes.1) || starved(self.test, sizes.2)
        {
            return Err(Error::Config(format!(
                "{n} images are too few for split ratio {self}"
            )));
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split part `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategorySplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl CategorySplit {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Per-category train/val/test image indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub categories: BTreeMap<String, CategorySplit>,
}

impl DatasetSplit {
    /// `(category, image)` pairs of one part, category-major.
    pub fn nodes(&self, part: SplitPart) -> Vec<NodeKind> {
        self.categories
            .iter()
            .flat_map(|(cat, s)| {
                s.part(part).iter().map(move |&image| NodeKind::Image {
                    category: cat.clone(),
                    image,
                })
            })
            .collect()
    }
}

/// Seeded per-category shuffle, then contiguous train/val/test assignment.
pub fn split_dataset(
    images_per_category: &BTreeMap<String, usize>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut categories = BTreeMap::new();
    for (cat, &n) in images_per_category {
        let (n_train, n_val, _) = ratios
            .sizes(n)
            .map_err(|e| Error::Config(format!("category `{cat}`: {e}")))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        categories.insert(
            cat.clone(),
            CategorySplit {
                train: order,
                val,
                test,
            },
        );
    }
    Ok(DatasetSplit { categories })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoomFeatures {
    /// `e_r` padded with zeros to the feature dimension.
    OneHot,
    /// The room's cluster center.
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub n_rooms: usize,
    pub images_per_category: usize,
    pub dim: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub room_features: RoomFeatures,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_rooms < 2 || self.n_categories < self.n_rooms {
            return Err(Error::Config(format!(
                "need n_categories >= n_rooms >= 2, got {} categories and {} rooms",
                self.n_categories, self.n_rooms
            )));
        }
        if self.images_per_category == 0 || self.dim == 0 {
            return Err(Error::Config(
                "images per category and dim must be positive".into(),
            ));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::Config("cluster separation must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if self.room_features == RoomFeatures::OneHot && self.dim < self.n_rooms {
            return Err(Error::Config(format!(
                "one-hot room features need dim >= {} rooms, got dim {}",
                self.n_rooms, self.dim
            )));
        }
        Ok(())
    }

    pub fn category_name(i: usize) -> String {
        format!("object_{i:03}")
    }

    pub fn room_name(i: usize) -> String {
        format!("room_{i:02}")
    }
}

/// Generated features with their manifest and preference scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub features: FeatureMatrix,
    pub manifest: FeatureManifest,
    pub scores: SoftScoreTable,
    pub gt: GroundTruthMap,
}

/// Gram-Schmidt over Gaussian draws supported on coordinates `skip..dim`;
/// falls back to plain normalization once that subspace is exhausted.
fn room_centers(rng: &mut ChaCha8Rng, n: usize, dim: usize, skip: usize) -> Vec<Vec<f64>> {
    let free = dim - skip;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
    while centers.len() < n {
        let mut v = vec![0.0; dim];
        for a in &mut v[skip..] {
            *a = rng.sample(StandardNormal);
        }
        if centers.len() < free {
            for c in &centers {
                let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(c) {
                    *a -= proj * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        centers.push(v);
    }
    centers
}

/// Category `c` lives in room `c mod n_rooms`; images are the room center
/// plus isotropic Gaussian noise.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // With one-hot room rows the centers avoid the one-hot coordinates, so
    // those inputs identify rooms and nothing else.
    let skip = match spec.room_features {
        RoomFeatures::OneHot if spec.dim > spec.n_rooms => spec.n_rooms,
        _ => 0,
    };
    let centers: Vec<Vec<f64>> = room_centers(&mut rng, spec.n_rooms, spec.dim, skip)
        .into_iter()
        .map(|c| c.into_iter().map(|v| v * spec.cluster_separation).collect())
        .collect();
    let rooms: Vec<String> = (0..spec.n_rooms).map(SyntheticSpec::room_name).collect();

    let mut receptacles = Vec::new();
    let mut data = Vec::with_capacity(
        (spec.n_categories * spec.images_per_category + spec.n_rooms) * spec.dim,
    );
    let mut rows = Vec::new();
    for c in 0..spec.n_categories {
        let category = SyntheticSpec::category_name(c);
        let home = c % spec.n_rooms;
        for (r, room) in rooms.iter().enumerate() {
            let (pos, neg) = if r == home {
                (rng.gen_range(0.7..=1.0), 0.0)
            } else {
                (0.0, rng.gen_range(0.1..=0.5))
            };
            receptacles.push(ReceptacleScore {
                object_id: category.clone(),
                room_id: room.clone(),
                receptacle_id: "receptacle_0".into(),
                pos,
                neg,
            });
        }
        for image in 0..spec.images_per_category {
            for (j, &mu) in centers[home].iter().enumerate() {
                if j < skip {
                    data.push(0.0);
                    continue;
                }
                let z: f64 = rng.sample(StandardNormal);
                data.push((mu + spec.noise_sigma * z) as f32);
            }
            rows.push(NodeKind::Image {
                category: category.clone(),
                image,
            });
        }
    }
    for (r, room) in rooms.iter().enumerate() {
        match spec.room_features {
            RoomFeatures::OneHot => {
                data.extend((0..spec.dim).map(|j| if j == r { 1.0f32 } else { 0.0 }))
            }
            RoomFeatures::Center => data.extend(centers[r].iter().map(|&v| v as f32)),
        }
        rows.push(NodeKind::Room { name: room.clone() });
    }

    let scores = SoftScoreTable::from_receptacles(receptacles)?;
    let gt = ground_truth_map(&scores, &rooms)?;
    let features = FeatureMatrix::new(rows.len(), spec.dim, data)?;
    Ok(SyntheticDataset {
        features,
        manifest: FeatureManifest { rows },
        scores,
        gt,
    })
}
