//! Test-time scoring: self-edge-only encoding, cosine affinities to rooms,
//! per-category aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::annotations::GroundTruthMap;
use crate::error::{Error, Result};
use crate::features::{
    gather_rows, DatasetSplit, FeatureManifest, FeatureMatrix, NodeKind, SplitPart,
};
use crate::gcn::{forward, GcnModel};
use crate::linalg::{cosine, l2_norm, DenseMatrix, SparseMatrix};
use crate::metrics::{evaluate, rank_order, EvalReport};

/// Rows (images or categories) × rooms of cosine affinities.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub values: DenseMatrix,
}

/// Encodes rows with identity propagation: each node sees only itself.
pub fn embed_selfedges(model: &GcnModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    let identity = SparseMatrix::identity(x.rows());
    Ok(forward(model, &identity, x)?.0)
}

fn nonzero_rows(m: &DenseMatrix, names: &[String], what: &str) -> Result<()> {
    for (i, name) in names.iter().enumerate() {
        if l2_norm(m.row(i)) == 0.0 {
            return Err(Error::ZeroNorm(format!(
                "{what} `{name}` embeds to the zero vector"
            )));
        }
    }
    Ok(())
}

pub fn image_affinities(
    model: &GcnModel,
    image_x: &DenseMatrix,
    image_names: &[String],
    room_x: &DenseMatrix,
    room_names: &[String],
) -> Result<AffinityMatrix> {
    if image_names.len() != image_x.rows() || room_names.len() != room_x.rows() {
        return Err(Error::Shape("row names do not match feature rows".into()));
    }
    let img = embed_selfedges(model, image_x)?;
    let rooms = embed_selfedges(model, room_x)?;
    nonzero_rows(&img, image_names, "image")?;
    nonzero_rows(&rooms, room_names, "room")?;
    let mut values = DenseMatrix::zeros(img.rows(), rooms.rows());
    for i in 0..img.rows() {
        for r in 0..rooms.rows() {
            values.set(i, r, cosine(img.row(i), rooms.row(r))?);
        }
    }
    Ok(AffinityMatrix {
        row_names: image_names.to_vec(),
        col_names: room_names.to_vec(),
        values,
    })
}

/// Unweighted mean of image rows per category. Rows are summed in sorted
/// image-name order, so the result ignores input row order.
pub fn aggregate_category(
    per_image: &AffinityMatrix,
    category_of: &BTreeMap<String, String>,
) -> Result<AffinityMatrix> {
    let mut groups: BTreeMap<&str, Vec<(&str, usize)>> = category_of
        .values()
        .map(|c| (c.as_str(), Vec::new()))
        .collect();
    for (i, name) in per_image.row_names.iter().enumerate() {
        let cat = category_of
            .get(name)
            .ok_or_else(|| Error::Format(format!("image `{name}` has no category")))?;
        groups.get_mut(cat.as_str()).unwrap().push((name, i));
    }
    let n_cols = per_image.col_names.len();
    let mut values = DenseMatrix::zeros(groups.len(), n_cols);
    let mut row_names = Vec::with_capacity(groups.len());
    for (k, (cat, mut rows)) in groups.into_iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Format(format!("category `{cat}` has no images")));
        }
        rows.sort_unstable();
        if rows.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Format(format!(
                "duplicate image rows in category `{cat}`"
            )));
        }
        let dst = values.row_mut(k);
        for &(_, i) in &rows {
            for (d, v) in dst.iter_mut().zip(per_image.values.row(i)) {
                *d += v;
            }
        }
        let n = rows.len() as f64;
        dst.iter_mut().for_each(|d| *d /= n);
        row_names.push(cat.to_string());
    }
    Ok(AffinityMatrix {
        row_names,
        col_names: per_image.col_names.clone(),
        values,
    })
}

/// Query images of one split part with their categories and the room
/// features, ready for scoring.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub images: DenseMatrix,
    pub image_names: Vec<String>,
    pub category_of: BTreeMap<String, String>,
    pub rooms: DenseMatrix,
    pub room_names: Vec<String>,
    pub gt: GroundTruthMap,
}

impl QuerySet {
    pub fn from_split(
        features: &FeatureMatrix,
        manifest: &FeatureManifest,
        split: &DatasetSplit,
        part: SplitPart,
        gt: &GroundTruthMap,
    ) -> Result<Self> {
        let nodes = split.nodes(part);
        let images = gather_rows(features, manifest, &nodes)?.to_dense();
        let image_names: Vec<String> = nodes.iter().map(ToString::to_string).collect();
        let category_of = nodes
            .iter()
            .zip(&image_names)
            .map(|(n, name)| match n {
                NodeKind::Image { category, .. } => (name.clone(), category.clone()),
                NodeKind::Room { .. } => unreachable!("split parts hold images only"),
            })
            .collect();
        let room_nodes: Vec<NodeKind> = gt
            .rooms()
            .iter()
            .map(|r| NodeKind::Room { name: r.clone() })
            .collect();
        let rooms = gather_rows(features, manifest, &room_nodes)?.to_dense();
        Ok(Self {
            images,
            image_names,
            category_of,
            rooms,
            room_names: gt.rooms().to_vec(),
            gt: gt.clone(),
        })
    }

    pub fn category_affinities(&self, model: &GcnModel) -> Result<AffinityMatrix> {
        let per_image = image_affinities(
            model,
            &self.images,
            &self.image_names,
            &self.rooms,
            &self.room_names,
        )?;
        aggregate_category(&per_image, &self.category_of)
    }
}

pub fn evaluate_model(model: &GcnModel, queries: &QuerySet, ks: &[usize]) -> Result<EvalReport> {
    let aff = queries.category_affinities(model)?;
    evaluate(&aff, &queries.gt, ks)
}

/// One line per row: the row name, then `room,score` pairs by descending
/// affinity.
pub fn write_rankings_csv<W: Write>(aff: &AffinityMatrix, mut w: W) -> std::io::Result<()> {
    let mut header = String::from("category");
    for k in 1..=aff.col_names.len() {
        write!(header, ",room_{k},score_{k}").unwrap();
    }
    writeln!(w, "{header}")?;
    for (i, name) in aff.row_names.iter().enumerate() {
        let row = aff.values.row(i);
        let mut line = name.clone();
        for c in rank_order(row) {
            write!(line, ",{},{}", aff.col_names[c], row[c]).unwrap();
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

/// TSV with a `name d0 d1 …` header; values carry 17 significant digits.
pub fn write_embeddings_tsv<W: Write>(
    names: &[String],
    emb: &DenseMatrix,
    mut w: W,
) -> std::io::Result<()> {
    let mut header = String::from("name");
    for j in 0..emb.cols() {
        write!(header, "\td{j}").unwrap();
    }
    writeln!(w, "{header}")?;
    for (i, name) in names.iter().enumerate() {
        let mut line = name.clone();
        for v in emb.row(i) {
            write!(line, "\t{v:.16e}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn read_embeddings_tsv<R: BufRead>(r: R) -> Result<(Vec<String>, DenseMatrix)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty embeddings file".into()))?
        .map_err(|e| Error::Format(e.to_string()))?;
    let dims = header.split('\t').count() - 1;
    let mut names = Vec::new();
    let mut data = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        let mut fields = line.split('\t');
        names.push(fields.next().unwrap_or_default().to_string());
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("embedding row {k}: {e}")))?;
        if row.len() != dims {
            return Err(Error::Shape(format!(
                "embedding row {k} has {} values, header lists {dims}",
                row.len()
            )));
        }
        data.extend(row);
    }
    let m = DenseMatrix::from_vec(names.len(), dims, data)?;
    Ok((names, m))
}

/// Self-edge embeddings of every row, written as TSV.
pub fn export_embeddings(
    model: &GcnModel,
    x: &DenseMatrix,
    names: &[String],
    path: &Path,
) -> Result<()> {
    if names.len() != x.rows() {
        return Err(Error::Shape("row names do not match feature rows".into()));
    }
    let emb = embed_selfedges(model, x)?;
    let file = File::create(path).map_err(Error::io(path))?;
    write_embeddings_tsv(names, &emb, BufWriter::new(file)).map_err(Error::io(path))
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, DenseMatrix)> {
    let file = File::open(path).map_err(Error::io(path))?;
    read_embeddings_tsv(BufReader::new(file))
}
