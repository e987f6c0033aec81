//! Stacked graph convolutions `H' = σ(Â H W)` with an exact backward pass.
//!
//! Hidden layers use ReLU; the output layer is linear so embeddings keep
//! signed components for cosine similarity. There are no bias terms, which
//! makes the encoder positively homogeneous in its input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, relu, spmm, DenseMatrix, SparseMatrix};

const CHECKPOINT_MAGIC: &[u8; 4] = b"GCK1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub seed: u64,
}

impl GcnConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dims: vec![256],
            out_dim: 128,
            seed: 0,
        }
    }

    /// `[in_dim, hidden.., out_dim]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.out_dim))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims().contains(&0) {
            return Err(Error::Config(format!(
                "layer dimensions must be positive: {:?}",
                self.layer_dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    weights: Vec<DenseMatrix>,
}

impl GcnModel {
    pub fn from_weights(weights: Vec<DenseMatrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        for (l, pair) in weights.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::Shape(format!(
                    "layer {l} outputs {} columns but layer {} expects {}",
                    pair[0].cols(),
                    l + 1,
                    pair[1].rows()
                )));
            }
        }
        if let Some(l) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite { row: l });
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    /// The layer widths as a config (the seed is not recoverable).
    pub fn config_echo(&self) -> GcnConfig {
        GcnConfig {
            in_dim: self.in_dim(),
            hidden_dims: self.weights[..self.weights.len() - 1]
                .iter()
                .map(DenseMatrix::cols)
                .collect(),
            out_dim: self.out_dim(),
            seed: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum()
    }
}

/// Glorot-uniform initialization from the config seed.
pub fn init_weights(config: &GcnConfig) -> Result<GcnModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = config.layer_dims();
    let weights = dims
        .windows(2)
        .map(|d| {
            let (fan_in, fan_out) = (d[0], d[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            DenseMatrix::from_vec(fan_in, fan_out, data).expect("sized above")
        })
        .collect();
    GcnModel::from_weights(weights)
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// `Â · H_in`
    pub propagated: DenseMatrix,
    /// `Â · H_in · W`
    pub pre_activation: DenseMatrix,
    /// Layer output (ReLU of the pre-activation, or the pre-activation
    /// itself on the output layer).
    pub output: DenseMatrix,
}

/// Intermediate values of one forward pass, needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<'a> {
    pub adjacency: &'a SparseMatrix,
    pub input: DenseMatrix,
    pub layers: Vec<LayerCache>,
}

fn check_inputs(model: &GcnModel, adj: &SparseMatrix, x: &DenseMatrix) -> Result<()> {
    if adj.rows() != adj.cols() || adj.rows() != x.rows() {
        return Err(Error::Shape(format!(
            "propagation matrix is {}x{} but features have {} rows",
            adj.rows(),
            adj.cols(),
            x.rows()
        )));
    }
    if x.cols() != model.in_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            x.cols(),
            model.in_dim()
        )));
    }
    Ok(())
}

pub fn forward<'a>(
    model: &GcnModel,
    adj: &'a SparseMatrix,
    x: &DenseMatrix,
) -> Result<(DenseMatrix, ForwardCache<'a>)> {
    check_inputs(model, adj, x)?;
    let last = model.n_layers() - 1;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(model.n_layers());
    for (l, w) in model.weights.iter().enumerate() {
        let h_in = layers.last().map_or(x, |c| &c.output);
        let propagated = spmm(adj, h_in)?;
        let pre_activation = matmul(&propagated, w)?;
        let output = if l == last {
            pre_activation.clone()
        } else {
            relu(&pre_activation)
        };
        layers.push(LayerCache {
            propagated,
            pre_activation,
            output,
        });
    }
    let h = layers.last().unwrap().output.clone();
    Ok((
        h,
        ForwardCache {
            adjacency: adj,
            input: x.clone(),
            layers,
        },
    ))
}

/// Forward pass without keeping intermediates.
pub fn embed(model: &GcnModel, adj: &SparseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    check_inputs(model, adj, x)?;
    let last = model.n_layers() - 1;
    let mut h = x.clone();
    for (l, w) in model.weights.iter().enumerate() {
        let z = matmul(&spmm(adj, &h)?, w)?;
        h = if l == last { z } else { relu(&z) };
    }
    Ok(h)
}

/// Gradients of a scalar objective with respect to every weight matrix,
/// given its gradient `grad_h` with respect to the output embeddings.
/// Relies on `Â` being symmetric.
pub fn backward(
    model: &GcnModel,
    cache: &ForwardCache<'_>,
    grad_h: &DenseMatrix,
) -> Result<Vec<DenseMatrix>> {
    if cache.layers.len() != model.n_layers() {
        return Err(Error::Shape(
            "forward cache does not match the model".into(),
        ));
    }
    let out = &cache.layers.last().unwrap().output;
    if grad_h.shape() != out.shape() {
        return Err(Error::Shape(format!(
            "output gradient is {:?}, embeddings are {:?}",
            grad_h.shape(),
            out.shape()
        )));
    }
    let last = model.n_layers() - 1;
    let mut grads = vec![DenseMatrix::zeros(0, 0); model.n_layers()];
    let mut upstream = grad_h.clone();
    for l in (0..model.n_layers()).rev() {
        let layer = &cache.layers[l];
        let mut dz = upstream;
        if l != last {
            for (g, &z) in dz.data_mut().iter_mut().zip(layer.pre_activation.data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grads[l] = matmul_tn(&layer.propagated, &dz)?;
        if l == 0 {
            break;
        }
        upstream = spmm(cache.adjacency, &matmul_nt(&dz, &model.weights[l])?)?;
    }
    Ok(grads)
}

fn checkpoint_body(model: &GcnModel) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(model.n_layers() as u32).to_le_bytes());
    for w in &model.weights {
        body.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        body.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        for v in w.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    body
}

/// `b"GCK1"`, `u32` layer count, per layer `u32 rows, u32 cols, f64 values`,
/// then the xxh3-64 of everything between magic and checksum. Little-endian.
pub fn write_checkpoint<W: Write>(model: &GcnModel, mut w: W) -> std::io::Result<()> {
    let body = checkpoint_body(model);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&body)?;
    w.write_all(&xxhash_rust::xxh3::xxh3_64(&body).to_le_bytes())?;
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<GcnModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
    if bytes.len() < 4 + 4 + 8 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "GCK1".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let body = &bytes[4..bytes.len() - 8];
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(cursor..cursor + n).ok_or_else(|| {
            Error::Shape("checkpoint payload shorter than its header declares".into())
        })?;
        cursor += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let n_layers = u32_at(take(4)?);
    let mut weights = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.push(DenseMatrix::from_vec(rows, cols, data)?);
    }
    if cursor != body.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} bytes beyond its declared layers",
            body.len() - cursor
        )));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let actual = xxhash_rust::xxh3::xxh3_64(body);
    if stored != actual {
        return Err(Error::Checksum {
            expected: stored,
            actual,
        });
    }
    GcnModel::from_weights(weights)
}

pub fn save_checkpoint(model: &GcnModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    write_checkpoint(model, BufWriter::new(file)).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<GcnModel> {
    let file = File::open(path).map_err(Error::io(path))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(in_dim: usize, hidden: &[usize], out: usize, seed: u64) -> GcnConfig {
        GcnConfig {
            in_dim,
            hidden_dims: hidden.to_vec(),
            out_dim: out,
            seed,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_adj(rng: &mut ChaCha8Rng, n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, rng.gen_range(0.2..1.0)));
            for j in i + 1..n {
                if rng.gen_bool(0.3) {
                    let w = rng.gen_range(0.0..0.5);
                    t.push((i, j, w));
                    t.push((j, i, w));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, t).unwrap()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_weights(&cfg(7, &[5], 3, 1)).unwrap();
        let b = init_weights(&cfg(7, &[5], 3, 1)).unwrap();
        let c = init_weights(&cfg(7, &[5], 3, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bounds = [(6.0f64 / 12.0).sqrt(), (6.0f64 / 8.0).sqrt()];
        for (w, bound) in a.weights().iter().zip(bounds) {
            assert!(w.data().iter().all(|v| v.abs() <= bound));
        }
        assert!(init_weights(&cfg(0, &[], 3, 0)).is_err());
    }

    #[test]
    fn identity_network_passes_features_through() {
        let model = GcnModel::from_weights(vec![DenseMatrix::identity(3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 4, 3);
        let (h, _) = forward(&model, &SparseMatrix::identity(4), &x).unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn two_node_linear_layer() {
        let model =
            GcnModel::from_weights(vec![DenseMatrix::from_rows(&[vec![1.0]]).unwrap()]).unwrap();
        let adj = SparseMatrix::from_triplets(
            2,
            2,
            vec![(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)],
        )
        .unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let (h, cache) = forward(&model, &adj, &x).unwrap();
        assert_eq!(h.data(), &[2.0, 2.0]);

        // grad_W = (ÂX)ᵀ · grad_H = [2, 2] · [1, -0.5]ᵀ = 1
        let gh = DenseMatrix::from_rows(&[vec![1.0], vec![-0.5]]).unwrap();
        let g = backward(&model, &cache, &gh).unwrap();
        assert_eq!(g[0].data(), &[1.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = init_weights(&cfg(4, &[6, 5], 3, 4)).unwrap();
        let adj = random_adj(&mut rng, 8);
        let x = random(&mut rng, 8, 4);
        let (h, cache) = forward(&model, &adj, &x).unwrap();
        let grads = backward(&model, &cache, &DenseMatrix::zeros(h.rows(), h.cols())).unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shape_errors() {
        let model = init_weights(&cfg(4, &[], 2, 0)).unwrap();
        let x = DenseMatrix::zeros(3, 5);
        assert!(matches!(
            forward(&model, &SparseMatrix::identity(3), &x),
            Err(Error::Shape(_))
        ));
        let x = DenseMatrix::zeros(3, 4);
        assert!(forward(&model, &SparseMatrix::identity(2), &x).is_err());
        let eye = SparseMatrix::identity(3);
        let (_, cache) = forward(&model, &eye, &x).unwrap();
        assert!(backward(&model, &cache, &DenseMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn embed_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = init_weights(&cfg(4, &[6], 3, 5)).unwrap();
        let adj = random_adj(&mut rng, 9);
        let x = random(&mut rng, 9, 4);
        assert_eq!(
            embed(&model, &adj, &x).unwrap(),
            forward(&model, &adj, &x).unwrap().0
        );
    }

    /// Objective Σ c ⊙ H for fixed random c, so dL/dH = c.
    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let n = rng.gen_range(3..10);
            let hidden: Vec<usize> = (0..trial % 3).map(|_| rng.gen_range(2..6)).collect();
            let mut model = init_weights(&cfg(4, &hidden, 3, trial as u64)).unwrap();
            let adj = random_adj(&mut rng, n);
            let x = random(&mut rng, n, 4);
            let c = random(&mut rng, n, 3);
            let objective = |m: &GcnModel| -> f64 {
                let h = embed(m, &adj, &x).unwrap();
                h.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = forward(&model, &adj, &x).unwrap();
            let grads = backward(&model, &cache, &c).unwrap();
            let h = 1e-5;
            for l in 0..model.n_layers() {
                for k in 0..model.weights()[l].data().len() {
                    let orig = model.weights()[l].data()[k];
                    model.weights_mut()[l].data_mut()[k] = orig + h;
                    let up = objective(&model);
                    model.weights_mut()[l].data_mut()[k] = orig - h;
                    let down = objective(&model);
                    model.weights_mut()[l].data_mut()[k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[l].data()[k];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-4, "layer {l} param {k}: fd {fd} vs analytic {an}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let model = init_weights(&cfg(5, &[4], 3, 9)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"GCK1");
        assert_eq!(bytes.len(), 4 + 4 + 2 * 8 + (20 + 12) * 8 + 8);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(again, bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::BadMagic { .. })
        ));

        // declare more columns than the payload holds
        let mut bad = bytes.clone();
        bad[12..16].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Shape(_))
        ));

        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn config_echo_recovers_widths() {
        let model = init_weights(&cfg(5, &[7, 6], 4, 0)).unwrap();
        let echo = model.config_echo();
        assert_eq!(echo.layer_dims(), vec![5, 7, 6, 4]);
    }
}
