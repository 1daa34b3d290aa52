//! Datasets, cross-view similarity, class embeddings and their file formats.
//!
//! Feature matrices are stored one sample per column (`features x samples`).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, read_string, write_atomic, ByteReader};
use crate::numerics::DenseMatrix;
use crate::rng::{stream_rng, Stream};

const FEATURE_MAGIC: &[u8; 4] = b"XMHF";
const EMBEDDING_MAGIC: &[u8; 4] = b"XMHE";
const FORMAT_VERSION: u32 = 1;

/// Two-modality training data.
///
/// `image_features` and `token_features` are index-aligned pairs (one natural
/// image and its sketch-token rendering per column). `sketch_features` lives in
/// the same space as `token_features` because both go through one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub image_features: DenseMatrix,
    pub token_features: DenseMatrix,
    pub sketch_features: DenseMatrix,
    pub image_labels: Vec<usize>,
    pub sketch_labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureDataset {
    pub fn new(
        image_features: DenseMatrix,
        token_features: DenseMatrix,
        sketch_features: DenseMatrix,
        image_labels: Vec<usize>,
        sketch_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            image_features,
            token_features,
            sketch_features,
            image_labels,
            sketch_labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n1 = self.image_features.cols();
        if self.token_features.cols() != n1 {
            return Err(Error::shape(
                "dataset: image/token pairs",
                format!("{n1} images"),
                format!("{} tokens", self.token_features.cols()),
            ));
        }
        if self.sketch_features.rows() != self.token_features.rows() {
            return Err(Error::shape(
                "dataset: shared encoder input",
                format!("token dim {}", self.token_features.rows()),
                format!("sketch dim {}", self.sketch_features.rows()),
            ));
        }
        if self.image_labels.len() != n1 {
            return Err(Error::shape(
                "dataset: image labels",
                format!("{n1} samples"),
                format!("{} labels", self.image_labels.len()),
            ));
        }
        if self.sketch_labels.len() != self.sketch_features.cols() {
            return Err(Error::shape(
                "dataset: sketch labels",
                format!("{} samples", self.sketch_features.cols()),
                format!("{} labels", self.sketch_labels.len()),
            ));
        }
        check_labels(&self.image_labels, self.num_classes)?;
        check_labels(&self.sketch_labels, self.num_classes)?;
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.image_features.cols()
    }

    pub fn n_sketches(&self) -> usize {
        self.sketch_features.cols()
    }

    pub fn image_dim(&self) -> usize {
        self.image_features.rows()
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketch_features.rows()
    }

    /// Keeps the first `keep` sketches for training and returns the rest as
    /// held-out queries `(features, labels)`.
    pub fn split_sketches(mut self, keep: usize) -> Result<(Self, DenseMatrix, Vec<usize>)> {
        let n2 = self.n_sketches();
        if keep == 0 || keep > n2 {
            return Err(Error::invalid(format!(
                "cannot keep {keep} of {n2} sketches"
            )));
        }
        let train: Vec<usize> = (0..keep).collect();
        let held: Vec<usize> = (keep..n2).collect();
        let held_feats = self.sketch_features.select_columns(&held);
        let held_labels = self.sketch_labels.split_off(keep);
        self.sketch_features = self.sketch_features.select_columns(&train);
        Ok((self, held_feats, held_labels))
    }
}

pub fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::invalid(format!(
            "label {l} at position {i} is outside [0, {num_classes})"
        )));
    }
    Ok(())
}

/// Cross-view similarity: `w[i][j] = +1` iff image `i` and sketch `j` share a class, else `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub w: DenseMatrix,
}

pub fn build_similarity(
    image_labels: &[usize],
    sketch_labels: &[usize],
) -> Result<SimilarityMatrix> {
    if image_labels.is_empty() || sketch_labels.is_empty() {
        return Err(Error::invalid(
            "similarity needs non-empty label lists on both sides",
        ));
    }
    let w = DenseMatrix::from_fn(image_labels.len(), sketch_labels.len(), |i, j| {
        if image_labels[i] == sketch_labels[j] {
            1.0
        } else {
            -1.0
        }
    });
    Ok(SimilarityMatrix { w })
}

/// Class embedding table, one `dim`-vector per class column.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub class_table: DenseMatrix,
}

impl SemanticEmbedding {
    pub fn new(class_table: DenseMatrix) -> Result<Self> {
        if class_table.rows() == 0 || class_table.cols() == 0 {
            return Err(Error::invalid("embedding table must be at least 1x1"));
        }
        if !class_table.is_finite() {
            return Err(Error::invalid("embedding table has non-finite entries"));
        }
        Ok(Self { class_table })
    }

    pub fn dim(&self) -> usize {
        self.class_table.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.cols()
    }

    /// `dim x n` matrix whose column `j` is the embedding of `labels[j]`.
    pub fn embed_labels(&self, labels: &[usize]) -> Result<DenseMatrix> {
        check_labels(labels, self.num_classes())?;
        Ok(self.class_table.select_columns(labels))
    }

    /// Seeded Gaussian table with unit-norm columns.
    pub fn synthetic(dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid(
                "embedding needs dim >= 1 and at least one class",
            ));
        }
        let mut rng = stream_rng(seed, Stream::Embedding);
        let mut table = DenseMatrix::from_fn(dim, num_classes, |_, _| rng.sample(StandardNormal));
        for c in 0..num_classes {
            let norm = table.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            for r in 0..dim {
                table[(r, c)] /= norm;
            }
        }
        Self::new(table)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, c) = self.class_table.shape();
        let mut out = Vec::with_capacity(16 + 4 * d * c);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        push_column_major_f32(&mut out, &self.class_table);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Loads an embedding file, checking `dim`/`classes` when given.
    pub fn load(
        path: &Path,
        expect_dim: Option<usize>,
        expect_classes: Option<usize>,
    ) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.expect_magic(EMBEDDING_MAGIC)?;
        r.expect_version(FORMAT_VERSION)?;
        let d = r.u32()? as usize;
        let c = r.u32()? as usize;
        if d == 0 || c == 0 {
            return Err(r.format_err(format!("degenerate header d={d} C={c}")));
        }
        if let Some(want) = expect_dim.filter(|&w| w != d) {
            return Err(r.format_err(format!(
                "embedding dim {d} does not match configured {want}"
            )));
        }
        if let Some(want) = expect_classes.filter(|&w| w != c) {
            return Err(r.format_err(format!("embedding has {c} classes, dataset has {want}")));
        }
        let table = read_column_major_f32(&mut r, d, c)?;
        r.finish()?;
        Self::new(table).map_err(|e| r.format_err(e.to_string()))
    }
}

fn push_column_major_f32(out: &mut Vec<u8>, m: &DenseMatrix) {
    for c in 0..m.cols() {
        for r in 0..m.rows() {
            out.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
}

fn read_column_major_f32(r: &mut ByteReader<'_>, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(rows, cols);
    for c in 0..cols {
        for row in 0..rows {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(r.format_err(format!("non-finite value at ({row}, {c})")));
            }
            m[(row, c)] = v as f64;
        }
    }
    Ok(m)
}

/// Encodes a feature matrix in the binary `XMHF` layout.
pub fn features_to_bytes(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * m.rows() * m.cols());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    push_column_major_f32(&mut out, m);
    out
}

pub fn save_features(path: &Path, m: &DenseMatrix) -> Result<()> {
    if has_csv_extension(path) {
        let mut s = String::new();
        for c in 0..m.cols() {
            let line: Vec<String> = m
                .column(c)
                .iter()
                .map(|v| (*v as f32).to_string())
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        write_atomic(path, s.as_bytes())
    } else {
        write_atomic(path, &features_to_bytes(m))
    }
}

/// Reads a feature matrix; `.csv` files hold one sample per line, anything else is `XMHF`.
pub fn load_features(path: &Path) -> Result<DenseMatrix> {
    if has_csv_extension(path) {
        return load_features_csv(path);
    }
    let bytes = read_bytes(path)?;
    let mut r = ByteReader::new(path, &bytes);
    r.expect_magic(FEATURE_MAGIC)?;
    r.expect_version(FORMAT_VERSION)?;
    let rows = r.u32()? as usize;
    let cols =
        usize::try_from(r.u64()?).map_err(|_| r.format_err("column count overflows usize"))?;
    let expected = rows.checked_mul(cols).and_then(|v| v.checked_mul(4));
    if expected != Some(bytes.len() - 20) {
        return Err(r.format_err(format!(
            "header says {rows}x{cols} but payload is {} bytes",
            bytes.len() - 20
        )));
    }
    let m = read_column_major_f32(&mut r, rows, cols)?;
    r.finish()?;
    Ok(m)
}

fn has_csv_extension(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_features_csv(path: &Path) -> Result<DenseMatrix> {
    let text = read_string(path)?;
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fmt(format!("line {}: {e}", lineno + 1)))?;
        if let Some(first) = samples.first() {
            if first.len() != vals.len() {
                return Err(fmt(format!(
                    "line {} has {} values, expected {}",
                    lineno + 1,
                    vals.len(),
                    first.len()
                )));
            }
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(fmt(format!("line {}: non-finite value", lineno + 1)));
        }
        samples.push(vals);
    }
    let rows = samples.first().map_or(0, Vec::len);
    Ok(DenseMatrix::from_fn(rows, samples.len(), |r, c| {
        samples[c][r]
    }))
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Parameters of the synthetic two-modality generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_images: usize,
    pub n_sketches: usize,
    pub image_dim: usize,
    pub sketch_dim: usize,
    pub cluster_sep: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            n_images: 500,
            n_sketches: 250,
            image_dim: 64,
            sketch_dim: 48,
            cluster_sep: 8.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

/// Dimension of the hidden per-class prototypes.
const LATENT_DIM: usize = 16;

/// Class-clustered synthetic data.
///
/// Each class has one latent prototype (pairwise distances ~ `cluster_sep`).
/// Images are a noisy affine view of it; sketch-tokens and sketches share a
/// second affine view, so they come from the same distribution per class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    let SyntheticSpec {
        classes,
        n_images,
        n_sketches,
        image_dim,
        sketch_dim,
        cluster_sep,
        noise_sigma,
        seed,
    } = *spec;
    if classes == 0 || n_images == 0 || n_sketches == 0 || image_dim == 0 || sketch_dim == 0 {
        return Err(Error::invalid(
            "synthetic counts and dimensions must all be >= 1",
        ));
    }
    if cluster_sep.is_nan() || cluster_sep <= 0.0 || noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::invalid(
            "cluster_sep must be > 0 and noise_sigma >= 0",
        ));
    }
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> f64 {
        scale * rng.sample::<f64, _>(StandardNormal)
    };

    let proto_scale = cluster_sep / (2.0 * LATENT_DIM as f64).sqrt();
    let prototypes = DenseMatrix::from_fn(LATENT_DIM, classes, |_, _| gauss(&mut rng, proto_scale));

    // Views with N(0, 1/p) entries roughly preserve latent distances.
    let view = |rng: &mut rand_chacha::ChaCha8Rng, p: usize| {
        let a = DenseMatrix::from_fn(p, LATENT_DIM, |_, _| gauss(rng, 1.0 / (p as f64).sqrt()));
        let b: Vec<f64> = (0..p).map(|_| gauss(rng, 1.0)).collect();
        (a, b)
    };
    let image_view = view(&mut rng, image_dim);
    let sketch_view = view(&mut rng, sketch_dim);

    let balanced = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(rng);
        labels
    };
    let image_labels = balanced(&mut rng, n_images);
    let sketch_labels = balanced(&mut rng, n_sketches);

    let render =
        |rng: &mut rand_chacha::ChaCha8Rng, (a, b): &(DenseMatrix, Vec<f64>), labels: &[usize]| {
            let p = a.rows();
            let mut out = DenseMatrix::zeros(p, labels.len());
            for (j, &c) in labels.iter().enumerate() {
                for r in 0..p {
                    let clean: f64 = (0..LATENT_DIM)
                        .map(|k| a[(r, k)] * prototypes[(k, c)])
                        .sum::<f64>()
                        + b[r];
                    // Always draw so the stream layout does not depend on noise_sigma.
                    out[(r, j)] = clean + gauss(rng, noise_sigma);
                }
            }
            out
        };
    let image_features = render(&mut rng, &image_view, &image_labels);
    let token_features = render(&mut rng, &sketch_view, &image_labels);
    let sketch_features = render(&mut rng, &sketch_view, &sketch_labels);

    FeatureDataset::new(
        image_features,
        token_features,
        sketch_features,
        image_labels,
        sketch_labels,
        classes,
    )
}
