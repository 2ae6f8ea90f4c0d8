//! The trainable model: user/item embedding tables and the two relation-space
//! projection matrices, with normalised views, ranking scores and a binary
//! checkpoint format.
//!
//! Checkpoint layout (little endian): magic `UCTL`, `u32` version (1),
//! `u64` m, n, d, then `user_vecs`, `item_vecs`, `m_user`, `m_item` as
//! row-major `f32`, then a `u32` CRC32 over the matrix bytes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"UCTL";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 8;

/// Norm below which a vector is treated as dead.
pub const DEAD_NORM: f64 = 1e-12;

pub const DEFAULT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `m x d`
    pub user_vecs: Array2<f32>,
    /// `n x d`
    pub item_vecs: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    /// `d x d`, applied as `u M_u^T`.
    pub m_user: Array2<f32>,
    /// `d x d`, applied as `i M_i^T`.
    pub m_item: Array2<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    Dot,
    Cosine,
}

impl EmbeddingTable {
    pub fn num_users(&self) -> usize {
        self.user_vecs.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_vecs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_vecs.ncols()
    }

    pub fn user_row(&self, user: usize) -> Vec<f64> {
        self.user_vecs
            .row(user)
            .iter()
            .map(|&x| f64::from(x))
            .collect()
    }

    pub fn item_row(&self, item: usize) -> Vec<f64> {
        self.item_vecs
            .row(item)
            .iter()
            .map(|&x| f64::from(x))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.user_vecs
            .iter()
            .chain(self.item_vecs.iter())
            .all(|x| x.is_finite())
    }
}

impl ProjectionPair {
    pub fn identity(d: usize) -> Self {
        Self {
            m_user: Array2::eye(d),
            m_item: Array2::eye(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.m_user.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.m_user
            .iter()
            .chain(self.m_item.iter())
            .all(|x| x.is_finite())
    }
}

/// Embeddings i.i.d. `N(0, scale^2)`; projections `I + N(0, scale^2)`.
pub fn init_model(
    m: usize,
    n: usize,
    d: usize,
    seed: u64,
    scale: f64,
) -> Result<(EmbeddingTable, ProjectionPair)> {
    if d == 0 {
        return Err(Error::invalid("embedding dimension must be >= 1"));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!(
            "init scale must be >= 0, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("scale validated");
    let mut draw = |rows: usize, cols: usize| {
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng) as f32)
    };
    let user_vecs = draw(m, d);
    let item_vecs = draw(n, d);
    let m_user = draw(d, d) + Array2::<f32>::eye(d);
    let m_item = draw(d, d) + Array2::<f32>::eye(d);
    Ok((
        EmbeddingTable {
            user_vecs,
            item_vecs,
        },
        ProjectionPair { m_user, m_item },
    ))
}

/// L2 norm and its reciprocal-normalised copy of `v`. A dead vector maps to
/// the first basis vector and reports `None` as its norm.
pub fn normalize_with_norm(v: &[f64]) -> (Vec<f64>, Option<f64>) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm >= DEAD_NORM) {
        log::warn!("normalising a degenerate vector (norm {norm:e}); using e1");
        let mut e1 = vec![0.0; v.len()];
        if let Some(first) = e1.first_mut() {
            *first = 1.0;
        }
        return (e1, None);
    }
    (v.iter().map(|x| x / norm).collect(), Some(norm))
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    normalize_with_norm(v).0
}

fn row_f64(row: ArrayView1<'_, f32>) -> Vec<f64> {
    row.iter().map(|&x| f64::from(x)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scores of every item for one user.
pub fn score_all_items(model: &EmbeddingTable, user: usize, scoring: Scoring) -> Vec<f64> {
    let u = model.user_row(user);
    match scoring {
        Scoring::Dot => model
            .item_vecs
            .rows()
            .into_iter()
            .map(|row| dot(&u, &row_f64(row)))
            .collect(),
        Scoring::Cosine => {
            let u = normalize(&u);
            model
                .item_vecs
                .rows()
                .into_iter()
                .map(|row| dot(&u, &normalize(&row_f64(row))))
                .collect()
        }
    }
}

fn matrices<'a>(model: &'a EmbeddingTable, proj: &'a ProjectionPair) -> [&'a Array2<f32>; 4] {
    [
        &model.user_vecs,
        &model.item_vecs,
        &proj.m_user,
        &proj.m_item,
    ]
}

pub fn checkpoint_bytes(model: &EmbeddingTable, proj: &ProjectionPair) -> Result<Vec<u8>> {
    let d = model.dim();
    if model.item_vecs.ncols() != d || proj.m_user.dim() != (d, d) || proj.m_item.dim() != (d, d) {
        return Err(Error::DimensionMismatch(
            "model and projections disagree on dimension".into(),
        ));
    }
    let mut out = Vec::with_capacity(
        HEADER_LEN + 4 * (model.user_vecs.len() + model.item_vecs.len() + 2 * d * d) + 4,
    );
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [model.num_users(), model.num_items(), d] {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for mat in matrices(model, proj) {
        for &v in mat.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(
    model: &EmbeddingTable,
    proj: &ProjectionPair,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, proj)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EmbeddingTable, ProjectionPair)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(EmbeddingTable, ProjectionPair)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt("checkpoint truncated in header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let (m, n, d) = (read_u64(8), read_u64(16), read_u64(24));
    let floats = m
        .checked_add(n)
        .and_then(|mn| mn.checked_mul(d))
        .and_then(|x| x.checked_add(2 * d * d))
        .ok_or_else(|| Error::Corrupt("checkpoint dimensions overflow".into()))?;
    let expected = HEADER_LEN + 4 * floats + 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "checkpoint truncated or padded: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Corrupt("checkpoint CRC mismatch".into()));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = |rows: usize, cols: usize| {
        Array2::from_shape_vec((rows, cols), values.by_ref().take(rows * cols).collect())
            .expect("length checked")
    };
    let user_vecs = take(m, d);
    let item_vecs = take(n, d);
    let m_user = take(d, d);
    let m_item = take(d, d);
    Ok((
        EmbeddingTable {
            user_vecs,
            item_vecs,
        },
        ProjectionPair { m_user, m_item },
    ))
}
