//! Inference numerics of a small DLRM: sharded embedding bags, bottom MLP,
//! dot interaction and top MLP.
//!
//! Everything is `f32` with a fixed accumulation order so the same inputs
//! give bit-identical outputs regardless of how the exchange was scheduled:
//!
//! - embedding bag: start from zero, add looked-up rows in list order;
//! - affine layer: `acc = 0; acc += w[o][i] * x[i]` for ascending `i`, then `acc + b[o]`;
//! - dot product: ascending element order starting from zero.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::RankId;

/// Number of dense features in the Criteo layout.
pub const CRITEO_DENSE: usize = 13;
/// Number of categorical features (tables) in the Criteo layout.
pub const CRITEO_TABLES: usize = 26;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    IndexOutOfRange { table: usize, index: usize, rows: usize },
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    TableNotLocal(usize),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::IndexOutOfRange { table, index, rows } => {
                write!(f, "index {index} out of range for table {table} with {rows} rows")
            }
            ModelError::DimensionMismatch { what, expected, got } => {
                write!(f, "{what}: expected {expected}, got {got}")
            }
            ModelError::TableNotLocal(t) => write!(f, "table {t} is not owned by this rank"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_tables: usize,
    pub emb_dim: usize,
    pub num_dense: usize,
    pub table_rows: Vec<usize>,
    /// Full layer widths, input first; the last entry must equal `emb_dim`.
    pub bottom_mlp_dims: Vec<usize>,
    /// Full layer widths, input (interaction width) first; the last entry is 1.
    pub top_mlp_dims: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    /// A small model with one hidden layer in each MLP.
    pub fn desk(num_tables: usize, emb_dim: usize, rows_per_table: usize, hidden: usize, seed: u64) -> Self {
        let interaction = interaction_width(num_tables, emb_dim);
        ModelConfig {
            num_tables,
            emb_dim,
            num_dense: CRITEO_DENSE,
            table_rows: vec![rows_per_table; num_tables],
            bottom_mlp_dims: vec![CRITEO_DENSE, hidden, emb_dim],
            top_mlp_dims: vec![interaction, hidden, 1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.table_rows.len() != self.num_tables {
            return Err(ModelError::DimensionMismatch {
                what: "table_rows length",
                expected: self.num_tables,
                got: self.table_rows.len(),
            });
        }
        let b = &self.bottom_mlp_dims;
        if b.len() < 2 || b[0] != self.num_dense || b[b.len() - 1] != self.emb_dim {
            return Err(ModelError::DimensionMismatch {
                what: "bottom MLP must map num_dense to emb_dim",
                expected: self.emb_dim,
                got: *b.last().unwrap_or(&0),
            });
        }
        let t = &self.top_mlp_dims;
        let w = interaction_width(self.num_tables, self.emb_dim);
        if t.len() < 2 || t[0] != w || t[t.len() - 1] != 1 {
            return Err(ModelError::DimensionMismatch {
                what: "top MLP must map the interaction width to 1",
                expected: w,
                got: *t.first().unwrap_or(&0),
            });
        }
        Ok(())
    }
}

/// Width of `[x; pairwise dots]` for `num_tables` embedding vectors plus x.
pub fn interaction_width(num_tables: usize, emb_dim: usize) -> usize {
    let t = num_tables + 1;
    emb_dim + t * (t - 1) / 2
}

/// Tables owned by `rank`: contiguous blocks of `ceil(num_tables / comm_size)`.
pub fn table_block(num_tables: usize, comm_size: usize, rank: RankId) -> Range<usize> {
    let per = num_tables.div_ceil(comm_size);
    let start = (per * rank).min(num_tables);
    start..(start + per).min(num_tables)
}

/// Samples of a batch forming `rank`'s mini-batch: balanced contiguous rows.
pub fn row_block(batch_size: usize, comm_size: usize, rank: RankId) -> Range<usize> {
    (rank * batch_size / comm_size)..((rank + 1) * batch_size / comm_size)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const BOTTOM_STREAM: u64 = 1_000;
const TOP_STREAM: u64 = 2_000;
const TABLE_STREAM: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    /// Weights and biases uniform in `[-0.5/fan_in, 0.5/fan_in]`.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let r = 0.5 / in_dim as f32;
        let weight = (0..in_dim * out_dim).map(|_| rng.gen_range(-r..=r)).collect();
        let bias = (0..out_dim).map(|_| rng.gen_range(-r..=r)).collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        debug_assert_eq!(x.len(), self.in_dim);
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0f32;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc + self.bias[o]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

/// Stack of affine layers; ReLU between layers, `last` after the final one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub last: Activation,
}

impl Mlp {
    pub fn seeded(dims: &[usize], last: Activation, seed: u64, stream: u64) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| Linear::seeded(w[0], w[1], &mut seeded(seed, stream + l as u64)))
            .collect();
        Mlp { layers, last }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Forward one sample.
    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut cur: Vec<f32> = x.to_vec();
        let mut next = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            next.clear();
            layer.apply(&cur, &mut next);
            let act = if l + 1 == self.layers.len() {
                self.last
            } else {
                Activation::Relu
            };
            for v in next.iter_mut() {
                *v = match act {
                    Activation::Relu => v.max(0.0),
                    Activation::Sigmoid => sigmoid(*v),
                };
            }
            core::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward `rows` samples stored row-major.
    pub fn forward_rows(&self, input: &[f32]) -> Result<Vec<f32>, ModelError> {
        let d = self.in_dim();
        if d == 0 || input.len() % d != 0 {
            return Err(ModelError::DimensionMismatch {
                what: "MLP input width",
                expected: d,
                got: input.len(),
            });
        }
        let mut out = Vec::with_capacity(input.len() / d * self.out_dim());
        for row in input.chunks_exact(d) {
            out.extend(self.forward(row));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingTable {
    /// Rows uniform in `[-1/sqrt(rows), 1/sqrt(rows)]`.
    pub fn seeded(rows: usize, dim: usize, seed: u64, table: usize) -> Self {
        let mut rng = seeded(seed, TABLE_STREAM + table as u64);
        let r = 1.0 / libm::sqrtf(rows as f32);
        let data = (0..rows * dim).map(|_| rng.gen_range(-r..=r)).collect();
        EmbeddingTable { rows, dim, data }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One mini-batch of inputs. `sparse[t][s]` lists the rows of table `t`
/// looked up by sample `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceBatch {
    pub batch_size: usize,
    pub num_dense: usize,
    /// Row-major `batch_size x num_dense`.
    pub dense: Vec<f32>,
    pub sparse: Vec<Vec<Vec<u32>>>,
    /// Click labels when loaded from a dataset; empty for generated data.
    pub labels: Vec<f32>,
}

impl InferenceBatch {
    pub fn dense_rows(&self, rows: Range<usize>) -> &[f32] {
        &self.dense[rows.start * self.num_dense..rows.end * self.num_dense]
    }

    /// Bytes of pooled vectors `owner` sends to `dest` for this batch.
    pub fn exchange_bytes(&self, num_tables: usize, emb_dim: usize, comm_size: usize, owner: RankId, dest: RankId) -> usize {
        table_block(num_tables, comm_size, owner).len() * row_block(self.batch_size, comm_size, dest).len() * emb_dim * 4
    }
}

/// Pooled bag outputs of one table for every sample of a batch
/// (row-major `batch_size x emb_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledTable {
    pub table: usize,
    pub data: Vec<f32>,
}

/// Model parameters held by one rank: its tables plus replicated MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub config: ModelConfig,
    pub owned: Range<usize>,
    pub tables: Vec<EmbeddingTable>,
    pub bottom: Mlp,
    pub top: Mlp,
}

impl LocalModel {
    pub fn build(config: &ModelConfig, owned: Range<usize>) -> Result<Self, ModelError> {
        config.validate()?;
        let tables = owned
            .clone()
            .map(|t| EmbeddingTable::seeded(config.table_rows[t], config.emb_dim, config.seed, t))
            .collect();
        Ok(LocalModel {
            bottom: Mlp::seeded(&config.bottom_mlp_dims, Activation::Relu, config.seed, BOTTOM_STREAM),
            top: Mlp::seeded(&config.top_mlp_dims, Activation::Sigmoid, config.seed, TOP_STREAM),
            config: config.clone(),
            owned,
            tables,
        })
    }

    /// Model holding every table, used for single-rank runs and as an oracle.
    pub fn build_full(config: &ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, 0..config.num_tables)
    }

    pub fn for_rank(config: &ModelConfig, comm_size: usize, rank: RankId) -> Result<Self, ModelError> {
        Self::build(config, table_block(config.num_tables, comm_size, rank))
    }

    fn table(&self, t: usize) -> Result<&EmbeddingTable, ModelError> {
        if !self.owned.contains(&t) {
            return Err(ModelError::TableNotLocal(t));
        }
        Ok(&self.tables[t - self.owned.start])
    }

    /// Sum-pool every owned table over all samples of `batch`.
    pub fn apply_emb(&self, batch: &InferenceBatch) -> Result<Vec<PooledTable>, ModelError> {
        if batch.sparse.len() != self.config.num_tables {
            return Err(ModelError::DimensionMismatch {
                what: "sparse feature count",
                expected: self.config.num_tables,
                got: batch.sparse.len(),
            });
        }
        let dim = self.config.emb_dim;
        self.owned
            .clone()
            .map(|t| {
                let table = self.table(t)?;
                let lookups = &batch.sparse[t];
                let mut data = vec![0.0f32; batch.batch_size * dim];
                for (s, bag) in lookups.iter().enumerate() {
                    let out = &mut data[s * dim..(s + 1) * dim];
                    for &idx in bag {
                        let idx = idx as usize;
                        if idx >= table.rows {
                            return Err(ModelError::IndexOutOfRange {
                                table: t,
                                index: idx,
                                rows: table.rows,
                            });
                        }
                        for (o, v) in out.iter_mut().zip(table.row(idx)) {
                            *o += v;
                        }
                    }
                }
                Ok(PooledTable { table: t, data })
            })
            .collect()
    }

    pub fn bottom_mlp(&self, dense: &[f32]) -> Result<Vec<f32>, ModelError> {
        self.bottom.forward_rows(dense)
    }

    /// Interact and run the top MLP for `m` samples: `x` is `m x emb_dim`,
    /// `ly` is `m x num_tables x emb_dim`.
    pub fn predict(&self, x: &[f32], ly: &[f32]) -> Result<Vec<f32>, ModelError> {
        let d = self.config.emb_dim;
        let t = self.config.num_tables;
        let m = x.len() / d;
        if x.len() != m * d || ly.len() != m * t * d {
            return Err(ModelError::DimensionMismatch {
                what: "pooled embedding block",
                expected: m * t * d,
                got: ly.len(),
            });
        }
        let mut z = Vec::with_capacity(m * interaction_width(t, d));
        for s in 0..m {
            let xs = &x[s * d..(s + 1) * d];
            let vecs: Vec<&[f32]> = ly[s * t * d..(s + 1) * t * d].chunks_exact(d).collect();
            z.extend(interact_features(xs, &vecs)?);
        }
        let p = self.top.forward_rows(&z)?;
        Ok(p)
    }

    /// Whole-batch forward with every table local (no communication).
    pub fn forward_local(&self, batch: &InferenceBatch) -> Result<Vec<f32>, ModelError> {
        if self.owned != (0..self.config.num_tables) {
            return Err(ModelError::TableNotLocal(self.owned.end));
        }
        let pooled = self.apply_emb(batch)?;
        let x = self.bottom_mlp(&batch.dense)?;
        let ly = pack_for_peer(&pooled, 0..batch.batch_size, self.config.emb_dim);
        let ly = bytes_to_f32s(&ly);
        self.predict(&x, &regroup_sample_major(&ly, self.config.num_tables, batch.batch_size, self.config.emb_dim))
    }
}

/// `[x; dots]` where dots are the strictly-lower-triangular pairwise
/// products of `[x, ly_0, ..., ly_{T-1}]`, row-major over `(i, j<i)`.
pub fn interact_features(x: &[f32], ly: &[&[f32]]) -> Result<Vec<f32>, ModelError> {
    let d = x.len();
    if let Some(bad) = ly.iter().find(|v| v.len() != d) {
        return Err(ModelError::DimensionMismatch {
            what: "interaction vector width",
            expected: d,
            got: bad.len(),
        });
    }
    let mut stack: Vec<&[f32]> = Vec::with_capacity(ly.len() + 1);
    stack.push(x);
    stack.extend_from_slice(ly);
    let t = stack.len();
    let mut out = Vec::with_capacity(d + t * (t - 1) / 2);
    out.extend_from_slice(x);
    for i in 1..t {
        for j in 0..i {
            let mut acc = 0.0f32;
            for (a, b) in stack[i].iter().zip(stack[j]) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    Ok(out)
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Serialize the pooled vectors of `rows` for one destination:
/// table-major, then sample, then element.
pub fn pack_for_peer(pooled: &[PooledTable], rows: Range<usize>, emb_dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(pooled.len() * rows.len() * emb_dim * 4);
    for p in pooled {
        for v in &p.data[rows.start * emb_dim..rows.end * emb_dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reorder a table-major block (`tables x m x d`) into sample-major (`m x tables x d`).
pub fn regroup_sample_major(table_major: &[f32], tables: usize, m: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; tables * m * d];
    for t in 0..tables {
        for s in 0..m {
            let src = &table_major[(t * m + s) * d..(t * m + s + 1) * d];
            out[(s * tables + t) * d..(s * tables + t + 1) * d].copy_from_slice(src);
        }
    }
    out
}

/// Reassemble sample-major `ly` for a mini-batch of `m` samples from the
/// per-source payloads (indexed by source rank).
pub fn unpack_exchange(config: &ModelConfig, comm_size: usize, m: usize, payloads: &[&[u8]]) -> Result<Vec<f32>, ModelError> {
    let d = config.emb_dim;
    let mut table_major = Vec::with_capacity(config.num_tables * m * d);
    for (q, payload) in payloads.iter().enumerate() {
        let expected = table_block(config.num_tables, comm_size, q).len() * m * d * 4;
        if payload.len() != expected {
            return Err(ModelError::DimensionMismatch {
                what: "exchange segment bytes",
                expected,
                got: payload.len(),
            });
        }
        table_major.extend(bytes_to_f32s(payload));
    }
    if table_major.len() != config.num_tables * m * d {
        return Err(ModelError::DimensionMismatch {
            what: "tables covered by exchange",
            expected: config.num_tables * m * d,
            got: table_major.len(),
        });
    }
    Ok(regroup_sample_major(&table_major, config.num_tables, m, d))
}
