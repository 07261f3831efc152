//! Seeded batch and delay generators, and the Criteo-layout row parser.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{InferenceBatch, CRITEO_DENSE, CRITEO_TABLES};

/// Shape of generated batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchShape {
    pub batch_size: usize,
    pub num_batches: usize,
    pub num_dense: usize,
    pub table_rows: Vec<usize>,
}

const BATCH_STREAM: u64 = 1;
const DELAY_STREAM: u64 = 1 << 32;

/// Batches where each (table, sample) bag holds a uniform multiplicity in
/// `[1, max_multiplicity]` of uniformly drawn rows. Dense features are
/// uniform in `[0, 1)`.
pub fn gen_hetero(shape: &BatchShape, max_multiplicity: usize, seed: u64) -> Vec<InferenceBatch> {
    let max_mult = max_multiplicity.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM);
    (0..shape.num_batches)
        .map(|_| {
            let dense = (0..shape.batch_size * shape.num_dense)
                .map(|_| rng.gen::<f32>())
                .collect();
            let sparse = shape
                .table_rows
                .iter()
                .map(|&rows| {
                    (0..shape.batch_size)
                        .map(|_| {
                            let mult = rng.gen_range(1..=max_mult);
                            (0..mult).map(|_| rng.gen_range(0..rows as u32)).collect()
                        })
                        .collect()
                })
                .collect();
            InferenceBatch {
                batch_size: shape.batch_size,
                num_dense: shape.num_dense,
                dense,
                sparse,
                labels: Vec::new(),
            }
        })
        .collect()
}

/// One lookup per table per sample.
pub fn gen_balanced(shape: &BatchShape, seed: u64) -> Vec<InferenceBatch> {
    gen_hetero(shape, 1, seed)
}

/// Delay in seconds for each `(rank, iteration)`, uniform on `[0, delay_max_s]`.
pub fn gen_delays(comm_size: usize, num_batches: usize, delay_max_s: f64, seed: u64) -> Vec<Vec<f64>> {
    (0..comm_size)
        .map(|rank| {
            if delay_max_s <= 0.0 {
                return vec![0.0; num_batches];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(DELAY_STREAM + rank as u64);
            (0..num_batches).map(|_| rng.gen_range(0.0..=delay_max_s)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CsvErrorKind {
    FieldCount { expected: usize, got: usize },
    BadNumber { column: usize, text: String },
    IdOutOfRange { table: usize, id: u64, rows: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvError {
    /// 1-based line number.
    pub line: usize,
    pub kind: CsvErrorKind,
}

impl fmt::Display for CsvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: ", self.line)?;
        match &self.kind {
            CsvErrorKind::FieldCount { expected, got } => {
                write!(f, "expected {expected} comma-separated fields, got {got}")
            }
            CsvErrorKind::BadNumber { column, text } => write!(f, "column {column}: cannot parse {text:?}"),
            CsvErrorKind::IdOutOfRange { table, id, rows } => {
                write!(f, "category id {id} for table {table} exceeds {rows} rows")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CsvError {}

/// Parse `label,13 dense,26 categorical` rows into batches of `batch_size`
/// with one lookup per table. A trailing partial batch is kept. Blank lines
/// are skipped.
pub fn parse_criteo_csv(text: &str, batch_size: usize, table_rows: &[usize]) -> Result<Vec<InferenceBatch>, CsvError> {
    assert!(batch_size > 0);
    let fields = 1 + CRITEO_DENSE + CRITEO_TABLES;
    let mut batches = Vec::new();
    let mut cur: Option<InferenceBatch> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != fields {
            return Err(CsvError {
                line,
                kind: CsvErrorKind::FieldCount {
                    expected: fields,
                    got: cols.len(),
                },
            });
        }
        let num = |c: usize| -> Result<f32, CsvError> {
            cols[c].trim().parse::<f32>().map_err(|_| CsvError {
                line,
                kind: CsvErrorKind::BadNumber {
                    column: c + 1,
                    text: cols[c].into(),
                },
            })
        };
        let b = cur.get_or_insert_with(|| InferenceBatch {
            batch_size: 0,
            num_dense: CRITEO_DENSE,
            dense: Vec::with_capacity(batch_size * CRITEO_DENSE),
            sparse: vec![Vec::with_capacity(batch_size); CRITEO_TABLES],
            labels: Vec::with_capacity(batch_size),
        });
        b.labels.push(num(0)?);
        for c in 1..=CRITEO_DENSE {
            b.dense.push(num(c)?);
        }
        for t in 0..CRITEO_TABLES {
            let c = 1 + CRITEO_DENSE + t;
            let id: u64 = cols[c].trim().parse().map_err(|_| CsvError {
                line,
                kind: CsvErrorKind::BadNumber {
                    column: c + 1,
                    text: cols[c].into(),
                },
            })?;
            let rows = table_rows.get(t).copied().unwrap_or(0);
            if id >= rows as u64 {
                return Err(CsvError {
                    line,
                    kind: CsvErrorKind::IdOutOfRange { table: t, id, rows },
                });
            }
            b.sparse[t].push(vec![id as u32]);
        }
        b.batch_size += 1;
        if b.batch_size == batch_size {
            batches.extend(cur.take());
        }
    }
    batches.extend(cur);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(rows: usize) -> BatchShape {
        BatchShape {
            batch_size: 16,
            num_batches: 4,
            num_dense: 13,
            table_rows: vec![rows; 5],
        }
    }

    #[test]
    fn degenerate_multiplicity_gives_equal_bags() {
        for b in gen_hetero(&shape(100), 1, 3) {
            assert!(b.sparse.iter().all(|t| t.iter().all(|bag| bag.len() == 1)));
        }
    }

    #[test]
    fn hetero_is_deterministic_and_in_range() {
        let a = gen_hetero(&shape(37), 100, 11);
        assert_eq!(a, gen_hetero(&shape(37), 100, 11));
        assert_ne!(a, gen_hetero(&shape(37), 100, 12));
        for b in &a {
            for t in &b.sparse {
                for bag in t {
                    assert!((1..=100).contains(&bag.len()));
                    assert!(bag.iter().all(|&i| i < 37));
                }
            }
            assert!(b.dense.iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    #[test]
    fn hetero_mean_multiplicity() {
        let s = BatchShape {
            batch_size: 100,
            num_batches: 10,
            num_dense: 1,
            table_rows: vec![10; 10],
        };
        let batches = gen_hetero(&s, 100, 5);
        let (sum, n) = batches
            .iter()
            .flat_map(|b| b.sparse.iter().flatten())
            .fold((0usize, 0usize), |(s, n), bag| (s + bag.len(), n + 1));
        assert_eq!(n, 10_000);
        let mean = sum as f64 / n as f64;
        assert!((mean - 50.5).abs() <= 0.02 * 50.5, "mean {mean}");
    }

    #[test]
    fn delays() {
        assert!(gen_delays(3, 10, 0.0, 1).iter().flatten().all(|&d| d == 0.0));
        let d = gen_delays(4, 2_500, 0.01, 9);
        assert_eq!(d, gen_delays(4, 2_500, 0.01, 9));
        assert_ne!(d[0], d[1]);
        let all: Vec<f64> = d.into_iter().flatten().collect();
        assert!(all.iter().all(|&x| (0.0..=0.01).contains(&x)));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean - 0.005).abs() <= 0.05 * 0.005, "mean {mean}");
    }

    fn row(label: u32, dense: f32, ids: u64) -> String {
        let mut s = alloc::format!("{label}");
        for i in 0..13 {
            s += &alloc::format!(",{}", dense + i as f32);
        }
        for t in 0..26 {
            s += &alloc::format!(",{}", ids + t as u64);
        }
        s
    }

    #[test]
    fn csv_rows() {
        let text = alloc::format!("{}\n{}\r\n{}\n", row(1, 0.5, 0), row(0, 2.0, 10), row(1, -1.0, 3));
        let batches = parse_criteo_csv(&text, 4, &[100; 26]).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.batch_size, 3);
        assert_eq!(b.labels, vec![1.0, 0.0, 1.0]);
        assert_eq!(b.dense[13], 2.0);
        assert_eq!(b.dense[13 * 2 + 12], 11.0);
        assert_eq!(b.sparse[25][1], vec![35]);

        let two = parse_criteo_csv(&text, 2, &[100; 26]).unwrap();
        assert_eq!(two.iter().map(|b| b.batch_size).collect::<Vec<_>>(), vec![2, 1]);
        assert!(parse_criteo_csv("", 4, &[100; 26]).unwrap().is_empty());
    }

    #[test]
    fn csv_errors() {
        let full = row(1, 0.0, 0);
        let mut cols: Vec<&str> = full.split(',').collect();
        cols.remove(5);
        let short = cols.join(",");
        let text = alloc::format!("{}\n{}\n", row(0, 0.0, 0), short);
        let err = parse_criteo_csv(&text, 4, &[100; 26]).unwrap_err();
        assert_eq!(err.line, 2);
        assert_eq!(err.kind, CsvErrorKind::FieldCount { expected: 40, got: 39 });

        let err = parse_criteo_csv(&row(0, 0.0, 90), 4, &[100; 26]).unwrap_err();
        assert_eq!(err.kind, CsvErrorKind::IdOutOfRange { table: 10, id: 100, rows: 100 });

        let bad = row(0, 0.0, 0).replacen(",1,", ",x,", 1);
        assert!(matches!(
            parse_criteo_csv(&bad, 4, &[100; 26]).unwrap_err().kind,
            CsvErrorKind::BadNumber { .. }
        ));
    }
}
