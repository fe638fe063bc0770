//! Row-major logit and probability matrices plus the per-row machinery every
//! calibrator shares: softmax, negative log-likelihood, stable per-row sorting
//! and the check for tied logits.
//!
//! Matrices are immutable once built. Rows are samples, columns are classes.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Smallest probability fed to `ln` in [`nll`].
pub const LOG_CLAMP: f64 = 1e-300;

/// Tolerance on row sums accepted by [`ProbMatrix::new`].
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Read access shared by logit and probability matrices.
pub trait Rows {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];

    fn rows(&self) -> std::slice::ChunksExact<'_, f64>;
}

macro_rules! impl_rows {
    ($ty:ty) => {
        impl Rows for $ty {
            fn n_rows(&self) -> usize {
                self.n
            }
            fn n_cols(&self) -> usize {
                self.m
            }
            fn row(&self, i: usize) -> &[f64] {
                &self.data[i * self.m..(i + 1) * self.m]
            }
            fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
                self.data.chunks_exact(self.m)
            }
        }
    };
}

fn check_shape(len: usize, n: usize, m: usize) -> Result<()> {
    if n < 1 || m < 2 {
        return Err(Error::BadShape {
            rows: n,
            cols: m,
            min_rows: 1,
            min_cols: 2,
        });
    }
    if len != n * m {
        return Err(Error::BufferLength {
            len,
            rows: n,
            cols: m,
        });
    }
    Ok(())
}

/// n x m matrix of finite pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    data: Vec<f64>,
    n: usize,
    m: usize,
}

impl_rows!(LogitMatrix);

impl LogitMatrix {
    pub fn new(data: Vec<f64>, n: usize, m: usize) -> Result<Self> {
        check_shape(data.len(), n, m)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / m,
                col: pos % m,
                value: data[pos],
            });
        }
        Ok(Self { data, n, m })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.concat(), rows.len(), m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            n: idx.len(),
            m: self.m,
        }
    }

    /// Every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.data.iter().map(|v| v * factor).collect(),
            self.n,
            self.m,
        )
    }
}

/// Row-stochastic n x m matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    data: Vec<f64>,
    n: usize,
    m: usize,
}

impl_rows!(ProbMatrix);

impl ProbMatrix {
    pub fn new(data: Vec<f64>, n: usize, m: usize) -> Result<Self> {
        check_shape(data.len(), n, m)?;
        for (i, row) in data.chunks_exact(m).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::ProbabilityRange {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NotNormalized { row: i, sum });
            }
        }
        Ok(Self { data, n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            n: idx.len(),
            m: self.m,
        }
    }

    /// Top-label probability of every row.
    pub fn confidences(&self) -> Vec<f64> {
        self.rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Class indices, one per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
}

impl LabelVector {
    /// Labels checked against a class count `m`.
    pub fn new(labels: Vec<usize>, m: usize) -> Result<Self> {
        if let Some(index) = labels.iter().position(|&l| l >= m) {
            return Err(Error::LabelOutOfRange {
                index,
                label: labels[index],
                classes: m,
            });
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().copied()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Fails unless every label is a valid column of an `m`-class matrix
    /// with `n` rows.
    pub fn check_against(&self, n: usize, m: usize) -> Result<()> {
        if self.labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {n} rows",
                self.labels.len()
            )));
        }
        if let Some(index) = self.labels.iter().position(|&l| l >= m) {
            return Err(Error::LabelOutOfRange {
                index,
                label: self.labels[index],
                classes: m,
            });
        }
        Ok(())
    }
}

/// Per-row ascending sort order: `perm[i][j]` is the original column of the
/// value at sorted position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortPermutation {
    perm: Vec<usize>,
    n: usize,
    m: usize,
}

impl SortPermutation {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.perm[i * self.m..(i + 1) * self.m]
    }

    /// Sorted position of column `col` in row `i`.
    pub fn rank_of(&self, i: usize, col: usize) -> usize {
        self.row(i)
            .iter()
            .position(|&c| c == col)
            .expect("permutation row covers every column")
    }
}

/// Numerically stable softmax of a single row into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_rows(z: &LogitMatrix) -> ProbMatrix {
    let mut data = vec![0.0; z.data.len()];
    for (src, dst) in z.rows().zip(data.chunks_exact_mut(z.m)) {
        softmax_into(src, dst);
    }
    ProbMatrix {
        data,
        n: z.n,
        m: z.m,
    }
}

/// Mean negative log-likelihood of the true classes.
pub fn nll(p: &ProbMatrix, y: &LabelVector) -> Result<f64> {
    y.check_against(p.n, p.m)?;
    let total: f64 = p
        .rows()
        .zip(y.iter())
        .map(|(row, label)| -row[label].max(LOG_CLAMP).ln())
        .sum();
    Ok(total / p.n as f64)
}

/// Ascending sort of one row; ties keep their original column order.
pub fn sort_row(row: &[f64], perm: &mut [usize], sorted: &mut [f64]) {
    for (j, p) in perm.iter_mut().enumerate() {
        *p = j;
    }
    perm.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal));
    for (s, &p) in sorted.iter_mut().zip(perm.iter()) {
        *s = row[p];
    }
}

pub fn sort_rows(z: &LogitMatrix) -> (LogitMatrix, SortPermutation) {
    let mut perm = vec![0usize; z.data.len()];
    let mut sorted = vec![0.0; z.data.len()];
    for ((row, p), s) in z
        .rows()
        .zip(perm.chunks_exact_mut(z.m))
        .zip(sorted.chunks_exact_mut(z.m))
    {
        sort_row(row, p, s);
    }
    (
        LogitMatrix {
            data: sorted,
            n: z.n,
            m: z.m,
        },
        SortPermutation {
            perm,
            n: z.n,
            m: z.m,
        },
    )
}

pub fn inverse_sort_rows(sorted: &LogitMatrix, perm: &SortPermutation) -> Result<LogitMatrix> {
    if sorted.n != perm.n || sorted.m != perm.m {
        return Err(Error::DimensionMismatch(format!(
            "sorted matrix is {}x{}, permutation is {}x{}",
            sorted.n, sorted.m, perm.n, perm.m
        )));
    }
    let mut data = vec![0.0; sorted.data.len()];
    for i in 0..sorted.n {
        let out = &mut data[i * sorted.m..(i + 1) * sorted.m];
        for (&v, &col) in sorted.row(i).iter().zip(perm.row(i)) {
            out[col] = v;
        }
    }
    Ok(LogitMatrix {
        data,
        n: sorted.n,
        m: sorted.m,
    })
}

/// A row whose logits are not pairwise distinct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiedRow {
    pub row: usize,
    pub value: f64,
}

/// Lists every row containing repeated logits (the first repeated value is
/// reported). An empty result means all rows are strictly orderable.
pub fn validate_distinct(z: &LogitMatrix) -> Vec<TiedRow> {
    let mut scratch = vec![0.0; z.m];
    let mut ties = Vec::new();
    for (i, row) in z.rows().enumerate() {
        scratch.copy_from_slice(row);
        scratch.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        if let Some(w) = scratch.windows(2).find(|w| w[0] == w[1]) {
            ties.push(TiedRow {
                row: i,
                value: w[0],
            });
        }
    }
    if !ties.is_empty() {
        log::warn!(
            "{} of {} rows contain tied logits; ties are ordered by column index",
            ties.len(),
            z.n
        );
    }
    ties
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn argmax_rows<R: Rows>(x: &R) -> LabelVector {
    LabelVector {
        labels: x.rows().map(argmax).collect(),
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<R: Rows>(x: &R, y: &LabelVector) -> f64 {
    let hits = x
        .rows()
        .zip(y.iter())
        .filter(|(row, label)| argmax(row) == *label)
        .count();
    hits as f64 / x.n_rows() as f64
}
