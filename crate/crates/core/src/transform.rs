//! Rank-wise monotone maps on logits.
//!
//! Each row is sorted ascending, the value at every rank is scaled and shifted
//! by that rank's `(w, b)` pair, and the results are written back to their
//! original columns. In [`Mode::Direct`] the sorted value is multiplied by
//! `w` (non-decreasing weights), in [`Mode::Inverse`] it is divided by `w`
//! (non-increasing weights). Biases are non-decreasing in both modes.
//!
//! Rows containing negative logits are first shifted so that their minimum is
//! zero. Scaling negative values by an increasing weight can reverse their
//! order (`(-2, -1)` under `w = (1, 3)` becomes `(-2, -3)`), while on
//! non-negative inputs the map is strictly order preserving. The shift is
//! constant within a row, so it never changes softmax outputs when the weights
//! are constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logits::{softmax_into, sort_row, LabelVector, LogitMatrix, Rows, SortPermutation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Multiply sorted logits by `w`.
    Direct,
    /// Divide sorted logits by `w`.
    Inverse,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Direct => f.write_str("direct"),
            Mode::Inverse => f.write_str("inverse"),
        }
    }
}

#[derive(Deserialize)]
struct RawParams {
    mode: Mode,
    m: usize,
    k: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Fitted rank-wise scale and bias vectors.
///
/// `w[0]`/`b[0]` belong to the lowest retained rank. With `k < m` the
/// parameters cover the top `k` ranks and every lower rank reuses `w[0]` and
/// `b[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct MonotoneParams {
    mode: Mode,
    m: usize,
    k: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl TryFrom<RawParams> for MonotoneParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        MonotoneParams::new(raw.mode, raw.m, raw.w, raw.b).and_then(|p| {
            if p.k == raw.k {
                Ok(p)
            } else {
                Err(Error::InvalidParams(format!(
                    "declared k={} but vectors have length {}",
                    raw.k, p.k
                )))
            }
        })
    }
}

impl MonotoneParams {
    pub fn new(mode: Mode, m: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let k = w.len();
        if b.len() != k {
            return Err(Error::InvalidParams(format!(
                "w has length {k} but b has length {}",
                b.len()
            )));
        }
        if k < 2 || k > m {
            return Err(Error::BadTopK { k, m });
        }
        if let Some(v) = w.iter().chain(&b).find(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite entry {v}")));
        }
        if let Some(v) = w.iter().find(|&&v| v <= 0.0) {
            return Err(Error::InvalidParams(format!("weight {v} is not positive")));
        }
        let w_ok = match mode {
            Mode::Direct => w.windows(2).all(|p| p[0] <= p[1]),
            Mode::Inverse => w.windows(2).all(|p| p[0] >= p[1]),
        };
        if !w_ok {
            return Err(Error::InvalidParams(format!(
                "weights violate the {mode} ordering"
            )));
        }
        if !b.windows(2).all(|p| p[0] <= p[1]) {
            return Err(Error::InvalidParams("biases must be non-decreasing".into()));
        }
        Ok(Self { mode, m, k, w, b })
    }

    /// Identity map: unit weights, zero biases.
    pub fn identity(mode: Mode, m: usize) -> Self {
        Self {
            mode,
            m,
            k: m,
            w: vec![1.0; m],
            b: vec![0.0; m],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Same map expressed in the other mode (`w` replaced by `1 / w`).
    pub fn flipped(&self) -> Self {
        Self {
            mode: match self.mode {
                Mode::Direct => Mode::Inverse,
                Mode::Inverse => Mode::Direct,
            },
            m: self.m,
            k: self.k,
            w: self.w.iter().map(|v| 1.0 / v).collect(),
            b: self.b.clone(),
        }
    }

    pub fn constraints(&self) -> ConstraintVectors {
        let weight_gaps = match self.mode {
            Mode::Direct => self.w.windows(2).map(|p| p[1] - p[0]).collect(),
            Mode::Inverse => self.w.windows(2).map(|p| p[0] - p[1]).collect(),
        };
        ConstraintVectors {
            weight_gaps,
            bias_gaps: self.b.windows(2).map(|p| p[1] - p[0]).collect(),
        }
    }

    #[inline]
    fn scale(&self, s: f64, q: usize) -> f64 {
        match self.mode {
            Mode::Direct => s * self.w[q] + self.b[q],
            Mode::Inverse => s / self.w[q] + self.b[q],
        }
    }
}

/// Consecutive differences that must stay non-negative: `w[i+1] - w[i]`
/// (direct) or `w[i] - w[i+1]` (inverse), and `b[i+1] - b[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintVectors {
    pub weight_gaps: Vec<f64>,
    pub bias_gaps: Vec<f64>,
}

impl ConstraintVectors {
    /// Largest amount by which any gap is negative (0 when feasible).
    pub fn violation(&self) -> f64 {
        self.weight_gaps
            .iter()
            .chain(&self.bias_gaps)
            .fold(0.0, |acc, &g| acc.max(-g))
    }
}

/// Shift that moves a row's minimum to zero when it is negative.
#[inline]
fn anchor_shift(sorted_row: &[f64]) -> f64 {
    sorted_row[0].min(0.0)
}

/// Ascending rows shifted so no entry is negative.
pub fn anchor_sorted_rows(z_sorted: &LogitMatrix) -> LogitMatrix {
    let m = z_sorted.m();
    let mut data = Vec::with_capacity(z_sorted.as_slice().len());
    for row in z_sorted.rows() {
        let shift = anchor_shift(row);
        data.extend(row.iter().map(|v| v - shift));
    }
    LogitMatrix::new(data, z_sorted.n(), m).expect("shift keeps entries finite")
}

fn check_map_input(z: &LogitMatrix, params: &MonotoneParams) -> Result<()> {
    if z.m() != params.m {
        return Err(Error::DimensionMismatch(format!(
            "logits have {} classes, parameters expect {}",
            z.m(),
            params.m
        )));
    }
    Ok(())
}

fn map_rows(z: &LogitMatrix, params: &MonotoneParams) -> LogitMatrix {
    let m = z.m();
    let offset = m - params.k;
    let mut out = vec![0.0; z.as_slice().len()];
    let mut perm = vec![0usize; m];
    let mut sorted = vec![0.0; m];
    for (row, dst) in z.rows().zip(out.chunks_exact_mut(m)) {
        sort_row(row, &mut perm, &mut sorted);
        let shift = anchor_shift(&sorted);
        for (r, (&s, &col)) in sorted.iter().zip(&perm).enumerate() {
            let q = r.saturating_sub(offset);
            dst[col] = params.scale(s - shift, q);
        }
    }
    LogitMatrix::new(out, z.n(), m).expect("finite parameters give finite output")
}

/// Applies a full-rank map (`k == m`).
pub fn apply_map(z: &LogitMatrix, params: &MonotoneParams) -> Result<LogitMatrix> {
    check_map_input(z, params)?;
    if params.k != params.m {
        return Err(Error::InvalidParams(format!(
            "parameters cover {} of {} ranks; use apply_map_topk",
            params.k, params.m
        )));
    }
    Ok(map_rows(z, params))
}

/// Applies a map fitted on the top `k` ranks. Ranks below the retained window
/// are transformed with the first parameter pair. With `k == m` this is the
/// same computation as [`apply_map`].
pub fn apply_map_topk(z: &LogitMatrix, params: &MonotoneParams) -> Result<LogitMatrix> {
    check_map_input(z, params)?;
    if params.k < 2 {
        return Err(Error::BadTopK {
            k: params.k,
            m: params.m,
        });
    }
    Ok(map_rows(z, params))
}

/// Labels re-expressed as sorted positions: entry `i` is the rank of sample
/// `i`'s true class within its ascending row.
pub fn permute_labels(perm: &SortPermutation, y: &LabelVector) -> Result<LabelVector> {
    y.check_against(perm.n(), perm.m())?;
    let ranks = (0..perm.n()).map(|i| perm.rank_of(i, y.get(i))).collect();
    LabelVector::new(ranks, perm.m())
}

/// Result of keeping only the top `k` sorted columns.
#[derive(Debug, Clone)]
pub struct Truncated {
    pub logits: LogitMatrix,
    /// Positions within the retained `k` columns.
    pub labels: LabelVector,
    /// Indices of the kept samples in the input.
    pub kept: Vec<usize>,
    pub dropped: usize,
}

/// Keeps the `k` largest columns of ascending rows. `y_ranks` holds each
/// sample's true-class position in its sorted row (see [`permute_labels`]);
/// samples whose true class is outside the top `k` are dropped.
pub fn truncate_training_set(
    z_sorted: &LogitMatrix,
    y_ranks: &LabelVector,
    k: usize,
) -> Result<Truncated> {
    let (n, m) = (z_sorted.n(), z_sorted.m());
    if k < 2 || k > m {
        return Err(Error::BadTopK { k, m });
    }
    y_ranks.check_against(n, m)?;
    let offset = m - k;
    let mut data = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    let mut kept = Vec::with_capacity(n);
    for (i, row) in z_sorted.rows().enumerate() {
        let rank = y_ranks.get(i);
        if rank < offset {
            continue;
        }
        data.extend_from_slice(&row[offset..]);
        labels.push(rank - offset);
        kept.push(i);
    }
    if kept.is_empty() {
        return Err(Error::TooFewSamples(format!(
            "no sample has its true class within the top {k} ranks"
        )));
    }
    let dropped = n - kept.len();
    Ok(Truncated {
        logits: LogitMatrix::new(data, kept.len(), k)?,
        labels: LabelVector::new(labels, k)?,
        kept,
        dropped,
    })
}

/// Sorted, anchored training rows with labels as sorted positions. This is
/// the form the objective is evaluated in.
#[derive(Debug, Clone)]
pub struct SortedProblem {
    s: Vec<f64>,
    label_rank: Vec<usize>,
    n: usize,
    k: usize,
}

impl SortedProblem {
    /// Sorts and anchors `z`, keeping all ranks.
    pub fn from_logits(z: &LogitMatrix, y: &LabelVector) -> Result<Self> {
        Self::from_logits_topk(z, y, z.m()).map(|(p, _)| p)
    }

    /// Sorts, anchors and truncates to the top `k` ranks. Also returns the
    /// number of dropped samples.
    pub fn from_logits_topk(z: &LogitMatrix, y: &LabelVector, k: usize) -> Result<(Self, usize)> {
        y.check_against(z.n(), z.m())?;
        let (sorted, perm) = crate::logits::sort_rows(z);
        let anchored = anchor_sorted_rows(&sorted);
        let ranks = permute_labels(&perm, y)?;
        let t = truncate_training_set(&anchored, &ranks, k)?;
        Ok((
            Self {
                n: t.logits.n(),
                k,
                s: t.logits.into_vec(),
                label_rank: t.labels.as_slice().to_vec(),
            },
            t.dropped,
        ))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn transformed_row(&self, i: usize, mode: Mode, w: &[f64], b: &[f64], out: &mut [f64]) {
        let s = &self.s[i * self.k..(i + 1) * self.k];
        match mode {
            Mode::Direct => {
                for j in 0..self.k {
                    out[j] = s[j] * w[j] + b[j];
                }
            }
            Mode::Inverse => {
                for j in 0..self.k {
                    out[j] = s[j] / w[j] + b[j];
                }
            }
        }
    }

    /// Mean NLL at `(w, b)`.
    pub fn loss(&self, mode: Mode, w: &[f64], b: &[f64]) -> f64 {
        let mut f = vec![0.0; self.k];
        let mut total = 0.0;
        for i in 0..self.n {
            self.transformed_row(i, mode, w, b, &mut f);
            total += row_nll(&f, self.label_rank[i]);
        }
        total / self.n as f64
    }

    /// Mean NLL and its gradient with respect to `w` and `b`.
    pub fn loss_and_gradient(&self, mode: Mode, w: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let k = self.k;
        let mut f = vec![0.0; k];
        let mut p = vec![0.0; k];
        let mut gw = vec![0.0; k];
        let mut gb = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..self.n {
            let s = &self.s[i * k..(i + 1) * k];
            let label = self.label_rank[i];
            self.transformed_row(i, mode, w, b, &mut f);
            total += row_nll(&f, label);
            softmax_into(&f, &mut p);
            p[label] -= 1.0;
            match mode {
                Mode::Direct => {
                    for j in 0..k {
                        gw[j] += s[j] * p[j];
                        gb[j] += p[j];
                    }
                }
                Mode::Inverse => {
                    for j in 0..k {
                        gw[j] -= s[j] / (w[j] * w[j]) * p[j];
                        gb[j] += p[j];
                    }
                }
            }
        }
        let inv_n = 1.0 / self.n as f64;
        gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= inv_n);
        (total * inv_n, gw, gb)
    }

    /// Mean NLL, gradient and Hessian over the stacked vector `(w, b)`.
    pub fn loss_gradient_hessian(
        &self,
        mode: Mode,
        w: &[f64],
        b: &[f64],
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k = self.k;
        let d = 2 * k;
        let mut f = vec![0.0; k];
        let mut p = vec![0.0; k];
        let mut grad = DVector::zeros(d);
        // rows of `jp` hold J^T p per sample; the softmax Hessian is
        // diag(p) - p p^T, so the p p^T part becomes jp^T jp
        let mut jp = DMatrix::zeros(self.n, d);
        let mut diag_ww = vec![0.0; k];
        let mut diag_wb = vec![0.0; k];
        let mut diag_bb = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..self.n {
            let s = &self.s[i * k..(i + 1) * k];
            let label = self.label_rank[i];
            self.transformed_row(i, mode, w, b, &mut f);
            total += row_nll(&f, label);
            softmax_into(&f, &mut p);
            for j in 0..k {
                // df_j/dw_j
                let dw = match mode {
                    Mode::Direct => s[j],
                    Mode::Inverse => -s[j] / (w[j] * w[j]),
                };
                let r = p[j] - if j == label { 1.0 } else { 0.0 };
                grad[j] += dw * r;
                grad[k + j] += r;
                diag_ww[j] += dw * dw * p[j];
                diag_wb[j] += dw * p[j];
                diag_bb[j] += p[j];
                if mode == Mode::Inverse {
                    // second derivative of s / w
                    diag_ww[j] += r * 2.0 * s[j] / (w[j] * w[j] * w[j]);
                }
                jp[(i, j)] = dw * p[j];
                jp[(i, k + j)] = p[j];
            }
        }
        let mut hess = -(jp.tr_mul(&jp));
        for j in 0..k {
            hess[(j, j)] += diag_ww[j];
            hess[(j, k + j)] += diag_wb[j];
            hess[(k + j, j)] += diag_wb[j];
            hess[(k + j, k + j)] += diag_bb[j];
        }
        let inv_n = 1.0 / self.n as f64;
        (total * inv_n, grad * inv_n, hess * inv_n)
    }
}

fn row_nll(f: &[f64], label: usize) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = f.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - f[label]
}

/// Loss and gradient of a full-rank map. Gradients are with respect to the
/// rank-indexed `w` and `b`, averaged over samples.
pub fn objective_and_gradient(
    z: &LogitMatrix,
    y: &LabelVector,
    params: &MonotoneParams,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_map_input(z, params)?;
    if params.k != params.m {
        return Err(Error::InvalidParams(
            "objective needs full-rank parameters; truncate the data first".into(),
        ));
    }
    let problem = SortedProblem::from_logits(z, y)?;
    Ok(problem.loss_and_gradient(params.mode, &params.w, &params.b))
}
