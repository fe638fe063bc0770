//! Fitted calibrators and the reference methods they are compared with:
//! temperature scaling, vector scaling, top-label histogram binning and
//! ensemble temperature scaling.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logits::{
    argmax, softmax_into, softmax_rows, LabelVector, LogitMatrix, ProbMatrix, Rows,
};
use crate::optim::newton::{minimize_bounded, NewtonSettings, TwiceDifferentiable};
use crate::optim::simplex::minimize_on_simplex;
use crate::optim::{fit_mcct, SolverConfig};
use crate::transform::{apply_map_topk, Mode, MonotoneParams};

pub const TS_RANGE: (f64, f64) = (1e-3, 1e3);
pub const TS_TOL: f64 = 1e-6;
pub const VS_STATIONARITY: f64 = 1e-6;
pub const HB_DEFAULT_BINS: usize = 15;

/// Calibration method names as used on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mcct")]
    Mcct,
    #[serde(rename = "mcct-i")]
    McctI,
    #[serde(rename = "ts")]
    Ts,
    #[serde(rename = "vs")]
    Vs,
    #[serde(rename = "hb")]
    Hb,
    #[serde(rename = "ets-nll")]
    EtsNll,
    #[serde(rename = "ets-mse")]
    EtsMse,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Mcct,
        Method::McctI,
        Method::Ts,
        Method::Vs,
        Method::Hb,
        Method::EtsNll,
        Method::EtsMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mcct => "mcct",
            Method::McctI => "mcct-i",
            Method::Ts => "ts",
            Method::Vs => "vs",
            Method::Hb => "hb",
            Method::EtsNll => "ets-nll",
            Method::EtsMse => "ets-mse",
        }
    }

    /// Whether the method can never change a prediction.
    pub fn preserves_ranking(self) -> bool {
        !matches!(self, Method::Vs | Method::Hb)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtsLoss {
    Nll,
    Mse,
}

/// A fitted calibrator. Serialises with a `kind` discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CalibratedModel {
    #[serde(rename = "ts")]
    Ts { temperature: f64 },
    #[serde(rename = "vs")]
    Vs { scale: Vec<f64>, bias: Vec<f64> },
    #[serde(rename = "hb")]
    Hb {
        edges: Vec<f64>,
        confidence: Vec<f64>,
    },
    #[serde(rename = "ets_nll")]
    EtsNll { temperature: f64, weights: [f64; 3] },
    #[serde(rename = "ets_mse")]
    EtsMse { temperature: f64, weights: [f64; 3] },
    #[serde(rename = "mcct")]
    Mcct(MonotoneParams),
    #[serde(rename = "mcct_i")]
    McctI(MonotoneParams),
}

impl CalibratedModel {
    pub fn method(&self) -> Method {
        match self {
            CalibratedModel::Ts { .. } => Method::Ts,
            CalibratedModel::Vs { .. } => Method::Vs,
            CalibratedModel::Hb { .. } => Method::Hb,
            CalibratedModel::EtsNll { .. } => Method::EtsNll,
            CalibratedModel::EtsMse { .. } => Method::EtsMse,
            CalibratedModel::Mcct(_) => Method::Mcct,
            CalibratedModel::McctI(_) => Method::McctI,
        }
    }

    /// Class count the model was fitted for, when it is fixed by the model.
    pub fn classes(&self) -> Option<usize> {
        match self {
            CalibratedModel::Vs { scale, .. } => Some(scale.len()),
            CalibratedModel::Mcct(p) | CalibratedModel::McctI(p) => Some(p.m()),
            _ => None,
        }
    }

    /// Checks the payload invariants (useful after deserialising).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        match self {
            CalibratedModel::Ts { temperature } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    return bad(format!("temperature {temperature} is not positive"));
                }
            }
            CalibratedModel::Vs { scale, bias } => {
                if scale.len() != bias.len() || scale.len() < 2 {
                    return bad("scale and bias must have equal length >= 2".into());
                }
                if scale.iter().chain(bias).any(|v| !v.is_finite()) {
                    return bad("non-finite vector scaling parameter".into());
                }
            }
            CalibratedModel::Hb { edges, confidence } => {
                if edges.len() != confidence.len() + 1 || confidence.is_empty() {
                    return bad("need one more edge than bins".into());
                }
                if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
                    return bad("bin edges must span [0, 1]".into());
                }
                if !edges.windows(2).all(|w| w[0] < w[1]) {
                    return bad("bin edges must be strictly increasing".into());
                }
                if !confidence.iter().all(|c| (0.0..=1.0).contains(c)) {
                    return bad("bin confidences must lie in [0, 1]".into());
                }
            }
            CalibratedModel::EtsNll {
                temperature,
                weights,
            }
            | CalibratedModel::EtsMse {
                temperature,
                weights,
            } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    return bad(format!("temperature {temperature} is not positive"));
                }
                if weights.iter().any(|w| w.is_nan() || *w < 0.0)
                    || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return bad(format!(
                        "ensemble weights {weights:?} are not on the simplex"
                    ));
                }
            }
            CalibratedModel::Mcct(p) => {
                if p.mode() != Mode::Direct {
                    return bad("mcct model must use direct mode".into());
                }
            }
            CalibratedModel::McctI(p) => {
                if p.mode() != Mode::Inverse {
                    return bad("mcct_i model must use inverse mode".into());
                }
            }
        }
        Ok(())
    }

    /// Calibrated probabilities for logits `z`.
    pub fn apply(&self, z: &LogitMatrix) -> Result<ProbMatrix> {
        if let Some(m) = self.classes() {
            if m != z.m() {
                return Err(Error::DimensionMismatch(format!(
                    "model expects {m} classes, data has {}",
                    z.m()
                )));
            }
        }
        match self {
            CalibratedModel::Ts { temperature } => Ok(softmax_rows(&z.scaled(1.0 / temperature)?)),
            CalibratedModel::Vs { scale, bias } => {
                let data = z
                    .rows()
                    .flat_map(|row| row.iter().zip(scale).zip(bias).map(|((v, a), c)| a * v + c))
                    .collect();
                Ok(softmax_rows(&LogitMatrix::new(data, z.n(), z.m())?))
            }
            CalibratedModel::Hb { edges, confidence } => {
                Ok(apply_histogram(&softmax_rows(z), edges, confidence))
            }
            CalibratedModel::EtsNll {
                temperature,
                weights,
            }
            | CalibratedModel::EtsMse {
                temperature,
                weights,
            } => ets_mixture(z, *temperature, weights),
            CalibratedModel::Mcct(p) | CalibratedModel::McctI(p) => {
                Ok(softmax_rows(&apply_map_topk(z, p)?))
            }
        }
    }
}

/// Solver bookkeeping returned alongside a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub dropped_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub solver: SolverConfig,
    /// Retained ranks for the monotone maps; `None` keeps all.
    pub top_k: Option<usize>,
    pub hb_bins: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            top_k: None,
            hb_bins: HB_DEFAULT_BINS,
        }
    }
}

/// Fits `method` on a calibration set.
pub fn fit_method(
    method: Method,
    z: &LogitMatrix,
    y: &LabelVector,
    opts: &FitOptions,
) -> Result<(CalibratedModel, FitSummary)> {
    y.check_against(z.n(), z.m())?;
    let plain = |model: CalibratedModel, loss: f64, iterations: usize, converged: bool| {
        (
            model,
            FitSummary {
                final_loss: loss,
                iterations,
                converged,
                dropped_samples: 0,
            },
        )
    };
    match method {
        Method::Mcct | Method::McctI => {
            let mode = if method == Method::Mcct {
                Mode::Direct
            } else {
                Mode::Inverse
            };
            let k = opts.top_k.unwrap_or(z.m());
            let fit = fit_mcct(z, y, mode, k, &opts.solver)?;
            let summary = FitSummary {
                final_loss: fit.final_loss,
                iterations: fit.iterations,
                converged: fit.converged,
                dropped_samples: fit.dropped_samples,
            };
            let model = match mode {
                Mode::Direct => CalibratedModel::Mcct(fit.params),
                Mode::Inverse => CalibratedModel::McctI(fit.params),
            };
            Ok((model, summary))
        }
        Method::Ts => {
            let (t, loss, it) = fit_temperature(z, y)?;
            Ok(plain(
                CalibratedModel::Ts { temperature: t },
                loss,
                it,
                true,
            ))
        }
        Method::Vs => {
            let fit = fit_vs(z, y)?;
            Ok(plain(fit.model, fit.loss, fit.iterations, fit.converged))
        }
        Method::Hb => {
            let model = fit_hb(&softmax_rows(z), y, opts.hb_bins)?;
            let loss = crate::logits::nll(&model.apply(z)?, y)?;
            Ok(plain(model, loss, 1, true))
        }
        Method::EtsNll | Method::EtsMse => {
            let loss = if method == Method::EtsNll {
                EtsLoss::Nll
            } else {
                EtsLoss::Mse
            };
            let fit = fit_ets(z, y, loss)?;
            Ok(plain(fit.model, fit.loss, fit.iterations, fit.converged))
        }
    }
}

fn row_nll(f: &[f64], label: usize) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = f.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - f[label]
}

fn temperature_nll(z: &LogitMatrix, y: &LabelVector, t: f64) -> f64 {
    let mut scaled = vec![0.0; z.m()];
    let total: f64 = z
        .rows()
        .zip(y.iter())
        .map(|(row, label)| {
            for (s, v) in scaled.iter_mut().zip(row) {
                *s = v / t;
            }
            row_nll(&scaled, label)
        })
        .sum();
    total / z.n() as f64
}

/// Golden-section search for the NLL-optimal temperature over `TS_RANGE` in
/// log space. Returns `(T, loss, iterations)`.
fn fit_temperature(z: &LogitMatrix, y: &LabelVector) -> Result<(f64, f64, usize)> {
    y.check_against(z.n(), z.m())?;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TS_RANGE.0.ln(), TS_RANGE.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = temperature_nll(z, y, c.exp());
    let mut fd = temperature_nll(z, y, d.exp());
    let mut iterations = 0;
    while b.exp() - a.exp() > TS_TOL && iterations < 500 {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = temperature_nll(z, y, c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = temperature_nll(z, y, d.exp());
        }
    }
    let t = (0.5 * (a + b)).exp();
    Ok((t, temperature_nll(z, y, t), iterations))
}

/// Temperature scaling: `softmax(z / T)` with `T` minimising the NLL.
pub fn fit_ts(z: &LogitMatrix, y: &LabelVector) -> Result<CalibratedModel> {
    fit_temperature(z, y).map(|(temperature, _, _)| CalibratedModel::Ts { temperature })
}

#[derive(Debug, Clone)]
pub struct IterativeFit {
    pub model: CalibratedModel,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// NLL of `softmax(a * z + c)` over the stacked vector `(a, c)`.
struct VectorScalingObjective<'a> {
    z: &'a LogitMatrix,
    y: &'a LabelVector,
}

impl TwiceDifferentiable for VectorScalingObjective<'_> {
    fn dim(&self) -> usize {
        2 * self.z.m()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let m = self.z.m();
        let mut f = vec![0.0; m];
        let total: f64 = self
            .z
            .rows()
            .zip(self.y.iter())
            .map(|(row, label)| {
                for j in 0..m {
                    f[j] = x[j] * row[j] + x[m + j];
                }
                row_nll(&f, label)
            })
            .sum();
        total / self.z.n() as f64
    }

    fn value_gradient_hessian(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (n, m) = (self.z.n(), self.z.m());
        let d = 2 * m;
        let mut f = vec![0.0; m];
        let mut p = vec![0.0; m];
        let mut grad = DVector::zeros(d);
        let mut jp = DMatrix::zeros(n, d);
        let mut diag = vec![[0.0; 3]; m];
        let mut total = 0.0;
        for (i, (row, label)) in self.z.rows().zip(self.y.iter()).enumerate() {
            for j in 0..m {
                f[j] = x[j] * row[j] + x[m + j];
            }
            total += row_nll(&f, label);
            softmax_into(&f, &mut p);
            for j in 0..m {
                let r = p[j] - if j == label { 1.0 } else { 0.0 };
                grad[j] += row[j] * r;
                grad[m + j] += r;
                diag[j][0] += row[j] * row[j] * p[j];
                diag[j][1] += row[j] * p[j];
                diag[j][2] += p[j];
                jp[(i, j)] = row[j] * p[j];
                jp[(i, m + j)] = p[j];
            }
        }
        let mut hess = -(jp.tr_mul(&jp));
        for j in 0..m {
            hess[(j, j)] += diag[j][0];
            hess[(j, m + j)] += diag[j][1];
            hess[(m + j, j)] += diag[j][1];
            hess[(m + j, m + j)] += diag[j][2];
        }
        let inv_n = 1.0 / n as f64;
        (total * inv_n, grad * inv_n, hess * inv_n)
    }
}

/// Vector scaling: per-class scale and bias, fitted by Newton's method from
/// the identity.
pub fn fit_vs(z: &LogitMatrix, y: &LabelVector) -> Result<IterativeFit> {
    y.check_against(z.n(), z.m())?;
    let m = z.m();
    let obj = VectorScalingObjective { z, y };
    let x0: Vec<f64> = std::iter::repeat_n(1.0, m)
        .chain(std::iter::repeat_n(0.0, m))
        .collect();
    let out = minimize_bounded(
        &obj,
        &x0,
        &vec![f64::NEG_INFINITY; 2 * m],
        NewtonSettings {
            max_iterations: 500,
            stationarity_tol: VS_STATIONARITY,
        },
    );
    Ok(IterativeFit {
        model: CalibratedModel::Vs {
            scale: out.x[..m].to_vec(),
            bias: out.x[m..].to_vec(),
        },
        loss: out.value,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Top-label histogram binning over `num_bins` equal-width bins. Each bin's
/// calibrated confidence is the accuracy of the calibration samples in it;
/// empty bins keep their midpoint.
pub fn fit_hb(p: &ProbMatrix, y: &LabelVector, num_bins: usize) -> Result<CalibratedModel> {
    let stats = crate::metrics::reliability_data(p, y, num_bins)?;
    let mut edges: Vec<f64> = stats.bins.iter().map(|b| b.lower).collect();
    edges.push(1.0);
    let confidence = stats
        .bins
        .iter()
        .map(|b| {
            if b.count == 0 {
                0.5 * (b.lower + b.upper)
            } else {
                b.accuracy
            }
        })
        .collect();
    Ok(CalibratedModel::Hb { edges, confidence })
}

fn histogram_bin(edges: &[f64], c: f64) -> usize {
    // first edge >= c closes the bin ((e[k], e[k+1]])
    let k = edges[1..].partition_point(|&e| e < c);
    k.min(edges.len() - 2)
}

/// Replaces each row's top probability by its bin value and rescales the
/// other entries to keep the row normalised.
fn apply_histogram(p: &ProbMatrix, edges: &[f64], confidence: &[f64]) -> ProbMatrix {
    let m = p.m();
    let mut data = Vec::with_capacity(p.n() * m);
    for row in p.rows() {
        let top = argmax(row);
        let c = row[top];
        let target = confidence[histogram_bin(edges, c)];
        let rest = 1.0 - c;
        for (j, &v) in row.iter().enumerate() {
            data.push(if j == top {
                target
            } else if rest > 0.0 {
                v * (1.0 - target) / rest
            } else {
                (1.0 - target) / (m - 1) as f64
            });
        }
    }
    // renormalise away rounding in the rescaled tail
    for row in data.chunks_exact_mut(m) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    ProbMatrix::new(data, p.n(), m).expect("rows stay on the simplex")
}

/// `w0 * softmax(z / T) + w1 * softmax(z) + w2 / m`.
pub fn ets_mixture(z: &LogitMatrix, temperature: f64, weights: &[f64; 3]) -> Result<ProbMatrix> {
    let tempered = softmax_rows(&z.scaled(1.0 / temperature)?);
    let plain = softmax_rows(z);
    let uniform = 1.0 / z.m() as f64;
    let mut data: Vec<f64> = tempered
        .as_slice()
        .iter()
        .zip(plain.as_slice())
        .map(|(a, b)| weights[0] * a + weights[1] * b + weights[2] * uniform)
        .collect();
    for row in data.chunks_exact_mut(z.m()) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    ProbMatrix::new(data, z.n(), z.m())
}

/// Loss of the three-component mixture as a function of its weights.
struct EnsembleObjective {
    /// components[k] is the n x m matrix of component k
    components: [Vec<f64>; 3],
    labels: Vec<usize>,
    n: usize,
    m: usize,
    loss: EtsLoss,
}

impl EnsembleObjective {
    fn comp(&self, k: usize, i: usize, j: usize) -> f64 {
        self.components[k][i * self.m + j]
    }
}

impl TwiceDifferentiable for EnsembleObjective {
    fn dim(&self) -> usize {
        3
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.value_gradient_hessian(w).0
    }

    fn value_gradient_hessian(&self, w: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut f = 0.0;
        let mut g = DVector::zeros(3);
        let mut h = DMatrix::zeros(3, 3);
        for i in 0..self.n {
            match self.loss {
                EtsLoss::Nll => {
                    let y = self.labels[i];
                    let q = [self.comp(0, i, y), self.comp(1, i, y), self.comp(2, i, y)];
                    let mix =
                        (w[0] * q[0] + w[1] * q[1] + w[2] * q[2]).max(crate::logits::LOG_CLAMP);
                    f -= mix.ln();
                    for a in 0..3 {
                        g[a] -= q[a] / mix;
                        for b in 0..3 {
                            h[(a, b)] += q[a] * q[b] / (mix * mix);
                        }
                    }
                }
                EtsLoss::Mse => {
                    for j in 0..self.m {
                        let q = [self.comp(0, i, j), self.comp(1, i, j), self.comp(2, i, j)];
                        let target = if j == self.labels[i] { 1.0 } else { 0.0 };
                        let r = w[0] * q[0] + w[1] * q[1] + w[2] * q[2] - target;
                        f += r * r;
                        for a in 0..3 {
                            g[a] += 2.0 * q[a] * r;
                            for b in 0..3 {
                                h[(a, b)] += 2.0 * q[a] * q[b];
                            }
                        }
                    }
                }
            }
        }
        let inv_n = 1.0 / self.n as f64;
        (f * inv_n, g * inv_n, h * inv_n)
    }
}

/// Ensemble temperature scaling: `T` from [`fit_ts`], then simplex weights
/// over (tempered, uncalibrated, uniform) minimising `loss`.
pub fn fit_ets(z: &LogitMatrix, y: &LabelVector, loss: EtsLoss) -> Result<IterativeFit> {
    let (temperature, _, _) = fit_temperature(z, y)?;
    let tempered = softmax_rows(&z.scaled(1.0 / temperature)?);
    let plain = softmax_rows(z);
    let obj = EnsembleObjective {
        components: [
            tempered.as_slice().to_vec(),
            plain.as_slice().to_vec(),
            vec![1.0 / z.m() as f64; z.n() * z.m()],
        ],
        labels: y.as_slice().to_vec(),
        n: z.n(),
        m: z.m(),
        loss,
    };
    let out = minimize_on_simplex(&obj, &[1.0, 0.0, 0.0], 200, 1e-12);
    let weights = [out.x[0], out.x[1], out.x[2]];
    let model = match loss {
        EtsLoss::Nll => CalibratedModel::EtsNll {
            temperature,
            weights,
        },
        EtsLoss::Mse => CalibratedModel::EtsMse {
            temperature,
            weights,
        },
    };
    Ok(IterativeFit {
        model,
        loss: out.value,
        iterations: out.iterations,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::logits::{argmax_rows, nll};
    use crate::metrics::ranking_diagnostics;
    use approx::assert_abs_diff_eq;

    fn synth(n: usize, m: usize, c: f64, seed: u64) -> (LogitMatrix, LabelVector) {
        let d = generate_synthetic(&SynthConfig {
            n,
            m,
            alpha: 0.5,
            overconfidence: c,
            noise_sd: 0.0,
            seed,
        })
        .unwrap();
        (d.logits, d.labels)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("platt".parse::<Method>().is_err());
    }

    #[test]
    fn temperature_recovery() {
        let (z, y) = synth(20_000, 10, 1.0, 1);
        let CalibratedModel::Ts { temperature } = fit_ts(&z, &y).unwrap() else {
            unreachable!()
        };
        assert!((temperature - 1.0).abs() <= 0.05, "T = {temperature}");

        let (z, y) = synth(20_000, 10, 2.5, 2);
        let CalibratedModel::Ts { temperature } = fit_ts(&z, &y).unwrap() else {
            unreachable!()
        };
        assert!((temperature - 2.5).abs() <= 0.05, "T = {temperature}");
    }

    #[test]
    fn unit_temperature_is_identity() {
        let (z, _) = synth(50, 5, 2.0, 3);
        let p = CalibratedModel::Ts { temperature: 1.0 }.apply(&z).unwrap();
        assert_eq!(p, softmax_rows(&z));
    }

    #[test]
    fn ets_degenerate_weights() {
        let (z, _) = synth(40, 4, 2.0, 4);
        let ts = CalibratedModel::Ts { temperature: 1.7 }.apply(&z).unwrap();
        let ets = ets_mixture(&z, 1.7, &[1.0, 0.0, 0.0]).unwrap();
        for (a, b) in ts.as_slice().iter().zip(ets.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let uni = ets_mixture(&z, 1.7, &[0.0, 0.0, 1.0]).unwrap();
        assert!(uni.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn ets_prefers_the_tempered_component_when_ts_is_the_true_model() {
        let (z, y) = synth(10_000, 10, 2.5, 5);
        for loss in [EtsLoss::Nll, EtsLoss::Mse] {
            let fit = fit_ets(&z, &y, loss).unwrap();
            let (CalibratedModel::EtsNll { weights, .. } | CalibratedModel::EtsMse { weights, .. }) =
                fit.model
            else {
                unreachable!()
            };
            assert!(weights[0] >= 0.9, "{loss:?}: {weights:?}");
            assert_abs_diff_eq!(weights.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            let p = fit.model.apply(&z).unwrap();
            assert_eq!(argmax_rows(&p), argmax_rows(&z));
            for row in p.rows() {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn vs_identity_and_nesting() {
        let (z, _) = synth(30, 4, 1.0, 6);
        let id = CalibratedModel::Vs {
            scale: vec![1.0; 4],
            bias: vec![0.0; 4],
        };
        assert_eq!(id.apply(&z).unwrap(), softmax_rows(&z));

        let (zc, yc) = synth(5_000, 10, 2.5, 7);
        let (zt, yt) = synth(10_000, 10, 2.5, 8);
        let vs = fit_vs(&zc, &yc).unwrap();
        let ts = fit_ts(&zc, &yc).unwrap();
        let vs_nll = nll(&vs.model.apply(&zt).unwrap(), &yt).unwrap();
        let ts_nll = nll(&ts.apply(&zt).unwrap(), &yt).unwrap();
        assert!(vs_nll <= ts_nll + 1e-3, "vs {vs_nll} ts {ts_nll}");
    }

    #[test]
    fn vs_changes_predictions_on_small_sets_while_mcct_does_not() {
        let (zc, yc) = synth(100, 20, 2.5, 9);
        let (zt, _) = synth(5_000, 20, 2.5, 10);
        let base = softmax_rows(&zt);
        let vs = fit_vs(&zc, &yc).unwrap();
        let d = ranking_diagnostics(&base, &vs.model.apply(&zt).unwrap(), 0.7).unwrap();
        assert!(d.prediction_change_rate > 0.0);

        let (mcct, _) = fit_method(Method::Mcct, &zc, &yc, &FitOptions::default()).unwrap();
        let d = ranking_diagnostics(&base, &mcct.apply(&zt).unwrap(), 0.7).unwrap();
        assert_eq!(
            (d.prediction_change_rate, d.uncertain_alteration_rate),
            (0.0, 0.0)
        );
    }

    #[test]
    fn histogram_binning() {
        // all calibration samples correct at 0.95
        let p = ProbMatrix::new([0.95, 0.05].repeat(10), 10, 2).unwrap();
        let y = LabelVector::new(vec![0; 10], 2).unwrap();
        let CalibratedModel::Hb { edges, confidence } = fit_hb(&p, &y, 15).unwrap() else {
            unreachable!()
        };
        let k = histogram_bin(&edges, 0.95);
        assert_eq!(k, 14);
        assert_eq!(confidence[14], 1.0);
        assert_eq!(confidence[3], 0.5 * (3.0 / 15.0 + 4.0 / 15.0));
        assert_eq!(edges.len(), 16);

        let model = CalibratedModel::Hb { edges, confidence };
        model.validate().unwrap();
        let z = LogitMatrix::new(vec![(0.95f64 / 0.05).ln(), 0.0], 1, 2).unwrap();
        let out = model.apply(&z).unwrap();
        assert_abs_diff_eq!(out.row(0)[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn histogram_matches_group_by_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let conf: Vec<f64> = (0..50).map(|_| rng.random_range(0.5..1.0)).collect();
        let labels: Vec<usize> = (0..50).map(|_| usize::from(rng.random_bool(0.3))).collect();
        let p = ProbMatrix::new(conf.iter().flat_map(|&c| [c, 1.0 - c]).collect(), 50, 2).unwrap();
        let y = LabelVector::new(labels.clone(), 2).unwrap();
        let CalibratedModel::Hb { confidence, .. } = fit_hb(&p, &y, 15).unwrap() else {
            unreachable!()
        };
        for (k, &got) in confidence.iter().enumerate() {
            let (lo, hi) = (k as f64 / 15.0, (k + 1) as f64 / 15.0);
            let members: Vec<usize> = (0..50).filter(|&i| conf[i] > lo && conf[i] <= hi).collect();
            let expected = if members.is_empty() {
                (lo + hi) / 2.0
            } else {
                members.iter().filter(|&&i| labels[i] == 0).count() as f64 / members.len() as f64
            };
            assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn model_json_has_kind_tag() {
        let ts = CalibratedModel::Ts { temperature: 2.0 };
        assert_eq!(
            serde_json::to_string(&ts).unwrap(),
            r#"{"kind":"ts","temperature":2.0}"#
        );
        let p = MonotoneParams::identity(Mode::Inverse, 3);
        let json = serde_json::to_string(&CalibratedModel::McctI(p.clone())).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"mcct_i","mode":"inverse","m":3,"k":3,"w":[1.0,1.0,1.0],"b":[0.0,0.0,0.0]}"#
        );
        let back: CalibratedModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, CalibratedModel::McctI(p));
        let wrong_mode: CalibratedModel = serde_json::from_str(
            r#"{"kind":"mcct","mode":"inverse","m":2,"k":2,"w":[1.0,1.0],"b":[0.0,0.0]}"#,
        )
        .unwrap();
        assert!(wrong_mode.validate().is_err());
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let model = CalibratedModel::Mcct(MonotoneParams::identity(Mode::Direct, 3));
        let z = LogitMatrix::new(vec![0.0, 1.0], 1, 2).unwrap();
        assert!(matches!(model.apply(&z), Err(Error::DimensionMismatch(_))));
    }
}
