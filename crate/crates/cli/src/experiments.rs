//! Repeated fit-and-score experiments. Cells run in parallel, but rows are
//! always emitted in a fixed order and timings stay out of the result tables
//! (except for the top-k sweep, where fit time is the measured quantity).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcct_core::baselines::{fit_method, FitOptions};
use mcct_core::data::{seeded_permutation, split_dataset, Subset};
use mcct_core::metrics::MetricReport;
use mcct_core::{Method, Mode};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::args::{CompareArgs, ExperimentArgs, GlobalArgs, SweepSizeArgs, SweepTopkArgs};
use crate::commands::{load, score, write_json};
use crate::error::{CliError, CliResult};
use crate::manifest::{with_suffix, RunManifest};
use crate::Status;

pub const SCORE_COLUMNS: [&str; 7] = [
    "ece",
    "eq_mass_ece",
    "ece_kde",
    "accuracy",
    "nll",
    "prediction_change_rate",
    "uncertain_alteration_rate",
];

/// Scalar metrics of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub ece: f64,
    pub eq_mass_ece: f64,
    pub ece_kde: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub prediction_change_rate: f64,
    pub uncertain_alteration_rate: f64,
}

impl Scores {
    pub fn from_report(r: &MetricReport) -> Self {
        Self::from_values([
            r.ece,
            r.eq_mass_ece,
            r.ece_kde,
            r.accuracy,
            r.nll,
            r.prediction_change_rate,
            r.uncertain_alteration_rate,
        ])
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.ece,
            self.eq_mass_ece,
            self.ece_kde,
            self.accuracy,
            self.nll,
            self.prediction_change_rate,
            self.uncertain_alteration_rate,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self {
            ece: v[0],
            eq_mass_ece: v[1],
            ece_kde: v[2],
            accuracy: v[3],
            nll: v[4],
            prediction_change_rate: v[5],
            uncertain_alteration_rate: v[6],
        }
    }

    /// Column-wise mean, or `None` for an empty input.
    pub fn mean<'a>(scores: impl IntoIterator<Item = &'a Scores>) -> Option<Scores> {
        let mut sum = [0.0; 7];
        let mut count = 0usize;
        for s in scores {
            for (acc, v) in sum.iter_mut().zip(s.values()) {
                *acc += v;
            }
            count += 1;
        }
        (count > 0).then(|| Scores::from_values(sum.map(|v| v / count as f64)))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub method: Method,
    /// Split seed, or "mean" / "rank" for summary rows.
    pub run: String,
    pub scores: Option<Scores>,
    pub status: String,
}

/// Outcome of fitting and scoring one method on one split.
#[derive(Debug, Clone)]
struct Cell {
    scores: Option<Scores>,
    status: String,
    seconds: f64,
}

impl Cell {
    fn failed(&self) -> bool {
        self.scores.is_none()
    }
}

fn run_cell(method: Method, calib: &Subset, test: &Subset, opts: &FitOptions, bins: usize) -> Cell {
    if method == Method::Hb && calib.len() < opts.hb_bins {
        log::warn!(
            "{} calibration samples for {} histogram bins; many bins will be empty",
            calib.len(),
            opts.hb_bins
        );
    }
    let start = Instant::now();
    let fitted = fit_method(method, &calib.logits, &calib.labels, opts);
    let seconds = start.elapsed().as_secs_f64();
    let result = fitted.map_err(CliError::from).and_then(|(model, summary)| {
        Ok((score(&model, &test.logits, &test.labels, bins)?, summary))
    });
    match result {
        Ok((report, summary)) => Cell {
            scores: Some(Scores::from_report(&report)),
            status: if summary.converged {
                "ok"
            } else {
                "ok:not-converged"
            }
            .into(),
            seconds,
        },
        Err(e) => {
            log::error!("{method} failed: {e}");
            Cell {
                scores: None,
                status: format!("error: {e}"),
                seconds,
            }
        }
    }
}

/// Runs `f` on a pool with `threads` workers, or on the global pool.
fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        Some(t) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()?
            .install(f)),
        None => Ok(f()),
    }
}

fn fit_options(exp: &ExperimentArgs) -> CliResult<FitOptions> {
    Ok(FitOptions {
        solver: exp.solver.resolve()?,
        top_k: exp.topk,
        hb_bins: exp.bins,
    })
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Writes `PREFIX.csv` and `PREFIX.json` and returns both paths.
fn write_rows(prefix: &Path, rows: &[ResultRow]) -> CliResult<Vec<PathBuf>> {
    let with_fraction = rows.iter().any(|r| r.fraction.is_some());
    let mut csv = String::new();
    if with_fraction {
        csv.push_str("fraction,");
    }
    csv.push_str("method,run,");
    csv.push_str(&SCORE_COLUMNS.join(","));
    csv.push_str(",status\n");
    for row in rows {
        if with_fraction {
            let _ = write!(csv, "{},", row.fraction.map(fmt_f64).unwrap_or_default());
        }
        let _ = write!(csv, "{},{},", row.method, row.run);
        let cells: Vec<String> = match &row.scores {
            Some(s) => s.values().iter().map(|&v| fmt_f64(v)).collect(),
            None => vec![String::new(); SCORE_COLUMNS.len()],
        };
        csv.push_str(&cells.join(","));
        let _ = writeln!(csv, ",{}", row.status.replace([',', '\n'], ";"));
    }
    let csv_path = with_suffix(prefix, ".csv");
    let json_path = with_suffix(prefix, ".json");
    std::fs::write(&csv_path, csv)?;
    write_json(&json_path, &rows)?;
    Ok(vec![csv_path, json_path])
}

/// Rank of each entry among the present ones (1 = best, ties share the
/// average rank).
pub fn ranks(values: &[Option<f64>], higher_is_better: bool) -> Vec<Option<f64>> {
    let key = |v: f64| if higher_is_better { -v } else { v };
    values
        .iter()
        .map(|v| {
            let v = key((*v)?);
            if v.is_nan() {
                return None;
            }
            let present = values
                .iter()
                .filter_map(|o| o.map(key))
                .filter(|o| !o.is_nan());
            let (better, equal) = present.fold((0usize, 0usize), |(b, e), o| {
                if o < v {
                    (b + 1, e)
                } else if o == v {
                    (b, e + 1)
                } else {
                    (b, e)
                }
            });
            Some(better as f64 + (equal as f64 + 1.0) / 2.0)
        })
        .collect()
}

/// Summary rows for one group of methods: their means and their ranks.
fn summary_rows(
    fraction: Option<f64>,
    methods: &[Method],
    per_method: &[Vec<&Cell>],
) -> Vec<ResultRow> {
    let means: Vec<Option<Scores>> = per_method
        .iter()
        .map(|cells| Scores::mean(cells.iter().filter_map(|c| c.scores.as_ref())))
        .collect();
    let mut rows: Vec<ResultRow> = methods
        .iter()
        .zip(&means)
        .map(|(&method, mean)| ResultRow {
            fraction,
            method,
            run: "mean".into(),
            scores: *mean,
            status: if mean.is_some() {
                "ok"
            } else {
                "error: no successful runs"
            }
            .into(),
        })
        .collect();
    let per_column: Vec<Vec<Option<f64>>> = (0..SCORE_COLUMNS.len())
        .map(|c| {
            let col: Vec<Option<f64>> = means.iter().map(|m| m.map(|s| s.values()[c])).collect();
            ranks(&col, SCORE_COLUMNS[c] == "accuracy")
        })
        .collect();
    for (i, &method) in methods.iter().enumerate() {
        let values: Vec<f64> = per_column
            .iter()
            .map(|col| col[i].unwrap_or(f64::NAN))
            .collect();
        rows.push(ResultRow {
            fraction,
            method,
            run: "rank".into(),
            scores: means[i]
                .map(|_| Scores::from_values(values.try_into().expect("seven columns"))),
            status: if means[i].is_some() {
                "ok"
            } else {
                "error: no successful runs"
            }
            .into(),
        });
    }
    rows
}

fn status_for(cells: &[Cell]) -> Status {
    let failed = cells.iter().filter(|c| c.failed()).count();
    if failed == 0 {
        Status::Complete
    } else {
        Status::Incomplete(format!("{failed} of {} cells failed", cells.len()))
    }
}

pub fn compare(global: &GlobalArgs, args: &CompareArgs) -> CliResult<Status> {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let methods = args.exp.methods();
    let opts = fit_options(&args.exp)?;
    let mut manifest = RunManifest::new("compare", global.seed);
    manifest.inputs.push(args.exp.data.clone());
    manifest.methods = methods.iter().map(|m| m.to_string()).collect();
    manifest.solver = Some(opts.solver);

    let (z, y) = manifest.timed("load", || load(global, &args.exp.data))?;
    let seeds: Vec<u64> = (0..args.runs).map(|r| global.seed + r).collect();
    let splits = seeds
        .iter()
        .map(|&s| split_dataset(&z, &y, args.exp.split, s))
        .collect::<Result<Vec<_>, _>>()?;

    let specs: Vec<(usize, Method)> = (0..seeds.len())
        .flat_map(|r| methods.iter().map(move |&m| (r, m)))
        .collect();
    let cells: Vec<Cell> = manifest.timed("cells", || {
        with_pool(global.threads, || {
            specs
                .par_iter()
                .map(|&(r, m)| run_cell(m, &splits[r].0, &splits[r].1, &opts, args.exp.bins))
                .collect()
        })
    })?;
    manifest
        .wall_seconds
        .insert("fit".into(), cells.iter().map(|c| c.seconds).sum());

    let mut rows = Vec::new();
    let mut per_method: Vec<Vec<&Cell>> = vec![Vec::new(); methods.len()];
    for (&(r, method), cell) in specs.iter().zip(&cells) {
        let mi = methods
            .iter()
            .position(|&m| m == method)
            .expect("listed method");
        per_method[mi].push(cell);
        rows.push(ResultRow {
            fraction: None,
            method,
            run: seeds[r].to_string(),
            scores: cell.scores,
            status: cell.status.clone(),
        });
    }
    rows.extend(summary_rows(None, &methods, &per_method));

    manifest.outputs = write_rows(&args.out, &rows)?;
    manifest.details = json!({
        "n": z.n(),
        "m": z.m(),
        "split": args.exp.split,
        "runs": args.runs,
        "bins": args.exp.bins,
        "topk": args.exp.topk,
    });
    manifest.write_beside(&args.out)?;
    Ok(status_for(&cells))
}

pub fn sweep_size(global: &GlobalArgs, args: &SweepSizeArgs) -> CliResult<Status> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if let Some(f) = args.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Usage(format!("fraction {f} is outside (0, 1]")));
    }
    let methods = args.exp.methods();
    let opts = fit_options(&args.exp)?;
    let mut manifest = RunManifest::new("sweep-size", global.seed);
    manifest.inputs.push(args.exp.data.clone());
    manifest.methods = methods.iter().map(|m| m.to_string()).collect();
    manifest.solver = Some(opts.solver);

    let (z, y) = manifest.timed("load", || load(global, &args.exp.data))?;
    let seeds: Vec<u64> = (0..args.seeds).map(|s| global.seed + s).collect();
    let splits = seeds
        .iter()
        .map(|&s| split_dataset(&z, &y, args.exp.split, s))
        .collect::<Result<Vec<_>, _>>()?;
    // nested subsamples: a prefix of one seeded shuffle per seed, and the
    // untouched calibration part at fraction 1
    let subsets: Vec<Vec<Subset>> = splits
        .iter()
        .zip(&seeds)
        .map(|((calib, _), &s)| {
            let order = seeded_permutation(calib.len(), s);
            args.fractions
                .iter()
                .map(|&f| {
                    if f == 1.0 {
                        return calib.clone();
                    }
                    let size = ((f * calib.len() as f64).round() as usize).max(1);
                    let mut idx: Vec<usize> = order[..size.min(calib.len())].to_vec();
                    idx.sort_unstable();
                    Subset::from_indices(&calib.logits, &calib.labels, idx)
                })
                .collect()
        })
        .collect();

    let mut specs: Vec<(usize, usize, Method)> = Vec::new();
    for fi in 0..args.fractions.len() {
        for &m in &methods {
            specs.extend((0..seeds.len()).map(|si| (fi, si, m)));
        }
    }
    let cells: Vec<Cell> = manifest.timed("cells", || {
        with_pool(global.threads, || {
            specs
                .par_iter()
                .map(|&(fi, si, m)| {
                    run_cell(m, &subsets[si][fi], &splits[si].1, &opts, args.exp.bins)
                })
                .collect()
        })
    })?;
    manifest
        .wall_seconds
        .insert("fit".into(), cells.iter().map(|c| c.seconds).sum());

    let mut rows = Vec::new();
    let mut groups: Vec<Vec<Vec<&Cell>>> =
        vec![vec![Vec::new(); methods.len()]; args.fractions.len()];
    for (&(fi, si, method), cell) in specs.iter().zip(&cells) {
        let mi = methods
            .iter()
            .position(|&m| m == method)
            .expect("listed method");
        groups[fi][mi].push(cell);
        rows.push(ResultRow {
            fraction: Some(args.fractions[fi]),
            method,
            run: seeds[si].to_string(),
            scores: cell.scores,
            status: cell.status.clone(),
        });
    }
    for (fi, per_method) in groups.iter().enumerate() {
        rows.extend(
            summary_rows(Some(args.fractions[fi]), &methods, per_method)
                .into_iter()
                .filter(|r| r.run == "mean"),
        );
    }

    manifest.outputs = write_rows(&args.out, &rows)?;
    manifest.details = json!({
        "n": z.n(),
        "m": z.m(),
        "split": args.exp.split,
        "fractions": args.fractions,
        "seeds": args.seeds,
        "bins": args.exp.bins,
    });
    manifest.write_beside(&args.out)?;
    Ok(status_for(&cells))
}

#[derive(Debug, Clone, Serialize)]
pub struct TopkRow {
    pub k: usize,
    pub ece: f64,
    pub eq_mass_ece: f64,
    pub ece_kde: f64,
    pub accuracy: f64,
    pub nll: f64,
    /// Fastest of the repeated fits.
    pub fit_seconds: f64,
    pub dropped_samples: usize,
    pub iterations: usize,
    pub converged: bool,
}

const TOPK_COLUMNS: &str =
    "k,ece,eq_mass_ece,ece_kde,accuracy,nll,fit_seconds,dropped_samples,iterations,converged";

pub fn sweep_topk(global: &GlobalArgs, args: &SweepTopkArgs) -> CliResult<Status> {
    let mode = Mode::from(args.mode);
    let method = match mode {
        Mode::Direct => Method::Mcct,
        Mode::Inverse => Method::McctI,
    };
    let solver = args.solver.resolve()?;
    let mut manifest = RunManifest::new("sweep-topk", global.seed);
    manifest.inputs.push(args.data.clone());
    manifest.methods.push(method.to_string());
    manifest.solver = Some(solver);

    let (z, y) = manifest.timed("load", || load(global, &args.data))?;
    if let Some(k) = args.kvalues.iter().find(|&&k| k < 2 || k > z.m()) {
        return Err(CliError::Usage(format!(
            "k = {k} is outside [2, {}]",
            z.m()
        )));
    }
    let (calib, test) = split_dataset(&z, &y, args.split, global.seed)?;

    // sequential on purpose: the fit time is the measured quantity
    let mut rows = Vec::with_capacity(args.kvalues.len());
    let mut all_converged = true;
    for &k in &args.kvalues {
        let opts = FitOptions {
            solver,
            top_k: Some(k),
            hb_bins: args.bins,
        };
        let mut best = f64::INFINITY;
        let mut fitted = None;
        for _ in 0..args.repeats.max(1) {
            let start = Instant::now();
            let out = fit_method(method, &calib.logits, &calib.labels, &opts)?;
            best = best.min(start.elapsed().as_secs_f64());
            fitted = Some(out);
        }
        let (model, summary) = fitted.expect("at least one fit");
        *manifest.wall_seconds.entry("fit".into()).or_default() += best;
        let report = manifest.timed("evaluate", || {
            score(&model, &test.logits, &test.labels, args.bins)
        })?;
        all_converged &= summary.converged;
        rows.push(TopkRow {
            k,
            ece: report.ece,
            eq_mass_ece: report.eq_mass_ece,
            ece_kde: report.ece_kde,
            accuracy: report.accuracy,
            nll: report.nll,
            fit_seconds: best,
            dropped_samples: summary.dropped_samples,
            iterations: summary.iterations,
            converged: summary.converged,
        });
    }

    let mut csv = String::from(TOPK_COLUMNS);
    csv.push('\n');
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.k,
            fmt_f64(r.ece),
            fmt_f64(r.eq_mass_ece),
            fmt_f64(r.ece_kde),
            fmt_f64(r.accuracy),
            fmt_f64(r.nll),
            r.fit_seconds,
            r.dropped_samples,
            r.iterations,
            r.converged
        );
    }
    let csv_path = with_suffix(&args.out, ".csv");
    let json_path = with_suffix(&args.out, ".json");
    std::fs::write(&csv_path, csv)?;
    write_json(&json_path, &rows)?;
    manifest.outputs = vec![csv_path, json_path];
    manifest.details = json!({
        "n": z.n(),
        "m": z.m(),
        "calibration_samples": calib.len(),
        "test_samples": test.len(),
        "mode": mode,
        "repeats": args.repeats,
    });
    manifest.write_beside(&args.out)?;
    Ok(if all_converged {
        Status::Complete
    } else {
        Status::Incomplete("some fits stopped before converging".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_handle_ties_direction_and_gaps() {
        let r = ranks(&[Some(0.3), Some(0.1), None, Some(0.3)], false);
        assert_eq!(r, vec![Some(2.5), Some(1.0), None, Some(2.5)]);
        let r = ranks(&[Some(0.9), Some(0.8)], true);
        assert_eq!(r, vec![Some(1.0), Some(2.0)]);
    }

    #[test]
    fn mean_of_scores() {
        let a = Scores::from_values([1.0; 7]);
        let b = Scores::from_values([3.0; 7]);
        assert_eq!(Scores::mean([&a, &b]), Some(Scores::from_values([2.0; 7])));
        assert_eq!(Scores::mean(std::iter::empty::<&Scores>()), None);
    }
}
