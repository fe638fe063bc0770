use std::path::Path;

use mcct_core::baselines::{fit_method, CalibratedModel, FitOptions};
use mcct_core::data::{
    generate_synthetic, read_dataset, write_dataset, write_probs_csv, SynthConfig,
};
use mcct_core::logits::softmax_rows;
use mcct_core::metrics::{evaluate, MetricReport};
use mcct_core::{LabelVector, LogitMatrix, Method};
use serde_json::json;

use crate::args::{ApplyArgs, EvalArgs, FitArgs, GenSynthArgs, GlobalArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::{with_suffix, RunManifest};
use crate::Status;

pub fn load(global: &GlobalArgs, path: &Path) -> CliResult<(LogitMatrix, LabelVector)> {
    Ok(read_dataset(path, global.format_for(path))?)
}

pub fn read_model(path: &Path) -> CliResult<CalibratedModel> {
    let text = std::fs::read_to_string(path)?;
    let model: CalibratedModel = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("model {}: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn fit(global: &GlobalArgs, args: &FitArgs) -> CliResult<Status> {
    let mut manifest = RunManifest::new("fit", global.seed);
    manifest.inputs.push(args.data.clone());
    manifest.methods.push(args.method.to_string());
    let solver = args.solver.resolve()?;
    manifest.solver = Some(solver);

    let (z, y) = manifest.timed("load", || load(global, &args.data))?;
    if args.topk.is_some() && !matches!(args.method, Method::Mcct | Method::McctI) {
        log::warn!(
            "--topk only affects mcct and mcct-i; ignored for {}",
            args.method
        );
    }
    let opts = FitOptions {
        solver,
        top_k: args.topk,
        hb_bins: args.hb_bins,
    };
    let (model, summary) = manifest.timed("fit", || fit_method(args.method, &z, &y, &opts))?;
    manifest.timed("write", || write_json(&args.out, &model))?;
    manifest.outputs.push(args.out.clone());
    manifest.details = json!({
        "n": z.n(),
        "m": z.m(),
        "topk": args.topk,
        "final_loss": summary.final_loss,
        "iterations": summary.iterations,
        "converged": summary.converged,
        "dropped_samples": summary.dropped_samples,
    });
    manifest.write_beside(&args.out)?;
    Ok(if summary.converged {
        Status::Complete
    } else {
        Status::Incomplete(format!(
            "solver stopped after {} iterations without converging; best iterate written to {}",
            summary.iterations,
            args.out.display()
        ))
    })
}

pub fn apply(global: &GlobalArgs, args: &ApplyArgs) -> CliResult<Status> {
    let mut manifest = RunManifest::new("apply", global.seed);
    manifest.inputs = vec![args.data.clone(), args.model.clone()];
    let (z, _) = manifest.timed("load", || load(global, &args.data))?;
    let model = read_model(&args.model)?;
    manifest.methods.push(model.method().to_string());
    let p = manifest.timed("apply", || model.apply(&z))?;
    manifest.timed("write", || write_probs_csv(&args.out, &p))?;
    manifest.outputs.push(args.out.clone());
    manifest.details = json!({ "n": z.n(), "m": z.m() });
    manifest.write_beside(&args.out)?;
    Ok(Status::Complete)
}

/// Metrics of `model` on `(z, y)`, with diagnostics against plain softmax.
pub fn score(
    model: &CalibratedModel,
    z: &LogitMatrix,
    y: &LabelVector,
    bins: usize,
) -> CliResult<MetricReport> {
    let calibrated = model.apply(z)?;
    Ok(evaluate(&calibrated, y, &softmax_rows(z), bins)?)
}

pub fn eval(global: &GlobalArgs, args: &EvalArgs) -> CliResult<Status> {
    let mut manifest = RunManifest::new("eval", global.seed);
    manifest.inputs = vec![args.data.clone(), args.model.clone()];
    let (z, y) = manifest.timed("load", || load(global, &args.data))?;
    let model = read_model(&args.model)?;
    manifest.methods.push(model.method().to_string());
    let report = manifest.timed("evaluate", || score(&model, &z, &y, args.bins))?;

    let reliability = args.out.with_extension("reliability.csv");
    manifest.timed("write", || -> CliResult<()> {
        write_json(&args.out, &report)?;
        report
            .bins
            .write_csv(std::fs::File::create(&reliability)?)?;
        Ok(())
    })?;
    manifest.outputs = vec![args.out.clone(), reliability];
    manifest.details = json!({ "n": z.n(), "m": z.m(), "bins": args.bins });
    manifest.write_beside(&args.out)?;
    Ok(Status::Complete)
}

pub fn gen_synth(global: &GlobalArgs, args: &GenSynthArgs) -> CliResult<Status> {
    let cfg = SynthConfig {
        n: args.n,
        m: args.m,
        alpha: args.alpha,
        overconfidence: args.overconfidence,
        noise_sd: args.noise_sd,
        seed: global.seed,
    };
    let mut manifest = RunManifest::new("gen-synth", global.seed);
    let data = manifest.timed("generate", || generate_synthetic(&cfg))?;
    let format = global.format_for(&args.out);
    let probs = with_suffix(&args.out, ".probs.csv");
    manifest.timed("write", || -> CliResult<()> {
        write_dataset(&args.out, format, &data.logits, &data.labels)?;
        write_probs_csv(&probs, &data.true_probs)?;
        Ok(())
    })?;
    manifest.outputs.push(args.out.clone());
    if format == mcct_core::data::DatasetFormat::RawBinary {
        manifest
            .outputs
            .push(mcct_core::data::sidecar_path(&args.out));
    }
    manifest.outputs.push(probs);
    manifest.details = serde_json::to_value(cfg)?;
    manifest.write_beside(&args.out)?;
    Ok(Status::Complete)
}
