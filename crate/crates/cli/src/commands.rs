use std::fs;
use std::path::{Path, PathBuf};

use boltzflow::analytic::{density_grid, velocity_norm_sq, QuantilePath};
use boltzflow::metrics::{energy_distance, ess, log_weights, mean_std, nll, MetricsReport};
use boltzflow::odeint::{draw_latent, sample_backward};
use boltzflow::targets::EnergyTarget;
use boltzflow::training::{load_checkpoint_with, save_checkpoint, train_with, CheckpointMeta};
use boltzflow::{Error, FlowModel};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, CHECKPOINT_FILE};
use crate::output::{fmt_f64, CsvOut};
use crate::CliError;

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let path = explicit.clone().unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT_FILE));
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(path)
}

/// Load a checkpoint; a `target` in the config replaces the stored one.
fn load_model(cfg: &RunConfig, path: &Path) -> Result<FlowModel, CliError> {
    let target = cfg.target.as_ref().map(|s| s.build()).transpose().map_err(CliError::config)?;
    let spec = cfg.target.clone();
    let (mut model, _) = load_checkpoint_with(path, target).map_err(CliError::runtime)?;
    if spec.is_some() {
        model.target_spec = spec;
    }
    Ok(model)
}

/// `d x n` matrix from row-major draws.
fn columns(rows: Vec<f64>, d: usize) -> Array2<f64> {
    let n = rows.len() / d.max(1);
    Array2::from_shape_vec((n, d), rows).expect("row-major draws").reversed_axes().as_standard_layout().to_owned()
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.require_target()?.clone();
    let target = spec.build().map_err(CliError::config)?;
    cfg.train.validate().map_err(CliError::config)?;
    let out = cfg.out_dir();
    create_out(&out)?;

    let mut losses = CsvOut::create(&out.join("loss.csv"), &["iteration", "loss"])?;
    let mut write_err = None;
    let result = train_with(target, &cfg.train, |i, loss| {
        if write_err.is_none() {
            if let Err(e) = losses.row(&[i.to_string(), fmt_f64(loss)]) {
                write_err = Some(e);
            }
        }
    });
    losses.finish()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut outcome = result.map_err(CliError::from_core)?;
    outcome.model.target_spec = Some(spec);
    let meta = CheckpointMeta::for_model(&outcome.model, cfg.seed, cfg.train.iterations);
    save_checkpoint(&outcome.model, &meta, &out.join(CHECKPOINT_FILE)).map_err(CliError::runtime)?;
    if let Some(last) = outcome.losses.last() {
        eprintln!("trained {} iterations, final loss {}", outcome.losses.len(), fmt_f64(*last));
    }
    Ok(())
}

pub fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    let path = checkpoint_path(cfg, &cfg.sample.checkpoint)?;
    let out = cfg.out_dir();
    create_out(&out)?;
    let model = load_model(cfg, &path)?;
    let d = model.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
    header.push("logq".into());
    header.push("logw".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvOut::create(&out.join("samples.csv"), &header_refs)?;
    if cfg.sample.n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let z = draw_latent(&mut rng, d, cfg.sample.n, model.latent_sigma);
        let batch = sample_backward(&model, z, &cfg.solver, &mut rng).map_err(CliError::runtime)?;
        let mut point = vec![0.0; d];
        for (j, &lq) in batch.logq.iter().enumerate() {
            for (i, p) in point.iter_mut().enumerate() {
                *p = batch.x[[i, j]];
            }
            let logw = -model.target.energy(&point) - lq;
            let mut row: Vec<String> = point.iter().map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(lq));
            row.push(fmt_f64(logw));
            csv.row(&row)?;
        }
        if batch.resampled > 0 {
            eprintln!("resampled {} particles (rate {})", batch.resampled, fmt_f64(batch.resample_rate()));
        }
    }
    csv.finish()
}

#[derive(Debug, Clone, Serialize)]
struct Summary {
    mean: Option<f64>,
    std: Option<f64>,
    count: usize,
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> Summary {
    let v: Vec<f64> = values.flatten().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Summary { mean: None, std: None, count: 0 };
    }
    let (mean, std) = mean_std(&v);
    Summary { mean: Some(mean), std: Some(std), count: v.len() }
}

#[derive(Debug, Clone, Serialize)]
struct EvalRun {
    repeat: usize,
    #[serde(flatten)]
    report: MetricsReport,
    /// Failure messages of this repeat, empty when every metric succeeded.
    errors: Vec<String>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    runs: Vec<EvalRun>,
    ess: Summary,
    nll: Summary,
    energy_distance: Summary,
    resample_rate: Summary,
    failed_repeats: usize,
}

fn evaluate_once(cfg: &RunConfig, model: &FlowModel, target: &EnergyTarget, repeat: usize) -> EvalRun {
    let ec = &cfg.evaluate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(repeat as u64);
    let mut report = MetricsReport {
        kind: model.kind.as_str().into(),
        target: model.target_spec.as_ref().map(|s| s.label()).unwrap_or_else(|| target.name.clone()),
        sigma: model.latent_sigma,
        seed: cfg.seed,
        ess: f64::NAN,
        nll: None,
        energy_distance: None,
        n: ec.n,
        resample_rate: f64::NAN,
        excluded: 0,
    };
    let mut errors = Vec::new();
    let z = draw_latent(&mut rng, model.dim(), ec.n, model.latent_sigma);
    match sample_backward(model, z, &cfg.solver, &mut rng) {
        Ok(batch) => {
            report.resample_rate = batch.resample_rate();
            match log_weights(target, &batch.x, &batch.logq).and_then(|(w, excluded)| {
                report.excluded = excluded;
                ess(&w)
            }) {
                Ok(v) => report.ess = v,
                Err(e) => errors.push(format!("ess: {e}")),
            }
            if ec.energy_distance && target.has_sampler() {
                let reference = target.sample(&mut rng, ec.reference_n.unwrap_or(ec.n)).map(|r| columns(r, target.dim));
                match reference.and_then(|y| energy_distance(&batch.x, &y)) {
                    Ok(v) => report.energy_distance = Some(v),
                    Err(e) => errors.push(format!("energy distance: {e}")),
                }
            }
        }
        Err(e) => errors.push(format!("sampling: {e}")),
    }
    if ec.nll && target.has_sampler() {
        let exact = target.sample(&mut rng, ec.nll_n.unwrap_or(ec.n)).map(|r| columns(r, target.dim));
        match exact.and_then(|y| nll(model, &y, &cfg.solver)) {
            Ok(v) => report.nll = Some(v),
            Err(e) => errors.push(format!("nll: {e}")),
        }
    }
    EvalRun { repeat, report, errors }
}

/// Runs `repeats` evaluations; returns the number of failed repeats.
pub fn evaluate(cfg: &RunConfig) -> Result<usize, CliError> {
    if cfg.evaluate.repeats == 0 || cfg.evaluate.n == 0 {
        return Err(CliError::Config("evaluate.repeats and evaluate.n must be positive".into()));
    }
    let path = checkpoint_path(cfg, &cfg.evaluate.checkpoint)?;
    let out = cfg.out_dir();
    create_out(&out)?;
    let model = load_model(cfg, &path)?;
    let target = model.target.clone();

    let mut header = vec!["repeat"];
    header.extend(MetricsReport::CSV_HEADER);
    header.extend(["excluded", "error"]);
    let mut csv = CsvOut::create(&out.join("metrics.csv"), &header)?;
    let mut runs = Vec::with_capacity(cfg.evaluate.repeats);
    for repeat in 0..cfg.evaluate.repeats {
        let run = evaluate_once(cfg, &model, &target, repeat);
        let r = &run.report;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        csv.row(&[
            repeat.to_string(),
            r.kind.clone(),
            r.target.clone(),
            fmt_f64(r.sigma),
            r.seed.to_string(),
            fmt_f64(r.ess),
            opt(r.nll),
            opt(r.energy_distance),
            r.n.to_string(),
            fmt_f64(r.resample_rate),
            r.excluded.to_string(),
            run.errors.join("; "),
        ])?;
        eprintln!(
            "repeat {repeat}: ess {} nll {} energy distance {}{}",
            fmt_f64(r.ess),
            opt(r.nll),
            opt(r.energy_distance),
            if run.errors.is_empty() { String::new() } else { format!(" [{}]", run.errors.join("; ")) }
        );
        runs.push(run);
    }
    csv.finish()?;
    let failed_repeats = runs.iter().filter(|r| !r.errors.is_empty()).count();
    let report = EvalReport {
        ess: summarize(runs.iter().map(|r| Some(r.report.ess))),
        nll: summarize(runs.iter().map(|r| r.report.nll)),
        energy_distance: summarize(runs.iter().map(|r| r.report.energy_distance)),
        resample_rate: summarize(runs.iter().map(|r| Some(r.report.resample_rate))),
        failed_repeats,
        runs,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out.join("metrics.json"), json + "\n").map_err(|e| CliError::Runtime(e.to_string()))?;
    let show = |s: &Summary| match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{} ± {}", fmt_f64(m), fmt_f64(sd)),
        _ => "n/a".into(),
    };
    println!("ess {}", show(&report.ess));
    println!("nll {}", show(&report.nll));
    println!("energy_distance {}", show(&report.energy_distance));
    Ok(failed_repeats)
}

pub fn teleport(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = &cfg.teleport;
    if let Some(m) = tc.m.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(CliError::Config(format!("teleport.m entries must be finite and nonnegative, got {m}")));
    }
    if let Some(t) = tc.density_t.iter().chain(&tc.vnorm_t).find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CliError::Config(format!("teleport times must lie in [0, 1], got {t}")));
    }
    let out = cfg.out_dir();
    create_out(&out)?;
    let mut dens = CsvOut::create(&out.join("teleport_density.csv"), &["m", "t", "x", "rho"])?;
    for &m in &tc.m {
        for &t in &tc.density_t {
            let path = QuantilePath::new(t, m).map_err(CliError::runtime)?;
            let grid = density_grid(&path, tc.panel_tol, tc.max_spacing, tc.margin).map_err(CliError::config)?;
            for x in grid {
                dens.row(&[fmt_f64(m), fmt_f64(t), fmt_f64(x), fmt_f64(path.density(x))])?;
            }
        }
    }
    dens.finish()?;
    let mut vnorm = CsvOut::create(&out.join("teleport_vnorm.csv"), &["m", "t", "vnorm_sq"])?;
    for &m in &tc.m {
        let values: Vec<Result<f64, Error>> = {
            use rayon::prelude::*;
            tc.vnorm_t.par_iter().map(|&t| velocity_norm_sq(t, m)).collect()
        };
        for (&t, v) in tc.vnorm_t.iter().zip(values) {
            vnorm.row(&[fmt_f64(m), fmt_f64(t), fmt_f64(v.map_err(CliError::runtime)?)])?;
        }
    }
    vnorm.finish()
}
