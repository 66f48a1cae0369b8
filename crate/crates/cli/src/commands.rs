use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{Duration, NaiveDate};
use serde::Serialize;

use ptse_core::estimator::{self, FitOutcome};
use ptse_core::frame::TimeSeriesFrame;
use ptse_core::model::{self, EnsembleModel};
use ptse_core::predictor::{ensemble_quantile, q_risk, ForecastInput};
use ptse_core::simulator::{
    constant_member_frame, run_convergence_experiment, GaussianEmission, ScaleReading,
    SimConfig,
};

use crate::config::{self, ConfigFile, FitOverrides};
use crate::dataset::{self, read_dataset, Target};
use crate::{EvaluateArgs, FitArgs, OutputFormat, PredictArgs, SimulateArgs, Status};

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn env_seed() -> Option<String> {
    std::env::var(config::SEED_ENV).ok()
}

pub fn fit(args: FitArgs, stdout: &mut dyn Write) -> Result<Status> {
    let file = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let flags = FitOverrides {
        q: args.q,
        max_iters: args.max_iters,
        loglik_tol: args.loglik_tol,
        param_tol: args.param_tol,
        bootstrap_b: args.bootstrap_b,
        candidates: args.candidates.clone(),
        seed: args.seed,
        pi_star_tol: args.pi_star_tol,
        freeze_bandwidth_after: args.freeze_bandwidth_after,
    };
    let settings = config::resolve(&flags, &file, env_seed().as_deref())?;
    let data = read_dataset(&args.train, Target::Required)?;
    let frame = TimeSeriesFrame::new(
        data.timestamps.clone(),
        data.targets.clone().expect("target column required"),
        data.predictions.clone(),
        data.members.clone(),
        settings.q,
    )
    .with_context(|| format!("{}", args.train.display()))?;
    let outcome = estimator::fit(&frame, &settings.config)?;

    let mut out = create(&args.out)?;
    out.write_all(model::to_document(&outcome.model).as_bytes())?;
    out.flush()?;

    let report = fit_report(&args.train, &frame, &settings, &outcome);
    match &args.report {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(report.as_bytes())?;
            w.flush()?;
        }
        None => stdout.write_all(report.as_bytes())?,
    }
    Ok(if outcome.converged { Status::Success } else { Status::Caveat })
}

fn fit_report(
    train: &Path,
    frame: &TimeSeriesFrame<f64>,
    settings: &config::FitSettings,
    outcome: &FitOutcome<f64>,
) -> String {
    let m = &outcome.model;
    let width = m.member_names.iter().map(String::len).max().unwrap_or(0);
    let mut r = String::new();
    let mut line = |s: String| {
        r.push_str(&s);
        r.push('\n');
    };
    line(format!("training data: {}", train.display()));
    line(format!("rows: {}", frame.len()));
    line(format!("members: {}", m.member_names.join(", ")));
    line(format!("q: {}", settings.q));
    line(format!("seed: {}", settings.config.seed));
    line(format!("iterations: {}", outcome.iterations));
    line(format!("converged: {}", if outcome.converged { "yes" } else { "no" }));
    line(format!(
        "final log-likelihood: {}",
        m.final_log_likelihood().map(|v| v.to_string()).unwrap_or_else(|| "n/a".into())
    ));
    line("stationary weights (pi*):".into());
    for (name, p) in m.member_names.iter().zip(m.stationary.probs()) {
        line(format!("  {name:<width$}  {p}"));
    }
    line("bandwidths (sigma_k):".into());
    for (name, e) in m.member_names.iter().zip(&m.emissions) {
        line(format!("  {name:<width$}  {}", e.bandwidth()));
    }
    line(format!("warnings: {}", outcome.warnings.len()));
    for w in &outcome.warnings {
        line(format!("  {w}"));
    }
    line("note: member columns are taken as out-of-sample q-quantile forecasts; this is not checked".into());
    r
}

pub fn predict(args: PredictArgs, stdout: &mut dyn Write) -> Result<Status> {
    let text = std::fs::read_to_string(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let model: EnsembleModel<f64> =
        model::from_document(&text).with_context(|| format!("model {}", args.model.display()))?;
    let data = read_dataset(&args.input, Target::Optional)?;

    let missing: Vec<&str> = model
        .member_names
        .iter()
        .filter(|n| !data.members.contains(n))
        .map(String::as_str)
        .collect();
    let extra: Vec<&str> = data
        .members
        .iter()
        .filter(|n| !model.member_names.contains(n))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        bail!(
            "{}: member labels do not match the model (missing: [{}]; extra: [{}])",
            args.input.display(),
            missing.join(", "),
            extra.join(", ")
        );
    }
    let order: Vec<usize> = model
        .member_names
        .iter()
        .map(|n| data.members.iter().position(|m| m == n).expect("labels checked"))
        .collect();

    let sink: Box<dyn Write + '_> = match &args.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(&mut *stdout),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestamp", "quantile_value", "level", "cdf_residual"])?;
    for t in 0..data.rows() {
        let row = data.prediction_row(t);
        let input = ForecastInput::new(data.timestamps[t].clone(), order.iter().map(|&i| row[i]).collect());
        let f = ensemble_quantile(&model, &input).with_context(|| format!("row {}", data.timestamps[t]))?;
        w.write_record([
            f.label.clone(),
            f.quantile_value.to_string(),
            f.level.to_string(),
            f.cdf_residual.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(Status::Success)
}

#[derive(Serialize)]
struct Score<'a> {
    column: &'a str,
    q: f64,
    q_risk: f64,
    rows: usize,
}

pub fn evaluate(args: EvaluateArgs, stdout: &mut dyn Write) -> Result<Status> {
    let names: Vec<&str> = args.columns.iter().map(String::as_str).collect();
    let (f_ts, f_values) = dataset::read_columns(&args.forecast, &names)?;
    let (a_ts, a_values) = dataset::read_columns(&args.actuals, &["y"])?;
    if f_ts.len() != a_ts.len() {
        bail!(
            "forecast has {} rows but actuals have {}; timestamps must align",
            f_ts.len(),
            a_ts.len()
        );
    }
    if let Some(i) = (0..f_ts.len()).find(|&i| f_ts[i] != a_ts[i]) {
        bail!(
            "row {}: forecast timestamp {:?} does not match actuals timestamp {:?}",
            i + 1,
            f_ts[i],
            a_ts[i]
        );
    }
    let actuals = &a_values[0];
    for (name, predicted) in names.iter().zip(&f_values) {
        let risk = q_risk(actuals, predicted, args.q).with_context(|| format!("column {name}"))?;
        match args.format {
            OutputFormat::Text => writeln!(stdout, "{name}: q-risk {risk} over {} rows at q = {}", actuals.len(), args.q)?,
            OutputFormat::JsonLines => {
                let score = Score {
                    column: name,
                    q: args.q,
                    q_risk: risk,
                    rows: actuals.len(),
                };
                writeln!(stdout, "{}", serde_json::to_string(&score)?)?;
            }
        }
    }
    Ok(Status::Success)
}

fn sim_config(args: &SimulateArgs, seed: u64) -> Result<SimConfig> {
    let reading = if args.variance_reading {
        ScaleReading::Variance
    } else {
        ScaleReading::StdDev
    };
    let mut config = SimConfig::gaussian_ladder(args.k, args.t, args.reps, args.tau, seed, reading)?;
    for (what, given) in [("--means", &args.means), ("--scales", &args.scales)] {
        if let Some(v) = given {
            if v.len() != args.k {
                bail!("{what} has {} values for {} states", v.len(), args.k);
            }
        }
    }
    if let Some(means) = &args.means {
        for (e, m) in config.emissions.iter_mut().zip(means) {
            e.mean = *m;
        }
    }
    if let Some(scales) = &args.scales {
        for (e, s) in config.emissions.iter_mut().zip(scales) {
            e.std_dev = if args.variance_reading { s.sqrt() } else { *s };
        }
    }
    config.validate()?;
    Ok(config)
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

/// Hourly ISO-8601 stamps from 2024-01-01T00:00:00.
fn hourly(steps: usize) -> Vec<String> {
    let start = NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start");
    (0..steps)
        .map(|t| (start + Duration::hours(t as i64)).format("%Y-%m-%dT%H:%M:%S").to_string())
        .collect()
}

pub fn simulate(args: SimulateArgs, stdout: &mut dyn Write) -> Result<Status> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()
            .map(|s| s.trim().parse::<u64>().with_context(|| format!("{}={s:?}", config::SEED_ENV)))
            .transpose()?
            .unwrap_or(0),
    };
    if args.k == 0 {
        bail!("--k must be at least 1");
    }
    if args.t == 0 {
        bail!("--t must be at least 1");
    }
    let config = sim_config(&args, seed)?;
    let report = run_convergence_experiment(&config)?;

    if let Some(out) = &args.out {
        let mut w = create(out)?;
        report.write_trajectories_csv(&mut w)?;
        w.flush()?;
        let side = args.sidecar.clone().unwrap_or_else(|| sidecar_path(out));
        let mut s = create(&side)?;
        s.write_all(report.sidecar_json().as_bytes())?;
        s.flush()?;
    }
    if let Some(path) = &args.summary {
        let mut w = create(path)?;
        report.write_summary_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.dataset {
        if !(args.q > 0.0 && args.q < 1.0) {
            bail!("--q {} is outside (0, 1)", args.q);
        }
        if args.t < 2 {
            bail!("--dataset needs --t of at least 2");
        }
        let (frame, _, _) = constant_member_frame(&config, args.q, seed)?;
        let mut w = create(path)?;
        dataset::write_dataset(
            &mut w,
            &hourly(frame.len()),
            frame.targets(),
            frame.member_names(),
            &(0..frame.len()).flat_map(|t| frame.prediction_row(t).to_vec()).collect::<Vec<_>>(),
        )?;
        w.flush()?;
    }

    let fmt_list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    writeln!(stdout, "states: {}", config.states())?;
    writeln!(stdout, "steps: {}", config.steps)?;
    writeln!(stdout, "replications: {}", config.replications)?;
    writeln!(stdout, "seed: {seed}")?;
    writeln!(stdout, "tau: {}", config.tau)?;
    writeln!(
        stdout,
        "emissions: {}",
        config
            .emissions
            .iter()
            .map(|GaussianEmission { mean, std_dev }| format!("N({mean}, {std_dev})"))
            .collect::<Vec<_>>()
            .join(" ")
    )?;
    writeln!(stdout, "stationary: {}", fmt_list(report.stationary.probs()))?;
    writeln!(stdout, "limit: {}", report.limit)?;
    writeln!(stdout, "mean empirical cdf at T: {}", report.mean.last().copied().unwrap_or(f64::NAN))?;
    writeln!(stdout, "terminal gap: {}", report.terminal_gap())?;
    writeln!(stdout, "max gap for t >= 50: {}", report.max_gap_from(50))?;
    Ok(Status::Success)
}
