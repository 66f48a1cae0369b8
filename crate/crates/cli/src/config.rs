//! Fit settings from flags, an optional `key = value` file and `PTSE_SEED`.
//!
//! A flag beats the file, the file beats the environment and the
//! environment beats the built-in default.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ptse_core::estimator::{CandidateGrid, FitConfig};

pub const SEED_ENV: &str = "PTSE_SEED";

const KEYS: &[&str] = &[
    "q",
    "max_iters",
    "loglik_tol",
    "param_tol",
    "bootstrap_b",
    "candidates",
    "seed",
    "pi_star_tol",
    "freeze_bandwidth_after",
];

/// Parsed `key = value` lines; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected key = value"))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                bail!("line {line_no}: unknown key {key:?} (known: {})", KEYS.join(", "));
            }
            if entries.insert(key.to_owned(), (line_no, value.trim().to_owned())).is_some() {
                bail!("line {line_no}: key {key:?} given twice");
            }
        }
        Ok(Self { entries })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|(line, v)| v.parse::<T>().map_err(|e| anyhow!("line {line}: {key} = {v:?}: {e}")))
            .transpose()
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct FitOverrides {
    pub q: Option<f64>,
    pub max_iters: Option<usize>,
    pub loglik_tol: Option<f64>,
    pub param_tol: Option<f64>,
    pub bootstrap_b: Option<usize>,
    pub candidates: Option<String>,
    pub seed: Option<u64>,
    pub pi_star_tol: Option<f64>,
    pub freeze_bandwidth_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub q: f64,
    pub config: FitConfig,
}

/// `N` for `N` candidates around the pilot bandwidth, or a comma-separated
/// ascending list of absolute bandwidths.
pub fn parse_candidates(spec: &str) -> Result<CandidateGrid> {
    let spec = spec.trim();
    if let Ok(count) = spec.parse::<usize>() {
        if count == 0 {
            bail!("candidate count must be at least 1");
        }
        return Ok(CandidateGrid::Relative {
            count,
            lo_factor: 1.0 / 8.0,
            hi_factor: 8.0,
        });
    }
    let values = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("candidate {v:?}: {e}")))
        .collect::<Result<Vec<_>>>()?;
    if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || values.windows(2).any(|w| w[0] >= w[1]) {
        bail!("candidates must be positive, finite and strictly ascending");
    }
    Ok(CandidateGrid::Fixed(values))
}

pub fn resolve(flags: &FitOverrides, file: &ConfigFile, env_seed: Option<&str>) -> Result<FitSettings> {
    let defaults = FitConfig::default();
    let q = match flags.q {
        Some(q) => q,
        None => file.get("q")?.ok_or_else(|| anyhow!("quantile level not given (use --q or q = ... in the config)"))?,
    };
    if !(q > 0.0 && q < 1.0) {
        bail!("quantile level {q} is outside (0, 1)");
    }
    let env_seed = env_seed
        .map(|s| s.trim().parse::<u64>().map_err(|e| anyhow!("{SEED_ENV}={s:?}: {e}")))
        .transpose()?;
    let seed = match flags.seed {
        Some(s) => s,
        None => file.get("seed")?.or(env_seed).unwrap_or(defaults.seed),
    };
    let candidates = match flags.candidates.as_deref().or(file.raw("candidates")) {
        Some(spec) => parse_candidates(spec)?,
        None => defaults.candidates.clone(),
    };
    let config = FitConfig {
        max_iters: pick(flags.max_iters, file.get("max_iters")?, defaults.max_iters),
        loglik_tol: pick(flags.loglik_tol, file.get("loglik_tol")?, defaults.loglik_tol),
        param_tol: pick(flags.param_tol, file.get("param_tol")?, defaults.param_tol),
        candidates,
        bootstrap_resamples: pick(flags.bootstrap_b, file.get("bootstrap_b")?, defaults.bootstrap_resamples),
        seed,
        pi_star_tol: pick(flags.pi_star_tol, file.get("pi_star_tol")?, defaults.pi_star_tol),
        freeze_bandwidth_after: flags.freeze_bandwidth_after.or(file.get("freeze_bandwidth_after")?),
        freeze_emissions_after: None,
    };
    Ok(FitSettings { q, config })
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
