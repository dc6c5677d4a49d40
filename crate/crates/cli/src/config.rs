//! Run settings: defaults, then the config file, then command-line flags.
//!
//! The config file is plain `key = value` lines; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;

use ppp_core::engine::{GammaRows, PosteriorMode, ScoreMode};
use ppp_core::gmm::CovarianceMode;
use ppp_core::kmeans::KmeansInit;
use ppp_core::{PppConfig, RandomSeed};

use crate::error::{CliError, CliResult};

pub const KEYS: &[&str] = &[
    "seed",
    "som_grid",
    "som_epochs",
    "alpha_start",
    "alpha_end",
    "sigma_start",
    "sigma_end",
    "em_tol",
    "em_max_iter",
    "cov_mode",
    "reg_eps",
    "max_split_attempts",
    "patience",
    "threshold",
    "posterior_mode",
    "gamma_rows",
    "score_mode",
    "kmeans_init",
    "kmeans_max_iter",
    "cut_depth",
    "threads",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub ppp: PppConfig,
    pub cut_depth: Option<i64>,
    pub threads: Option<usize>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            ppp: PppConfig::default(),
            cut_depth: None,
            threads: None,
        }
    }
}

pub fn parse_config_text(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
        let key = key.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key {key:?}", n + 1)));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_config_text(&text)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

/// Parses `RxC` (also `RXC` or `R,C`).
pub fn parse_grid(value: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("expected RxC, got {value:?}"));
    let (r, c) = value
        .split_once(['x', 'X', ','])
        .ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

impl RunSettings {
    pub fn apply(&mut self, key: &str, value: &str) -> CliResult<()> {
        let c = &mut self.ppp;
        let choice = |options: &[&str]| -> CliResult<usize> {
            options
                .iter()
                .position(|o| o.eq_ignore_ascii_case(value))
                .ok_or_else(|| CliError::Usage(format!("{key} must be one of {}", options.join(", "))))
        };
        match key {
            "seed" => c.master_seed = RandomSeed(num(key, value)?),
            "som_grid" => c.som.grid = Some(parse_grid(value)?),
            "som_epochs" => c.som.epochs = num(key, value)?,
            "alpha_start" => c.som.alpha_start = num(key, value)?,
            "alpha_end" => c.som.alpha_end = num(key, value)?,
            "sigma_start" => c.som.sigma_start = Some(num(key, value)?),
            "sigma_end" => c.som.sigma_end = num(key, value)?,
            "em_tol" => c.em.tol = num(key, value)?,
            "em_max_iter" => c.em.max_iter = num(key, value)?,
            "cov_mode" => {
                c.em.covariance_mode = Some(match choice(&["full", "diag"])? {
                    0 => CovarianceMode::Full,
                    _ => CovarianceMode::Diagonal,
                })
            }
            "reg_eps" => c.em.reg_epsilon = Some(num(key, value)?),
            "max_split_attempts" => c.max_split_attempts = num(key, value)?,
            "patience" => c.patience = num(key, value)?,
            "threshold" => c.score_threshold = num(key, value)?,
            "posterior_mode" => {
                c.posterior_mode = match choice(&["competitive", "weighted"])? {
                    0 => PosteriorMode::Competitive,
                    _ => PosteriorMode::Weighted,
                }
            }
            "gamma_rows" => {
                c.gamma_rows = match choice(&["gamma0", "all"])? {
                    0 => GammaRows::Gamma0,
                    _ => GammaRows::All,
                }
            }
            "score_mode" => {
                c.score_mode = match choice(&["normalized", "raw"])? {
                    0 => ScoreMode::Normalized,
                    _ => ScoreMode::Raw,
                }
            }
            "kmeans_init" => {
                c.kmeans_init = match choice(&["random", "plusplus"])? {
                    0 => KmeansInit::Random,
                    _ => KmeansInit::PlusPlus,
                }
            }
            "kmeans_max_iter" => c.kmeans_max_iter = num(key, value)?,
            "cut_depth" => self.cut_depth = Some(num(key, value)?),
            "threads" => self.threads = Some(num(key, value)?),
            other => return Err(CliError::Usage(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Defaults, overridden by `file`, overridden by `flags`.
    pub fn resolve<'a>(
        file: Option<&BTreeMap<String, String>>,
        flags: impl IntoIterator<Item = (&'a str, String)>,
    ) -> CliResult<Self> {
        let mut s = Self::default();
        if let Some(file) = file {
            for (k, v) in file {
                s.apply(k, v)?;
            }
        }
        for (k, v) in flags {
            s.apply(k, &v)?;
        }
        if let Some(d) = s.cut_depth {
            if d < 0 {
                return Err(CliError::Usage(format!("cut depth must be non-negative, got {d}")));
            }
        }
        if s.threads == Some(0) {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        s.ppp.validate()?;
        Ok(s)
    }
}
