//! TOML files read and written by the CLI.

use std::path::{Path, PathBuf};

use ews_core::experiment::{BacktestConfig, SyntheticSpec};

use crate::Failure;

/// A backtest config: the data paths plus every `BacktestConfig` field at the
/// top level. Relative paths are taken from the config file's directory.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub epi_path: PathBuf,
    pub tweet_path: Option<PathBuf>,
    pub backtest: BacktestConfig,
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn take_path(table: &mut toml::Table, key: &str, base: &Path, file: &Path) -> Result<Option<PathBuf>, Failure> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(base.join(s))),
        Some(_) => Err(Failure::input(format!("{}: `{key}` must be a string", file.display()))),
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = read(path)?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let epi_path = take_path(&mut table, "epi_path", base, path)?
        .ok_or_else(|| Failure::input(format!("{}: missing `epi_path`", path.display())))?;
    let tweet_path = take_path(&mut table, "tweet_path", base, path)?;
    let backtest: BacktestConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    backtest.validate()?;
    Ok(RunConfig { epi_path, tweet_path, backtest })
}

pub fn run_config_text(epi: &str, tweets: Option<&str>, config: &BacktestConfig) -> Result<String, Failure> {
    let mut table = toml::Table::new();
    table.insert("epi_path".into(), epi.into());
    if let Some(t) = tweets {
        table.insert("tweet_path".into(), t.into());
    }
    match toml::Value::try_from(config) {
        Ok(toml::Value::Table(fields)) => table.extend(fields),
        _ => return Err(Failure::run("backtest config does not serialize to a table")),
    }
    toml::to_string(&table).map_err(|e| Failure::run(e.to_string()))
}

pub fn load_synthetic_spec(path: &Path) -> Result<SyntheticSpec, Failure> {
    toml::from_str(&read(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}
