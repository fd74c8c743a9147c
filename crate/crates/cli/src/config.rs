//! Run configuration for `simulate`.

use std::path::{Path, PathBuf};

use clustersim::harness::{Grid, RunSettings};
use clustersim::Error;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusSource {
    /// Census file (CSV).
    pub path: Option<PathBuf>,
    /// Synthetic census spec (TOML); used when `path` is absent.
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    #[serde(default)]
    pub census: CensusSource,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub settings: RunSettings,
}

impl RunConfig {
    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.census.path);
        resolve(&mut cfg.census.spec);
        resolve(&mut cfg.output_dir);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<(), Error> {
        for p in [&self.census.path, &self.census.spec].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        if self.census.path.is_some() && self.census.spec.is_some() {
            return Err(Error::Config("give either census.path or census.spec, not both".into()));
        }
        Ok(())
    }
}
