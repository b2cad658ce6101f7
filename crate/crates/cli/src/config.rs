//! The single JSON run configuration and its flag overrides.

use std::path::{Path, PathBuf};

use brainib::eval::Scheme;
use brainib::graph::{AdjacencyRule, SyntheticConfig};
use brainib::interpret::{DEFAULT_DENSITIES, DEFAULT_TOP_K};
use brainib::trainer::TrainConfig;
use brainib::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub scheme: Scheme,
    pub folds: usize,
    /// Validation share for the single-model `train` command.
    pub val_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            scheme: Scheme::Tenfold,
            folds: 10,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset manifest; synthetic data from `synthetic` is used when absent.
    pub manifest: Option<PathBuf>,
    pub adjacency: AdjacencyRule,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            adjacency: AdjacencyRule::Complete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub top_k: usize,
    pub densities: Vec<f64>,
    pub system_map: Option<PathBuf>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            top_k: DEFAULT_TOP_K,
            densities: DEFAULT_DENSITIES.to_vec(),
            system_map: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the seeds inside `synthetic` and `train`.
    pub seed: Option<u64>,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataSection,
    pub explain: ExplainSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        // relative paths inside the config resolve against its directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.explain.system_map].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies the master seed to every randomized component.
    pub fn with_seed(mut self, seed: Option<u64>) -> RunConfig {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synthetic.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        if self.eval.folds < 3 {
            return Err(Error::Invalid(format!("eval.folds must be at least 3, got {}", self.eval.folds)));
        }
        if !(self.eval.val_fraction > 0.0 && self.eval.val_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "eval.val_fraction must lie in (0, 1), got {}",
                self.eval.val_fraction
            )));
        }
        if let AdjacencyRule::TopFraction(q) = self.data.adjacency {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Invalid(format!("data.adjacency fraction {q} outside (0, 1]")));
            }
        }
        if self.explain.top_k == 0 {
            return Err(Error::Invalid("explain.top_k must be at least 1".into()));
        }
        let d = &self.explain.densities;
        if d.len() < 2 || d.iter().any(|&x| !(x > 0.0 && x <= 1.0)) || d.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(
                "explain.densities must be at least two increasing values in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}
