use std::fs;
use std::path::{Path, PathBuf};

use mmdml::dgp::DgpConfig;
use mmdml::dml::{SplitScheme, DEFAULT_ALPHA};
use mmdml::eval::RosterEntry;
use mmdml::learners::{FusionParams, LearnerSpec};
use mmdml::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";
const RUN_FORMAT: &str = "mmdml-run/1";

fn default_scheme() -> SplitScheme {
    SplitScheme::single(0.5, 5, 0)
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// User-facing experiment configuration. Each stage carries its own seed:
/// `dgp.seed`, `scheme.seed` and every learner's `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dgp: Option<DgpConfig>,
    /// Named learners; the benchmark roster when non-empty.
    #[serde(default)]
    pub learners: Vec<RosterEntry>,
    #[serde(default = "default_scheme")]
    pub scheme: SplitScheme,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Output directory used when no `--out` is given.
    #[serde(default)]
    pub outputs: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        for (i, l) in self.learners.iter().enumerate() {
            if self.learners[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Config(format!("learner name `{}` is used twice", l.name)));
            }
            l.learner.kind.check()?;
        }
        if let Some(d) = &self.dgp {
            d.check()?;
        }
        check_alpha(self.alpha)?;
        self.scheme.check()
    }

    pub fn learner(&self, name: &str) -> Option<&RosterEntry> {
        self.learners.iter().find(|l| l.name == name)
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// One fully resolved command; replaying it reproduces its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Step {
    Generate {
        dgp: DgpConfig,
    },
    Estimate {
        data: PathBuf,
        learner_name: String,
        learner: LearnerSpec,
        modalities: Option<Vec<String>>,
        scheme: SplitScheme,
        alpha: f64,
    },
    Benchmark {
        data: Option<PathBuf>,
        dgp: Option<DgpConfig>,
        roster: Vec<RosterEntry>,
        scheme: SplitScheme,
        alpha: f64,
    },
    Trace {
        data: PathBuf,
        fusion: FusionParams,
        learner_seed: u64,
        train_fraction: f64,
        split_seed: u64,
        modalities: Option<Vec<String>>,
        alpha: f64,
    },
    /// Operates on the output directory itself.
    ImportEmbeddings {
        embeddings: PathBuf,
        modality: String,
        replace: bool,
    },
}

/// Contents of `run.json`: the steps that produced an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub version: String,
    pub steps: Vec<Step>,
}

impl RunRecord {
    pub fn new(steps: Vec<Step>) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            steps,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: RunRecord = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if rec.format != RUN_FORMAT {
            return Err(Error::parse(path, format!("unsupported run format `{}`", rec.format)));
        }
        Ok(rec)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Absolute form of an input path, so a run record stays valid from any
/// working directory.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| Error::io(path, e))
}
