//! Experiment configuration file.
//!
//! The file is TOML with five optional sections. Every key has a default, so
//! an empty file is a valid configuration:
//!
//! ```toml
//! [dataset]
//! manifest = "data/manifest.json"   # default: <output.dir>/data/manifest.json
//! scenes = 8                        # scene count for `synth`
//!
//! [dataset.scene]                   # synthetic scene generator
//! height = 256
//! width = 256
//! misalignment_cap = 16.0
//! seed = 1
//!
//! [training]
//! steps = 3000
//! widths = [8, 16, 32]
//!
//! [pipeline]
//! rounds = 2
//! mode = "standard"                 # standard | AS1 | AS2 | noisier
//! seed = 7
//!
//! [metrics]
//! min_threshold = 0.125
//! max_threshold = 64.0
//! thresholds = 64
//! svg = true
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use polyalign::dataset::SceneSpec;
use polyalign::metrics::{log_thresholds, DEFAULT_THRESHOLD_COUNT, DEFAULT_THRESHOLD_MAX, DEFAULT_THRESHOLD_MIN};
use polyalign::pipeline::PipelineConfig;
use polyalign::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: Option<PathBuf>,
    pub scenes: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { manifest: None, scenes: 8, scene: SceneSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub min_threshold: f64,
    pub max_threshold: f64,
    pub thresholds: usize,
    pub svg: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            min_threshold: DEFAULT_THRESHOLD_MIN,
            max_threshold: DEFAULT_THRESHOLD_MAX,
            thresholds: DEFAULT_THRESHOLD_COUNT,
            svg: true,
        }
    }
}

impl MetricsSection {
    pub fn grid(&self) -> Result<Vec<f64>, CliError> {
        Ok(log_thresholds(self.min_threshold, self.max_threshold, self.thresholds)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub training: TrainConfig,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

/// Which seeds the file spelled out, for the deterministic-mode check.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExplicitSeeds {
    pub scene: bool,
    pub pipeline: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<(Self, ExplicitSeeds), CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        let has = |path: &[&str]| {
            let mut cur = &raw;
            for (k, key) in path.iter().enumerate() {
                match cur.get(*key) {
                    Some(toml::Value::Table(t)) if k + 1 < path.len() => cur = t,
                    Some(_) if k + 1 == path.len() => return true,
                    _ => return false,
                }
            }
            false
        };
        let seeds = ExplicitSeeds { scene: has(&["dataset", "scene", "seed"]), pipeline: has(&["pipeline", "seed"]) };
        Ok((cfg, seeds))
    }

    /// Reads `path` and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, ExplicitSeeds), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let (mut cfg, seeds) = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok((cfg, seeds))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output.dir);
        if let Some(m) = self.dataset.manifest.as_mut() {
            fix(m);
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset.manifest.clone().unwrap_or_else(|| self.output.dir.join("data").join("manifest.json"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.scene.validate()?;
        self.training.validate()?;
        self.pipeline.validate()?;
        self.metrics.grid()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
