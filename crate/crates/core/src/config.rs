//! Run configuration: a JSON file merged with command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{CountingTaskSpec, EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::qtype::DEFAULT_SAMPLE_SIZE;
use crate::scene::SceneSpec;
use crate::types::TypeList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Instances sampled per puzzle.
    pub k: usize,
    /// `rule` or `exec:PATH`.
    pub backend: String,
    /// Extra arguments for an exec backend.
    pub backend_args: Vec<String>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_SAMPLE_SIZE,
            backend: "rule".into(),
            backend_args: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            eps: crate::encoder::gradcheck::DEFAULT_EPS,
            tolerance: crate::encoder::gradcheck::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Overwrites the `scene` and `train` seeds on resolution.
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
    pub types: TypeList,
    pub scene: SceneSpec,
    pub classify: ClassifyConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub counting: CountingTaskSpec,
    /// Scenes generated for the counting task.
    pub counting_scenes: usize,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            types: TypeList::default(),
            scene: SceneSpec::default(),
            classify: ClassifyConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            counting: CountingTaskSpec::default(),
            counting_scenes: 2000,
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(context, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies global flag overrides and propagates the master seed.
    pub fn resolve(mut self, seed: Option<u64>, jobs: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(j) = jobs {
            self.jobs = j;
        }
        self.scene.seed = self.seed;
        self.train.seed = self.seed;
        self.scene.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}", "t").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.classify.k, 100);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_json(r#"{"sede": 1}"#, "t").is_err());
        assert!(RunConfig::from_json(r#"{"scene": {"widht": 10}}"#, "t").is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#, "t").is_err());
    }

    #[test]
    fn flags_win() {
        let c = RunConfig::from_json(
            r#"{"seed": 3, "jobs": 2, "scene": {"width": 256, "height": 256, "size_max": 64}}"#,
            "t",
        )
        .unwrap()
        .resolve(Some(9), None)
        .unwrap();
        assert_eq!((c.seed, c.jobs, c.scene.seed, c.train.seed), (9, 2, 9, 9));
        assert_eq!(c.scene.width, 256);
    }

    #[test]
    fn invalid_sections_fail_resolution() {
        let c = RunConfig::from_json(r#"{"encoder": {"width": 30}}"#, "t").unwrap();
        assert!(c.resolve(None, None).is_err());
        assert!(RunConfig::from_json(r#"{"types": ["a", "a"]}"#, "t").is_err());
    }
}
