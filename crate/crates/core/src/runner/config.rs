use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetFormat;
use crate::emissions::EmissionsConfig;
use crate::error::RunError;
use crate::evaluator::EvalNegatives;
use crate::models::{Family, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Inferred from `name` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DatasetFormat>,
    pub path: PathBuf,
}

impl DatasetConfig {
    pub fn resolved_format(&self) -> Result<DatasetFormat, RunError> {
        if let Some(f) = self.format {
            return Ok(f);
        }
        infer_format(&self.name).ok_or_else(|| {
            RunError::Config(format!(
                "cannot infer the format of dataset `{}`; set dataset.format to movielens, amazon, foursquare or canonical",
                self.name
            ))
        })
    }
}

/// Format implied by a conventional dataset name.
pub fn infer_format(name: &str) -> Option<DatasetFormat> {
    let n = name.to_ascii_lowercase();
    if n.starts_with("ml-") || n.starts_with("movielens") {
        Some(DatasetFormat::Movielens)
    } else if n.starts_with("fs-") || n.starts_with("foursquare") {
        Some(DatasetFormat::Foursquare)
    } else if n.starts_with("amazon") || n == "beauty" {
        Some(DatasetFormat::Amazon)
    } else {
        None
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub m_neg: EvalNegatives,
}

/// Architecture settings shared by every sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub mask_prob: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::new(Family::Sasrec, 1, 1);
        Self {
            layers: c.layers,
            heads: c.heads,
            dropout: c.dropout,
            mask_prob: c.mask_prob,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, family: Family, emb: usize, seqlen: usize) -> ModelConfig {
        ModelConfig {
            family,
            emb,
            seqlen,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            mask_prob: self.mask_prob,
        }
    }
}

fn default_emb() -> Vec<usize> {
    vec![32, 64, 128, 256, 512]
}

fn default_seqlen() -> Vec<usize> {
    vec![20, 50, 100, 200]
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub models: Vec<Family>,
    #[serde(default = "default_emb")]
    pub emb: Vec<usize>,
    #[serde(default = "default_seqlen")]
    pub seqlen: Vec<usize>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub emissions: EmissionsConfig,
}

impl ExperimentConfig {
    /// Parses YAML text. Relative paths are resolved against `base`.
    pub fn from_yaml(text: &str, base: &Path) -> Result<Self, RunError> {
        let mut c: ExperimentConfig = serde_yaml::from_str(text).map_err(|e| RunError::Config(with_suggestion(&e.to_string())))?;
        if c.dataset.path.is_relative() {
            c.dataset.path = base.join(&c.dataset.path);
        }
        if c.output.is_relative() {
            c.output = base.join(&c.output);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let cfg = |m: String| Err(RunError::Config(m));
        if self.models.is_empty() || self.emb.is_empty() || self.seqlen.is_empty() {
            return cfg("models, emb and seqlen must be non-empty lists".into());
        }
        if self.replicates == 0 {
            return cfg("replicates must be at least 1".into());
        }
        for &family in &self.models {
            for &d in &self.emb {
                for &l in &self.seqlen {
                    self.model
                        .model_config(family, d, l)
                        .validate()
                        .map_err(|e| RunError::Config(e.to_string()))?;
                }
            }
        }
        self.train.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.emissions.validate().map_err(RunError::Config)?;
        self.dataset.resolved_format()?;
        if !self.dataset.path.exists() {
            return cfg(format!("dataset file {} does not exist", self.dataset.path.display()));
        }
        Ok(())
    }

    /// Canonical YAML of the fully resolved config.
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    ExperimentConfig::from_yaml(&text, base).map_err(|e| match e {
        RunError::Config(m) => RunError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Appends a "did you mean" hint to serde's unknown-field errors.
fn with_suggestion(msg: &str) -> String {
    let Some(rest) = msg.split("unknown field `").nth(1) else {
        return msg.to_string();
    };
    let Some((bad, tail)) = rest.split_once('`') else {
        return msg.to_string();
    };
    let expected: Vec<&str> = tail.split('`').skip(1).step_by(2).collect();
    let best = expected
        .iter()
        .map(|k| (strsim::damerau_levenshtein(bad, k), *k))
        .min()
        .filter(|&(dist, k)| dist <= 2.max(k.len() / 3));
    match best {
        Some((_, k)) => format!("{msg} (did you mean `{k}`?)"),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_in(dir: &Path, yaml: &str) -> Result<ExperimentConfig, RunError> {
        fs::write(dir.join("u.data"), "1\t1\t5\t1\n").unwrap();
        ExperimentConfig::from_yaml(yaml, dir)
    }

    fn load(yaml: &str) -> Result<ExperimentConfig, RunError> {
        load_in(tempfile::tempdir().unwrap().path(), yaml)
    }

    const MINIMAL: &str = "dataset:\n  name: ml-100k\n  path: u.data\nmodels: [gru4rec]\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let c = load_in(dir.path(), MINIMAL).unwrap();
        assert_eq!(c.emb, vec![32, 64, 128, 256, 512]);
        assert_eq!(c.seqlen, vec![20, 50, 100, 200]);
        assert_eq!(c.train.epochs, 400);
        assert_eq!(c.eval.m_neg, EvalNegatives::Sampled(100));
        assert_eq!(c.replicates, 1);
        assert_eq!(c.dataset.resolved_format().unwrap(), DatasetFormat::Movielens);
        let echo = c.to_yaml();
        let again = ExperimentConfig::from_yaml(&echo, Path::new("/")).unwrap();
        assert_eq!(again.to_yaml(), echo);
    }

    #[test]
    fn misspelled_key_names_the_right_one() {
        let err = load(&format!("{MINIMAL}train:\n  epcohs: 3\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epcohs") && msg.contains("did you mean `epochs`"), "{msg}");
        assert_eq!(err.exit_code(), 1);
        let err = load(&format!("{MINIMAL}sedd: 3\n")).unwrap_err().to_string();
        assert!(err.contains("did you mean `seed`"), "{err}");
    }

    #[test]
    fn missing_dataset_file() {
        let err = load("dataset:\n  name: ml-100k\n  path: nope.data\nmodels: [gru4rec]\n").unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn eval_all_and_bad_heads() {
        let c = load(&format!("{MINIMAL}eval:\n  m_neg: all\n")).unwrap();
        assert_eq!(c.eval.m_neg, EvalNegatives::All);
        let err = load("dataset:\n  name: ml-100k\n  path: u.data\nmodels: [sasrec]\nemb: [33]\n").unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }
}
