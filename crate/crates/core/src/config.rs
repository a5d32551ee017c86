//! Pipeline configuration, read from TOML.
//!
//! Relative paths resolve against the directory of the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BucketEdges;
use crate::kg::{Relation, DEFAULT_RELATIONS};
use crate::variant::{GenerationConfig, Selection, DEFAULT_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub kg: PathBuf,
    pub corpus: PathBuf,
    pub catalog: PathBuf,
    pub folds: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocklist: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Verdict log; defaults to `review/verdicts.jsonl` under the output dir.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict_log: Option<PathBuf>,
    /// One prediction file per fold, in fold order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<PathBuf>,
    /// Static bundle served by the review service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_ui: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    First,
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default = "default_relations")]
    pub relations: Vec<String>,
    #[serde(default = "default_cap")]
    pub cap_fix_a: i64,
    #[serde(default = "default_cap")]
    pub cap_fix_q: i64,
    #[serde(default)]
    pub selection: SelectionMode,
    #[serde(default = "default_dedupe_threshold")]
    pub dedupe_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replace_prob")]
    pub replace_prob: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_bucket_edges")]
    pub bucket_edges: Vec<u64>,
    #[serde(default = "default_annotators")]
    pub annotators: Vec<String>,
    /// Let pending (unreviewed) samples into the adversarial test set.
    #[serde(default)]
    pub test_unverified: bool,
    /// Let pending samples into the augmentation set.
    #[serde(default)]
    pub augment_unverified: bool,
    #[serde(default = "default_bind")]
    pub bind: String,
}

fn default_relations() -> Vec<String> {
    DEFAULT_RELATIONS.iter().map(|s| s.to_string()).collect()
}
fn default_cap() -> i64 {
    DEFAULT_CAP as i64
}
fn default_dedupe_threshold() -> f64 {
    0.9
}
fn default_replace_prob() -> f64 {
    0.5
}
fn default_epochs() -> u64 {
    1
}
fn default_bucket_edges() -> Vec<u64> {
    vec![0, 10, 20, 30, 40, 50]
}
fn default_annotators() -> Vec<String> {
    vec!["annotator-1".into(), "annotator-2".into()]
}
fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

impl PipelineConfig {
    pub fn from_toml(raw: &str, base_dir: &Path) -> Result<Self> {
        let mut config: PipelineConfig = toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        PipelineConfig::from_toml(&raw, base)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [&mut paths.kg, &mut paths.corpus, &mut paths.catalog, &mut paths.folds, &mut paths.output_dir] {
            join(p);
        }
        for p in [&mut paths.blocklist, &mut paths.verdict_log, &mut paths.review_ui].into_iter().flatten() {
            join(p);
        }
        paths.predictions.iter_mut().for_each(join);
    }

    /// Check value ranges and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        if self.cap_fix_a < 0 || self.cap_fix_q < 0 {
            return Err(Error::Config("caps must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dedupe_threshold) {
            return Err(Error::Config(format!("dedupe_threshold must be in [0, 1], got {}", self.dedupe_threshold)));
        }
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::Config(format!("replace_prob must be in [0, 1], got {}", self.replace_prob)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.whitelist()?;
        self.bucket_edges()?;
        let distinct: BTreeSet<&String> = self.annotators.iter().collect();
        if self.annotators.len() != 2 || distinct.len() != 2 {
            return Err(Error::Config("annotators must name exactly two distinct ids".into()));
        }
        let p = &self.paths;
        let required = [("kg", &p.kg), ("corpus", &p.corpus), ("catalog", &p.catalog), ("folds", &p.folds)];
        for (name, path) in required.into_iter().chain(p.blocklist.iter().map(|b| ("blocklist", b))) {
            if !path.is_file() {
                return Err(Error::Config(format!("{name} file {} does not exist", path.display())));
            }
        }
        for path in &p.predictions {
            if !path.is_file() {
                return Err(Error::Config(format!("prediction file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn whitelist(&self) -> Result<BTreeSet<Relation>> {
        self.relations.iter().map(|r| Relation::new(r)).collect()
    }

    pub fn bucket_edges(&self) -> Result<BucketEdges> {
        BucketEdges::new(self.bucket_edges.clone())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            cap_fix_a: self.cap_fix_a.max(0) as usize,
            cap_fix_q: self.cap_fix_q.max(0) as usize,
            selection: match self.selection {
                SelectionMode::First => Selection::First,
                SelectionMode::Seeded => Selection::Seeded { seed: self.seed },
            },
        }
    }

    pub fn verdict_log(&self) -> PathBuf {
        self.paths.verdict_log.clone().unwrap_or_else(|| self.paths.output_dir.join("review").join("verdicts.jsonl"))
    }

    /// Canonical JSON of every setting except file locations. Input
    /// contents are hashed separately, so two runs that differ only in
    /// where files live share this hash.
    pub fn settings_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("paths");
            obj.remove("bind");
        }
        serde_json::to_string(&value).expect("config serializes")
    }
}
