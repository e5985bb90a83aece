use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DiversityConfig, DiversityTag, PopularityConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{content_hash, file_hash, GiniKind, MetricOptions, MrrConvention};
use crate::model::ModelConfig;
use crate::prompts::{TemplateKind, Templates};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub news: PathBuf,
    pub behaviors: PathBuf,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            news: "data/news.tsv".into(),
            behaviors: "data/behaviors.tsv".into(),
            workdir: "runs".into(),
        }
    }
}

/// Impressions before the `train_fraction` quantile of timestamps train the
/// model; the rest is split at random into validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    /// Explicit cut-off timestamp; overrides `train_fraction`.
    pub train_end: Option<i64>,
    pub valid_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            train_end: None,
            valid_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    /// `i-j` shorthand for input template and article description.
    pub kind: String,
    /// TOML file overriding template strings.
    pub overrides: Option<PathBuf>,
    /// Restricts training positives to this diversity tag.
    pub controllability: Option<DiversityTag>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Labelers {
    pub diversity: DiversityConfig,
    pub popularity: PopularityConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mrr: MrrConvention,
    pub gini: GiniKind,
    /// RecentPop window.
    pub recent_hours: f64,
    /// Evaluate at most this many test impressions.
    pub limit: Option<usize>,
}

impl EvalConfig {
    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            mrr: self.mrr,
            gini: self.gini,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mrr: MrrConvention::default(),
            gini: GiniKind::default(),
            recent_hours: 24.0,
            limit: None,
        }
    }
}

/// The whole pipeline in one file. `seed` overrides the seeds of the synth
/// and train sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub split: SplitConfig,
    pub labelers: Labelers,
    pub template: TemplateConfig,
    /// `vocab_size` is the tokenizer target; the model uses the trained size.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            paths: Paths::default(),
            synth: SynthSpec::default(),
            split: SplitConfig::default(),
            labelers: Labelers::default(),
            template: TemplateConfig {
                kind: "1-1".into(),
                ..TemplateConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = root.try_into().map_err(config_err)?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.paths.news);
        fix(&mut self.paths.behaviors);
        fix(&mut self.paths.workdir);
        if let Some(p) = &mut self.template.overrides {
            fix(p);
        }
    }

    /// Copies the top-level seed into every seeded section.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.labelers.diversity.validate()?;
        self.labelers.popularity.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.template_kind()?;
        let s = &self.split;
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(Error::Config(format!("split.train_fraction must lie in (0, 1), got {}", s.train_fraction)));
        }
        if !(0.0..=1.0).contains(&s.valid_fraction) {
            return Err(Error::Config(format!("split.valid_fraction must lie in [0, 1], got {}", s.valid_fraction)));
        }
        if !(self.eval.recent_hours > 0.0) {
            return Err(Error::Config("eval.recent_hours must be positive".into()));
        }
        if self.template.controllability.is_some() && self.template_kind()?.desc != crate::prompts::ArticleDesc::D3 {
            return Err(Error::Config("template.controllability needs a D3 template kind".into()));
        }
        Ok(())
    }

    /// Errors unless the input corpus files exist.
    pub fn require_inputs(&self) -> Result<()> {
        for p in [&self.paths.news, &self.paths.behaviors] {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.template.overrides {
            if !p.is_file() {
                return Err(Error::Config(format!("template overrides {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn template_kind(&self) -> Result<TemplateKind> {
        TemplateKind::parse(&self.template.kind)
    }

    pub fn templates(&self) -> Result<Templates> {
        match &self.template.overrides {
            Some(p) => Templates::load(p),
            None => Ok(Templates::default()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that determines the trained model: the config
    /// without its eval section plus the contents of every input file.
    pub fn run_id(&self) -> Result<String> {
        let mut key = self.clone();
        key.eval = EvalConfig::default();
        key.paths.workdir = PathBuf::new();
        let mut text = serde_json::to_string(&key)?;
        for p in [&self.paths.news, &self.paths.behaviors] {
            text.push('\n');
            text.push_str(&file_hash(p)?);
        }
        if let Some(p) = &self.template.overrides {
            text.push('\n');
            text.push_str(&file_hash(p)?);
        }
        Ok(content_hash(text.as_bytes())[..12].to_string())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.paths.workdir.join(format!("run-{}", self.run_id()?)))
    }
}
