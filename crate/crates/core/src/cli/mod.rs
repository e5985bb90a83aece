//! Pipeline stages behind the `promptrec` binary. Every stage reads a
//! [`RunConfig`] and writes under `workdir/run-<id>`, where the id hashes the
//! config and the input files.

mod config;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    build_samples, chronological_split, controllability_filter, dataset_stats, label_impressions, load_behaviors,
    load_jsonl, load_news, save_behaviors, save_jsonl, save_news, synth_generate, Catalog, DatasetStats,
    DiversityTag, Impression, KnowledgeTags, TrainSample,
};
use crate::error::{Error, Result};
use crate::eval::{
    clicked_tag_slice, cold_start_slice, compare, content_hash, diversity_count_top_k, file_hash, ndcg,
    per_impression, popularity_scores, rank_impression, MetricsReport, RankedList, Scorer, TTest,
};
use crate::model::{init_params, ModelConfig, Seq2Seq};
use crate::prompts::{fit_to_budget, render_input, PromptInput};
use crate::tokenizer::{train_bpe, Vocab};
use crate::train::{load_checkpoint, save_checkpoint, train, Checkpoint, EncodedSample, TrainSummary};

pub use config::{apply_override, EvalConfig, Labelers, Paths, RunConfig, SplitConfig, TemplateConfig};

/// Which test impressions an evaluation covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    #[default]
    All,
    /// Users with an empty history.
    Cold,
    /// Impressions with a click on a diverse-labelled candidate.
    Diverse,
    /// Impressions with a click on a personal-labelled candidate.
    Personal,
}

impl Slice {
    pub fn as_str(self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::Cold => "cold",
            Slice::Diverse => "diverse",
            Slice::Personal => "personal",
        }
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Slice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Slice::All),
            "cold" => Ok(Slice::Cold),
            "diverse" => Ok(Slice::Diverse),
            "personal" => Ok(Slice::Personal),
            _ => Err(Error::Config(format!("unknown slice {s:?}; expected all, cold, diverse or personal"))),
        }
    }
}

/// Parameter varied by [`cmd_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Ranking-loss weight.
    Lambda,
    /// Diversity-label recency window.
    T,
    /// Popularity-label percentile.
    S,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::T => "t",
            SweepParam::S => "s",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Lambda => cfg.train.lambda = value,
            SweepParam::T => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("T must be a positive integer, got {value}")));
                }
                cfg.labelers.diversity.t = value as usize;
            }
            SweepParam::S => cfg.labelers.popularity.s = value,
        }
        cfg.validate()
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lambda" => Ok(SweepParam::Lambda),
            "t" => Ok(SweepParam::T),
            "s" => Ok(SweepParam::S),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}; expected lambda, t or s"))),
        }
    }
}

/// Candidate tags of one impression, as stored by [`cmd_prepare`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionTags {
    pub impression_id: String,
    pub tags: Vec<KnowledgeTags>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub corpus: DatasetStats,
    pub train_end: i64,
    pub train_impressions: usize,
    pub valid_impressions: usize,
    pub test_impressions: usize,
    pub train_samples: usize,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub slice: Slice,
    pub template: String,
    pub model: MetricsReport,
    pub mostpop: MetricsReport,
    pub recentpop: MetricsReport,
    /// Mean number of diverse-labelled articles in the model's top 10.
    pub diverse_top10: f64,
    /// Paired t-test of the model's per-impression nDCG@5 against MostPop.
    pub ndcg5_vs_mostpop: Option<TTest>,
    pub checkpoint_sha256: String,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{}\n", MetricsReport::csv_header());
        for (name, r) in [("model", &self.model), ("mostpop", &self.mostpop), ("recentpop", &self.recentpop)] {
            out.push_str(&format!("{name},{}\n", r.csv_row()));
        }
        out
    }
}

/// File locations inside a run directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(RunFiles { dir: cfg.run_dir()? })
    }

    pub fn train_samples(&self) -> PathBuf {
        self.dir.join("train_samples.jsonl")
    }
    pub fn valid(&self) -> PathBuf {
        self.dir.join("valid.tsv")
    }
    pub fn test(&self) -> PathBuf {
        self.dir.join("test.tsv")
    }
    pub fn tags(&self) -> PathBuf {
        self.dir.join("tags.jsonl")
    }
    pub fn stats(&self) -> PathBuf {
        self.dir.join("stats.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.dir.join("train_summary.json")
    }
    pub fn report(&self, slice: Slice, ext: &str) -> PathBuf {
        self.dir.join(format!("report-{slice}.{ext}"))
    }

    fn require(&self, path: &Path, stage: &str) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} is missing; run `promptrec {stage}` first", path.display())))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Generates the synthetic corpus described by `cfg.synth` at the input paths.
pub fn cmd_synth(cfg: &RunConfig) -> Result<DatasetStats> {
    let (catalog, impressions) = synth_generate(&cfg.synth)?;
    for p in [&cfg.paths.news, &cfg.paths.behaviors] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    save_news(&cfg.paths.news, &catalog)?;
    save_behaviors(&cfg.paths.behaviors, &impressions)?;
    Ok(dataset_stats(&catalog, &impressions))
}

fn train_end(cfg: &SplitConfig, impressions: &[Impression]) -> Result<i64> {
    if let Some(t) = cfg.train_end {
        return Ok(t);
    }
    let mut ts: Vec<i64> = impressions.iter().map(|i| i.timestamp).collect();
    if ts.is_empty() {
        return Err(Error::Data("the behaviors file has no impressions".into()));
    }
    ts.sort_unstable();
    let idx = ((cfg.train_fraction * ts.len() as f64) as usize).min(ts.len() - 1);
    Ok(ts[idx])
}

fn load_corpus(cfg: &RunConfig) -> Result<(Catalog, Vec<Impression>)> {
    cfg.require_inputs()?;
    let catalog = load_news(&cfg.paths.news)?;
    let impressions = load_behaviors(&cfg.paths.behaviors, &catalog)?;
    Ok((catalog, impressions))
}

/// Labels, splits and negative-samples the corpus.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let (catalog, impressions) = load_corpus(cfg)?;
    let files = RunFiles::new(cfg)?;
    let mut seen = HashMap::new();
    for imp in &impressions {
        if seen.insert(imp.impression_id.as_str(), ()).is_some() {
            return Err(Error::Data(format!("duplicate impression id {}", imp.impression_id)));
        }
    }
    let tags = label_impressions(&catalog, &impressions, &cfg.labelers.diversity, &cfg.labelers.popularity)?;
    let by_id: HashMap<&str, &Vec<KnowledgeTags>> = impressions
        .iter()
        .zip(&tags)
        .map(|(i, t)| (i.impression_id.as_str(), t))
        .collect();
    let end = train_end(&cfg.split, &impressions)?;
    let split = chronological_split(&impressions, end, cfg.split.valid_fraction, cfg.seed)?;
    let train_tags: Vec<Vec<KnowledgeTags>> = split
        .train
        .iter()
        .map(|i| by_id[i.impression_id.as_str()].clone())
        .collect();
    let mut samples = build_samples(&split.train, Some(&train_tags), cfg.train.ratio_neg, cfg.seed);
    if let Some(target) = cfg.template.controllability {
        samples = controllability_filter(&samples, target)?;
    }
    if !samples.iter().any(|s| s.label) {
        return Err(Error::Data("no positive training samples after preparation".into()));
    }
    std::fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
    save_jsonl(&files.train_samples(), &samples)?;
    save_behaviors(&files.valid(), &split.valid)?;
    save_behaviors(&files.test(), &split.test)?;
    let records: Vec<ImpressionTags> = impressions
        .iter()
        .zip(tags)
        .map(|(i, tags)| ImpressionTags {
            impression_id: i.impression_id.clone(),
            tags,
        })
        .collect();
    save_jsonl(&files.tags(), &records)?;
    let summary = PrepareSummary {
        corpus: dataset_stats(&catalog, &impressions),
        train_end: end,
        train_impressions: split.train.len(),
        valid_impressions: split.valid.len(),
        test_impressions: split.test.len(),
        train_samples: samples.len(),
        config: cfg.clone(),
    };
    write_file(&files.stats(), &to_json(&summary)?)?;
    Ok(summary)
}

fn load_samples(files: &RunFiles) -> Result<Vec<TrainSample>> {
    files.require(&files.train_samples(), "prepare")?;
    load_jsonl(&files.train_samples())
}

/// Trains the BPE vocabulary on rendered training prompts and article text.
pub fn cmd_tokenizer(cfg: &RunConfig) -> Result<Vocab> {
    let files = RunFiles::new(cfg)?;
    let samples = load_samples(&files)?;
    let catalog = load_news(&cfg.paths.news)?;
    let kind = cfg.template_kind()?;
    let templates = cfg.templates()?;
    let mut corpus = Vec::with_capacity(samples.len() + catalog.len());
    for s in &samples {
        corpus.push(render_input(kind, &templates, &PromptInput::from_sample(&catalog, s)?)?);
    }
    for a in catalog.iter() {
        corpus.push(format!("{} {} {}", a.category, a.subcategory, a.title).to_lowercase());
    }
    let vocab = train_bpe(&corpus, cfg.model.vocab_size)?;
    vocab.save(&files.vocab())?;
    Ok(vocab)
}

fn load_vocab(files: &RunFiles) -> Result<Vocab> {
    files.require(&files.vocab(), "tokenizer")?;
    Vocab::load(&files.vocab())
}

/// Trains from scratch and writes the checkpoint plus a JSONL step log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let files = RunFiles::new(cfg)?;
    let samples = load_samples(&files)?;
    let vocab = load_vocab(&files)?;
    let catalog = load_news(&cfg.paths.news)?;
    let kind = cfg.template_kind()?;
    let templates = cfg.templates()?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let mut truncated = 0;
    let encoded = samples
        .iter()
        .map(|s| {
            let p = PromptInput::from_sample(&catalog, s)?;
            let (input, dropped) = fit_to_budget(kind, &templates, &vocab, &p, model_cfg.max_seq_len)?;
            truncated += usize::from(dropped > 0);
            Ok(EncodedSample { input, label: s.label })
        })
        .collect::<Result<Vec<_>>>()?;
    if truncated > 0 {
        log::warn!("{truncated} prompts lost history articles to the length budget");
    }
    let mut params = init_params::<f32>(&model_cfg, cfg.seed)?;
    let model = Seq2Seq::new(&model_cfg, &params)?;
    let log_path = files.train_log();
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let summary = train(&model, &mut params, &samples, &encoded, &cfg.train, |step, _| {
        writeln!(log, "{}", serde_json::to_string(step)?).map_err(|e| Error::io(&log_path, e))?;
        if step.step % 50 == 0 {
            log::info!("step {} epoch {} loss {:.4}", step.step, step.epoch, step.combined);
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = Checkpoint {
        model: model_cfg,
        params,
        fingerprint: vocab.fingerprint(),
        config_json: cfg.to_json(),
    };
    save_checkpoint(&files.checkpoint(), &ckpt)?;
    write_file(&files.train_summary(), &to_json(&summary)?)?;
    Ok(summary)
}

/// A loaded model ready to score impressions.
pub struct Loaded {
    pub catalog: Catalog,
    pub impressions: Vec<Impression>,
    pub tags: HashMap<String, Vec<KnowledgeTags>>,
    pub vocab: Vocab,
    pub checkpoint: Checkpoint<f32>,
    pub model: Seq2Seq,
    pub checkpoint_sha256: String,
}

impl Loaded {
    pub fn open(cfg: &RunConfig, files: &RunFiles) -> Result<Self> {
        let (catalog, impressions) = load_corpus(cfg)?;
        files.require(&files.tags(), "prepare")?;
        let tags = load_jsonl::<ImpressionTags>(&files.tags())?
            .into_iter()
            .map(|r| (r.impression_id, r.tags))
            .collect();
        let vocab = load_vocab(files)?;
        files.require(&files.checkpoint(), "train")?;
        let checkpoint = load_checkpoint::<f32>(&files.checkpoint(), Some(&vocab.fingerprint()))?;
        let model = Seq2Seq::new(&checkpoint.model, &checkpoint.params)?;
        Ok(Loaded {
            checkpoint_sha256: file_hash(&files.checkpoint())?,
            catalog,
            impressions,
            tags,
            vocab,
            checkpoint,
            model,
        })
    }

    pub fn rank(&self, cfg: &RunConfig, imp: &Impression) -> Result<RankedList> {
        let templates = cfg.templates()?;
        let scorer = Scorer {
            model: &self.model,
            params: &self.checkpoint.params,
            vocab: &self.vocab,
            catalog: &self.catalog,
            templates: &templates,
            kind: cfg.template_kind()?,
            mode: cfg.train.score_mode,
        };
        scorer.score_impression(imp, self.tags.get(&imp.impression_id).map(Vec::as_slice))
    }
}

fn select_slice(cfg: &RunConfig, catalog: &Catalog, test: Vec<Impression>, slice: Slice) -> Result<Vec<Impression>> {
    let div = &cfg.labelers.diversity;
    let mut out = match slice {
        Slice::All => test,
        Slice::Cold => cold_start_slice(&test),
        Slice::Diverse => clicked_tag_slice(&test, catalog, div, DiversityTag::Diverse)?,
        Slice::Personal => clicked_tag_slice(&test, catalog, div, DiversityTag::Personal)?,
    };
    if let Some(n) = cfg.eval.limit {
        out.truncate(n);
    }
    Ok(out)
}

/// Scores the test split, computes the metric suite for the model and both
/// popularity baselines and writes JSON and CSV reports.
pub fn cmd_eval(cfg: &RunConfig, slice: Slice) -> Result<EvalReport> {
    let files = RunFiles::new(cfg)?;
    let loaded = Loaded::open(cfg, &files)?;
    files.require(&files.test(), "prepare")?;
    let test = load_behaviors(&files.test(), &loaded.catalog)?;
    let test = select_slice(cfg, &loaded.catalog, test, slice)?;
    log::info!("evaluating {} {slice} impressions", test.len());
    let opts = cfg.eval.metric_options();
    let lists = test
        .iter()
        .map(|imp| loaded.rank(cfg, imp))
        .collect::<Result<Vec<_>>>()?;
    let baseline = |window: Option<f64>| -> Result<Vec<RankedList>> {
        popularity_scores(&loaded.impressions, &test, window)
            .iter()
            .zip(&test)
            .map(|(s, imp)| rank_impression(imp, s, &loaded.catalog))
            .collect()
    };
    let most = baseline(None)?;
    let recent = baseline(Some(cfg.eval.recent_hours))?;
    let ndcg5 = |l: &RankedList| ndcg(&l.clicks, 5);
    let a = per_impression(&lists, ndcg5);
    let b = per_impression(&most, ndcg5);
    let report = EvalReport {
        run_id: cfg.run_id()?,
        slice,
        template: cfg.template_kind()?.label(),
        model: MetricsReport::compute(&lists, opts),
        mostpop: MetricsReport::compute(&most, opts),
        recentpop: MetricsReport::compute(&recent, opts),
        diverse_top10: diversity_count_top_k(&lists, 10, &loaded.catalog, &cfg.labelers.diversity)?,
        ndcg5_vs_mostpop: if a.len() >= 2 { Some(compare(&a, &b)?) } else { None },
        checkpoint_sha256: loaded.checkpoint_sha256.clone(),
        config: cfg.clone(),
    };
    write_file(&files.report(slice, "json"), &to_json(&report)?)?;
    write_file(&files.report(slice, "csv"), &report.to_csv())?;
    Ok(report)
}

/// Ranks the candidates of one impression from the corpus.
pub fn cmd_rank(cfg: &RunConfig, impression_id: &str) -> Result<RankedList> {
    let files = RunFiles::new(cfg)?;
    let loaded = Loaded::open(cfg, &files)?;
    let imp = loaded
        .impressions
        .iter()
        .find(|i| i.impression_id == impression_id)
        .ok_or_else(|| Error::Data(format!("impression {impression_id} is not in {}", cfg.paths.behaviors.display())))?;
    loaded.rank(cfg, imp)
}

/// Prepare, tokenizer, train and eval over the given slices.
pub fn cmd_run(cfg: &RunConfig, slices: &[Slice]) -> Result<Vec<EvalReport>> {
    let prep = cmd_prepare(cfg)?;
    log::info!("prepared {} training samples", prep.train_samples);
    let vocab = cmd_tokenizer(cfg)?;
    log::info!("vocabulary of {} tokens", vocab.len());
    let summary = cmd_train(cfg)?;
    log::info!("trained {} steps over {} pairs", summary.steps, summary.pairs_seen);
    slices.iter().map(|&s| cmd_eval(cfg, s)).collect()
}

/// Runs the full pipeline once per value and writes one CSV row per value.
/// Returns the CSV path and its contents.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<(PathBuf, String)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut csv = format!("{},run_id,{},diverse_top10\n", param.as_str(), MetricsReport::csv_header());
    for &v in values {
        let mut point = cfg.clone();
        param.apply(&mut point, v)?;
        log::info!("sweep {} = {v}", param.as_str());
        let report = cmd_run(&point, &[Slice::All])?.remove(0);
        csv.push_str(&format!("{v},{},{},{:.6}\n", report.run_id, report.model.csv_row(), report.diverse_top10));
    }
    let key = format!("{}\n{}\n{values:?}", cfg.run_id()?, param.as_str());
    let path = cfg
        .paths
        .workdir
        .join(format!("sweep-{}-{}.csv", param.as_str(), &content_hash(key.as_bytes())[..12]));
    write_file(&path, &csv)?;
    Ok((path, csv))
}
