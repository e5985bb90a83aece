//! News catalogs, behavior logs, knowledge labels and training samples.
//!
//! The on-disk layout follows the public MIND convention: `news.tsv` holds
//! `id, category, subcategory, title, abstract, url, title_entities,
//! abstract_entities` and `behaviors.tsv` holds `impression_id, user_id,
//! time, history, impressions` where history is space-separated news ids and
//! impressions are `newsid-1` (clicked) or `newsid-0` tokens.

mod labels;
mod sampling;
mod synth;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use labels::{
    diversity_label, label_impressions, popularity_label, popularity_threshold, realtime_click_counts,
    ClickWindow, DiversityConfig, DiversityTag, KnowledgeTags, PopularityConfig, PopularityTag,
};
pub use sampling::{
    build_samples, chronological_split, controllability_filter, make_pairs, negative_sample, Pair, PairBatches,
    Split,
};
pub use synth::{synth_day_start, synth_generate, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewsArticle {
    pub news_id: String,
    pub category: String,
    pub subcategory: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: Option<String>,
}

/// Articles keyed by id, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    articles: IndexMap<String, NewsArticle>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, article: NewsArticle) -> Result<()> {
        if article.title.trim().is_empty() {
            return Err(Error::Data(format!("article {} has an empty title", article.news_id)));
        }
        if self.articles.contains_key(&article.news_id) {
            return Err(Error::Data(format!("duplicate news id {}", article.news_id)));
        }
        self.articles.insert(article.news_id.clone(), article);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&NewsArticle> {
        self.articles.get(id)
    }

    pub fn article(&self, id: &str) -> Result<&NewsArticle> {
        self.get(id).ok_or_else(|| Error::Data(format!("unknown news id {id}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.articles.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NewsArticle> {
        self.articles.values()
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn categories(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.iter()
            .map(|a| a.category.as_str())
            .filter(|c| seen.insert(*c))
            .collect()
    }
}

/// One slate shown to a user. `history` is oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub timestamp: i64,
    pub history: Vec<String>,
    pub candidates: Vec<(String, bool)>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().filter(|c| c.1).map(|c| c.0.as_str())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().filter(|c| !c.1).map(|c| c.0.as_str())
    }

    pub fn has_positive(&self) -> bool {
        self.candidates.iter().any(|c| c.1)
    }
}

/// One (history, candidate, label) example. Serialized as one JSON object
/// per line with the fields in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub impression_id: String,
    pub user_id: String,
    pub timestamp: i64,
    pub history: Vec<String>,
    pub candidate: String,
    pub label: bool,
    #[serde(default)]
    pub tags: KnowledgeTags,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_err(source_name: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source_name.to_string(),
        line,
        message: message.into(),
    }
}

/// Reads a news TSV. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_news<R: BufRead>(reader: R, source_name: &str) -> Result<Catalog> {
    let mut catalog = Catalog::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 7 {
            return Err(parse_err(source_name, n, format!("expected at least 7 columns, found {}", cols.len())));
        }
        let title = cols[3].trim();
        if title.is_empty() {
            return Err(parse_err(source_name, n, "missing title"));
        }
        let abstract_text = Some(cols[4].trim()).filter(|s| !s.is_empty()).map(str::to_string);
        catalog
            .insert(NewsArticle {
                news_id: cols[0].trim().to_string(),
                category: cols[1].trim().to_string(),
                subcategory: cols[2].trim().to_string(),
                title: title.to_string(),
                abstract_text,
            })
            .map_err(|e| parse_err(source_name, n, e.to_string()))?;
    }
    Ok(catalog)
}

/// Parses `M/D/YYYY h:mm:ss AM|PM` or ISO-8601, returning seconds since the
/// Unix epoch. Times without an offset are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(t) = NaiveDateTime::parse_from_str(s, "%m/%d/%Y %I:%M:%S %p") {
        return Some(t.and_utc().timestamp());
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc().timestamp())
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|t| t.format("%-m/%-d/%Y %-I:%M:%S %p").to_string())
        .unwrap_or_default()
}

/// Reads a behaviors TSV, checking every referenced id against `catalog`.
pub fn parse_behaviors<R: BufRead>(reader: R, source_name: &str, catalog: &Catalog) -> Result<Vec<Impression>> {
    let mut out = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            return Err(parse_err(source_name, n, format!("expected 5 columns, found {}", cols.len())));
        }
        let timestamp = parse_timestamp(cols[2])
            .ok_or_else(|| parse_err(source_name, n, format!("unparseable time {:?}", cols[2])))?;
        let history: Vec<String> = cols[3].split_whitespace().map(str::to_string).collect();
        let mut candidates = Vec::new();
        for tok in cols[4].split_whitespace() {
            let (id, flag) = tok
                .rsplit_once('-')
                .ok_or_else(|| parse_err(source_name, n, format!("candidate {tok:?} lacks a -0/-1 suffix")))?;
            let clicked = match flag {
                "1" => true,
                "0" => false,
                _ => return Err(parse_err(source_name, n, format!("candidate {tok:?} lacks a -0/-1 suffix"))),
            };
            candidates.push((id.to_string(), clicked));
        }
        if candidates.is_empty() {
            return Err(parse_err(source_name, n, "impression has no candidates"));
        }
        for id in history.iter().chain(candidates.iter().map(|c| &c.0)) {
            if !catalog.contains(id) && !unknown.contains(id) {
                unknown.push(id.clone());
            }
        }
        out.push(Impression {
            impression_id: cols[0].trim().to_string(),
            user_id: cols[1].trim().to_string(),
            timestamp,
            history,
            candidates,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::Data(format!("{source_name}: unknown news ids {}", unknown.join(", "))));
    }
    Ok(out)
}

pub fn load_news(path: &Path) -> Result<Catalog> {
    parse_news(open(path)?, &path.display().to_string())
}

pub fn load_behaviors(path: &Path, catalog: &Catalog) -> Result<Vec<Impression>> {
    parse_behaviors(open(path)?, &path.display().to_string(), catalog)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_news<W: Write>(mut w: W, catalog: &Catalog) -> std::io::Result<()> {
    for a in catalog.iter() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t\t\t",
            a.news_id,
            a.category,
            a.subcategory,
            a.title,
            a.abstract_text.as_deref().unwrap_or("")
        )?;
    }
    Ok(())
}

pub fn write_behaviors<W: Write>(mut w: W, impressions: &[Impression]) -> std::io::Result<()> {
    for imp in impressions {
        let cands: Vec<String> = imp
            .candidates
            .iter()
            .map(|(id, c)| format!("{id}-{}", u8::from(*c)))
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            imp.impression_id,
            imp.user_id,
            format_timestamp(imp.timestamp),
            imp.history.join(" "),
            cands.join(" ")
        )?;
    }
    Ok(())
}

pub fn save_news(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut w = create(path)?;
    write_news(&mut w, catalog)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn save_behaviors(path: &Path, impressions: &[Impression]) -> Result<()> {
    let mut w = create(path)?;
    write_behaviors(&mut w, impressions)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes any serializable records as JSON lines.
pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(&name, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Corpus summary in the shape of the usual dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub news: usize,
    pub impressions: usize,
    pub avg_history_len: f64,
    pub avg_click_rate: f64,
    pub avg_title_len: f64,
    pub categories: usize,
}

pub fn dataset_stats(catalog: &Catalog, impressions: &[Impression]) -> DatasetStats {
    let users: HashSet<&str> = impressions.iter().map(|i| i.user_id.as_str()).collect();
    let n = impressions.len().max(1) as f64;
    let shown: usize = impressions.iter().map(|i| i.candidates.len()).sum();
    let clicked: usize = impressions.iter().map(|i| i.positives().count()).sum();
    let words: usize = catalog.iter().map(|a| a.title.split_whitespace().count()).sum();
    DatasetStats {
        users: users.len(),
        news: catalog.len(),
        impressions: impressions.len(),
        avg_history_len: impressions.iter().map(|i| i.history.len()).sum::<usize>() as f64 / n,
        avg_click_rate: clicked as f64 / shown.max(1) as f64,
        avg_title_len: words as f64 / catalog.len().max(1) as f64,
        categories: catalog.categories().len(),
    }
}
