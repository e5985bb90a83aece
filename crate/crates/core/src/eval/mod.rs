//! Candidate ranking, the metric suite, popularity baselines and
//! significance testing.

mod metrics;
mod stats;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    diversity_label, Catalog, ClickWindow, DiversityConfig, DiversityTag, Impression, KnowledgeTags,
};
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::prompts::{fit_to_budget, PromptInput, TemplateKind, Templates};
use crate::tensor::{Float, Parameters};
use crate::tokenizer::Vocab;
use crate::train::{score, ScoreMode};

pub use metrics::{
    gini, harmonic, hit, ndcg, new_count, reciprocal_rank, topic_count, tradeoff, GiniKind, MrrConvention,
};
pub use stats::{paired_t_test, TTest};

/// An impression's candidates in descending score order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub impression_id: String,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub clicks: Vec<bool>,
    pub topics: Vec<String>,
    pub history: Vec<String>,
    pub history_topics: HashSet<String>,
}

/// Sorts candidates by descending score; ties (and NaN) keep slate order.
pub fn rank_impression(imp: &Impression, scores: &[f64], catalog: &Catalog) -> Result<RankedList> {
    if scores.len() != imp.candidates.len() {
        return Err(Error::Data(format!(
            "impression {} has {} candidates but {} scores",
            imp.impression_id,
            imp.candidates.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).expect("NaN mapped away"));
    let mut list = RankedList {
        impression_id: imp.impression_id.clone(),
        ids: Vec::new(),
        scores: Vec::new(),
        clicks: Vec::new(),
        topics: Vec::new(),
        history: imp.history.clone(),
        history_topics: imp
            .history
            .iter()
            .map(|h| catalog.article(h).map(|a| a.category.clone()))
            .collect::<Result<_>>()?,
    };
    for i in order {
        let (id, clicked) = &imp.candidates[i];
        list.ids.push(id.clone());
        list.scores.push(scores[i]);
        list.clicks.push(*clicked);
        list.topics.push(catalog.article(id)?.category.clone());
    }
    Ok(list)
}

/// Everything needed to turn an impression into model scores.
pub struct Scorer<'a, F> {
    pub model: &'a Seq2Seq,
    pub params: &'a Parameters<F>,
    pub vocab: &'a Vocab,
    pub catalog: &'a Catalog,
    pub templates: &'a Templates,
    pub kind: TemplateKind,
    pub mode: ScoreMode,
}

impl<F: Float> Scorer<'_, F> {
    /// Preference score of every candidate, in slate order. `tags` must be
    /// aligned with the candidates when the description needs them.
    pub fn scores(&self, imp: &Impression, tags: Option<&[KnowledgeTags]>) -> Result<Vec<f64>> {
        let history = imp
            .history
            .iter()
            .map(|id| self.catalog.article(id))
            .collect::<Result<Vec<_>>>()?;
        let topics = crate::prompts::user_topics(&history);
        let max_len = self.model.config().max_seq_len;
        imp.candidates
            .iter()
            .enumerate()
            .map(|(i, (id, _))| {
                let p = PromptInput {
                    history: history.clone(),
                    candidate: self.catalog.article(id)?,
                    tags: tags.and_then(|t| t.get(i).copied()).unwrap_or_default(),
                    user_topics: topics.clone(),
                };
                let (ids, _) = fit_to_budget(self.kind, self.templates, self.vocab, &p, max_len)?;
                Ok(score(self.model, self.params, &ids, self.mode)?.r_hat)
            })
            .collect()
    }

    pub fn score_impression(&self, imp: &Impression, tags: Option<&[KnowledgeTags]>) -> Result<RankedList> {
        rank_impression(imp, &self.scores(imp, tags)?, self.catalog)
    }
}

/// Candidate scores from click counts strictly before each impression:
/// all history for MostPop (`window_hours = None`), the trailing window for
/// RecentPop. `log` supplies the clicks; results align with `targets`.
pub fn popularity_scores(log: &[Impression], targets: &[Impression], window_hours: Option<f64>) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by_key(|&i| targets[i].timestamp);
    let mut window = ClickWindow::new(log, window_hours.unwrap_or(1e12));
    let mut out = vec![Vec::new(); targets.len()];
    for i in order {
        window.advance_to(targets[i].timestamp);
        out[i] = targets[i]
            .candidates
            .iter()
            .map(|(id, _)| window.clicks(id) as f64)
            .collect();
    }
    out
}

/// Ranks an impression by click counts; unseen articles count zero.
pub fn mostpop_rank(imp: &Impression, counts: &HashMap<String, usize>, catalog: &Catalog) -> Result<RankedList> {
    let scores: Vec<f64> = imp
        .candidates
        .iter()
        .map(|(id, _)| counts.get(id).copied().unwrap_or(0) as f64)
        .collect();
    rank_impression(imp, &scores, catalog)
}

/// RecentPop is MostPop over windowed counts.
pub fn recentpop_rank(imp: &Impression, window_counts: &HashMap<String, usize>, catalog: &Catalog) -> Result<RankedList> {
    mostpop_rank(imp, window_counts, catalog)
}

pub fn cold_start_slice(impressions: &[Impression]) -> Vec<Impression> {
    impressions.iter().filter(|i| i.history.is_empty()).cloned().collect()
}

/// Impressions with at least one click on a candidate carrying `tag`.
pub fn clicked_tag_slice(impressions: &[Impression], catalog: &Catalog, cfg: &DiversityConfig, tag: DiversityTag) -> Result<Vec<Impression>> {
    let mut out = Vec::new();
    for imp in impressions {
        let history = imp
            .history
            .iter()
            .map(|h| catalog.article(h))
            .collect::<Result<Vec<_>>>()?;
        let mut hit = false;
        for id in imp.positives() {
            if diversity_label(&history, catalog.article(id)?, cfg) == tag {
                hit = true;
                break;
            }
        }
        if hit {
            out.push(imp.clone());
        }
    }
    Ok(out)
}

/// Mean number of top-k candidates labelled diverse.
pub fn diversity_count_top_k(lists: &[RankedList], k: usize, catalog: &Catalog, cfg: &DiversityConfig) -> Result<f64> {
    if lists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0usize;
    for l in lists {
        let history = l
            .history
            .iter()
            .map(|h| catalog.article(h))
            .collect::<Result<Vec<_>>>()?;
        for id in l.ids.iter().take(k) {
            if diversity_label(&history, catalog.article(id)?, cfg) == DiversityTag::Diverse {
                total += 1;
            }
        }
    }
    Ok(total as f64 / lists.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub mrr: MrrConvention,
    pub gini: GiniKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_impressions: usize,
    /// Impressions without a click; excluded from rank metrics only.
    pub n_without_positive: usize,
    /// Impressions with fewer than 10 candidates.
    pub n_short_lists: usize,
    pub mrr: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub gini5: f64,
    pub gini10: f64,
    pub topic5: f64,
    pub topic10: f64,
    pub new5: f64,
    pub new10: f64,
    pub tradeoff: f64,
}

const CSV_FIELDS: &str = "n_impressions,mrr,hr5,hr10,ndcg5,ndcg10,gini5,gini10,topic5,topic10,new5,new10,tradeoff";

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    pub fn compute(lists: &[RankedList], opts: MetricOptions) -> Self {
        let rank = |f: &dyn Fn(&RankedList) -> Option<f64>| mean(lists.iter().filter_map(f));
        let div = |f: &dyn Fn(&RankedList) -> f64| mean(lists.iter().map(f));
        let ndcg5 = rank(&|l| ndcg(&l.clicks, 5));
        let ndcg10 = rank(&|l| ndcg(&l.clicks, 10));
        let gini5 = div(&|l| gini(&l.topics, 5, opts.gini));
        let gini10 = div(&|l| gini(&l.topics, 10, opts.gini));
        MetricsReport {
            n_impressions: lists.len(),
            n_without_positive: lists.iter().filter(|l| !l.clicks.contains(&true)).count(),
            n_short_lists: lists.iter().filter(|l| l.ids.len() < 10).count(),
            mrr: rank(&|l| reciprocal_rank(&l.clicks, opts.mrr)),
            hr5: rank(&|l| hit(&l.clicks, 5)),
            hr10: rank(&|l| hit(&l.clicks, 10)),
            ndcg5,
            ndcg10,
            gini5,
            gini10,
            topic5: div(&|l| topic_count(&l.topics, 5)),
            topic10: div(&|l| topic_count(&l.topics, 10)),
            new5: div(&|l| new_count(&l.topics, &l.history_topics, 5)),
            new10: div(&|l| new_count(&l.topics, &l.history_topics, 10)),
            tradeoff: tradeoff(ndcg5, gini5, ndcg10, gini10),
        }
    }

    pub fn csv_header() -> &'static str {
        CSV_FIELDS
    }

    pub fn csv_row(&self) -> String {
        let v = [
            self.mrr,
            self.hr5,
            self.hr10,
            self.ndcg5,
            self.ndcg10,
            self.gini5,
            self.gini10,
            self.topic5,
            self.topic10,
            self.new5,
            self.new10,
            self.tradeoff,
        ];
        let cells: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        format!("{},{}", self.n_impressions, cells.join(","))
    }
}

/// Per-impression values of a rank metric, keyed by impression id, for
/// impressions that have a click.
pub fn per_impression(lists: &[RankedList], metric: impl Fn(&RankedList) -> Option<f64>) -> Vec<(String, f64)> {
    lists
        .iter()
        .filter_map(|l| metric(l).map(|v| (l.impression_id.clone(), v)))
        .collect()
}

/// Aligns two per-impression series by id and runs a paired t-test.
pub fn compare(a: &[(String, f64)], b: &[(String, f64)]) -> Result<TTest> {
    let lookup: HashMap<&str, f64> = b.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (k, v) in a {
        if let Some(&w) = lookup.get(k.as_str()) {
            xs.push(*v);
            ys.push(w);
        }
    }
    paired_t_test(&xs, &ys)
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    std::fs::read(path)
        .map(|b| content_hash(&b))
        .map_err(|e| Error::io(path, e))
}
