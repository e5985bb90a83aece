use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Catalog, Impression, NewsArticle};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityTag {
    Diverse,
    Personal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopularityTag {
    Popular,
    Personal,
}

impl DiversityTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DiversityTag::Diverse => "diverse",
            DiversityTag::Personal => "personal",
        }
    }
}

impl PopularityTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PopularityTag::Popular => "popular",
            PopularityTag::Personal => "personal",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTags {
    pub diversity: Option<DiversityTag>,
    pub popularity: Option<PopularityTag>,
}

/// `t` is the number of most recent history articles whose topics count as
/// the user's current interests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiversityConfig {
    pub t: usize,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig { t: 4 }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("labelers.diversity.t must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopularityConfig {
    /// Percentile in (0, 100).
    pub s: f64,
    pub window_hours: f64,
}

impl Default for PopularityConfig {
    fn default() -> Self {
        PopularityConfig {
            s: 65.0,
            window_hours: 24.0,
        }
    }
}

impl PopularityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s < 100.0) {
            return Err(Error::Config(format!("labelers.popularity.s must lie in (0, 100), got {}", self.s)));
        }
        if !(self.window_hours > 0.0) {
            return Err(Error::Config("labelers.popularity.window_hours must be positive".into()));
        }
        Ok(())
    }

    fn window_secs(&self) -> i64 {
        (self.window_hours * 3600.0).round() as i64
    }
}

/// "diverse" when the candidate's category is absent from the `t` most
/// recent history articles. An empty history is therefore always diverse.
pub fn diversity_label(history: &[&NewsArticle], candidate: &NewsArticle, cfg: &DiversityConfig) -> DiversityTag {
    let start = history.len().saturating_sub(cfg.t);
    if history[start..].iter().any(|a| a.category == candidate.category) {
        DiversityTag::Personal
    } else {
        DiversityTag::Diverse
    }
}

/// Clicks per article among impressions with timestamp in `[at_time - window, at_time)`.
pub fn realtime_click_counts(impressions: &[Impression], at_time: i64, window_hours: f64) -> HashMap<String, usize> {
    let from = at_time - (window_hours * 3600.0).round() as i64;
    let mut counts = HashMap::new();
    for imp in impressions.iter().filter(|i| i.timestamp >= from && i.timestamp < at_time) {
        for id in imp.positives() {
            *counts.entry(id.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Nearest-rank percentile: the `ceil(s/100 * N)`-th smallest value.
pub fn popularity_threshold(values: &[usize], s: f64) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = (s * sorted.len() as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// "popular" when the candidate's count is strictly above the `s`-th
/// percentile of counts over the distinct viewed articles.
pub fn popularity_label(
    candidate: &str,
    counts: &HashMap<String, usize>,
    viewed: &[&str],
    cfg: &PopularityConfig,
) -> Result<PopularityTag> {
    let mut seen = HashSet::new();
    let values: Vec<usize> = viewed
        .iter()
        .filter(|id| seen.insert(**id))
        .map(|id| counts.get(*id).copied().unwrap_or(0))
        .collect();
    let threshold = popularity_threshold(&values, cfg.s)
        .ok_or_else(|| Error::Data("popularity label needs a non-empty viewed set".into()))?;
    Ok(tag_for(counts.get(candidate).copied().unwrap_or(0), threshold))
}

fn tag_for(count: usize, threshold: usize) -> PopularityTag {
    if count > threshold {
        PopularityTag::Popular
    } else {
        PopularityTag::Personal
    }
}

/// Sliding half-open time window over a log, tracking clicks and displays per
/// article. Query times must be non-decreasing.
pub struct ClickWindow<'a> {
    log: Vec<&'a Impression>,
    window_secs: i64,
    head: usize,
    tail: usize,
    clicks: HashMap<&'a str, usize>,
    shown: HashMap<&'a str, usize>,
}

fn bump<'a>(map: &mut HashMap<&'a str, usize>, id: &'a str, up: bool) {
    if up {
        *map.entry(id).or_insert(0) += 1;
    } else if let Some(c) = map.get_mut(id) {
        *c -= 1;
        if *c == 0 {
            map.remove(id);
        }
    }
}

impl<'a> ClickWindow<'a> {
    pub fn new(impressions: &'a [Impression], window_hours: f64) -> Self {
        let mut log: Vec<&Impression> = impressions.iter().collect();
        log.sort_by_key(|i| i.timestamp);
        ClickWindow {
            log,
            window_secs: (window_hours * 3600.0).round() as i64,
            head: 0,
            tail: 0,
            clicks: HashMap::new(),
            shown: HashMap::new(),
        }
    }

    fn apply(&mut self, imp: &'a Impression, up: bool) {
        for (id, clicked) in &imp.candidates {
            bump(&mut self.shown, id, up);
            if *clicked {
                bump(&mut self.clicks, id, up);
            }
        }
    }

    pub fn advance_to(&mut self, t: i64) {
        while self.head < self.log.len() && self.log[self.head].timestamp < t {
            self.apply(self.log[self.head], true);
            self.head += 1;
        }
        while self.tail < self.head && self.log[self.tail].timestamp < t - self.window_secs {
            self.apply(self.log[self.tail], false);
            self.tail += 1;
        }
    }

    pub fn clicks(&self, id: &str) -> usize {
        self.clicks.get(id).copied().unwrap_or(0)
    }

    /// Articles displayed at least once inside the window.
    pub fn viewed(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.shown.keys().copied()
    }
}

/// Diversity and popularity tags for every candidate of every impression,
/// aligned with the input order. Popularity only looks at impressions
/// strictly earlier than the one being labelled; the viewed set is the
/// window's displayed articles plus the impression's own candidates.
pub fn label_impressions(
    catalog: &Catalog,
    impressions: &[Impression],
    div: &DiversityConfig,
    pop: &PopularityConfig,
) -> Result<Vec<Vec<KnowledgeTags>>> {
    div.validate()?;
    pop.validate()?;
    let mut order: Vec<usize> = (0..impressions.len()).collect();
    order.sort_by_key(|&i| impressions[i].timestamp);
    let mut window = ClickWindow::new(impressions, pop.window_hours);
    debug_assert_eq!(window.window_secs, pop.window_secs());
    let mut out = vec![Vec::new(); impressions.len()];
    for i in order {
        let imp = &impressions[i];
        window.advance_to(imp.timestamp);
        let history = imp
            .history
            .iter()
            .map(|id| catalog.article(id))
            .collect::<Result<Vec<_>>>()?;
        let mut viewed: HashSet<&str> = window.viewed().collect();
        viewed.extend(imp.candidates.iter().map(|c| c.0.as_str()));
        let values: Vec<usize> = viewed.iter().map(|id| window.clicks(id)).collect();
        let threshold = popularity_threshold(&values, pop.s).unwrap_or(0);
        out[i] = imp
            .candidates
            .iter()
            .map(|(id, _)| {
                Ok(KnowledgeTags {
                    diversity: Some(diversity_label(&history, catalog.article(id)?, div)),
                    popularity: Some(tag_for(window.clicks(id), threshold)),
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok(out)
}
