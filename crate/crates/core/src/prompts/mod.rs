//! Prompt rendering: history, candidate and optional knowledge tags or
//! requests become one lowercase input sentence, the target is `yes`/`no`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Catalog, KnowledgeTags, NewsArticle, TrainSample};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputTemplate {
    /// History and candidate only.
    T1,
    /// T1 preceded by the user's topics of interest.
    T2,
    /// T1 followed by a request for a diverse topic.
    T3,
    /// T1 followed by a request for a familiar topic.
    T4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArticleDesc {
    /// Subcategory and title.
    D1,
    /// D1 plus the popularity tag.
    D2,
    /// D1 plus the diversity tag.
    D3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateKind {
    pub input: InputTemplate,
    pub desc: ArticleDesc,
}

impl Default for TemplateKind {
    fn default() -> Self {
        TemplateKind {
            input: InputTemplate::T1,
            desc: ArticleDesc::D1,
        }
    }
}

impl TemplateKind {
    pub fn new(input: InputTemplate, desc: ArticleDesc) -> Result<Self> {
        let kind = TemplateKind { input, desc };
        kind.validate()?;
        Ok(kind)
    }

    /// Every valid (input, description) combination.
    pub fn all() -> Vec<TemplateKind> {
        use ArticleDesc::*;
        use InputTemplate::*;
        let mut out = Vec::new();
        for input in [T1, T2, T3, T4] {
            for desc in [D1, D2, D3] {
                let k = TemplateKind { input, desc };
                if k.validate().is_ok() {
                    out.push(k);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.input, InputTemplate::T3 | InputTemplate::T4) && self.desc != ArticleDesc::D3 {
            return Err(Error::Template(format!(
                "input template {:?} needs description D3, got {:?}",
                self.input, self.desc
            )));
        }
        Ok(())
    }

    /// Parses the `i-j` shorthand, e.g. `3-3` for T3 with D3.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("template kind {s:?} is not of the form i-j"));
        let (i, j) = s.split_once('-').ok_or_else(bad)?;
        let input = match i.trim() {
            "1" => InputTemplate::T1,
            "2" => InputTemplate::T2,
            "3" => InputTemplate::T3,
            "4" => InputTemplate::T4,
            _ => return Err(bad()),
        };
        let desc = match j.trim() {
            "1" => ArticleDesc::D1,
            "2" => ArticleDesc::D2,
            "3" => ArticleDesc::D3,
            _ => return Err(bad()),
        };
        Self::new(input, desc)
    }

    pub fn label(&self) -> String {
        let i = match self.input {
            InputTemplate::T1 => 1,
            InputTemplate::T2 => 2,
            InputTemplate::T3 => 3,
            InputTemplate::T4 => 4,
        };
        let j = match self.desc {
            ArticleDesc::D1 => 1,
            ArticleDesc::D2 => 2,
            ArticleDesc::D3 => 3,
        };
        format!("{i}-{j}")
    }
}

/// Template strings with `{placeholder}` slots. Any field may be overridden
/// from a TOML file; omitted fields keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Templates {
    pub article: String,
    pub popularity_suffix: String,
    pub diversity_suffix: String,
    pub input: String,
    pub attributes_prefix: String,
    pub diverse_request: String,
    pub similar_request: String,
    pub empty_history: String,
    pub separator: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            article: "a {subcategory} article titled {title}".into(),
            popularity_suffix: " which is a {popularity} article".into(),
            diversity_suffix: " which is a {diversity} article".into(),
            input: "a user read the following articles in order: {history}. will the user also read {candidate}?".into(),
            attributes_prefix: "the user is interested in {topics}. ".into(),
            diverse_request: " the user wants to read an article on a diverse topic next.".into(),
            similar_request: " the user wants to read an article on a similar topic next.".into(),
            empty_history: "no articles".into(),
            separator: "; ".into(),
        }
    }
}

fn placeholders(template: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(Error::Template(format!("unmatched '}}' in {template:?}")));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed '{{' in {template:?}")))?;
        out.push(&rest[open + 1..open + close]);
        rest = &rest[open + close + 1..];
    }
    Ok(out)
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

impl Templates {
    /// Checks that every slot is known for its template.
    pub fn validate(&self) -> Result<()> {
        let allowed: [(&str, &str, &[&str]); 9] = [
            ("article", &self.article, &["subcategory", "title", "category"]),
            ("popularity_suffix", &self.popularity_suffix, &["popularity"]),
            ("diversity_suffix", &self.diversity_suffix, &["diversity"]),
            ("input", &self.input, &["history", "candidate"]),
            ("attributes_prefix", &self.attributes_prefix, &["topics"]),
            ("diverse_request", &self.diverse_request, &[]),
            ("similar_request", &self.similar_request, &[]),
            ("empty_history", &self.empty_history, &[]),
            ("separator", &self.separator, &[]),
        ];
        for (name, text, slots) in allowed {
            for p in placeholders(text)? {
                if !slots.contains(&p) {
                    return Err(Error::Template(format!("unknown placeholder {{{p}}} in template {name}")));
                }
            }
        }
        if !self.input.contains("{candidate}") {
            return Err(Error::Template("template input must contain {candidate}".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Templates = toml::from_str(text).map_err(|e| Error::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Literal target for a label.
pub fn render_target(label: bool) -> &'static str {
    if label {
        "yes"
    } else {
        "no"
    }
}

fn article_text(t: &Templates, a: &NewsArticle, title: &str, desc: ArticleDesc, tags: &KnowledgeTags) -> Result<String> {
    let mut s = fill(
        &t.article,
        &[("subcategory", &a.subcategory), ("title", title), ("category", &a.category)],
    );
    match desc {
        ArticleDesc::D1 => {}
        ArticleDesc::D2 => {
            let tag = tags
                .popularity
                .ok_or_else(|| Error::Template(format!("article {} has no popularity tag", a.news_id)))?;
            s.push_str(&fill(&t.popularity_suffix, &[("popularity", tag.as_str())]));
        }
        ArticleDesc::D3 => {
            let tag = tags
                .diversity
                .ok_or_else(|| Error::Template(format!("article {} has no diversity tag", a.news_id)))?;
            s.push_str(&fill(&t.diversity_suffix, &[("diversity", tag.as_str())]));
        }
    }
    Ok(s.to_lowercase())
}

/// Renders one article description.
pub fn render_article(t: &Templates, a: &NewsArticle, desc: ArticleDesc, tags: &KnowledgeTags) -> Result<String> {
    article_text(t, a, &a.title, desc, tags)
}

/// Titles to print for each article of one prompt: distinct articles sharing a
/// title get a ` #id` suffix.
fn display_titles<'a>(articles: &[&'a NewsArticle]) -> Vec<String> {
    let mut owners: HashMap<String, Vec<&str>> = HashMap::new();
    for a in articles {
        let ids = owners.entry(a.title.to_lowercase()).or_default();
        if !ids.contains(&a.news_id.as_str()) {
            ids.push(&a.news_id);
        }
    }
    articles
        .iter()
        .map(|a| {
            if owners[&a.title.to_lowercase()].len() > 1 {
                format!("{} #{}", a.title, a.news_id)
            } else {
                a.title.clone()
            }
        })
        .collect()
}

/// Distinct history categories, most frequent first (ties by first appearance).
pub fn user_topics(history: &[&NewsArticle]) -> Vec<String> {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for a in history {
        match counts.iter_mut().find(|(c, _)| *c == a.category) {
            Some(e) => e.1 += 1,
            None => counts.push((a.category.clone(), 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1));
    counts.into_iter().map(|(c, _)| c).collect()
}

/// Everything needed to render one input prompt.
#[derive(Clone, Debug)]
pub struct PromptInput<'a> {
    /// Oldest first.
    pub history: Vec<&'a NewsArticle>,
    pub candidate: &'a NewsArticle,
    pub tags: KnowledgeTags,
    pub user_topics: Vec<String>,
}

impl<'a> PromptInput<'a> {
    /// Resolves a sample against the catalog; user topics come from the history.
    pub fn from_sample(catalog: &'a Catalog, s: &TrainSample) -> Result<Self> {
        let history = s
            .history
            .iter()
            .map(|id| catalog.article(id))
            .collect::<Result<Vec<_>>>()?;
        let user_topics = user_topics(&history);
        Ok(PromptInput {
            history,
            candidate: catalog.article(&s.candidate)?,
            tags: s.tags,
            user_topics,
        })
    }
}

/// Renders the input sentence for `kind`. History articles always use the
/// plain description; knowledge tags apply to the candidate only.
pub fn render_input(kind: TemplateKind, t: &Templates, p: &PromptInput) -> Result<String> {
    kind.validate()?;
    let mut all: Vec<&NewsArticle> = p.history.clone();
    all.push(p.candidate);
    let titles = display_titles(&all);
    let none = KnowledgeTags::default();
    let history = if p.history.is_empty() {
        t.empty_history.clone()
    } else {
        p.history
            .iter()
            .zip(&titles)
            .map(|(a, title)| article_text(t, a, title, ArticleDesc::D1, &none))
            .collect::<Result<Vec<_>>>()?
            .join(&t.separator)
    };
    let candidate = article_text(t, p.candidate, &titles[titles.len() - 1], kind.desc, &p.tags)?;
    let body = fill(&t.input, &[("history", &history), ("candidate", &candidate)]);
    let text = match kind.input {
        InputTemplate::T1 => body,
        InputTemplate::T2 => {
            if p.user_topics.is_empty() {
                return Err(Error::Template("template T2 needs at least one user topic".into()));
            }
            fill(&t.attributes_prefix, &[("topics", &p.user_topics.join(", "))]) + &body
        }
        InputTemplate::T3 => body + &t.diverse_request,
        InputTemplate::T4 => body + &t.similar_request,
    };
    Ok(text.to_lowercase())
}

/// A rendered training or scoring example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub input_text: String,
    pub target_text: String,
    pub impression_id: String,
    pub news_id: String,
    pub label: bool,
}

pub fn render_sample(kind: TemplateKind, t: &Templates, catalog: &Catalog, s: &TrainSample) -> Result<RenderedPrompt> {
    let p = PromptInput::from_sample(catalog, s)?;
    Ok(RenderedPrompt {
        input_text: render_input(kind, t, &p)?,
        target_text: render_target(s.label).to_string(),
        impression_id: s.impression_id.clone(),
        news_id: s.candidate.clone(),
        label: s.label,
    })
}

/// Tokenizes the prompt, dropping the oldest history articles until it fits
/// in `max_seq_len`. Returns the tokens and how many articles were dropped.
pub fn fit_to_budget(
    kind: TemplateKind,
    t: &Templates,
    vocab: &Vocab,
    p: &PromptInput,
    max_seq_len: usize,
) -> Result<(Vec<usize>, usize)> {
    let mut trimmed = p.clone();
    let mut dropped = 0;
    loop {
        let ids = vocab.encode(&render_input(kind, t, &trimmed)?);
        if ids.len() <= max_seq_len {
            return Ok((ids, dropped));
        }
        if trimmed.history.is_empty() {
            return Err(Error::Data(format!(
                "prompt for candidate {} needs {} tokens even without history; budget is {max_seq_len}",
                p.candidate.news_id,
                ids.len()
            )));
        }
        trimmed.history.remove(0);
        dropped += 1;
    }
}

/// Right-pads every sequence with [`PAD_ID`] to the longest length.
pub fn pad_batch(seqs: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut s = s.clone();
            s.resize(len, PAD_ID);
            s
        })
        .collect()
}
