use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, Impression, NewsArticle};
use crate::error::{Error, Result};

/// Saturday 2019-11-09 00:00:00 UTC.
const START_TIME: i64 = 1_573_257_600;

struct TopicWords {
    name: &'static str,
    subcategories: [&'static str; 3],
    words: &'static [&'static str],
}

const TOPICS: [TopicWords; 12] = [
    TopicWords {
        name: "sports",
        subcategories: ["soccer", "tennis", "basketball"],
        words: &["team", "match", "coach", "season", "goal", "league", "final", "player", "score", "champion", "stadium", "trophy"],
    },
    TopicWords {
        name: "finance",
        subcategories: ["markets", "banking", "crypto"],
        words: &["stock", "bank", "rates", "investor", "profit", "market", "dollar", "bond", "fund", "earnings", "trade", "loan"],
    },
    TopicWords {
        name: "health",
        subcategories: ["medicine", "fitness", "nutrition"],
        words: &["doctor", "vaccine", "diet", "hospital", "sleep", "heart", "exercise", "patient", "virus", "therapy", "vitamin", "clinic"],
    },
    TopicWords {
        name: "travel",
        subcategories: ["flights", "hotels", "destinations"],
        words: &["beach", "island", "airport", "resort", "journey", "passport", "cruise", "mountain", "tourist", "luggage", "villa", "route"],
    },
    TopicWords {
        name: "science",
        subcategories: ["space", "physics", "biology"],
        words: &["planet", "telescope", "atom", "species", "laboratory", "galaxy", "fossil", "orbit", "genome", "particle", "comet", "cell"],
    },
    TopicWords {
        name: "food",
        subcategories: ["recipes", "restaurants", "baking"],
        words: &["chef", "pasta", "dessert", "kitchen", "bread", "cheese", "soup", "grill", "spice", "menu", "sauce", "cake"],
    },
    TopicWords {
        name: "music",
        subcategories: ["concerts", "albums", "charts"],
        words: &["band", "singer", "guitar", "album", "tour", "song", "festival", "drummer", "melody", "lyrics", "piano", "rapper"],
    },
    TopicWords {
        name: "autos",
        subcategories: ["cars", "racing", "electric"],
        words: &["engine", "truck", "sedan", "battery", "driver", "highway", "motor", "wheel", "garage", "fuel", "brake", "dealer"],
    },
    TopicWords {
        name: "politics",
        subcategories: ["elections", "congress", "policy"],
        words: &["senate", "vote", "campaign", "governor", "ballot", "minister", "debate", "law", "party", "candidate", "reform", "budget"],
    },
    TopicWords {
        name: "weather",
        subcategories: ["storms", "climate", "forecast"],
        words: &["rain", "snow", "hurricane", "flood", "heatwave", "wind", "drought", "thunder", "frost", "tornado", "cloud", "humidity"],
    },
    TopicWords {
        name: "movies",
        subcategories: ["cinema", "awards", "streaming"],
        words: &["actor", "director", "premiere", "sequel", "trailer", "studio", "screen", "villain", "hero", "script", "oscar", "comedy"],
    },
    TopicWords {
        name: "technology",
        subcategories: ["gadgets", "software", "internet"],
        words: &["phone", "laptop", "robot", "chip", "app", "startup", "gadget", "server", "browser", "drone", "code", "network"],
    },
];

/// Parameters of the synthetic corpus.
///
/// Each user likes `topics_per_user` topics. A liked candidate is clicked with
/// probability `sigmoid(sharpness / 2)`, any other with `sigmoid(-sharpness / 2)`,
/// and slates mix liked and other articles so that the expected click rate is
/// `click_rate`. Every impression carries at least one click.
///
/// With `explore_rate > 0` each impression is a request: with that probability
/// the user wants liked topics absent from their last `recent_window` history
/// articles, otherwise liked topics among them. Only the requested topics
/// count as liked for that impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_articles: usize,
    pub num_topics: usize,
    /// Number of days; every user sees one slate per day.
    pub steps: usize,
    pub preference_sharpness: f64,
    pub seed: u64,
    pub topics_per_user: usize,
    pub slate_size: usize,
    pub click_rate: f64,
    pub history_min: usize,
    pub history_max: usize,
    pub cold_user_fraction: f64,
    pub title_words: usize,
    /// Exponent of the Zipf-like popularity used when drawing articles.
    pub popularity_skew: f64,
    pub explore_rate: f64,
    pub recent_window: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_users: 500,
            num_articles: 300,
            num_topics: 8,
            steps: 10,
            preference_sharpness: 10.0,
            seed: 7,
            topics_per_user: 2,
            slate_size: 12,
            click_rate: 0.25,
            history_min: 3,
            history_max: 6,
            cold_user_fraction: 0.0,
            title_words: 3,
            popularity_skew: 0.8,
            explore_rate: 0.0,
            recent_window: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_users", self.num_users),
            ("num_articles", self.num_articles),
            ("num_topics", self.num_topics),
            ("steps", self.steps),
            ("topics_per_user", self.topics_per_user),
            ("slate_size", self.slate_size),
            ("title_words", self.title_words),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth.{name} must be at least 1")));
        }
        if self.num_topics > TOPICS.len() {
            return Err(Error::Config(format!("synth.num_topics is limited to {}", TOPICS.len())));
        }
        if self.topics_per_user > self.num_topics {
            return Err(Error::Config("synth.topics_per_user exceeds num_topics".into()));
        }
        if self.num_articles < self.num_topics {
            return Err(Error::Config("synth.num_articles must cover every topic".into()));
        }
        if self.slate_size > self.num_articles {
            return Err(Error::Config("synth.slate_size exceeds num_articles".into()));
        }
        if self.history_min > self.history_max {
            return Err(Error::Config("synth.history_min exceeds history_max".into()));
        }
        if !(self.click_rate > 0.0 && self.click_rate < 1.0) {
            return Err(Error::Config("synth.click_rate must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.cold_user_fraction) {
            return Err(Error::Config("synth.cold_user_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.explore_rate) {
            return Err(Error::Config("synth.explore_rate must lie in [0, 1]".into()));
        }
        if !(self.preference_sharpness >= 0.0) {
            return Err(Error::Config("synth.preference_sharpness must be non-negative".into()));
        }
        Ok(())
    }

    /// Probability that a liked article is clicked.
    pub fn liked_click_prob(&self) -> f64 {
        1.0 / (1.0 + (-self.preference_sharpness / 2.0).exp())
    }

    /// Fraction of liked articles per slate that yields the target click rate.
    pub fn liked_fraction(&self) -> f64 {
        let p = self.liked_click_prob();
        if 2.0 * p - 1.0 < 1e-12 {
            return 0.5;
        }
        ((self.click_rate - (1.0 - p)) / (2.0 * p - 1.0)).clamp(0.0, 1.0)
    }
}

fn draw_distinct(rng: &mut ChaCha8Rng, pool: &[usize], dist: &WeightedIndex<f64>, taken: &[usize]) -> usize {
    loop {
        let a = pool[dist.sample(rng)];
        if !taken.contains(&a) {
            return a;
        }
    }
}

struct Pool {
    ids: Vec<usize>,
    dist: Option<WeightedIndex<f64>>,
}

impl Pool {
    fn new(ids: Vec<usize>, weight: &[f64]) -> Self {
        let dist = WeightedIndex::new(ids.iter().map(|&i| weight[i])).ok();
        Pool { ids, dist }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, taken: &[usize]) -> Option<usize> {
        if self.ids.iter().all(|i| taken.contains(i)) {
            return None;
        }
        self.dist.as_ref().map(|d| draw_distinct(rng, &self.ids, d, taken))
    }
}

/// Generates a catalog and one impression per user per day, deterministic in `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Catalog, Vec<Impression>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics = &TOPICS[..spec.num_topics];

    let mut catalog = Catalog::new();
    let mut article_topic = Vec::with_capacity(spec.num_articles);
    for i in 0..spec.num_articles {
        let t = i % spec.num_topics;
        let topic = &topics[t];
        let words: Vec<&str> = topic.words.choose_multiple(&mut rng, spec.title_words.min(topic.words.len())).copied().collect();
        catalog.insert(NewsArticle {
            news_id: format!("N{}", i + 1),
            category: topic.name.to_string(),
            subcategory: topic.subcategories.choose(&mut rng).copied().unwrap_or(topic.name).to_string(),
            title: words.join(" "),
            abstract_text: None,
        })?;
        article_topic.push(t);
    }
    let mut rank: Vec<usize> = (0..spec.num_articles).collect();
    rank.shuffle(&mut rng);
    let mut weight = vec![0.0; spec.num_articles];
    for (r, &a) in rank.iter().enumerate() {
        weight[a] = 1.0 / ((r + 1) as f64).powf(spec.popularity_skew);
    }
    let topic_pool: Vec<Pool> = (0..spec.num_topics)
        .map(|t| Pool::new((0..spec.num_articles).filter(|&a| article_topic[a] == t).collect(), &weight))
        .collect();

    let p_like = spec.liked_click_prob();
    let q = spec.liked_fraction();
    let mut impressions = Vec::new();
    let mut users = Vec::with_capacity(spec.num_users);
    for u in 0..spec.num_users {
        let mut all: Vec<usize> = (0..spec.num_topics).collect();
        all.shuffle(&mut rng);
        let liked: Vec<usize> = all[..spec.topics_per_user].to_vec();
        let cold = rng.random_bool(spec.cold_user_fraction);
        let len = if cold {
            0
        } else {
            rng.random_range(spec.history_min..=spec.history_max)
        };
        // every liked topic appears once before any repeats, then the order is mixed
        let mut hist_topics: Vec<usize> = (0..len)
            .map(|i| if i < liked.len() { liked[i] } else { *liked.choose(&mut rng).unwrap() })
            .collect();
        hist_topics.shuffle(&mut rng);
        let mut history: Vec<usize> = Vec::with_capacity(len);
        for &t in &hist_topics {
            if let Some(a) = topic_pool[t].draw(&mut rng, &history) {
                history.push(a);
            }
        }
        let mode = |targets: Vec<usize>| {
            let hit = Pool::new((0..spec.num_articles).filter(|a| targets.contains(&article_topic[*a])).collect(), &weight);
            let miss = Pool::new((0..spec.num_articles).filter(|a| !targets.contains(&article_topic[*a])).collect(), &weight);
            (targets, hit, miss)
        };
        let mut modes = vec![];
        if spec.explore_rate > 0.0 {
            let recent: Vec<usize> = history.iter().rev().take(spec.recent_window).map(|&a| article_topic[a]).collect();
            let (familiar, novel): (Vec<usize>, Vec<usize>) = liked.iter().copied().partition(|t| recent.contains(t));
            for targets in [familiar, novel] {
                modes.push(mode(if targets.is_empty() { liked.clone() } else { targets }));
            }
        } else {
            modes.push(mode(liked));
        }
        let offset = rng.random_range(0..86_400);
        users.push((format!("U{}", u + 1), history, modes, offset));
    }

    for step in 0..spec.steps {
        for (user_id, history, modes, offset) in &users {
            let explore = modes.len() > 1 && rng.random_bool(spec.explore_rate);
            let (liked, liked_pool, other_pool) = &modes[usize::from(explore)];
            let mut slate: Vec<usize> = Vec::with_capacity(spec.slate_size);
            while slate.len() < spec.slate_size {
                let want_liked = rng.random_bool(q);
                let (first, second) = if want_liked {
                    (liked_pool, other_pool)
                } else {
                    (other_pool, liked_pool)
                };
                let Some(a) = first.draw(&mut rng, &slate).or_else(|| second.draw(&mut rng, &slate)) else {
                    break;
                };
                slate.push(a);
            }
            let is_liked = |a: &usize| liked.contains(&article_topic[*a]);
            if !slate.iter().any(is_liked) {
                if let Some(a) = liked_pool.draw(&mut rng, &slate) {
                    let at = rng.random_range(0..slate.len());
                    slate[at] = a;
                }
            }
            let mut clicks: Vec<bool> = slate
                .iter()
                .map(|a| rng.random_bool(if is_liked(a) { p_like } else { 1.0 - p_like }))
                .collect();
            if !clicks.iter().any(|&c| c) {
                let first = slate.iter().position(is_liked).unwrap_or(0);
                clicks[first] = true;
            }
            impressions.push(Impression {
                impression_id: format!("{}", impressions.len() + 1),
                user_id: user_id.clone(),
                timestamp: START_TIME + step as i64 * 86_400 + offset,
                history: history.iter().map(|&a| format!("N{}", a + 1)).collect(),
                candidates: slate.iter().zip(clicks).map(|(&a, c)| (format!("N{}", a + 1), c)).collect(),
            });
        }
    }
    impressions.sort_by_key(|i| i.timestamp);
    for (i, imp) in impressions.iter_mut().enumerate() {
        imp.impression_id = format!("{}", i + 1);
    }
    Ok((catalog, impressions))
}

/// Timestamp at which day `step` of a synthetic corpus begins.
pub fn synth_day_start(step: usize) -> i64 {
    START_TIME + step as i64 * 86_400
}
