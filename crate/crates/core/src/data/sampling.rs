use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiversityTag, Impression, KnowledgeTags, TrainSample};
use crate::error::{Error, Result};

/// Derives a per-key stream seed so sampling does not depend on iteration order.
pub(crate) fn mix_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a over the key, folded into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.rotate_left(17);
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Impression>,
    pub valid: Vec<Impression>,
    pub test: Vec<Impression>,
}

/// Impressions strictly before `train_end` go to train; the rest are shuffled
/// under `seed` and split into valid and test. Each partition keeps input order.
pub fn chronological_split(impressions: &[Impression], train_end: i64, valid_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..=1.0).contains(&valid_fraction) {
        return Err(Error::Config(format!("valid_fraction must lie in [0, 1], got {valid_fraction}")));
    }
    let mut split = Split::default();
    let mut rest = Vec::new();
    for (i, imp) in impressions.iter().enumerate() {
        if imp.timestamp < train_end {
            split.train.push(imp.clone());
        } else {
            rest.push(i);
        }
    }
    let mut shuffled = rest.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = (valid_fraction * rest.len() as f64).round() as usize;
    let mut is_valid = vec![false; impressions.len()];
    for &i in &shuffled[..n_valid] {
        is_valid[i] = true;
    }
    for i in rest {
        if is_valid[i] {
            split.valid.push(impressions[i].clone());
        } else {
            split.test.push(impressions[i].clone());
        }
    }
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        if part.is_empty() {
            log::warn!("{name} partition is empty");
        }
    }
    Ok(split)
}

fn sample(imp: &Impression, candidate: &str, label: bool) -> TrainSample {
    TrainSample {
        impression_id: imp.impression_id.clone(),
        user_id: imp.user_id.clone(),
        timestamp: imp.timestamp,
        history: imp.history.clone(),
        candidate: candidate.to_string(),
        label,
        tags: KnowledgeTags::default(),
    }
}

/// Keeps every positive and draws up to `ratio` negatives per positive, without
/// replacement, from the same impression. Negatives keep their slate order.
pub fn negative_sample(imp: &Impression, ratio: usize, seed: u64) -> Vec<TrainSample> {
    let positives: Vec<usize> = (0..imp.candidates.len()).filter(|&i| imp.candidates[i].1).collect();
    let mut negatives: Vec<usize> = (0..imp.candidates.len()).filter(|&i| !imp.candidates[i].1).collect();
    let want = (ratio * positives.len()).min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &imp.impression_id));
    let (chosen, _) = negatives.partial_shuffle(&mut rng, want);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    positives
        .iter()
        .chain(chosen.iter())
        .map(|&i| sample(imp, &imp.candidates[i].0, imp.candidates[i].1))
        .collect()
}

/// Negative-samples every impression that has a click and attaches the
/// candidate's knowledge tags when `tags` (aligned with `impressions`) is given.
pub fn build_samples(
    impressions: &[Impression],
    tags: Option<&[Vec<KnowledgeTags>]>,
    ratio: usize,
    seed: u64,
) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for (i, imp) in impressions.iter().enumerate() {
        if !imp.has_positive() {
            continue;
        }
        for mut s in negative_sample(imp, ratio, seed) {
            if let Some(tags) = tags {
                let pos = imp.candidates.iter().position(|c| c.0 == s.candidate);
                if let Some(t) = pos.and_then(|p| tags[i].get(p)) {
                    s.tags = *t;
                }
            }
            out.push(s);
        }
    }
    out
}

/// Indices of a positive and a negative sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub pos: usize,
    pub neg: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatches {
    pub batches: Vec<Vec<Pair>>,
    /// Positives dropped because their user had no negative anywhere.
    pub skipped: usize,
    /// Pairs whose negative came from another impression of the same user.
    pub borrowed: usize,
}

impl PairBatches {
    pub fn num_pairs(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Pairs positives with negatives of the same impression, cycling the shorter
/// side so every sample is used at least once. Impressions are visited in a
/// seeded order and their pairs stay contiguous before chunking into batches.
pub fn make_pairs(samples: &[TrainSample], batch_size: usize, seed: u64) -> Result<PairBatches> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut groups: IndexMap<&str, (Vec<usize>, Vec<usize>)> = IndexMap::new();
    let mut user_negs: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let g = groups.entry(s.impression_id.as_str()).or_default();
        if s.label {
            g.0.push(i);
        } else {
            g.1.push(i);
            user_negs.entry(s.user_id.as_str()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    let mut out = PairBatches::default();
    let mut flat = Vec::new();
    for gi in order {
        let (_, (pos, neg)) = groups.get_index(gi).expect("group index in range");
        if pos.is_empty() {
            continue;
        }
        if neg.is_empty() {
            match user_negs.get(samples[pos[0]].user_id.as_str()) {
                Some(pool) => {
                    for &p in pos {
                        let &n = pool.choose(&mut rng).expect("non-empty pool");
                        flat.push(Pair { pos: p, neg: n });
                        out.borrowed += 1;
                    }
                }
                None => out.skipped += pos.len(),
            }
            continue;
        }
        for j in 0..pos.len().max(neg.len()) {
            flat.push(Pair {
                pos: pos[j % pos.len()],
                neg: neg[j % neg.len()],
            });
        }
    }
    out.batches = flat.chunks(batch_size).map(<[Pair]>::to_vec).collect();
    Ok(out)
}

/// Keeps positives whose diversity tag equals `target`; negatives pass through.
pub fn controllability_filter(samples: &[TrainSample], target: DiversityTag) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if !s.label {
            out.push(s.clone());
            continue;
        }
        let tag = s.tags.diversity.ok_or_else(|| {
            Error::Data(format!(
                "sample {}/{} has no diversity tag",
                s.impression_id, s.candidate
            ))
        })?;
        if tag == target {
            out.push(s.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn imp(id: &str, user: &str, ts: i64, pos: usize, neg: usize) -> Impression {
        let mut candidates: Vec<(String, bool)> = (0..pos).map(|i| (format!("{id}p{i}"), true)).collect();
        candidates.extend((0..neg).map(|i| (format!("{id}n{i}"), false)));
        Impression {
            impression_id: id.into(),
            user_id: user.into(),
            timestamp: ts,
            history: vec![],
            candidates,
        }
    }

    #[test]
    fn split_partitions() {
        let imps: Vec<Impression> = (0..150).map(|i| imp(&i.to_string(), "u", i, 1, 1)).collect();
        let all_before = chronological_split(&imps, 1000, 0.5, 1).unwrap();
        assert_eq!(all_before.train.len(), 150);
        assert!(all_before.valid.is_empty() && all_before.test.is_empty());

        let s = chronological_split(&imps, 50, 0.5, 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (50, 50, 50));
        let ids = |v: &[Impression]| v.iter().map(|i| i.impression_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (ids(&s.train), ids(&s.valid), ids(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert!(s.train.iter().map(|i| i.timestamp).max() < s.test.iter().map(|i| i.timestamp).min());
        assert_eq!(chronological_split(&imps, 50, 0.5, 1).unwrap(), s);
        assert!(chronological_split(&imps, 50, 1.5, 1).is_err());
    }

    #[test]
    fn negative_sampling_counts() {
        assert_eq!(negative_sample(&imp("a", "u", 0, 1, 10), 4, 0).len(), 5);
        assert_eq!(negative_sample(&imp("a", "u", 0, 1, 2), 4, 0).len(), 3);
        assert_eq!(negative_sample(&imp("a", "u", 0, 2, 10), 4, 0).len(), 10);
        let a = negative_sample(&imp("a", "u", 0, 1, 10), 4, 9);
        let b = negative_sample(&imp("a", "u", 0, 1, 10), 4, 9);
        assert_eq!(a, b);
        let distinct: HashSet<&str> = a.iter().map(|s| s.candidate.as_str()).collect();
        assert_eq!(distinct.len(), 5);
        assert!(a[0].label && a[1..].iter().all(|s| !s.label));
    }

    #[test]
    fn pairs_share_impression_and_fill_batches() {
        let imps: Vec<Impression> = (0..10).map(|i| imp(&i.to_string(), "u", 0, 1, 6)).collect();
        let samples = build_samples(&imps, None, 4, 3);
        let pb = make_pairs(&samples, 16, 3).unwrap();
        assert_eq!(pb.num_pairs(), 40);
        assert_eq!(pb.batches[0].len(), 16);
        assert_eq!(pb.batches.last().unwrap().len(), 8);
        for p in pb.batches.iter().flatten() {
            assert!(samples[p.pos].label && !samples[p.neg].label);
            assert_eq!(samples[p.pos].impression_id, samples[p.neg].impression_id);
        }
        assert_eq!(make_pairs(&samples, 16, 3).unwrap(), pb);
    }

    #[test]
    fn negative_less_impressions_borrow_or_skip() {
        let imps = vec![imp("a", "u1", 0, 2, 0), imp("b", "u1", 0, 1, 1), imp("c", "u2", 0, 1, 0)];
        let samples = build_samples(&imps, None, 4, 0);
        let pb = make_pairs(&samples, 16, 0).unwrap();
        assert_eq!(pb.borrowed, 2);
        assert_eq!(pb.skipped, 1);
        assert_eq!(pb.num_pairs(), 3);
    }

    #[test]
    fn controllability_keeps_negatives() {
        let mk = |label, tag| TrainSample {
            impression_id: "i".into(),
            user_id: "u".into(),
            timestamp: 0,
            history: vec![],
            candidate: "c".into(),
            label,
            tags: KnowledgeTags {
                diversity: Some(tag),
                popularity: None,
            },
        };
        let samples = vec![
            mk(true, DiversityTag::Personal),
            mk(false, DiversityTag::Personal),
            mk(true, DiversityTag::Diverse),
        ];
        let kept = controllability_filter(&samples, DiversityTag::Diverse).unwrap();
        assert_eq!(kept, vec![samples[1].clone(), samples[2].clone()]);
        let already = vec![samples[1].clone(), samples[2].clone()];
        assert_eq!(controllability_filter(&already, DiversityTag::Diverse).unwrap(), already);
        let mut untagged = samples[0].clone();
        untagged.tags.diversity = None;
        assert!(controllability_filter(&[untagged], DiversityTag::Diverse).is_err());
    }
}
