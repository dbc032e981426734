use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, VocabError};
use crate::ingest::DecomposedPost;

/// Tags occurring fewer times than this over the whole corpus are rare.
pub const DEFAULT_THETA: u64 = 50;

/// The closed label space: common tags ordered by descending count, then
/// name. A tag's position in that order is its label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct TagVocabulary {
    tags: Vec<String>,
    counts: BTreeMap<String, u64>,
    theta: u64,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    theta: u64,
    tags: Vec<String>,
    counts: BTreeMap<String, u64>,
}

impl TryFrom<VocabFile> for TagVocabulary {
    type Error = VocabError;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.theta == 0 {
            return Err(VocabError::InvalidTheta);
        }
        if f.tags.len() != f.counts.len() {
            return Err(VocabError::Invalid("tags and counts differ in size".into()));
        }
        let mut index = HashMap::with_capacity(f.tags.len());
        for (i, t) in f.tags.iter().enumerate() {
            let count = *f
                .counts
                .get(t)
                .ok_or_else(|| VocabError::Invalid(format!("no count for tag {t:?}")))?;
            if count < f.theta {
                return Err(VocabError::Invalid(format!(
                    "tag {t:?} has count {count} below theta {}",
                    f.theta
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Invalid(format!("duplicate tag {t:?}")));
            }
        }
        Ok(Self {
            tags: f.tags,
            counts: f.counts,
            theta: f.theta,
            index,
        })
    }
}

impl From<TagVocabulary> for VocabFile {
    fn from(v: TagVocabulary) -> Self {
        Self {
            theta: v.theta,
            tags: v.tags,
            counts: v.counts,
        }
    }
}

impl TagVocabulary {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn theta(&self) -> u64 {
        self.theta
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.tags[index]
    }

    pub fn count(&self, tag: &str) -> Option<u64> {
        self.counts.get(tag).copied()
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.index.contains_key(tag)
    }

    /// Multi-hot target vector for a post's tags; unknown tags are ignored.
    pub fn targets(&self, tags: &[String]) -> Vec<f32> {
        let mut y = vec![0.0; self.len()];
        for t in tags {
            if let Some(i) = self.index_of(t) {
                y[i] = 1.0;
            }
        }
        y
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("vocabulary serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Counts every tag over the full corpus and keeps those with
/// `count >= theta`.
pub fn build_tag_vocab(corpus: &[DecomposedPost], theta: u64) -> Result<TagVocabulary> {
    if corpus.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    if theta == 0 {
        return Err(VocabError::InvalidTheta);
    }
    let mut all: HashMap<&str, u64> = HashMap::new();
    for post in corpus {
        for tag in &post.tags {
            *all.entry(tag.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = all.into_iter().filter(|&(_, c)| c >= theta).collect();
    if kept.is_empty() {
        return Err(VocabError::EmptyLabelSpace { theta });
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tags: Vec<String> = kept.iter().map(|(t, _)| t.to_string()).collect();
    let counts = kept.iter().map(|&(t, c)| (t.to_string(), c)).collect();
    let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(TagVocabulary {
        tags,
        counts,
        theta,
        index,
    })
}

/// Drops rare tags from every post, then drops posts left without tags.
pub fn filter_posts(corpus: Vec<DecomposedPost>, vocab: &TagVocabulary) -> Vec<DecomposedPost> {
    corpus
        .into_iter()
        .filter_map(|mut post| {
            post.tags.retain(|t| vocab.contains(t));
            (!post.tags.is_empty()).then_some(post)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDateTime;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn post(id: u64, tags: &[&str]) -> DecomposedPost {
        DecomposedPost {
            id,
            date: NaiveDateTime::default(),
            title: String::new(),
            description: String::new(),
            code: String::new(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn corpus_with_counts(counts: &[(&str, usize)]) -> Vec<DecomposedPost> {
        let mut posts = Vec::new();
        for &(tag, n) in counts {
            for _ in 0..n {
                posts.push(post(posts.len() as u64 + 1, &[tag]));
            }
        }
        posts
    }

    #[test]
    fn theta_boundary_keeps_exact_count() {
        let corpus = corpus_with_counts(&[("a", 50), ("b", 49)]);
        let v = build_tag_vocab(&corpus, 50).unwrap();
        assert_eq!(v.tags(), &["a".to_string()]);
        assert_eq!(v.count("a"), Some(50));
    }

    #[test]
    fn theta_one_keeps_everything_ordered() {
        let corpus = corpus_with_counts(&[("z", 2), ("b", 3), ("a", 2)]);
        let v = build_tag_vocab(&corpus, 1).unwrap();
        assert_eq!(v.tags(), &["b", "a", "z"]);
        assert_eq!(v.index_of("a"), Some(1));
    }

    #[test]
    fn all_rare_is_an_error() {
        let corpus = corpus_with_counts(&[("a", 2)]);
        assert!(matches!(
            build_tag_vocab(&corpus, 3),
            Err(VocabError::EmptyLabelSpace { theta: 3 })
        ));
        assert!(matches!(build_tag_vocab(&[], 1), Err(VocabError::EmptyCorpus)));
        assert!(matches!(build_tag_vocab(&corpus, 0), Err(VocabError::InvalidTheta)));
    }

    #[test]
    fn filter_drops_rare_tags_and_empty_posts() {
        let mut corpus = corpus_with_counts(&[("common", 3)]);
        corpus.push(post(10, &["rare"]));
        corpus.push(post(11, &["common", "rare"]));
        let v = build_tag_vocab(&corpus, 3).unwrap();
        let out = filter_posts(corpus, &v);
        assert_eq!(out.len(), 4);
        assert_eq!(out.last().unwrap().tags, vec!["common"]);
        assert!(out.iter().all(|p| p.id != 10));
    }

    fn random_corpus(seed: u64, n: usize) -> Vec<DecomposedPost> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u64)
            .map(|id| {
                let k = rng.random_range(1..=5);
                let mut tags: Vec<String> = Vec::new();
                while tags.len() < k {
                    // skewed so that some tags are rare
                    let t = format!("t{}", (rng.random_range(0.0f64..1.0).powi(3) * 40.0) as usize);
                    if !tags.contains(&t) {
                        tags.push(t);
                    }
                }
                DecomposedPost {
                    tags,
                    ..post(id + 1, &[])
                }
            })
            .collect()
    }

    #[test]
    fn vocab_and_filter_match_brute_force_oracle() {
        let corpus = random_corpus(5, 200);
        let theta = 3;
        // oracle: count by scanning once per distinct tag
        let mut distinct: Vec<String> = corpus.iter().flat_map(|p| p.tags.clone()).collect();
        distinct.sort();
        distinct.dedup();
        let mut expected: Vec<(String, u64)> = distinct
            .into_iter()
            .map(|t| {
                let c = corpus.iter().filter(|p| p.tags.contains(&t)).count() as u64;
                (t, c)
            })
            .filter(|(_, c)| *c >= theta)
            .collect();
        expected.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let v = build_tag_vocab(&corpus, theta).unwrap();
        let got: Vec<(String, u64)> = v.tags().iter().map(|t| (t.clone(), v.count(t).unwrap())).collect();
        assert_eq!(got, expected);

        let keep: Vec<&str> = expected.iter().map(|(t, _)| t.as_str()).collect();
        let oracle: Vec<(u64, Vec<String>)> = corpus
            .iter()
            .map(|p| {
                (
                    p.id,
                    p.tags
                        .iter()
                        .filter(|t| keep.contains(&t.as_str()))
                        .cloned()
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, t)| !t.is_empty())
            .collect();
        let filtered = filter_posts(corpus, &v);
        let got: Vec<(u64, Vec<String>)> = filtered.into_iter().map(|p| (p.id, p.tags)).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let v = build_tag_vocab(&corpus_with_counts(&[("a", 2), ("b", 1)]), 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: TagVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        let bad = r#"{"theta":5,"tags":["a"],"counts":{"a":2}}"#;
        assert!(serde_json::from_str::<TagVocabulary>(bad).is_err());
    }

    proptest! {
        #[test]
        fn filtering_is_idempotent(seed in 0u64..1000, theta in 1u64..6) {
            let corpus = random_corpus(seed, 60);
            if let Ok(v) = build_tag_vocab(&corpus, theta) {
                let once = filter_posts(corpus, &v);
                prop_assert!(once.iter().all(|p| (1..=5).contains(&p.tags.len())));
                let twice = filter_posts(once.clone(), &v);
                prop_assert_eq!(once, twice);
            }
        }
    }
}
