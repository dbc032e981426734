//! Seeded synthetic corpora with a known relation between text and tags,
//! for overfitting checks, component ablations and benchmarks.

use chrono::{Duration, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::DecomposedPost;
use crate::model::MAX_K;

/// Where the tag signal is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Every component mentions each tag's keyword.
    #[default]
    Everywhere,
    /// Only the code does; title and description are tag-independent noise.
    CodeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub posts: usize,
    pub tags: usize,
    pub tags_per_post: usize,
    pub signal: Signal,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            posts: 64,
            tags: 20,
            tags_per_post: MAX_K,
            signal: Signal::Everywhere,
            seed: 0,
        }
    }
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 4] = ["x", "z", "q", "v"];

const FILLER: [&str; 24] = [
    "how", "do", "i", "get", "the", "value", "of", "a", "when", "it", "fails", "with", "error", "after", "update",
    "using", "my", "in", "to", "is", "not", "working", "why", "does",
];

/// A pronounceable keyword unique to `tag`, built from letters that never
/// occur together in the filler vocabulary.
fn keyword(tag: usize) -> String {
    let a = ONSETS[tag % ONSETS.len()];
    let b = VOWELS[(tag / ONSETS.len()) % VOWELS.len()];
    let c = CODAS[(tag / (ONSETS.len() * VOWELS.len())) % CODAS.len()];
    let d = VOWELS[(tag * 7 + 3) % VOWELS.len()];
    format!("{c}{a}{b}{c}{d}{a}")
}

pub fn tag_name(tag: usize) -> String {
    format!("tag-{tag:02}")
}

fn noise(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| *FILLER.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates `cfg.posts` posts, each tagged with `cfg.tags_per_post`
/// distinct tags drawn uniformly from `cfg.tags`. Every tag is used at
/// least once when `posts * tags_per_post >= tags`. Creation dates increase
/// with the id.
pub fn generate(cfg: &SynthConfig) -> Vec<DecomposedPost> {
    assert!(
        cfg.tags_per_post >= 1 && cfg.tags_per_post <= cfg.tags,
        "tags_per_post must be in 1..=tags"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = NaiveDate::from_ymd_opt(2020, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let all: Vec<usize> = (0..cfg.tags).collect();
    // round-robin prefix so every tag appears
    let mut cover: Vec<usize> = all.clone();
    cover.shuffle(&mut rng);

    (0..cfg.posts)
        .map(|i| {
            let mut tags: Vec<usize> = Vec::with_capacity(cfg.tags_per_post);
            for j in 0..cfg.tags_per_post {
                let idx = i * cfg.tags_per_post + j;
                if idx < cover.len() && !tags.contains(&cover[idx]) {
                    tags.push(cover[idx]);
                }
            }
            while tags.len() < cfg.tags_per_post {
                let t = *all.choose(&mut rng).unwrap();
                if !tags.contains(&t) {
                    tags.push(t);
                }
            }
            tags.sort_unstable();

            let mut words: Vec<String> = tags.iter().map(|&t| keyword(t)).collect();
            words.shuffle(&mut rng);
            let code = words
                .iter()
                .map(|w| format!("{w}.{}();", FILLER.choose(&mut rng).unwrap()))
                .collect::<Vec<_>>()
                .join("\n");
            let (title, description) = match cfg.signal {
                Signal::Everywhere => {
                    words.shuffle(&mut rng);
                    let title = format!("{} {}", noise(&mut rng, 2), words.join(" "));
                    words.shuffle(&mut rng);
                    let description = format!("{} {} {}", noise(&mut rng, 4), words.join(" "), noise(&mut rng, 3));
                    (title, description)
                }
                Signal::CodeOnly => {
                    let n = rng.random_range(4..9);
                    (noise(&mut rng, n), noise(&mut rng, 12))
                }
            };
            DecomposedPost {
                id: i as u64 + 1,
                date: base + Duration::minutes(i as i64),
                title,
                description,
                code,
                tags: tags.iter().map(|&t| tag_name(t)).collect(),
            }
        })
        .collect()
}
