//! Stack Exchange `Posts.xml` ingestion: streaming row parser, post
//! decomposition into title / description / code, and the chronological
//! train/test split.

mod html;
mod reader;

pub use html::{decode_entities, html_to_text};
pub use reader::{DumpReader, ParseStats};

use std::io::{BufRead, Write};
use std::sync::LazyLock;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of tags the site allows on a question.
pub const MAX_TAGS: usize = 5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corpus line {line}: {source}")]
    Jsonl {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// One question row as stored in the dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPost {
    pub id: u64,
    pub post_type: u32,
    pub creation_date: NaiveDateTime,
    pub title: String,
    /// HTML body (XML attribute escaping already undone).
    pub body: String,
    pub tags: Vec<String>,
}

/// A post split into its three text components plus ground-truth tags.
/// This is also the JSONL corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposedPost {
    pub id: u64,
    pub date: NaiveDateTime,
    pub title: String,
    pub description: String,
    pub code: String,
    pub tags: Vec<String>,
}

static CODE_BLOCK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<pre><code>([\s\S]*?)</code></pre>").unwrap());

/// Splits a post body into description and code.
///
/// Code is every `<pre><code>` block (tags stripped, entities decoded)
/// joined by `\n` in document order. The description is what remains of the
/// body with markup removed and whitespace collapsed. Inline `<code>` stays
/// in the description.
pub fn decompose(post: &RawPost) -> DecomposedPost {
    let mut blocks = Vec::new();
    let mut rest = String::with_capacity(post.body.len());
    let mut last = 0;
    for caps in CODE_BLOCK.captures_iter(&post.body) {
        let whole = caps.get(0).unwrap();
        rest.push_str(&post.body[last..whole.start()]);
        rest.push(' ');
        last = whole.end();
        blocks.push(html_to_text(&caps[1]));
    }
    rest.push_str(&post.body[last..]);

    DecomposedPost {
        id: post.id,
        date: post.creation_date,
        title: collapse_whitespace(&post.title),
        description: collapse_whitespace(&html_to_text(&rest)),
        code: blocks.join("\n"),
        tags: post.tags.clone(),
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Counters for one ingestion run, written as the sidecar stats file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    #[serde(flatten)]
    pub parse: ParseStats,
    pub written: u64,
}

const CHUNK: usize = 1024;

/// Streams a dump into a JSONL corpus. Decomposition of each chunk of rows
/// runs on `workers` threads; output keeps file order.
pub fn ingest<R: BufRead, W: Write>(input: R, mut output: W, workers: usize) -> Result<IngestStats> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| IngestError::Config(e.to_string()))?;
    let mut reader = DumpReader::new(input);
    let mut written = 0u64;
    let mut chunk = Vec::with_capacity(CHUNK);
    loop {
        chunk.clear();
        for row in reader.by_ref().take(CHUNK) {
            chunk.push(row?);
        }
        if chunk.is_empty() {
            break;
        }
        let decomposed: Vec<DecomposedPost> = pool.install(|| chunk.par_iter().map(decompose).collect());
        written += write_jsonl(&mut output, &decomposed)? as u64;
    }
    output.flush()?;
    Ok(IngestStats {
        parse: reader.stats().clone(),
        written,
    })
}

pub fn write_jsonl<'a, W: Write>(mut out: W, posts: impl IntoIterator<Item = &'a DecomposedPost>) -> Result<usize> {
    let mut n = 0;
    for post in posts {
        serde_json::to_writer(&mut out, post).map_err(|e| IngestError::Io(e.into()))?;
        out.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<DecomposedPost>> {
    let mut posts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let post = serde_json::from_str(&line).map_err(|source| IngestError::Jsonl { line: i + 1, source })?;
        posts.push(post);
    }
    Ok(posts)
}

/// Holds out the `test_count` latest posts. Ties on date go to the higher
/// id. Both partitions keep their input order.
pub fn chronological_split(
    posts: Vec<DecomposedPost>,
    test_count: usize,
) -> Result<(Vec<DecomposedPost>, Vec<DecomposedPost>)> {
    if test_count > posts.len() {
        return Err(IngestError::Config(format!(
            "test_count {test_count} exceeds corpus size {}",
            posts.len()
        )));
    }
    let mut order: Vec<usize> = (0..posts.len()).collect();
    order.sort_by_key(|&i| (posts[i].date, posts[i].id));
    let mut is_test = vec![false; posts.len()];
    for &i in &order[posts.len() - test_count..] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = posts.into_iter().zip(is_test).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(p, _)| p).collect(),
        test.into_iter().map(|(p, _)| p).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(body: &str) -> RawPost {
        RawPost {
            id: 1,
            post_type: 1,
            creation_date: NaiveDate::from_ymd_opt(2020, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            title: "t".into(),
            body: body.into(),
            tags: vec!["a".into()],
        }
    }

    fn dated(id: u64, day: u32) -> DecomposedPost {
        DecomposedPost {
            id,
            date: NaiveDate::from_ymd_opt(2021, 1, day)
                .unwrap()
                .and_hms_opt(12, 0, 0)
                .unwrap(),
            title: String::new(),
            description: String::new(),
            code: String::new(),
            tags: vec!["x".into()],
        }
    }

    #[test]
    fn no_code_blocks() {
        let d = decompose(&raw("<p>How do I sort a <code>list</code>?</p>\n"));
        assert_eq!(d.code, "");
        assert_eq!(d.description, "How do I sort a list?");
    }

    #[test]
    fn only_a_code_block() {
        let d = decompose(&raw("<pre><code>x=1</code></pre>"));
        assert_eq!(d.description, "");
        assert_eq!(d.code, "x=1");
    }

    #[test]
    fn two_code_blocks_in_order() {
        let body = "<p>First</p>\n<pre><code>a = 1\n</code></pre>\n<p>then &amp; more</p>\n\
                    <pre><code>if a &lt; 2:\n    pass\n</code></pre>\n<p>end</p>";
        let d = decompose(&raw(body));
        assert_eq!(d.code, "a = 1\n\nif a < 2:\n    pass\n");
        assert_eq!(d.description, "First then & more end");
    }

    #[test]
    fn pre_with_attributes_is_not_code() {
        // only the exact `<pre><code>` pair counts as a code block
        let d = decompose(&raw("<pre class=\"lang-py\"><code>x</code></pre>"));
        assert_eq!(d.code, "");
        assert_eq!(d.description, "x");
    }

    #[test]
    fn decompose_is_deterministic() {
        let p = raw("<p>a</p><pre><code>b</code></pre>");
        assert_eq!(decompose(&p), decompose(&p));
    }

    #[test]
    fn split_all_train_when_zero() {
        let posts: Vec<_> = (1..=5).map(|i| dated(i, i as u32)).collect();
        let (train, test) = chronological_split(posts, 0).unwrap();
        assert_eq!(train.len(), 5);
        assert!(test.is_empty());
    }

    #[test]
    fn split_latest_goes_to_test() {
        let posts = vec![dated(1, 3), dated(2, 1), dated(3, 2)];
        let (train, test) = chronological_split(posts, 1).unwrap();
        assert_eq!(test.iter().map(|p| p.id).collect::<Vec<_>>(), vec![1]);
        assert_eq!(train.iter().map(|p| p.id).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn split_tie_prefers_higher_id() {
        let posts = vec![dated(9, 1), dated(4, 1)];
        let (_, test) = chronological_split(posts, 1).unwrap();
        assert_eq!(test[0].id, 9);
    }

    #[test]
    fn split_rejects_oversized_test() {
        let err = chronological_split(vec![dated(1, 1)], 2).unwrap_err();
        assert!(matches!(err, IngestError::Config(_)));
    }

    #[test]
    fn split_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut posts: Vec<_> = (0..100u64).map(|i| dated(i + 1, (i % 28) as u32 + 1)).collect();
        posts.shuffle(&mut rng);
        let mut sorted = posts.clone();
        sorted.sort_by_key(|p| (p.date, p.id));
        let mut expected: Vec<u64> = sorted[90..].iter().map(|p| p.id).collect();
        expected.sort();

        let (train, test) = chronological_split(posts, 10).unwrap();
        let mut got: Vec<u64> = test.iter().map(|p| p.id).collect();
        got.sort();
        assert_eq!(got, expected);
        let max_train = train.iter().map(|p| p.date).max().unwrap();
        let min_test = test.iter().map(|p| p.date).min().unwrap();
        assert!(max_train <= min_test);
    }

    fn body_strategy() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            "[a-z &;<>]{0,12}".prop_map(|s| format!("<p>{}</p>", s.replace('<', "&lt;").replace('>', "&gt;"))),
            "[a-z =\n]{0,12}".prop_map(|s| format!("<pre><code>{s}</code></pre>")),
            "[a-z]{1,6}".prop_map(|s| format!("<code>{s}</code>")),
            "[ \n]{0,3}".prop_map(|s| s),
        ];
        proptest::collection::vec(piece, 0..8).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn partition_never_grows_text(body in body_strategy()) {
            let d = decompose(&raw(&body));
            let blocks = CODE_BLOCK.find_iter(&body).count();
            prop_assert!(d.description.len() + d.code.len() <= html_to_text(&body).len() + blocks);
            prop_assert!(!d.description.contains("<p>") && !d.code.contains("<p>"));
            let decoded_body = decode_entities(&body);
            for ch in d.code.chars().filter(|c| *c != '\n') {
                prop_assert!(decoded_body.contains(ch));
            }
        }
    }
}
