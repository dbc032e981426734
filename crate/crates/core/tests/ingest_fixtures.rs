use std::io::BufReader;

use tagrec::ingest::{ingest, read_jsonl, DumpReader, IngestStats};

const POSTS_20: &str = include_str!("fixtures/posts_20.xml");
const GOLDEN_20: &str = include_str!("fixtures/posts_20.golden.jsonl");
const STATS_20: &str = include_str!("fixtures/posts_20.stats.json");
const POSTS_3: &str = include_str!("fixtures/posts_3.xml");

#[test]
fn twenty_row_dump_matches_golden_bytes() {
    let mut out = Vec::new();
    let stats = ingest(BufReader::new(POSTS_20.as_bytes()), &mut out, 2).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), GOLDEN_20);
    let expected: IngestStats = serde_json::from_str(STATS_20).unwrap();
    assert_eq!(stats, expected);
}

#[test]
fn output_is_independent_of_worker_count() {
    let run = |w| {
        let mut out = Vec::new();
        ingest(BufReader::new(POSTS_20.as_bytes()), &mut out, w).unwrap();
        out
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn golden_corpus_reads_back() {
    let posts = read_jsonl(GOLDEN_20.as_bytes()).unwrap();
    assert_eq!(posts.len(), 14);
    assert!(posts.iter().all(|p| (1..=5).contains(&p.tags.len())));
    let multi = posts.iter().find(|p| p.id == 4).unwrap();
    assert_eq!(multi.code.matches("print").count(), 2);
}

#[test]
fn three_row_fixture_tags() {
    let rows: Vec<_> = DumpReader::new(POSTS_3.as_bytes()).collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].tags, vec!["python", "pandas"]);
    assert_eq!(rows[1].tags, vec!["sql"]);
}

#[test]
fn empty_and_answer_only_dumps() {
    assert_eq!(DumpReader::new(&b"<posts/>"[..]).count(), 0);
    let answer = br#"<posts><row Id="1" PostTypeId="2" CreationDate="2020-01-01T00:00:00.000" Body="x" /></posts>"#;
    assert_eq!(DumpReader::new(&answer[..]).count(), 0);
}

#[test]
fn malformed_xml_reports_offset() {
    let bad = br#"<posts><row Id="1" PostTypeId="1" Body="x" Tags="&lt;a&gt;" </posts>"#;
    let err = DumpReader::new(&bad[..]).find_map(|r| r.err()).unwrap();
    assert!(err.to_string().contains("byte"), "{err}");
}
