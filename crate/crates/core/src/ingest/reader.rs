use std::io::BufRead;

use chrono::NaiveDateTime;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{IngestError, RawPost, Result, MAX_TAGS};

/// Row counters accumulated while streaming a dump.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub rows: u64,
    pub questions: u64,
    pub non_questions: u64,
    pub untagged: u64,
    /// Rows missing Id, Body, PostTypeId or CreationDate (or with unparseable values).
    pub skipped_missing_fields: u64,
    /// Rows whose Tags attribute could not be decoded or has more than five tags.
    pub skipped_bad_tags: u64,
}

/// Streaming iterator over the question rows of a `Posts.xml` dump.
///
/// Yields only rows with `PostTypeId="1"` and a non-empty `Tags` attribute,
/// in file order. Memory use is independent of dump size.
pub struct DumpReader<R: BufRead> {
    reader: Reader<R>,
    buf: Vec<u8>,
    depth: usize,
    done: bool,
    stats: ParseStats,
}

#[derive(Default)]
struct RowAttrs {
    id: Option<String>,
    post_type: Option<String>,
    date: Option<String>,
    title: Option<String>,
    body: Option<String>,
    tags: Option<String>,
}

impl<R: BufRead> DumpReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            reader: Reader::from_reader(input),
            buf: Vec::new(),
            depth: 0,
            done: false,
            stats: ParseStats::default(),
        }
    }

    pub fn stats(&self) -> &ParseStats {
        &self.stats
    }

    fn xml_error(&self, message: impl Into<String>) -> IngestError {
        IngestError::Xml {
            offset: self.reader.buffer_position(),
            message: message.into(),
        }
    }

    fn read_attrs(&self, e: &BytesStart<'_>) -> Result<RowAttrs> {
        let mut row = RowAttrs::default();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| self.xml_error(err.to_string()))?;
            let value = attr
                .unescape_value()
                .map_err(|err| self.xml_error(err.to_string()))?
                .into_owned();
            match attr.key.as_ref() {
                b"Id" => row.id = Some(value),
                b"PostTypeId" => row.post_type = Some(value),
                b"CreationDate" => row.date = Some(value),
                b"Title" => row.title = Some(value),
                b"Body" => row.body = Some(value),
                b"Tags" => row.tags = Some(value),
                _ => {}
            }
        }
        Ok(row)
    }

    fn convert(&mut self, row: RowAttrs) -> Option<RawPost> {
        self.stats.rows += 1;
        let id = row.id.as_deref().and_then(|s| s.trim().parse::<u64>().ok());
        let Some(id) = id.filter(|&id| id > 0) else {
            warn!(raw_id = ?row.id, "row skipped: missing or invalid Id");
            self.stats.skipped_missing_fields += 1;
            return None;
        };
        let Some(post_type) = row.post_type.as_deref().and_then(|s| s.trim().parse::<u32>().ok()) else {
            warn!(id, "row skipped: missing PostTypeId");
            self.stats.skipped_missing_fields += 1;
            return None;
        };
        if post_type != 1 {
            self.stats.non_questions += 1;
            return None;
        }
        let tags_attr = row.tags.unwrap_or_default();
        if tags_attr.trim().is_empty() {
            self.stats.untagged += 1;
            return None;
        }
        let Some(body) = row.body else {
            warn!(id, "row skipped: missing Body");
            self.stats.skipped_missing_fields += 1;
            return None;
        };
        let Some(creation_date) = row.date.as_deref().and_then(parse_date) else {
            warn!(id, raw_date = ?row.date, "row skipped: missing or invalid CreationDate");
            self.stats.skipped_missing_fields += 1;
            return None;
        };
        let tags = match parse_tags(&tags_attr) {
            Some(tags) if tags.len() <= MAX_TAGS => tags,
            _ => {
                warn!(id, tags = %tags_attr, "row skipped: bad Tags attribute");
                self.stats.skipped_bad_tags += 1;
                return None;
            }
        };
        self.stats.questions += 1;
        Some(RawPost {
            id,
            post_type,
            creation_date,
            title: row.title.unwrap_or_default(),
            body,
            tags,
        })
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<RawPost>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            let event = match self.reader.read_event_into(&mut self.buf) {
                Ok(ev) => ev.into_owned(),
                Err(err) => {
                    self.done = true;
                    return Some(Err(self.xml_error(err.to_string())));
                }
            };
            match event {
                Event::Start(e) => {
                    self.depth += 1;
                    if e.name().as_ref() == b"row" {
                        match self.read_attrs(&e) {
                            Ok(row) => {
                                if let Some(post) = self.convert(row) {
                                    return Some(Ok(post));
                                }
                            }
                            Err(err) => {
                                self.done = true;
                                return Some(Err(err));
                            }
                        }
                    }
                }
                Event::Empty(e) => {
                    if e.name().as_ref() == b"row" {
                        match self.read_attrs(&e) {
                            Ok(row) => {
                                if let Some(post) = self.convert(row) {
                                    return Some(Ok(post));
                                }
                            }
                            Err(err) => {
                                self.done = true;
                                return Some(Err(err));
                            }
                        }
                    }
                }
                Event::End(_) => {
                    self.depth = self.depth.saturating_sub(1);
                }
                Event::Eof => {
                    self.done = true;
                    if self.depth != 0 {
                        return Some(Err(self.xml_error("unexpected end of document")));
                    }
                }
                _ => {}
            }
        }
        None
    }
}

fn parse_date(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim().trim_end_matches('Z');
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").ok()
}

/// Decodes `<a><b>` (classic dumps) or `|a|b|` (newer dumps).
fn parse_tags(attr: &str) -> Option<Vec<String>> {
    let attr = attr.trim();
    let tags: Vec<String> = if let Some(inner) = attr.strip_prefix('<').and_then(|s| s.strip_suffix('>')) {
        inner.split("><").map(str::to_owned).collect()
    } else {
        let inner = attr.strip_prefix('|')?.strip_suffix('|')?;
        inner.split('|').map(str::to_owned).collect()
    };
    let valid = tags
        .iter()
        .all(|t| !t.is_empty() && !t.contains(['<', '>', '|']) && !t.chars().any(char::is_whitespace));
    valid.then_some(tags)
}
