use std::sync::LazyLock;

use regex::Regex;

static MARKUP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<!--[\s\S]*?-->|</?([A-Za-z][A-Za-z0-9]*)[^>]*>").unwrap());

/// Formatting elements that never separate words.
const INLINE: &[&str] = &[
    "a", "abbr", "b", "big", "code", "del", "em", "i", "ins", "kbd", "mark", "s", "small", "span", "strike", "strong",
    "sub", "sup", "tt", "u", "var",
];

/// Removes element tags and comments, then decodes entities. Block-level
/// tags become a single space so adjacent paragraphs do not fuse; inline
/// tags vanish and keep their inner text.
pub fn html_to_text(html: &str) -> String {
    let stripped = MARKUP.replace_all(html, |caps: &regex::Captures| match caps.get(1) {
        Some(name) if INLINE.contains(&name.as_str().to_ascii_lowercase().as_str()) => "",
        _ => " ",
    });
    decode_entities(&stripped)
}

/// Decodes the five XML entities and numeric character references.
/// Anything else (including invalid code points) is left verbatim.
pub fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let tail = &rest[amp..];
        match tail
            .find(';')
            .and_then(|semi| decode_one(&tail[1..semi]).map(|c| (c, semi)))
        {
            Some((c, semi)) => {
                out.push(c);
                rest = &tail[semi + 1..];
            }
            None => {
                out.push('&');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_one(name: &str) -> Option<char> {
    match name {
        "amp" => Some('&'),
        "lt" => Some('<'),
        "gt" => Some('>'),
        "quot" => Some('"'),
        "apos" => Some('\''),
        _ => {
            let num = name.strip_prefix('#')?;
            let code = match num.strip_prefix(['x', 'X']) {
                Some(hex) if !hex.is_empty() && hex.len() <= 8 => u32::from_str_radix(hex, 16).ok()?,
                Some(_) => return None,
                None if !num.is_empty() && num.len() <= 10 && num.bytes().all(|b| b.is_ascii_digit()) => {
                    num.parse().ok()?
                }
                None => return None,
            };
            char::from_u32(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predefined_and_numeric_entities() {
        assert_eq!(
            decode_entities("&lt;a href=&quot;x&quot;&gt; &amp; &apos;&#65;&#x42;&#X43;"),
            "<a href=\"x\"> & 'ABC"
        );
    }

    #[test]
    fn unknown_entities_pass_through() {
        assert_eq!(
            decode_entities("&nbsp; &copy; & x; &#xD800; &#;"),
            "&nbsp; &copy; & x; &#xD800; &#;"
        );
    }

    #[test]
    fn entity_decoding_is_single_pass() {
        assert_eq!(decode_entities("&amp;lt;"), "&lt;");
    }

    #[test]
    fn block_tags_separate_inline_tags_do_not() {
        assert_eq!(html_to_text("<p>a</p><p>b</p>"), " a  b ");
        assert_eq!(html_to_text("foo<b>bar</b><em>baz</em>"), "foobarbaz");
        assert_eq!(html_to_text("x<br/>y<!-- hidden -->z"), "x y z");
    }

    #[test]
    fn literal_angle_brackets_are_not_tags() {
        assert_eq!(html_to_text("a &lt;div&gt; b"), "a <div> b");
        assert_eq!(html_to_text("1 < 2"), "1 < 2");
    }
}
