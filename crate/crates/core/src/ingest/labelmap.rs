use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, IngestError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u32,
    pub name: String,
}

/// Class-name to integer-id mapping. Ids run contiguously from 1; 0 is
/// the background class and never appears.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabelEntry>", into = "Vec<LabelEntry>")]
pub struct LabelMap {
    entries: Vec<LabelEntry>,
}

impl LabelMap {
    pub fn new(entries: Vec<LabelEntry>) -> Result<Self, IngestError> {
        let mut names = BTreeSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i + 1 {
                return Err(IngestError::Validation(format!(
                    "labelmap ids must be contiguous from 1; entry {i} has id {}",
                    e.id
                )));
            }
            if e.name.is_empty() {
                return Err(IngestError::Validation(format!("labelmap id {} has empty name", e.id)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(IngestError::Validation(format!("duplicate labelmap name `{}`", e.name)));
            }
        }
        Ok(Self { entries })
    }

    /// Assigns ids 1..N to `names` in the given order.
    pub fn from_names<I, S>(names: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            names
                .into_iter()
                .enumerate()
                .map(|(i, n)| LabelEntry {
                    id: i as u32 + 1,
                    name: n.into(),
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.entries.get(i as usize))
            .map(|e| e.name.as_str())
    }

    pub fn contains_id(&self, id: u32) -> bool {
        id >= 1 && (id as usize) <= self.entries.len()
    }
}

impl TryFrom<Vec<LabelEntry>> for LabelMap {
    type Error = IngestError;

    fn try_from(entries: Vec<LabelEntry>) -> Result<Self, Self::Error> {
        Self::new(entries)
    }
}

impl From<LabelMap> for Vec<LabelEntry> {
    fn from(lm: LabelMap) -> Self {
        lm.entries
    }
}

/// Distinct class names across all boxes, sorted, numbered from 1.
pub fn build_labelmap(images: &[AnnotatedImage]) -> Result<LabelMap, IngestError> {
    let names: BTreeSet<&str> = images
        .iter()
        .flat_map(|img| img.boxes.iter().map(|b| b.class_name.as_str()))
        .collect();
    if names.is_empty() {
        return Err(IngestError::Validation("no boxes, cannot build a labelmap".into()));
    }
    LabelMap::from_names(names)
}

fn escape(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_labelmap_text(lm: &LabelMap) -> String {
    lm.entries
        .iter()
        .map(|e| format!("item {{\n  id: {}\n  name: '{}'\n}}\n", e.id, escape(&e.name)))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, PartialEq)]
enum Token {
    Ident(String),
    Str(String),
    Int(i64),
    Open,
    Close,
    Colon,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, IngestError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1;
    let fail = |line, message: String| IngestError::Labelmap { line, message };
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                line += 1;
                chars.next();
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            '#' => {
                while chars.peek().is_some_and(|&c| c != '\n') {
                    chars.next();
                }
            }
            '{' => {
                chars.next();
                out.push((line, Token::Open));
            }
            '}' => {
                chars.next();
                out.push((line, Token::Close));
            }
            ':' => {
                chars.next();
                out.push((line, Token::Colon));
            }
            '\'' | '"' => {
                let quote = c;
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None | Some('\n') => return Err(fail(line, "unterminated string".into())),
                        Some('\\') => match chars.next() {
                            Some('n') => s.push('\n'),
                            Some(e @ ('\\' | '\'' | '"')) => s.push(e),
                            other => return Err(fail(line, format!("bad escape {other:?}"))),
                        },
                        Some(c) if c == quote => break,
                        Some(c) => s.push(c),
                    }
                }
                out.push((line, Token::Str(s)));
            }
            c if c.is_ascii_digit() || c == '-' => {
                let mut s = String::new();
                while chars.peek().is_some_and(|c| c.is_ascii_digit() || *c == '-') {
                    s.push(chars.next().unwrap());
                }
                let v = s.parse().map_err(|_| fail(line, format!("bad integer `{s}`")))?;
                out.push((line, Token::Int(v)));
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut s = String::new();
                while chars.peek().is_some_and(|c| c.is_alphanumeric() || *c == '_') {
                    s.push(chars.next().unwrap());
                }
                out.push((line, Token::Ident(s)));
            }
            other => return Err(fail(line, format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

/// Parses the `item { id: N name: '...' }` labelmap text format. Unknown
/// keys such as `display_name` are accepted and ignored.
pub fn parse_labelmap_text(text: &str) -> Result<LabelMap, IngestError> {
    let tokens = tokenize(text)?;
    let mut it = tokens.into_iter().peekable();
    let mut entries = Vec::new();
    let fail = |line, message: &str| IngestError::Labelmap {
        line,
        message: message.to_string(),
    };
    while let Some((line, tok)) = it.next() {
        if tok != Token::Ident("item".into()) {
            return Err(fail(line, "expected `item`"));
        }
        match it.next() {
            Some((_, Token::Open)) => {}
            _ => return Err(fail(line, "expected `{` after item")),
        }
        let (mut id, mut name) = (None, None);
        loop {
            match it.next() {
                Some((_, Token::Close)) => break,
                Some((line, Token::Ident(key))) => {
                    if !matches!(it.next(), Some((_, Token::Colon))) {
                        return Err(fail(line, "expected `:`"));
                    }
                    let value = it.next().ok_or_else(|| fail(line, "missing value"))?.1;
                    match (key.as_str(), value) {
                        ("id", Token::Int(v)) => {
                            id = Some(u32::try_from(v).map_err(|_| fail(line, "id out of range"))?)
                        }
                        ("name", Token::Str(s)) => name = Some(s),
                        ("id" | "name", _) => return Err(fail(line, "wrong value type")),
                        _ => {}
                    }
                }
                Some((line, _)) => return Err(fail(line, "expected key or `}`")),
                None => return Err(fail(line, "unterminated item")),
            }
        }
        match (id, name) {
            (Some(id), Some(name)) => entries.push(LabelEntry { id, name }),
            _ => return Err(fail(line, "item needs both id and name")),
        }
    }
    entries.sort_by_key(|e| e.id);
    LabelMap::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::BoundingBox;
    use proptest::prelude::*;

    fn img(classes: &[&str]) -> AnnotatedImage {
        AnnotatedImage {
            filename: "x.png".into(),
            width: 10,
            height: 10,
            boxes: classes
                .iter()
                .map(|c| BoundingBox {
                    xmin: 0.0,
                    ymin: 0.0,
                    xmax: 1.0,
                    ymax: 1.0,
                    class_name: c.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn lexicographic_ids() {
        let lm = build_labelmap(&[img(&["dog"]), img(&["cat", "dog"])]).unwrap();
        assert_eq!(lm, LabelMap::from_names(["cat", "dog"]).unwrap());
        assert_eq!(lm.id_of("dog"), Some(2));
        assert_eq!(lm.name_of(1), Some("cat"));
        assert_eq!(lm.name_of(0), None);
    }

    #[test]
    fn single_class_and_empty() {
        assert_eq!(
            build_labelmap(&[img(&["person"])]).unwrap().entries(),
            &[LabelEntry { id: 1, name: "person".into() }]
        );
        assert!(matches!(build_labelmap(&[img(&[])]), Err(IngestError::Validation(_))));
    }

    #[test]
    fn render_single_entry_exact() {
        let lm = LabelMap::from_names(["cat"]).unwrap();
        let text = render_labelmap_text(&lm);
        assert_eq!(text, "item {\n  id: 1\n  name: 'cat'\n}\n");
        assert_eq!(parse_labelmap_text(&text).unwrap(), lm);
    }

    #[test]
    fn render_two_entries_in_order() {
        let lm = LabelMap::from_names(["cat", "dog"]).unwrap();
        assert_eq!(
            render_labelmap_text(&lm),
            "item {\n  id: 1\n  name: 'cat'\n}\n\nitem {\n  id: 2\n  name: 'dog'\n}\n"
        );
    }

    #[test]
    fn apostrophe_is_escaped() {
        let lm = LabelMap::from_names(["o'brien"]).unwrap();
        let text = render_labelmap_text(&lm);
        assert!(text.contains(r"name: 'o\'brien'"));
        assert_eq!(parse_labelmap_text(&text).unwrap(), lm);
    }

    #[test]
    fn parses_upstream_style_with_display_name() {
        let text = "# classes\nitem {\n  name: \"dog\"\n  id: 2\n  display_name: \"Dog\"\n}\nitem { id: 1 name: 'cat' }\n";
        assert_eq!(parse_labelmap_text(text).unwrap(), LabelMap::from_names(["cat", "dog"]).unwrap());
    }

    #[test]
    fn rejects_gaps_and_id_zero() {
        assert!(parse_labelmap_text("item { id: 0 name: 'a' }").is_err());
        assert!(parse_labelmap_text("item { id: 1 name: 'a' }\nitem { id: 3 name: 'b' }").is_err());
        assert!(parse_labelmap_text("item { id: 1 }").is_err());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(names in proptest::collection::btree_set("[a-zA-Z0-9 '\\\\_.-]{1,12}", 1..8)) {
            let lm = LabelMap::from_names(names).unwrap();
            prop_assert_eq!(parse_labelmap_text(&render_labelmap_text(&lm)).unwrap(), lm);
        }

        #[test]
        fn build_is_permutation_invariant(mut classes in proptest::collection::vec("[a-e]{1,3}", 1..20), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let images: Vec<_> = classes.iter().map(|c| img(&[c.as_str()])).collect();
            let a = build_labelmap(&images).unwrap();
            classes.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<_> = classes.iter().map(|c| img(&[c.as_str()])).collect();
            prop_assert_eq!(build_labelmap(&shuffled).unwrap(), a);
        }
    }
}
