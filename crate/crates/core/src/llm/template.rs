//! Plain-text prompt templates with `{slot}` markers and repeated blocks.
//!
//! A template file is a body followed by zero or more block definitions:
//!
//! ```text
//! Body text with a {scalar} and a {history} block slot.
//! @@block history
//! Header line, emitted once when the block has items.
//! @@item
//! fn_call="{fn_call}" status={status}
//! @@footer
//! Optional footer; may use scalar slots such as {reflection}.
//! @@end
//! ```
//!
//! A block bound to an empty list renders as nothing at all, header and
//! footer included. Only `{identifier}` is a slot; other braces are literal,
//! so JSON output-format examples need no escaping.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}`: missing binding for slot `{slot}`")]
    MissingBinding { template: String, slot: String },
    #[error("template `{template}` line {line}: {message}")]
    Syntax {
        template: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Block {
    header: Vec<Segment>,
    item: Vec<Segment>,
    footer: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    source: String,
    body: Vec<Segment>,
    blocks: BTreeMap<String, Block>,
}

/// Values for a render: scalar slots plus item lists for block slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings {
    scalars: BTreeMap<String, String>,
    lists: BTreeMap<String, Vec<BTreeMap<String, String>>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.scalars.insert(name.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, name: &str, value: impl Into<String>) {
        self.scalars.insert(name.to_string(), value.into());
    }

    pub fn list<I, K, V>(mut self, name: &str, items: I) -> Self
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let items = items
            .into_iter()
            .map(|item| item.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
            .collect();
        self.lists.insert(name.to_string(), items);
        self
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn parse_segments(text: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .char_indices()
            .find(|&(i, c)| if i == 0 { !is_ident_start(c) } else { !is_ident(c) })
            .map(|(i, _)| i)
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            if !literal.is_empty() {
                segments.push(Segment::Text(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Slot(after[..ident_len].to_string()));
            rest = &after[ident_len + 1..];
        } else {
            literal.push('{');
            rest = after;
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Text(literal));
    }
    segments
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        enum Section {
            Body,
            Header,
            Item,
            Footer,
            Closed,
        }
        let syntax = |line: usize, message: String| TemplateError::Syntax {
            template: name.to_string(),
            line,
            message,
        };

        let mut body = Vec::new();
        let mut blocks: BTreeMap<String, (Vec<&str>, Vec<&str>, Vec<&str>)> = BTreeMap::new();
        let mut current: Option<String> = None;
        let mut section = Section::Body;

        for (idx, line) in source.lines().enumerate() {
            let lineno = idx + 1;
            if let Some(directive) = line.strip_prefix("@@") {
                let mut parts = directive.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("block"), Some(block)) => {
                        if matches!(section, Section::Header | Section::Item | Section::Footer) {
                            return Err(syntax(lineno, "nested @@block".into()));
                        }
                        if blocks.contains_key(block) {
                            return Err(syntax(lineno, format!("duplicate block `{block}`")));
                        }
                        blocks.insert(block.to_string(), Default::default());
                        current = Some(block.to_string());
                        section = Section::Header;
                    }
                    (Some("item"), None) if matches!(section, Section::Header) => section = Section::Item,
                    (Some("footer"), None) if matches!(section, Section::Item) => section = Section::Footer,
                    (Some("end"), None) if matches!(section, Section::Item | Section::Footer) => {
                        current = None;
                        section = Section::Closed;
                    }
                    _ => return Err(syntax(lineno, format!("unexpected directive `@@{directive}`"))),
                }
                continue;
            }
            let target = current.as_ref().and_then(|b| blocks.get_mut(b));
            match (&section, target) {
                (Section::Body, _) => body.push(line),
                (Section::Header, Some(b)) => b.0.push(line),
                (Section::Item, Some(b)) => b.1.push(line),
                (Section::Footer, Some(b)) => b.2.push(line),
                (Section::Closed, _) if line.trim().is_empty() => {}
                _ => return Err(syntax(lineno, "text outside of body and blocks".into())),
            }
        }
        if current.is_some() {
            return Err(syntax(source.lines().count(), "unterminated block".into()));
        }

        let blocks = blocks
            .into_iter()
            .map(|(k, (h, i, f))| {
                (
                    k,
                    Block {
                        header: parse_segments(&h.join("\n")),
                        item: parse_segments(&i.join("\n")),
                        footer: parse_segments(&f.join("\n")),
                    },
                )
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            source: source.to_string(),
            body: parse_segments(body.join("\n").trim_end()),
            blocks,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Slot names referenced by the body (block slots included).
    pub fn slots(&self) -> Vec<&str> {
        self.body
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name.as_str()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    fn fill(
        &self,
        segments: &[Segment],
        item: Option<&BTreeMap<String, String>>,
        bindings: &Bindings,
        out: &mut String,
    ) -> Result<(), TemplateError> {
        for segment in segments {
            match segment {
                Segment::Text(text) => out.push_str(text),
                Segment::Slot(slot) => {
                    let value = item
                        .and_then(|i| i.get(slot))
                        .or_else(|| bindings.scalars.get(slot))
                        .ok_or_else(|| TemplateError::MissingBinding {
                            template: self.name.clone(),
                            slot: slot.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(())
    }

    /// Pure substitution. Every slot must be bound; block slots take a list.
    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        let mut out = String::new();
        for segment in &self.body {
            match segment {
                Segment::Slot(slot) if self.blocks.contains_key(slot) => {
                    let block = &self.blocks[slot];
                    let items = bindings.lists.get(slot).ok_or_else(|| TemplateError::MissingBinding {
                        template: self.name.clone(),
                        slot: slot.clone(),
                    })?;
                    if items.is_empty() {
                        continue;
                    }
                    if !block.header.is_empty() {
                        self.fill(&block.header, None, bindings, &mut out)?;
                        out.push('\n');
                    }
                    for (i, item) in items.iter().enumerate() {
                        if i > 0 {
                            out.push('\n');
                        }
                        self.fill(&block.item, Some(item), bindings, &mut out)?;
                    }
                    if !block.footer.is_empty() {
                        out.push('\n');
                        self.fill(&block.footer, None, bindings, &mut out)?;
                    }
                }
                other => self.fill(std::slice::from_ref(other), None, bindings, &mut out)?,
            }
        }
        Ok(collapse_blank_runs(out.trim_end()))
    }
}

/// Omitted blocks leave stacked blank lines behind; fold runs of more than
/// one blank line into one.
fn collapse_blank_runs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut blank = 0;
    for line in text.split('\n') {
        if line.trim().is_empty() {
            blank += 1;
            if blank > 1 {
                continue;
            }
        } else {
            blank = 0;
        }
        out.push_str(line);
        out.push('\n');
    }
    out.pop();
    out
}
