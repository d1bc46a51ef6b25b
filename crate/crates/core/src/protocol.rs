//! Control-token grammar for executor output.
//!
//! A completion is a flat sequence of reasoning text and tool invocations.
//! An invocation is an opening tag (`<search>`, `<perceive>`, `<code>`), a
//! payload, and the matching closing tag. Tags never nest: once an opener is
//! seen, everything up to its own closer is payload, including other tags.
//! A closer without an opener is ordinary reasoning text.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToolKind {
    Search,
    Perceive,
    Code,
}

impl ToolKind {
    pub const ALL: [ToolKind; 3] = [ToolKind::Search, ToolKind::Perceive, ToolKind::Code];

    /// Lowercase tag name, also used on the command line.
    pub fn tag_name(self) -> &'static str {
        match self {
            ToolKind::Search => "search",
            ToolKind::Perceive => "perceive",
            ToolKind::Code => "code",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            ToolKind::Search => "<search>",
            ToolKind::Perceive => "<perceive>",
            ToolKind::Code => "<code>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            ToolKind::Search => "</search>",
            ToolKind::Perceive => "</perceive>",
            ToolKind::Code => "</code>",
        }
    }

    /// The three closers, in the order they are passed as stop sequences.
    pub fn closers() -> Vec<String> {
        Self::ALL.iter().map(|k| k.close_tag().to_string()).collect()
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolKind::Search => "Search",
            ToolKind::Perceive => "Perceive",
            ToolKind::Code => "Code",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown tool name '{0}'")]
pub struct UnknownTool(pub String);

impl FromStr for ToolKind {
    type Err = UnknownTool;

    /// Case-insensitive, surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let name = s.trim();
        ToolKind::ALL
            .into_iter()
            .find(|k| k.tag_name().eq_ignore_ascii_case(name))
            .ok_or_else(|| UnknownTool(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Reasoning,
    Invocation,
    /// An opening tag with no closer before end of input. Always the last segment.
    Unterminated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Reasoning text verbatim, or the trimmed invocation payload.
    pub text: String,
    pub tool: Option<ToolKind>,
    /// Byte range of the raw source text this segment covers, tags included.
    pub span: Range<usize>,
}

impl Segment {
    pub fn is_invocation(&self) -> bool {
        self.kind == SegmentKind::Invocation
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub tool: ToolKind,
    pub payload: String,
    pub span: Range<usize>,
}

fn trim_payload(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_ascii_whitespace())
}

/// Earliest opening tag at or after `from`.
fn next_open(text: &str, from: usize) -> Option<(usize, ToolKind)> {
    let hay = &text[from..];
    let mut best: Option<(usize, ToolKind)> = None;
    for kind in ToolKind::ALL {
        if let Some(i) = hay.find(kind.open_tag()) {
            if best.is_none_or(|(b, _)| i < b) {
                best = Some((i, kind));
            }
        }
    }
    best.map(|(i, k)| (from + i, k))
}

/// Lazy single-pass segmenter.
pub struct Scanner<'a> {
    text: &'a str,
    pos: usize,
    pending: Option<Segment>,
}

impl<'a> Scanner<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            text,
            pos: 0,
            pending: None,
        }
    }
}

impl Iterator for Scanner<'_> {
    type Item = Segment;

    fn next(&mut self) -> Option<Segment> {
        if let Some(seg) = self.pending.take() {
            return Some(seg);
        }
        let text = self.text;
        if self.pos >= text.len() {
            return None;
        }
        let Some((open_at, tool)) = next_open(text, self.pos) else {
            let seg = Segment {
                kind: SegmentKind::Reasoning,
                text: text[self.pos..].to_string(),
                tool: None,
                span: self.pos..text.len(),
            };
            self.pos = text.len();
            return Some(seg);
        };

        let body_start = open_at + tool.open_tag().len();
        let tagged = match text[body_start..].find(tool.close_tag()) {
            Some(rel) => {
                let close_at = body_start + rel;
                let end = close_at + tool.close_tag().len();
                Segment {
                    kind: SegmentKind::Invocation,
                    text: trim_payload(&text[body_start..close_at]).to_string(),
                    tool: Some(tool),
                    span: open_at..end,
                }
            }
            None => Segment {
                kind: SegmentKind::Unterminated,
                text: trim_payload(&text[body_start..]).to_string(),
                tool: Some(tool),
                span: open_at..text.len(),
            },
        };

        let reasoning = (open_at > self.pos).then(|| Segment {
            kind: SegmentKind::Reasoning,
            text: text[self.pos..open_at].to_string(),
            tool: None,
            span: self.pos..open_at,
        });
        self.pos = tagged.span.end;
        match reasoning {
            Some(r) => {
                self.pending = Some(tagged);
                Some(r)
            }
            None => Some(tagged),
        }
    }
}

/// Split `text` into reasoning and invocation segments whose spans tile the input.
pub fn scan(text: &str) -> Vec<Segment> {
    Scanner::new(text).collect()
}

/// The earliest complete invocation, if any.
pub fn first_invocation(text: &str) -> Option<Invocation> {
    Scanner::new(text).find(Segment::is_invocation).map(|seg| Invocation {
        tool: seg.tool.expect("invocation segments carry a tool"),
        payload: seg.text,
        span: seg.span,
    })
}

/// What the executor should act on in one completion: the first complete
/// invocation, or failing that a trailing unterminated one.
pub fn first_call(text: &str) -> Option<(Invocation, bool)> {
    Scanner::new(text)
        .find(|s| s.kind != SegmentKind::Reasoning)
        .map(|seg| {
            let complete = seg.kind == SegmentKind::Invocation;
            (
                Invocation {
                    tool: seg.tool.expect("tagged segments carry a tool"),
                    payload: seg.text,
                    span: seg.span,
                },
                complete,
            )
        })
}
