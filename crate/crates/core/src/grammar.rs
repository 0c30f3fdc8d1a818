//! Tagged generator output.
//!
//! Wire format, with no whitespace emitted between tags:
//!
//! ```text
//! <think>{reasoning}</think><answer><num>{N}</num><point>{t},{x},{y}</point>...</answer>
//! ```
//!
//! `N` must equal the number of `<point>` entries, timesteps are decimal
//! integers in strictly increasing order, and coordinates are fixed-point
//! with exactly two decimals. The parser tolerates whitespace between tags
//! and nowhere else.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggedPoint {
    pub t: u32,
    pub x: f64,
    pub y: f64,
}

impl TaggedPoint {
    pub fn new(t: u32, x: f64, y: f64) -> Self {
        Self { t, x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedOutput {
    pub reasoning: String,
    pub num_declared: usize,
    pub keypoints: Vec<TaggedPoint>,
}

impl TaggedOutput {
    /// Builds an output whose declared count matches its keypoints.
    pub fn new(reasoning: impl Into<String>, keypoints: Vec<TaggedPoint>) -> Self {
        Self {
            reasoning: reasoning.into(),
            num_declared: keypoints.len(),
            keypoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GrammarError {
    #[error("expected <think> at offset {0}")]
    MissingThink(usize),
    #[error("unclosed think tag")]
    UnclosedThink,
    #[error("tag delimiter inside reasoning")]
    TagInReasoning,
    #[error("expected <answer> at offset {0}")]
    MissingAnswer(usize),
    #[error("expected <num> at offset {0}")]
    MissingNum(usize),
    #[error("unclosed num tag")]
    UnclosedNum,
    #[error("malformed num value {0:?}")]
    BadNum(String),
    #[error("unclosed point tag")]
    UnclosedPoint,
    #[error("malformed point payload {0:?}")]
    BadPoint(String),
    #[error("unclosed answer tag")]
    UnclosedAnswer,
    #[error("unexpected content at offset {0}")]
    UnexpectedContent(usize),
    #[error("num/count mismatch: declared {declared}, found {found}")]
    NumCountMismatch { declared: usize, found: usize },
    #[error("timesteps not strictly increasing at point {0}")]
    NonIncreasingTimestep(usize),
    #[error("trailing content after </answer>")]
    TrailingContent,
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
}

fn check_invariants(o: &TaggedOutput) -> Result<(), GrammarError> {
    if o.reasoning.contains(['<', '>']) {
        return Err(GrammarError::TagInReasoning);
    }
    if o.num_declared != o.keypoints.len() {
        return Err(GrammarError::NumCountMismatch {
            declared: o.num_declared,
            found: o.keypoints.len(),
        });
    }
    for (i, p) in o.keypoints.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(GrammarError::NonFinite(i));
        }
        if i > 0 && p.t <= o.keypoints[i - 1].t {
            return Err(GrammarError::NonIncreasingTimestep(i));
        }
    }
    Ok(())
}

/// Renders an output in the wire format.
pub fn serialize_output(o: &TaggedOutput) -> Result<String, GrammarError> {
    check_invariants(o)?;
    let mut s = String::with_capacity(64 + o.reasoning.len() + 32 * o.keypoints.len());
    s.push_str("<think>");
    s.push_str(&o.reasoning);
    s.push_str("</think><answer><num>");
    let _ = write!(s, "{}", o.num_declared);
    s.push_str("</num>");
    for p in &o.keypoints {
        let _ = write!(s, "<point>{},{:.2},{:.2}</point>", p.t, p.x, p.y);
    }
    s.push_str("</answer>");
    Ok(s)
}

/// Rounds a coordinate to the two-decimal grid used on the wire.
pub fn quantize(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, tag: &str) -> bool {
        if self.rest().starts_with(tag) {
            self.pos += tag.len();
            true
        } else {
            false
        }
    }

    /// Content up to `close`, consuming the closing tag.
    fn until(&mut self, close: &str) -> Option<&'a str> {
        let rest = self.rest();
        let end = rest.find(close)?;
        self.pos += end + close.len();
        Some(&rest[..end])
    }
}

fn parse_uint(s: &str) -> Option<u64> {
    let ok = !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_digit())
        && (s.len() == 1 || !s.starts_with('0'));
    if ok {
        s.parse().ok()
    } else {
        None
    }
}

fn parse_fixed2(s: &str) -> Option<f64> {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = body.split_once('.')?;
    if frac.len() != 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    parse_uint(int)?;
    s.parse().ok()
}

fn parse_point(payload: &str) -> Option<TaggedPoint> {
    let mut parts = payload.split(',');
    let t = parse_uint(parts.next()?)?;
    let x = parse_fixed2(parts.next()?)?;
    let y = parse_fixed2(parts.next()?)?;
    if parts.next().is_some() {
        return None;
    }
    Some(TaggedPoint {
        t: u32::try_from(t).ok()?,
        x,
        y,
    })
}

/// Parses generator text; the error is the first grammar violation found.
pub fn parse_output(text: &str) -> Result<TaggedOutput, GrammarError> {
    let mut c = Cursor { src: text, pos: 0 };
    c.skip_ws();
    if !c.eat("<think>") {
        return Err(GrammarError::MissingThink(c.pos));
    }
    let reasoning = c.until("</think>").ok_or(GrammarError::UnclosedThink)?;
    if reasoning.contains(['<', '>']) {
        return Err(GrammarError::TagInReasoning);
    }
    c.skip_ws();
    if !c.eat("<answer>") {
        return Err(GrammarError::MissingAnswer(c.pos));
    }
    c.skip_ws();
    if !c.eat("<num>") {
        return Err(GrammarError::MissingNum(c.pos));
    }
    let num_text = c.until("</num>").ok_or(GrammarError::UnclosedNum)?;
    let num_declared = parse_uint(num_text)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| GrammarError::BadNum(num_text.to_string()))?;
    let mut keypoints = Vec::new();
    loop {
        c.skip_ws();
        if c.eat("<point>") {
            let payload = c.until("</point>").ok_or(GrammarError::UnclosedPoint)?;
            let p =
                parse_point(payload).ok_or_else(|| GrammarError::BadPoint(payload.to_string()))?;
            if let Some(prev) = keypoints.last() {
                let prev: &TaggedPoint = prev;
                if p.t <= prev.t {
                    return Err(GrammarError::NonIncreasingTimestep(keypoints.len()));
                }
            }
            keypoints.push(p);
        } else if c.eat("</answer>") {
            break;
        } else if c.rest().is_empty() {
            return Err(GrammarError::UnclosedAnswer);
        } else {
            return Err(GrammarError::UnexpectedContent(c.pos));
        }
    }
    c.skip_ws();
    if !c.rest().is_empty() {
        return Err(GrammarError::TrailingContent);
    }
    if num_declared != keypoints.len() {
        return Err(GrammarError::NumCountMismatch {
            declared: num_declared,
            found: keypoints.len(),
        });
    }
    Ok(TaggedOutput {
        reasoning: reasoning.to_string(),
        num_declared,
        keypoints,
    })
}

/// 1 when the text parses under the grammar, else 0.
pub fn format_reward(text: &str) -> f64 {
    if parse_output(text).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// Every well-formed `<point>` payload in the text, sorted by timestep with
/// duplicates dropped. Used to salvage keypoints from output that fails
/// the strict grammar.
pub fn extract_points(text: &str) -> Vec<TaggedPoint> {
    let mut out: Vec<TaggedPoint> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("<point>") {
        rest = &rest[start + "<point>".len()..];
        let Some(end) = rest.find("</point>") else {
            break;
        };
        if let Some(p) = parse_point(&rest[..end]).filter(|p| p.x.is_finite() && p.y.is_finite()) {
            out.push(p);
        }
        rest = &rest[end + "</point>".len()..];
    }
    out.sort_by_key(|p| p.t);
    out.dedup_by_key(|p| p.t);
    out
}

/// Whitespace-delimited token count of a reasoning string.
pub fn reasoning_tokens(reasoning: &str) -> usize {
    reasoning.split_whitespace().count()
}

/// Reasoning length of raw generator text.
///
/// Counts the content of the think block when one is opened (up to its
/// closing tag, or the end of text when unclosed); text without a think
/// block is counted whole.
pub fn cot_length(text: &str) -> usize {
    match text.find("<think>") {
        Some(start) => {
            let body = &text[start + "<think>".len()..];
            let end = body.find("</think>").unwrap_or(body.len());
            reasoning_tokens(&body[..end])
        }
        None => reasoning_tokens(text),
    }
}

pub fn cot_length_of(o: &TaggedOutput) -> usize {
    reasoning_tokens(&o.reasoning)
}
