use std::fmt;
use std::str::FromStr;

use super::BusError;

/// Topics are '/'-separated, non-empty segments with no whitespace and no
/// wildcard characters.
pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    let bad = |why: &str| Err(BusError::InvalidTopic(format!("{topic:?}: {why}")));
    if topic.is_empty() {
        return bad("empty");
    }
    if topic.chars().any(char::is_whitespace) {
        return bad("contains whitespace");
    }
    for seg in topic.split('/') {
        if seg.is_empty() {
            return bad("empty segment");
        }
        if seg.contains('*') || seg.contains('#') {
            return bad("wildcard in topic");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    /// `*`: exactly one segment.
    One,
    /// `#`: any number (including zero) of trailing segments.
    Rest,
}

#[derive(Clone, PartialEq, Eq)]
pub struct TopicPattern {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicPattern {
    pub fn parse(pattern: &str) -> Result<Self, BusError> {
        let bad = |why: &str| Err(BusError::InvalidPattern(format!("{pattern:?}: {why}")));
        if pattern.is_empty() {
            return bad("empty");
        }
        if pattern.chars().any(char::is_whitespace) {
            return bad("contains whitespace");
        }
        let parts: Vec<&str> = pattern.split('/').collect();
        let mut segments = Vec::with_capacity(parts.len());
        for (i, seg) in parts.iter().enumerate() {
            let s = match *seg {
                "" => return bad("empty segment"),
                "*" => Segment::One,
                "#" if i + 1 == parts.len() => Segment::Rest,
                "#" => return bad("'#' is only allowed as the final segment"),
                s if s.contains('*') || s.contains('#') => {
                    return bad("wildcards must occupy a whole segment")
                }
                s => Segment::Literal(s.to_string()),
            };
            segments.push(s);
        }
        Ok(TopicPattern {
            raw: pattern.to_string(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut parts = topic.split('/');
        for seg in &self.segments {
            match seg {
                Segment::Rest => return true,
                Segment::One => {
                    if parts.next().is_none() {
                        return false;
                    }
                }
                Segment::Literal(lit) => match parts.next() {
                    Some(p) if p == lit => {}
                    _ => return false,
                },
            }
        }
        parts.next().is_none()
    }
}

impl fmt::Debug for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TopicPattern({})", self.raw)
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl FromStr for TopicPattern {
    type Err = BusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicPattern::parse(s)
    }
}
