//! Deterministic motion captions and their inverse parser.
//!
//! Sentence style:
//! `The camera trucks right and dollies forward while panning left for a long stretch, then stays still briefly.`
//!
//! Terse style:
//! `truck right + dolly forward + pan left (long); still (brief)`

use serde::{Deserialize, Serialize};

use super::{AxisMotion, MotionTag, RotationAction, TagSegment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStyle {
    #[default]
    Sentence,
    Terse,
}

/// Share of the tagged frames a segment covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    /// Under 25% of the frames.
    Brief,
    Normal,
    /// Over 60% of the frames.
    Long,
}

pub fn duration_bucket(len: usize, total: usize) -> Duration {
    let frac = len as f64 / total.max(1) as f64;
    if frac < 0.25 {
        Duration::Brief
    } else if frac > 0.6 {
        Duration::Long
    } else {
        Duration::Normal
    }
}

/// One clause recovered from a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedSegment {
    pub tag: MotionTag,
    pub duration: Duration,
}

const SENTENCE_PREFIX: &str = "The camera ";
const SENTENCE_JOIN: &str = ", then ";
const TERSE_JOIN: &str = "; ";

// (third person, gerund, base) verb forms per translation direction.
fn translation_phrases(tag: &MotionTag) -> Vec<[&'static str; 2]> {
    let mut out = Vec::new();
    match tag.lateral {
        AxisMotion::Negative => out.push(["trucks left", "truck left"]),
        AxisMotion::Positive => out.push(["trucks right", "truck right"]),
        AxisMotion::Static => {}
    }
    match tag.vertical {
        AxisMotion::Negative => out.push(["pedestals up", "pedestal up"]),
        AxisMotion::Positive => out.push(["pedestals down", "pedestal down"]),
        AxisMotion::Static => {}
    }
    match tag.depth {
        AxisMotion::Positive => out.push(["dollies forward", "dolly forward"]),
        AxisMotion::Negative => out.push(["dollies backward", "dolly backward"]),
        AxisMotion::Static => {}
    }
    out
}

const TRANSLATION_TABLE: [(&str, &str, usize, AxisMotion); 6] = [
    ("trucks left", "truck left", 0, AxisMotion::Negative),
    ("trucks right", "truck right", 0, AxisMotion::Positive),
    ("pedestals up", "pedestal up", 1, AxisMotion::Negative),
    ("pedestals down", "pedestal down", 1, AxisMotion::Positive),
    ("dollies forward", "dolly forward", 2, AxisMotion::Positive),
    ("dollies backward", "dolly backward", 2, AxisMotion::Negative),
];

// (third person, gerund, base)
const ROTATION_TABLE: [(&str, &str, &str, RotationAction); 6] = [
    ("tilts up", "tilting up", "tilt up", RotationAction::PitchUp),
    ("tilts down", "tilting down", "tilt down", RotationAction::PitchDown),
    ("pans left", "panning left", "pan left", RotationAction::YawLeft),
    ("pans right", "panning right", "pan right", RotationAction::YawRight),
    ("rolls left", "rolling left", "roll left", RotationAction::RollLeft),
    ("rolls right", "rolling right", "roll right", RotationAction::RollRight),
];

fn rotation_forms(r: RotationAction) -> Option<(&'static str, &'static str, &'static str)> {
    ROTATION_TABLE.iter().find(|e| e.3 == r).map(|e| (e.0, e.1, e.2))
}

fn sentence_clause(tag: &MotionTag, duration: Duration) -> String {
    let mut clause = if tag.is_still() {
        "stays still".to_string()
    } else {
        let trans: Vec<&str> = translation_phrases(tag).iter().map(|p| p[0]).collect();
        let rot = rotation_forms(tag.rotation);
        match (trans.is_empty(), rot) {
            (false, Some((_, gerund, _))) => format!("{} while {gerund}", trans.join(" and ")),
            (false, None) => trans.join(" and "),
            (true, Some((third, _, _))) => third.to_string(),
            (true, None) => unreachable!("non-still tag has some motion"),
        }
    };
    match duration {
        Duration::Brief => clause.push_str(" briefly"),
        Duration::Long => clause.push_str(" for a long stretch"),
        Duration::Normal => {}
    }
    clause
}

fn terse_clause(tag: &MotionTag, duration: Duration) -> String {
    let mut parts: Vec<&str> = translation_phrases(tag).iter().map(|p| p[1]).collect();
    if let Some((_, _, base)) = rotation_forms(tag.rotation) {
        parts.push(base);
    }
    let mut clause = if parts.is_empty() { "still".to_string() } else { parts.join(" + ") };
    match duration {
        Duration::Brief => clause.push_str(" (brief)"),
        Duration::Long => clause.push_str(" (long)"),
        Duration::Normal => {}
    }
    clause
}

/// Renders segments as a caption. Every segment is mentioned in temporal
/// order, including still ones, so the text can be parsed back.
pub fn caption_from_tags(segments: &[TagSegment], style: CaptionStyle) -> Result<String> {
    if segments.is_empty() {
        return Err(Error::invalid("caption", "at least one segment is required"));
    }
    let total: usize = segments.iter().map(TagSegment::len).sum();
    // A single segment always spans everything; say so only when it moves.
    let clauses = segments.iter().map(|s| {
        let d = duration_bucket(s.len(), total);
        let d = if segments.len() == 1 && s.tag.is_still() { Duration::Normal } else { d };
        match style {
            CaptionStyle::Sentence => sentence_clause(&s.tag, d),
            CaptionStyle::Terse => terse_clause(&s.tag, d),
        }
    });
    Ok(match style {
        CaptionStyle::Sentence => format!("{SENTENCE_PREFIX}{}.", clauses.collect::<Vec<_>>().join(SENTENCE_JOIN)),
        CaptionStyle::Terse => clauses.collect::<Vec<_>>().join(TERSE_JOIN),
    })
}

/// Inverse of [`caption_from_tags`] for either style.
pub fn parse_caption(text: &str) -> Result<Vec<ParsedSegment>> {
    let text = text.trim();
    let err = |reason: &str| Error::parse(format!("caption {text:?}"), reason.to_string());
    if let Some(body) = text.strip_prefix(SENTENCE_PREFIX) {
        let body = body.strip_suffix('.').ok_or_else(|| err("missing final period"))?;
        body.split(SENTENCE_JOIN).map(|c| parse_sentence_clause(c).ok_or_else(|| err(c))).collect()
    } else {
        text.split(TERSE_JOIN).map(|c| parse_terse_clause(c).ok_or_else(|| err(c))).collect()
    }
}

fn apply_translation(tag: &mut MotionTag, axis: usize, motion: AxisMotion) -> Option<()> {
    let slot = match axis {
        0 => &mut tag.lateral,
        1 => &mut tag.vertical,
        _ => &mut tag.depth,
    };
    if *slot != AxisMotion::Static {
        return None;
    }
    *slot = motion;
    Some(())
}

fn parse_sentence_clause(clause: &str) -> Option<ParsedSegment> {
    let (clause, duration) = if let Some(c) = clause.strip_suffix(" briefly") {
        (c, Duration::Brief)
    } else if let Some(c) = clause.strip_suffix(" for a long stretch") {
        (c, Duration::Long)
    } else {
        (clause, Duration::Normal)
    };
    if clause == "stays still" {
        return Some(ParsedSegment { tag: MotionTag::STILL, duration });
    }
    let mut tag = MotionTag::STILL;
    let (trans, gerund) = match clause.split_once(" while ") {
        Some((t, g)) => (t, Some(g)),
        None => (clause, None),
    };
    if let Some(g) = gerund {
        tag.rotation = ROTATION_TABLE.iter().find(|e| e.1 == g)?.3;
    } else if let Some(e) = ROTATION_TABLE.iter().find(|e| e.0 == trans) {
        tag.rotation = e.3;
        return Some(ParsedSegment { tag, duration });
    }
    for part in trans.split(" and ") {
        let e = TRANSLATION_TABLE.iter().find(|e| e.0 == part)?;
        apply_translation(&mut tag, e.2, e.3)?;
    }
    Some(ParsedSegment { tag, duration })
}

fn parse_terse_clause(clause: &str) -> Option<ParsedSegment> {
    let (clause, duration) = if let Some(c) = clause.strip_suffix(" (brief)") {
        (c, Duration::Brief)
    } else if let Some(c) = clause.strip_suffix(" (long)") {
        (c, Duration::Long)
    } else {
        (clause, Duration::Normal)
    };
    let mut tag = MotionTag::STILL;
    if clause == "still" {
        return Some(ParsedSegment { tag, duration });
    }
    for part in clause.split(" + ") {
        if let Some(e) = TRANSLATION_TABLE.iter().find(|e| e.1 == part) {
            apply_translation(&mut tag, e.2, e.3)?;
        } else {
            let e = ROTATION_TABLE.iter().find(|e| e.2 == part)?;
            if tag.rotation != RotationAction::Static {
                return None;
            }
            tag.rotation = e.3;
        }
    }
    Some(ParsedSegment { tag, duration })
}

/// Every word the caption grammar can emit, for vocabulary construction.
pub(crate) fn caption_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec![
        "the", "camera", "stays", "still", "briefly", "for", "a", "long", "stretch", "then", "and", "while", "brief",
    ];
    for (third, base, _, _) in TRANSLATION_TABLE {
        words.extend(third.split(' '));
        words.extend(base.split(' '));
    }
    for (third, gerund, base, _) in ROTATION_TABLE {
        words.extend(third.split(' '));
        words.extend(gerund.split(' '));
        words.extend(base.split(' '));
    }
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(*w));
    words
}
