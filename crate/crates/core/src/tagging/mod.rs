//! Per-frame motion tags over the 27 translation x 7 rotation label space.

mod caption;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kinematics, Trajectory};
use crate::preprocess::percentile;

pub(crate) use caption::caption_words;
pub use caption::{caption_from_tags, duration_bucket, parse_caption, CaptionStyle, Duration, ParsedSegment};

/// Motion along one camera axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxisMotion {
    Negative,
    Static,
    Positive,
}

impl AxisMotion {
    const ALL: [AxisMotion; 3] = [AxisMotion::Negative, AxisMotion::Static, AxisMotion::Positive];

    fn index(self) -> usize {
        self as usize
    }

    fn from_sign(v: f64) -> Self {
        if v > 0.0 {
            AxisMotion::Positive
        } else if v < 0.0 {
            AxisMotion::Negative
        } else {
            AxisMotion::Static
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationAction {
    Static,
    PitchUp,
    PitchDown,
    YawLeft,
    YawRight,
    RollLeft,
    RollRight,
}

impl RotationAction {
    pub const ALL: [RotationAction; 7] = [
        RotationAction::Static,
        RotationAction::PitchUp,
        RotationAction::PitchDown,
        RotationAction::YawLeft,
        RotationAction::YawRight,
        RotationAction::RollLeft,
        RotationAction::RollRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn code(self) -> &'static str {
        match self {
            RotationAction::Static => "static",
            RotationAction::PitchUp => "pitchU",
            RotationAction::PitchDown => "pitchD",
            RotationAction::YawLeft => "yawL",
            RotationAction::YawRight => "yawR",
            RotationAction::RollLeft => "rollL",
            RotationAction::RollRight => "rollR",
        }
    }

    /// Maps a dominant angular-rate axis (0 pitch, 1 yaw, 2 roll) and its sign.
    fn from_axis(axis: usize, rate: f64) -> Self {
        match (axis, rate > 0.0) {
            (0, true) => RotationAction::PitchUp,
            (0, false) => RotationAction::PitchDown,
            (1, true) => RotationAction::YawRight,
            (1, false) => RotationAction::YawLeft,
            (_, true) => RotationAction::RollRight,
            (_, false) => RotationAction::RollLeft,
        }
    }
}

/// A joint translation/rotation label for one frame.
///
/// `lateral` is the camera x axis (negative = left), `vertical` the camera
/// y axis (negative = up, since +y points down) and `depth` the camera z
/// axis (positive = forward).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MotionTag {
    pub lateral: AxisMotion,
    pub vertical: AxisMotion,
    pub depth: AxisMotion,
    pub rotation: RotationAction,
}

/// Direction labels used for set-level comparisons and captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomicLabel {
    Left,
    Right,
    Up,
    Down,
    Forward,
    Backward,
    PitchUp,
    PitchDown,
    YawLeft,
    YawRight,
    RollLeft,
    RollRight,
    Still,
}

impl AtomicLabel {
    pub const ALL: [AtomicLabel; 13] = [
        AtomicLabel::Left,
        AtomicLabel::Right,
        AtomicLabel::Up,
        AtomicLabel::Down,
        AtomicLabel::Forward,
        AtomicLabel::Backward,
        AtomicLabel::PitchUp,
        AtomicLabel::PitchDown,
        AtomicLabel::YawLeft,
        AtomicLabel::YawRight,
        AtomicLabel::RollLeft,
        AtomicLabel::RollRight,
        AtomicLabel::Still,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AtomicLabel::Left => "left",
            AtomicLabel::Right => "right",
            AtomicLabel::Up => "up",
            AtomicLabel::Down => "down",
            AtomicLabel::Forward => "forward",
            AtomicLabel::Backward => "backward",
            AtomicLabel::PitchUp => "pitch_up",
            AtomicLabel::PitchDown => "pitch_down",
            AtomicLabel::YawLeft => "yaw_left",
            AtomicLabel::YawRight => "yaw_right",
            AtomicLabel::RollLeft => "roll_left",
            AtomicLabel::RollRight => "roll_right",
            AtomicLabel::Still => "still",
        }
    }
}

impl MotionTag {
    pub const STILL: MotionTag = MotionTag {
        lateral: AxisMotion::Static,
        vertical: AxisMotion::Static,
        depth: AxisMotion::Static,
        rotation: RotationAction::Static,
    };

    pub fn new(lateral: AxisMotion, vertical: AxisMotion, depth: AxisMotion, rotation: RotationAction) -> Self {
        Self { lateral, vertical, depth, rotation }
    }

    /// All 189 tags in index order.
    pub fn all() -> impl Iterator<Item = MotionTag> {
        (0..27 * 7).map(|i| MotionTag::from_index(i).expect("index in range"))
    }

    pub fn translation_index(&self) -> usize {
        self.lateral.index() * 9 + self.vertical.index() * 3 + self.depth.index()
    }

    pub fn index(&self) -> usize {
        self.translation_index() * 7 + self.rotation.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i >= 27 * 7 {
            return None;
        }
        let (t, r) = (i / 7, i % 7);
        Some(Self {
            lateral: AxisMotion::ALL[t / 9],
            vertical: AxisMotion::ALL[(t / 3) % 3],
            depth: AxisMotion::ALL[t % 3],
            rotation: RotationAction::ALL[r],
        })
    }

    pub fn is_still(&self) -> bool {
        *self == Self::STILL
    }

    pub fn has_translation(&self) -> bool {
        [self.lateral, self.vertical, self.depth].iter().any(|a| *a != AxisMotion::Static)
    }

    pub fn atomic_labels(&self) -> Vec<AtomicLabel> {
        let mut out = Vec::new();
        match self.lateral {
            AxisMotion::Negative => out.push(AtomicLabel::Left),
            AxisMotion::Positive => out.push(AtomicLabel::Right),
            AxisMotion::Static => {}
        }
        match self.vertical {
            AxisMotion::Negative => out.push(AtomicLabel::Up),
            AxisMotion::Positive => out.push(AtomicLabel::Down),
            AxisMotion::Static => {}
        }
        match self.depth {
            AxisMotion::Positive => out.push(AtomicLabel::Forward),
            AxisMotion::Negative => out.push(AtomicLabel::Backward),
            AxisMotion::Static => {}
        }
        match self.rotation {
            RotationAction::Static => {}
            RotationAction::PitchUp => out.push(AtomicLabel::PitchUp),
            RotationAction::PitchDown => out.push(AtomicLabel::PitchDown),
            RotationAction::YawLeft => out.push(AtomicLabel::YawLeft),
            RotationAction::YawRight => out.push(AtomicLabel::YawRight),
            RotationAction::RollLeft => out.push(AtomicLabel::RollLeft),
            RotationAction::RollRight => out.push(AtomicLabel::RollRight),
        }
        if out.is_empty() {
            out.push(AtomicLabel::Still);
        }
        out
    }

    /// Compact code such as `R__|yawL` (lateral, vertical, depth | rotation).
    pub fn code(&self) -> String {
        let lat = match self.lateral {
            AxisMotion::Negative => 'L',
            AxisMotion::Static => '_',
            AxisMotion::Positive => 'R',
        };
        let ver = match self.vertical {
            AxisMotion::Negative => 'U',
            AxisMotion::Static => '_',
            AxisMotion::Positive => 'D',
        };
        let dep = match self.depth {
            AxisMotion::Negative => 'B',
            AxisMotion::Static => '_',
            AxisMotion::Positive => 'F',
        };
        format!("{lat}{ver}{dep}|{}", self.rotation.code())
    }
}

impl fmt::Display for MotionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for MotionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::parse(format!("tag {s:?}"), "expected a code like `R__|yawL`");
        let (trans, rot) = s.split_once('|').ok_or_else(bad)?;
        let chars: Vec<char> = trans.chars().collect();
        if chars.len() != 3 {
            return Err(bad());
        }
        let axis = |c: char, neg: char, pos: char| match c {
            '_' => Ok(AxisMotion::Static),
            c if c == neg => Ok(AxisMotion::Negative),
            c if c == pos => Ok(AxisMotion::Positive),
            _ => Err(bad()),
        };
        let rotation = RotationAction::ALL.into_iter().find(|r| r.code() == rot).ok_or_else(bad)?;
        Ok(MotionTag {
            lateral: axis(chars[0], 'L', 'R')?,
            vertical: axis(chars[1], 'U', 'D')?,
            depth: axis(chars[2], 'B', 'F')?,
            rotation,
        })
    }
}

impl Serialize for MotionTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for MotionTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A run of identical tags over frames `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSegment {
    pub start: usize,
    pub end: usize,
    pub tag: MotionTag,
}

impl TagSegment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagThresholds {
    /// Speed floor as a fraction of the trajectory's 95th-percentile speed.
    pub v_min: f64,
    /// An axis is active when its |velocity| reaches this fraction of the largest component.
    pub dominance: f64,
    /// Angular-rate floor in rad/s.
    pub w_min: f64,
    /// Minimum run length kept by smoothing, in frames.
    pub min_run: usize,
}

impl Default for TagThresholds {
    fn default() -> Self {
        Self { v_min: 0.1, dominance: 0.3, w_min: 0.02, min_run: 5 }
    }
}

impl TagThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min > 0.0 && self.w_min > 0.0 && self.min_run > 0) {
            return Err(Error::invalid("tag thresholds", "all thresholds must be positive"));
        }
        if !(self.dominance > 0.0 && self.dominance <= 1.0) {
            return Err(Error::invalid("tag thresholds", "dominance must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Tags each consecutive pose pair; the output has `len - 1` entries.
pub fn tag_frames(traj: &Trajectory, th: &TagThresholds) -> Result<Vec<MotionTag>> {
    th.validate()?;
    let kin = kinematics(traj)?;
    let speeds = kin.speeds();
    let floor = th.v_min * percentile(&speeds, 95.0);

    let tags = kin
        .linear
        .iter()
        .zip(&kin.angular)
        .zip(&speeds)
        .map(|((v, w), &speed)| {
            let (lateral, vertical, depth) = if speed == 0.0 || speed < floor {
                (AxisMotion::Static, AxisMotion::Static, AxisMotion::Static)
            } else {
                let cut = th.dominance * v.amax();
                let axis = |c: f64| if c.abs() >= cut { AxisMotion::from_sign(c) } else { AxisMotion::Static };
                (axis(v.x), axis(v.y), axis(v.z))
            };
            let (axis, rate) = (0..3).fold((0, w[0]), |best, i| if w[i].abs() > best.1.abs() { (i, w[i]) } else { best });
            let rotation = if rate.abs() >= th.w_min { RotationAction::from_axis(axis, rate) } else { RotationAction::Static };
            MotionTag { lateral, vertical, depth, rotation }
        })
        .collect();
    Ok(tags)
}

/// Run-length encodes a tag sequence.
pub fn segment_tags(tags: &[MotionTag]) -> Vec<TagSegment> {
    let mut out: Vec<TagSegment> = Vec::new();
    for (i, &tag) in tags.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if seg.tag == tag => seg.end = i + 1,
            _ => out.push(TagSegment { start: i, end: i + 1, tag }),
        }
    }
    out
}

/// Expands segments back into a per-frame sequence.
pub fn expand_segments(segments: &[TagSegment]) -> Vec<MotionTag> {
    segments.iter().flat_map(|s| std::iter::repeat_n(s.tag, s.len())).collect()
}

/// Absorbs runs shorter than `min_run` into a neighbouring run until every
/// run is long enough (a sequence shorter than `min_run` ends as one run).
///
/// The shortest offending run is merged first, earliest on ties. It joins
/// the longer adjacent run; equal neighbours resolve to the preceding one.
pub fn smooth_tags(tags: &[MotionTag], min_run: usize) -> Vec<MotionTag> {
    let mut runs: Vec<(MotionTag, usize)> = segment_tags(tags).iter().map(|s| (s.tag, s.len())).collect();
    while runs.len() > 1 {
        let Some((idx, _)) = runs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.1 < min_run)
            .min_by_key(|(i, r)| (r.1, *i))
        else {
            break;
        };
        let target = match (idx.checked_sub(1), runs.get(idx + 1)) {
            (Some(p), Some(next)) => {
                if runs[p].1 >= next.1 {
                    p
                } else {
                    idx + 1
                }
            }
            (Some(p), None) => p,
            (None, _) => idx + 1,
        };
        let len = runs[idx].1;
        runs[target].1 += len;
        runs.remove(idx);
        // Coalesce neighbours that now carry the same tag.
        let mut merged: Vec<(MotionTag, usize)> = Vec::with_capacity(runs.len());
        for r in runs {
            match merged.last_mut() {
                Some(last) if last.0 == r.0 => last.1 += r.1,
                _ => merged.push(r),
            }
        }
        runs = merged;
    }
    runs.into_iter().flat_map(|(t, n)| std::iter::repeat_n(t, n)).collect()
}

/// Tags, smooths and segments a trajectory in one call.
pub fn tag_segments(traj: &Trajectory, th: &TagThresholds) -> Result<Vec<TagSegment>> {
    let raw = tag_frames(traj, th)?;
    Ok(segment_tags(&smooth_tags(&raw, th.min_run)))
}

/// Most frequent tag over the smoothed sequence; earliest wins ties.
pub fn dominant_tag(segments: &[TagSegment]) -> Option<MotionTag> {
    let mut counts: Vec<(MotionTag, usize)> = Vec::new();
    for s in segments {
        match counts.iter_mut().find(|(t, _)| *t == s.tag) {
            Some(c) => c.1 += s.len(),
            None => counts.push((s.tag, s.len())),
        }
    }
    counts.iter().fold(None, |best: Option<(MotionTag, usize)>, &(t, n)| match best {
        Some((_, bn)) if bn >= n => best,
        _ => Some((t, n)),
    })
    .map(|(t, _)| t)
}
