//! Canonical normalization and the integer codec between trajectories and
//! token sequences.
//!
//! Each pose becomes ten value tokens in `[0, B]`, in the order
//! `(qw, qx, qy, qz, tx, ty, tz, f1, f2, s)`:
//!
//! - quaternion and translation components map `[-1, 1] -> [0, 1]` via `(v + 1) / 2`
//! - focal lengths map via `f / (10 c)`
//! - the trajectory scale maps via `(log10(s) + 2) / 4` with `s` clamped to `[0.01, 100]`
//!
//! and every normalized value `p` (clamped to `[0, 1]`) becomes `floor(p * B)`.
//! Sequences are framed as `BOS, 10N values, EOS` with `BOS = B+1`,
//! `EOS = B+2` and `PAD = B+3`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, CameraPose, Intrinsics, Trajectory, UnitQuaternion, Vec3};

/// Added to translations' scale before dividing.
pub const CANONICAL_EPSILON: f64 = 1e-5;
pub const MIN_SCALE: f64 = 0.01;
pub const MAX_SCALE: f64 = 100.0;
pub const TOKENS_PER_POSE: usize = 10;

/// Absorbs rounding when `p * B` lands a few ulps under an integer, so
/// exact values such as `0.5` or `1.0` quantize stably.
const QUANT_SNAP: f64 = 1e-9;

/// A trajectory re-expressed in its first camera's frame with translations
/// divided by `scale + epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTrajectory {
    trajectory: Trajectory,
    scale: f64,
}

impl CanonicalTrajectory {
    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn poses(&self) -> &[CameraPose] {
        self.trajectory.poses()
    }

    /// Largest camera displacement from the first pose, in world units.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }
}

pub fn canonicalize(traj: &Trajectory) -> Result<CanonicalTrajectory> {
    traj.require_len(1)?;
    let poses = traj.poses();
    let first = poses[0];
    let relative: Vec<_> = poses.iter().skip(1).map(|p| relative_pose(&first, p)).collect();
    let scale = relative.iter().map(|r| r.translation.norm()).fold(0.0, f64::max);
    let denom = scale + CANONICAL_EPSILON;

    let mut out = Vec::with_capacity(poses.len());
    out.push(CameraPose::identity(first.intrinsics));
    for (rel, src) in relative.iter().zip(&poses[1..]) {
        out.push(CameraPose { rotation: rel.rotation, translation: rel.translation / denom, intrinsics: src.intrinsics });
    }
    Ok(CanonicalTrajectory { trajectory: Trajectory::new(out, traj.fps())?, scale })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Number of quantization bins B; value tokens span `0..=B`.
    pub bins: u32,
    /// Poses per trajectory N.
    pub traj_len: usize,
    /// Image size assumed when decoding focal lengths (principal point at the center).
    pub image_width: u32,
    pub image_height: u32,
    /// Frame rate assigned to decoded trajectories.
    pub fps: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { bins: 256, traj_len: 60, image_width: 512, image_height: 512, fps: 30.0 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::invalid("codec config", "bins must be at least 2"));
        }
        if self.traj_len < 2 {
            return Err(Error::invalid("codec config", "traj_len must be at least 2"));
        }
        if self.image_width < 2 || self.image_height < 2 {
            return Err(Error::invalid("codec config", "image size must be at least 2x2"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid("codec config", "fps must be positive"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.bins as usize + 4
    }

    pub fn bos(&self) -> u32 {
        self.bins + 1
    }

    pub fn eos(&self) -> u32 {
        self.bins + 2
    }

    pub fn pad(&self) -> u32 {
        self.bins + 3
    }

    /// `10N + 2`: BOS, all value tokens, EOS.
    pub fn sequence_len(&self) -> usize {
        TOKENS_PER_POSE * self.traj_len + 2
    }

    pub fn reference_intrinsics(&self) -> Intrinsics {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        Intrinsics { fx: w, fy: w, cx: w / 2.0, cy: h / 2.0, width: self.image_width, height: self.image_height }
    }
}

fn quantize(p: f64, bins: u32) -> u32 {
    let p = p.clamp(0.0, 1.0);
    ((p * bins as f64 + QUANT_SNAP).floor() as u32).min(bins)
}

fn dequantize(token: u32, bins: u32) -> f64 {
    ((token as f64 + 0.5) / bins as f64).min(1.0)
}

/// Normalized parameters in `[0, 1]` before discretization, in token order.
pub fn normalize_pose(pose: &CameraPose, scale: f64) -> Result<[f64; TOKENS_PER_POSE]> {
    let k = &pose.intrinsics;
    let values = [scale, pose.translation.x, pose.translation.y, pose.translation.z, k.fx, k.fy, k.cx, k.cy];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pose"));
    }
    let [w, x, y, z] = pose.rotation.to_array();
    let t = pose.translation;
    let s = scale.clamp(MIN_SCALE, MAX_SCALE);
    Ok([
        (w + 1.0) / 2.0,
        (x + 1.0) / 2.0,
        (y + 1.0) / 2.0,
        (z + 1.0) / 2.0,
        (t.x + 1.0) / 2.0,
        (t.y + 1.0) / 2.0,
        (t.z + 1.0) / 2.0,
        k.fx / (10.0 * k.cx),
        k.fy / (10.0 * k.cy),
        (s.log10() + 2.0) / 4.0,
    ])
}

pub fn encode_pose(pose: &CameraPose, scale: f64, bins: u32) -> Result<[u32; TOKENS_PER_POSE]> {
    let p = normalize_pose(pose, scale)?;
    Ok(p.map(|v| quantize(v, bins)))
}

/// Continuous parameters recovered from one pose's tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedPose {
    pub rotation: UnitQuaternion,
    /// Canonical (unit-space) translation.
    pub translation: Vec3,
    /// `fx / (10 cx)` and `fy / (10 cy)`.
    pub focal: [f64; 2],
    pub scale: f64,
}

pub fn decode_pose(tokens: &[u32; TOKENS_PER_POSE], bins: u32) -> Result<DecodedPose> {
    if let Some((offset, &token)) = tokens.iter().enumerate().find(|(_, t)| **t > bins) {
        return Err(Error::TokenOutOfRange { token, offset, max: bins });
    }
    let p = tokens.map(|t| dequantize(t, bins));
    let signed = |v: f64| 2.0 * v - 1.0;
    let rotation = UnitQuaternion::from_components(signed(p[0]), signed(p[1]), signed(p[2]), signed(p[3]))?;
    Ok(DecodedPose {
        rotation,
        translation: Vec3::new(signed(p[4]), signed(p[5]), signed(p[6])),
        focal: [p[7], p[8]],
        scale: 10f64.powf(4.0 * p[9] - 2.0),
    })
}

/// A structurally valid token sequence: `BOS, 10k value tokens, EOS, PAD*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    bins: u32,
}

impl TokenSequence {
    /// Validates framing and token ranges.
    pub fn parse(ids: Vec<u32>, bins: u32) -> Result<Self> {
        let (bos, eos, pad) = (bins + 1, bins + 2, bins + 3);
        let malformed = |offset: usize, reason: &str| Error::MalformedTokens { offset, reason: reason.to_string() };
        match ids.first() {
            Some(&t) if t == bos => {}
            Some(_) => return Err(malformed(0, "sequence must start with BOS")),
            None => return Err(malformed(0, "empty sequence")),
        }
        let eos_at = ids.iter().position(|&t| t == eos).ok_or_else(|| malformed(ids.len(), "missing EOS"))?;
        for (i, &t) in ids.iter().enumerate().take(eos_at).skip(1) {
            if t == bos || t == pad {
                return Err(malformed(i, "auxiliary token inside the payload"));
            }
            if t > bins {
                return Err(Error::TokenOutOfRange { token: t, offset: i, max: bins });
            }
        }
        let payload = eos_at - 1;
        if payload % TOKENS_PER_POSE != 0 {
            return Err(malformed(eos_at, "payload length is not a multiple of 10"));
        }
        if let Some(i) = ids.iter().skip(eos_at + 1).position(|&t| t != pad) {
            return Err(malformed(eos_at + 1 + i, "only PAD may follow EOS"));
        }
        Ok(Self { ids, bins })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }

    pub fn bins(&self) -> u32 {
        self.bins
    }

    /// Value tokens between BOS and EOS.
    pub fn payload(&self) -> &[u32] {
        let eos = self.bins + 2;
        let end = self.ids.iter().position(|&t| t == eos).expect("validated on construction");
        &self.ids[1..end]
    }

    pub fn pose_count(&self) -> usize {
        self.payload().len() / TOKENS_PER_POSE
    }

    /// Ids with trailing PAD removed.
    pub fn without_padding(&self) -> &[u32] {
        let pad = self.bins + 3;
        let end = self.ids.iter().rposition(|&t| t != pad).map_or(0, |i| i + 1);
        &self.ids[..end]
    }

    /// Pads (never truncates) to `len` ids.
    pub fn padded(&self, len: usize) -> Vec<u32> {
        let mut ids = self.ids.clone();
        if ids.len() < len {
            ids.resize(len, self.bins + 3);
        }
        ids
    }
}

pub fn encode_trajectory(ct: &CanonicalTrajectory, cfg: &CodecConfig) -> Result<TokenSequence> {
    cfg.validate()?;
    if ct.len() != cfg.traj_len {
        return Err(Error::LengthMismatch { expected: cfg.traj_len, actual: ct.len() });
    }
    let mut ids = Vec::with_capacity(cfg.sequence_len());
    ids.push(cfg.bos());
    for pose in ct.poses() {
        ids.extend(encode_pose(pose, ct.scale, cfg.bins)?);
    }
    ids.push(cfg.eos());
    Ok(TokenSequence { ids, bins: cfg.bins })
}

/// Canonicalizes then encodes.
pub fn tokenize(traj: &Trajectory, cfg: &CodecConfig) -> Result<TokenSequence> {
    encode_trajectory(&canonicalize(traj)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTrajectory {
    /// Trajectory in the canonical frame, de-normalized to world scale.
    pub trajectory: Trajectory,
    pub scale: f64,
    /// Per-pose scale tokens that disagree with the median by more than one bin.
    pub warnings: Vec<String>,
}

pub fn decode_trajectory(ts: &TokenSequence, cfg: &CodecConfig) -> Result<DecodedTrajectory> {
    cfg.validate()?;
    if ts.bins != cfg.bins {
        return Err(Error::invalid("token sequence", format!("encoded with {} bins, codec expects {}", ts.bins, cfg.bins)));
    }
    let payload = ts.payload();
    if payload.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let decades: Vec<[u32; TOKENS_PER_POSE]> =
        payload.chunks_exact(TOKENS_PER_POSE).map(|c| c.try_into().expect("chunk of 10")).collect();

    let mut scale_tokens: Vec<u32> = decades.iter().map(|d| d[9]).collect();
    scale_tokens.sort_unstable();
    let median = scale_tokens[(scale_tokens.len() - 1) / 2];
    let warnings: Vec<String> = decades
        .iter()
        .enumerate()
        .filter(|(_, d)| d[9].abs_diff(median) > 1)
        .map(|(i, d)| format!("pose {i}: scale token {} deviates from median {median}", d[9]))
        .collect();

    let scale = decode_pose(&[0, 0, 0, 0, 0, 0, 0, 0, 0, median], cfg.bins)?.scale;
    let reference = cfg.reference_intrinsics();
    let mut poses = Vec::with_capacity(decades.len());
    for (i, d) in decades.iter().enumerate() {
        if i == 0 {
            poses.push(CameraPose::identity(focal_intrinsics(&reference, decode_pose(d, cfg.bins)?.focal)));
            continue;
        }
        let dp = decode_pose(d, cfg.bins)?;
        poses.push(CameraPose {
            rotation: dp.rotation,
            translation: dp.translation * (scale + CANONICAL_EPSILON),
            intrinsics: focal_intrinsics(&reference, dp.focal),
        });
    }
    Ok(DecodedTrajectory { trajectory: Trajectory::new(poses, cfg.fps)?, scale, warnings })
}

fn focal_intrinsics(reference: &Intrinsics, focal: [f64; 2]) -> Intrinsics {
    Intrinsics { fx: focal[0] * 10.0 * reference.cx, fy: focal[1] * 10.0 * reference.cy, ..*reference }
}
