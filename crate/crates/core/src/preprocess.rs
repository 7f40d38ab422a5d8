//! Trajectory extraction clean-up (outlier removal, Kalman smoothing,
//! fixed-length resampling) and the frame statistics used to reject
//! static or dark shots.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{slerp, CameraPose, Trajectory, Vec3};

/// Shots whose mean consecutive-frame similarity exceeds this are static.
pub const STATIC_SIMILARITY_THRESHOLD: f64 = 0.6;
/// Shots whose mean gray level is below this are too dark.
pub const DARK_BRIGHTNESS_THRESHOLD: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningConfig {
    /// Outlier exclusion factor applied to the speed percentile.
    pub alpha: f64,
    /// Speed percentile in (0, 100).
    pub percentile: f64,
    /// Minimum number of frames in a kept segment.
    pub min_segment: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self { alpha: 18.0, percentile: 95.0, min_segment: 5 }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::invalid("cleaning config", "alpha must be positive"));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::invalid("cleaning config", "percentile must lie in (0, 100)"));
        }
        if self.min_segment < 2 {
            return Err(Error::invalid("cleaning config", "min_segment must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanConfig {
    pub process_sigma: f64,
    pub measurement_sigma: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { process_sigma: 0.5, measurement_sigma: 1.0 }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.process_sigma > 0.0 && self.measurement_sigma > 0.0) {
            return Err(Error::invalid("kalman config", "noise sigmas must be positive"));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile (the "linear" method of common numeric
/// libraries). `q` is in percent.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Splits a trajectory into runs of frames whose incoming speed stays
/// below `alpha * P(percentile)` of all consecutive speeds.
///
/// Frame 0 has no incoming speed and is always a candidate. Runs shorter
/// than `min_segment` are dropped; an empty result means the shot should
/// be discarded.
pub fn clean_trajectory(traj: &Trajectory, cfg: &CleaningConfig) -> Result<Vec<Range<usize>>> {
    cfg.validate()?;
    traj.require_len(2)?;
    let positions = traj.positions();
    let speeds: Vec<f64> = positions.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let threshold = percentile(&speeds, cfg.percentile) * cfg.alpha;

    let mut segments = Vec::new();
    let mut start = 0usize;
    let close = |start: usize, end: usize, segments: &mut Vec<Range<usize>>| {
        if end - start >= cfg.min_segment {
            segments.push(start..end);
        }
    };
    for (i, &speed) in speeds.iter().enumerate() {
        let frame = i + 1;
        if speed > threshold {
            close(start, frame, &mut segments);
            start = frame + 1;
        }
    }
    if start < positions.len() {
        close(start, positions.len(), &mut segments);
    }
    Ok(segments)
}

/// Forward constant-velocity Kalman filter applied independently per axis.
///
/// Process noise follows the discrete white-noise-acceleration model with
/// unit frame spacing. The state starts at the first measurement with zero
/// velocity and covariance `10 * sigma_m^2 * I`.
pub fn kalman_smooth(positions: &[Vec3], cfg: &KalmanConfig) -> Result<Vec<Vec3>> {
    cfg.validate()?;
    if positions.len() < 2 {
        return Err(Error::TooFewPoses { required: 2, actual: positions.len() });
    }
    if positions.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("positions"));
    }
    let mut out = vec![Vec3::zeros(); positions.len()];
    for axis in 0..3 {
        let series: Vec<f64> = positions.iter().map(|p| p[axis]).collect();
        for (o, v) in out.iter_mut().zip(filter_axis(&series, cfg)) {
            o[axis] = v;
        }
    }
    Ok(out)
}

fn filter_axis(z: &[f64], cfg: &KalmanConfig) -> Vec<f64> {
    let q = cfg.process_sigma * cfg.process_sigma;
    let (q11, q12, q22) = (0.25 * q, 0.5 * q, q);
    let r = cfg.measurement_sigma * cfg.measurement_sigma;

    let (mut pos, mut vel) = (z[0], 0.0);
    let (mut p11, mut p12, mut p22) = (10.0 * r, 0.0, 10.0 * r);
    let mut out = Vec::with_capacity(z.len());
    for (k, &meas) in z.iter().enumerate() {
        if k > 0 {
            pos += vel;
            let n11 = p11 + 2.0 * p12 + p22 + q11;
            let n12 = p12 + p22 + q12;
            let n22 = p22 + q22;
            (p11, p12, p22) = (n11, n12, n22);
        }
        let s = p11 + r;
        let (k1, k2) = (p11 / s, p12 / s);
        let innov = meas - pos;
        pos += k1 * innov;
        vel += k2 * innov;
        let n11 = (1.0 - k1) * p11;
        let n12 = (1.0 - k1) * p12;
        let n22 = p22 - k2 * p12;
        (p11, p12, p22) = (n11, n12, n22);
        out.push(pos);
    }
    out
}

/// Resamples to exactly `target_len` poses at uniform frame-index
/// parameters: rotations are slerped, translations linearly interpolated,
/// intrinsics copied from the nearest source pose. The frame rate is
/// rescaled so the shot duration is unchanged.
pub fn resample_fixed(traj: &Trajectory, target_len: usize) -> Result<Trajectory> {
    traj.require_len(2)?;
    if target_len < 2 {
        return Err(Error::invalid("resample", format!("target length must be at least 2, got {target_len}")));
    }
    let src = traj.poses();
    let n = src.len();
    let span = (n - 1) as f64;
    let steps = (target_len - 1) as f64;
    let mut poses = Vec::with_capacity(target_len);
    for j in 0..target_len {
        if j == 0 {
            poses.push(src[0]);
            continue;
        }
        if j == target_len - 1 {
            poses.push(src[n - 1]);
            continue;
        }
        let u = j as f64 * span / steps;
        let i = (u.floor() as usize).min(n - 2);
        let frac = u - i as f64;
        if frac == 0.0 {
            poses.push(src[i]);
            continue;
        }
        let (a, b) = (&src[i], &src[i + 1]);
        let nearest = if frac < 0.5 { a } else { b };
        poses.push(CameraPose {
            rotation: slerp(&a.rotation, &b.rotation, frac),
            translation: a.translation + (b.translation - a.translation) * frac,
            intrinsics: nearest.intrinsics,
        });
    }
    Trajectory::new(poses, traj.fps() * steps / span)
}

/// An 8-bit grayscale frame in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame", "dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "frame {}x{} needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Fraction of pixels whose absolute difference is at most `tolerance`.
pub fn frame_similarity(a: &GrayFrame, b: &GrayFrame, tolerance: u8) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "frames differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let equal = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| x.abs_diff(**y) <= tolerance).count();
    Ok(equal as f64 / a.pixels.len() as f64)
}

/// Mean similarity over consecutive frame pairs. A tolerance of zero is
/// strict pixel equality.
pub fn static_score(frames: &[GrayFrame], tolerance: u8) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::TooFewSamples { metric: "static score", required: 2, actual: frames.len() });
    }
    let mut total = 0.0;
    for w in frames.windows(2) {
        total += frame_similarity(&w[0], &w[1], tolerance)?;
    }
    Ok(total / (frames.len() - 1) as f64)
}

/// Mean gray level over every pixel of every frame.
pub fn brightness_score(frames: &[GrayFrame]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::TooFewSamples { metric: "brightness", required: 1, actual: 0 });
    }
    let mut sum = 0u64;
    let mut count = 0u64;
    for f in frames {
        sum += f.pixels.iter().map(|&p| p as u64).sum::<u64>();
        count += f.pixels.len() as u64;
    }
    Ok(sum as f64 / count as f64)
}
