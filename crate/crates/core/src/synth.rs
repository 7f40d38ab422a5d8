//! Procedural tagged and captioned trajectories, and on-disk datasets built
//! from them.
//!
//! Each trajectory is a chain of segments. A segment has one motion tag
//! whose translation is a fixed camera-frame velocity and whose rotation is
//! a constant rate about one camera axis. Poses integrate egocentrically:
//! `t[i+1] = t[i] + R[i] v`, `R[i+1] = R[i] exp(w)`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, RigidTransform, Trajectory, UnitQuaternion, Vec3};
use crate::io;
use crate::preprocess::GrayFrame;
use crate::tagging::{caption_from_tags, segment_tags, AxisMotion, CaptionStyle, MotionTag, RotationAction, TagSegment};

pub const MANIFEST_FORMAT: &str = "trajgen-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Share of a segment spent easing in (and again easing out).
const RAMP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Inclusive range of segment counts.
    pub segments: [usize; 2],
    /// Poses per trajectory.
    pub frames: usize,
    pub fps: f64,
    /// Camera speed range in units per frame.
    pub speed: [f64; 2],
    /// Turn-rate range in radians per frame.
    pub turn_rate: [f64; 2],
    pub easing: bool,
    /// Shortest segment, in frame steps.
    pub min_segment: usize,
    /// Allowed tags; empty means all 189.
    pub pool: Vec<MotionTag>,
    pub caption_style: CaptionStyle,
    pub intrinsics: Intrinsics,
    /// Side length of procedural image/depth frames; 0 disables them.
    pub frame_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            segments: [1, 3],
            frames: 60,
            fps: 30.0,
            speed: [0.05, 0.15],
            turn_rate: [0.03, 0.06],
            easing: true,
            min_segment: 8,
            pool: Vec::new(),
            caption_style: CaptionStyle::Sentence,
            intrinsics: Intrinsics::default(),
            frame_size: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("synth config", reason.to_string()));
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if self.segments[0] == 0 || self.segments[0] > self.segments[1] {
            return bad("segments must be a non-empty positive range");
        }
        let positive_range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !positive_range(self.speed) || !positive_range(self.turn_rate) {
            return bad("speed and turn-rate ranges must be positive");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.min_segment == 0 {
            return bad("min_segment must be positive");
        }
        if self.frame_size > 0 && self.frame_size < 2 {
            return bad("frame_size must be 0 or at least 2");
        }
        self.intrinsics.validate()
    }

    fn pool(&self) -> Vec<MotionTag> {
        if self.pool.is_empty() {
            MotionTag::all().collect()
        } else {
            let unique: BTreeSet<MotionTag> = self.pool.iter().copied().collect();
            unique.into_iter().collect()
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A generated trajectory with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub trajectory: Trajectory,
    /// Ground-truth tags over the `frames - 1` steps.
    pub segments: Vec<TagSegment>,
    pub caption: String,
    /// `true` for steps inside an easing ramp.
    pub ramp: Vec<bool>,
}

struct SegmentPlan {
    tag: MotionTag,
    len: usize,
    velocity: Vec3,
    rate: Vec3,
}

fn split_lengths(rng: &mut impl Rng, total: usize, count: usize, min: usize) -> Vec<usize> {
    let spare = total - count * min;
    let mut cuts: Vec<usize> = (0..count - 1).map(|_| rng.random_range(0..=spare)).collect();
    cuts.sort_unstable();
    let mut lens = Vec::with_capacity(count);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(spare)) {
        lens.push(min + c - prev);
        prev = c;
    }
    lens
}

fn axis_sign(m: AxisMotion) -> f64 {
    match m {
        AxisMotion::Negative => -1.0,
        AxisMotion::Static => 0.0,
        AxisMotion::Positive => 1.0,
    }
}

/// Camera-frame unit rotation axis for a rotation action.
pub fn rotation_axis(action: RotationAction) -> Vec3 {
    match action {
        RotationAction::Static => Vec3::zeros(),
        RotationAction::PitchUp => Vec3::x(),
        RotationAction::PitchDown => -Vec3::x(),
        RotationAction::YawRight => Vec3::y(),
        RotationAction::YawLeft => -Vec3::y(),
        RotationAction::RollRight => Vec3::z(),
        RotationAction::RollLeft => -Vec3::z(),
    }
}

/// Unit direction of a tag's translation (zero when static).
pub fn translation_direction(tag: &MotionTag) -> Vec3 {
    let v = Vec3::new(axis_sign(tag.lateral), axis_sign(tag.vertical), axis_sign(tag.depth));
    if v == Vec3::zeros() {
        v
    } else {
        v.normalize()
    }
}

fn ease(j: usize, len: usize, ramp: usize) -> (f64, bool) {
    let smooth = |k: usize| 0.5 - 0.5 * (PI * (k + 1) as f64 / (ramp + 1) as f64).cos();
    if j < ramp {
        (smooth(j), true)
    } else if j >= len - ramp {
        (smooth(len - 1 - j), true)
    } else {
        (1.0, false)
    }
}

/// Deterministic per seed; the same `(cfg, seed)` always yields the same record.
pub fn sample_trajectory(cfg: &SynthConfig, seed: u64) -> Result<SynthRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = cfg.pool();
    let steps = cfg.frames - 1;
    let max_fit = (steps / cfg.min_segment).max(1);
    let hi = cfg.segments[1].min(max_fit);
    let lo = cfg.segments[0].min(hi);
    let mut count = rng.random_range(lo..=hi);
    if pool.len() == 1 {
        count = 1;
    }
    let lens = if count == 1 { vec![steps] } else { split_lengths(&mut rng, steps, count, cfg.min_segment) };

    let mut plans: Vec<SegmentPlan> = Vec::with_capacity(count);
    for len in lens {
        let tag = loop {
            let t = pool[rng.random_range(0..pool.len())];
            if plans.last().is_none_or(|p| p.tag != t) {
                break t;
            }
        };
        // Per-axis weights stay well above the tagger's dominance cut.
        let weights = Vec3::new(rng.random_range(0.7..=1.0), rng.random_range(0.7..=1.0), rng.random_range(0.7..=1.0));
        let dir = translation_direction(&tag).component_mul(&weights);
        let velocity = if dir == Vec3::zeros() { dir } else { dir.normalize() * rng.random_range(cfg.speed[0]..=cfg.speed[1]) };
        let rate = rotation_axis(tag.rotation) * rng.random_range(cfg.turn_rate[0]..=cfg.turn_rate[1]);
        plans.push(SegmentPlan { tag, len, velocity, rate });
    }

    let start = CameraPose {
        rotation: UnitQuaternion::exp(&Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-PI..PI), rng.random_range(-0.1..0.1))),
        translation: Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0), rng.random_range(-5.0..5.0)),
        intrinsics: cfg.intrinsics,
    };
    let mut poses = Vec::with_capacity(cfg.frames);
    poses.push(start);
    let mut tags = Vec::with_capacity(steps);
    let mut ramp_mask = Vec::with_capacity(steps);
    for plan in &plans {
        let ramp = if cfg.easing { ((plan.len as f64 * RAMP_FRACTION).round() as usize).max(1) } else { 0 };
        for j in 0..plan.len {
            let (factor, in_ramp) = if cfg.easing && plan.len > 2 * ramp { ease(j, plan.len, ramp) } else { (1.0, false) };
            let step = RigidTransform { rotation: UnitQuaternion::exp(&(plan.rate * factor)), translation: plan.velocity * factor };
            let next = poses.last().expect("start pose").compose(&step);
            poses.push(next);
            tags.push(plan.tag);
            ramp_mask.push(in_ramp);
        }
    }
    let segments = segment_tags(&tags);
    let caption = caption_from_tags(&segments, cfg.caption_style)?;
    Ok(SynthRecord { trajectory: Trajectory::new(poses, cfg.fps)?, segments, caption, ramp: ramp_mask })
}

/// Seed for record `index` of a corpus seeded with `seed`.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.random()
}

/// Procedural image and depth grids: a tilted luminance gradient with
/// noise, and a radial depth falloff.
pub fn synth_frames(size: usize, seed: u64) -> (GrayFrame, GrayFrame) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4a3);
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let (cx, cy) = (rng.random_range(0.2..0.8) * size as f64, rng.random_range(0.2..0.8) * size as f64);
    let n = size as f64;
    let mut image = Vec::with_capacity(size * size);
    let mut depth = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 / n - 0.5, r as f64 / n - 0.5);
            let g = 128.0 + 180.0 * (x * ca + y * sa) + rng.random_range(-12.0..12.0);
            image.push(g.clamp(0.0, 255.0) as u8);
            let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt() / n;
            depth.push((255.0 * (1.0 - d)).clamp(0.0, 255.0) as u8);
        }
    }
    (
        GrayFrame::new(size, size, image).expect("sized buffer"),
        GrayFrame::new(size, size, depth).expect("sized buffer"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePaths {
    pub image: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Path relative to the manifest directory.
    pub trajectory: String,
    pub caption: String,
    pub tags: Vec<TagSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<FramePaths>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: SynthConfig,
    pub records: Vec<ManifestRecord>,
    /// Directory the relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = io::open(path)?;
        let mut m: DatasetManifest =
            serde_json::from_reader(file).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::parse(path.display().to_string(), format!("unknown format {:?}", m.format)));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = io::create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_trajectory(&self, record: &ManifestRecord) -> Result<Trajectory> {
        io::load_trajectory(&self.resolve(&record.trajectory))
    }
}

/// Split sizes for `n` records: 10% test, 10% validation (rounded), rest train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = ((n as f64) * 0.1).round() as usize;
    let test = tenth.min(n);
    let val = tenth.min(n - test);
    (n - test - val, val, test)
}

/// Generates `n` records under `dir`, writes `dir/manifest.json` and returns it.
pub fn build_dataset(n: usize, cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size", "need at least one record"));
    }
    cfg.validate()?;
    let (train, val, _) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let records: Vec<ManifestRecord> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<ManifestRecord> {
            let seed = record_seed(cfg.seed, i as u64);
            let rec = sample_trajectory(cfg, seed)?;
            let id = format!("{i:06}");
            let traj_rel = format!("trajectories/{id}.jsonl");
            io::save_trajectory(&dir.join(&traj_rel), &rec.trajectory)?;
            let frame = if cfg.frame_size > 0 {
                let (image, depth) = synth_frames(cfg.frame_size, seed);
                let paths = FramePaths { image: format!("frames/{id}_image.pgm"), depth: format!("frames/{id}_depth.pgm") };
                io::save_pgm(&dir.join(&paths.image), &image)?;
                io::save_pgm(&dir.join(&paths.depth), &depth)?;
                Some(paths)
            } else {
                None
            };
            Ok(ManifestRecord { id, trajectory: traj_rel, caption: rec.caption, tags: rec.segments, frame, split: splits[i] })
        })
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        records,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
