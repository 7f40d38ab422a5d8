//! Evaluation metrics: motion-tag F1, a kinematic feature space, Fréchet
//! distance and k-NN coverage over it.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kinematics, relative_pose, Trajectory};
use crate::tagging::{tag_segments, AtomicLabel, RotationAction, TagSegment, TagThresholds};

pub mod contrastive;

pub use contrastive::{pool_rows, ContrastiveConfig, ContrastiveHead, ContrastiveReport};

/// Identifier written into reports so numbers are never compared across
/// different feature spaces.
pub const FEATURIZER_ID: &str = "kinematic-v1";
pub const FEATURE_DIM: usize = 32;
/// Covariance shrinkage added before the matrix square root.
pub const FID_SHRINKAGE: f64 = 1e-6;
pub const DEFAULT_COVERAGE_K: usize = 5;

const TAG_HISTOGRAM_BINS: usize = 27 + 7;
const PROJECTED_DIM: usize = 10;
const PROJECTION_SEED: u64 = 0x7a6f_2d31;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LabelCounts {
    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        harmonic(self.precision(), self.recall())
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagF1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: BTreeMap<AtomicLabel, LabelCounts>,
}

/// Atomic labels present anywhere in a smoothed segment list.
pub fn label_set(segments: &[TagSegment]) -> BTreeSet<AtomicLabel> {
    segments.iter().flat_map(|s| s.tag.atomic_labels()).collect()
}

/// Micro-averaged multi-label scores over per-sample label sets.
pub fn tag_f1_from_sets(generated: &[BTreeSet<AtomicLabel>], reference: &[BTreeSet<AtomicLabel>]) -> Result<TagF1Report> {
    if generated.len() != reference.len() {
        return Err(Error::LengthMismatch { expected: reference.len(), actual: generated.len() });
    }
    if generated.is_empty() {
        return Err(Error::TooFewSamples { metric: "tag_f1", required: 1, actual: 0 });
    }
    let mut per_label: BTreeMap<AtomicLabel, LabelCounts> = AtomicLabel::ALL.iter().map(|&l| (l, LabelCounts::default())).collect();
    for (g, r) in generated.iter().zip(reference) {
        for l in g.union(r) {
            let c = per_label.get_mut(l).expect("all labels present");
            match (g.contains(l), r.contains(l)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
    }
    let total = per_label.values().fold(LabelCounts::default(), |a, c| LabelCounts { tp: a.tp + c.tp, fp: a.fp + c.fp, fn_: a.fn_ + c.fn_ });
    Ok(TagF1Report { precision: total.precision(), recall: total.recall(), f1: total.f1(), per_label })
}

/// Tags every generated trajectory with `th` and scores its label set
/// against the matching reference set.
pub fn tag_f1(generated: &[Trajectory], reference: &[BTreeSet<AtomicLabel>], th: &TagThresholds) -> Result<TagF1Report> {
    let sets: Vec<BTreeSet<AtomicLabel>> =
        generated.par_iter().map(|t| tag_segments(t, th).map(|s| label_set(&s))).collect::<Result<_>>()?;
    tag_f1_from_sets(&sets, reference)
}

fn projection() -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let scale = 1.0 / (PROJECTED_DIM as f64).sqrt();
    DMatrix::from_fn(PROJECTED_DIM, TAG_HISTOGRAM_BINS, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

fn axis_stats(samples: impl Iterator<Item = f64> + Clone) -> [f64; 3] {
    let n = samples.clone().count() as f64;
    let mean = samples.clone().sum::<f64>() / n;
    let var = samples.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = samples.map(f64::abs).fold(0.0, f64::max);
    [mean, var.sqrt(), max]
}

/// Rigid-invariant kinematic summary of a trajectory, `FEATURE_DIM` long.
///
/// Layout: linear velocity mean/std/max|v| per camera axis (9), the same
/// for angular rate (9), path length (1), net displacement direction in the
/// first camera's frame (3), and a random projection of the smoothed tag
/// histogram (10). The histogram is piecewise constant, so the features
/// are Lipschitz only away from tagging threshold boundaries.
pub fn featurize(traj: &Trajectory) -> Result<Vec<f64>> {
    let kin = kinematics(traj)?;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for series in [&kin.linear, &kin.angular] {
        for axis in 0..3 {
            out.extend(axis_stats(series.iter().map(|v| v[axis])));
        }
    }
    let poses = traj.poses();
    out.push(poses.windows(2).map(|w| (w[1].translation - w[0].translation).norm()).sum());
    let net = relative_pose(&poses[0], &poses[poses.len() - 1]).translation;
    let dir = if net.norm() > 1e-12 { net.normalize() } else { net };
    out.extend(dir.iter());

    let mut hist = DVector::zeros(TAG_HISTOGRAM_BINS);
    let segments = tag_segments(traj, &TagThresholds::default())?;
    let frames = kin.len() as f64;
    for s in &segments {
        let w = s.len() as f64 / frames;
        hist[s.tag.translation_index()] += w;
        hist[27 + s.tag.rotation.index()] += w;
    }
    debug_assert_eq!(RotationAction::ALL.len(), 7);
    out.extend((projection() * hist).iter());
    debug_assert_eq!(out.len(), FEATURE_DIM);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(out)
}

/// `n x d` feature matrix tagged with the featurizer that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: DMatrix<f64>,
    pub featurizer: String,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>], featurizer: &str) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape(format!("feature rows of length {d} and {}", bad.len())));
        }
        let vectors = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self { vectors, featurizer: featurizer.to_string() })
    }

    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = trajs.par_iter().map(featurize).collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Self { vectors: DMatrix::zeros(0, FEATURE_DIM), featurizer: FEATURIZER_ID.into() });
        }
        Self::from_rows(&rows, FEATURIZER_ID)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn same_space(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.featurizer != b.featurizer {
        return Err(Error::invalid("feature sets", format!("spaces differ: {} vs {}", a.featurizer, b.featurizer)));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += FID_SHRINKAGE;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    same_space(a, b)?;
    let required = a.dim() + 1;
    for s in [a, b] {
        if s.len() < required {
            return Err(Error::TooFewSamples { metric: "fid", required, actual: s.len() });
        }
    }
    let (mu_a, cov_a) = moments(&a.vectors);
    let (mu_b, cov_b) = moments(&b.vectors);
    // Tr((Σa Σb)^½) equals Tr((Σa^½ Σb Σa^½)^½), whose argument is symmetric PSD.
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum()
}

/// Fraction of real points whose k-NN ball (radius = distance to the k-th
/// nearest other real point) contains at least one generated point.
pub fn coverage(real: &FeatureSet, generated: &FeatureSet, k: usize) -> Result<f64> {
    same_space(real, generated)?;
    if k == 0 {
        return Err(Error::invalid("coverage", "k must be positive"));
    }
    for s in [real, generated] {
        if s.len() < k + 1 {
            return Err(Error::TooFewSamples { metric: "coverage", required: k + 1, actual: s.len() });
        }
    }
    let (r, g) = (&real.vectors, &generated.vectors);
    let covered = (0..r.nrows())
        .into_par_iter()
        .filter(|&i| {
            let mut d: Vec<f64> = (0..r.nrows()).filter(|&j| j != i).map(|j| sq_dist(r, i, r, j)).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            let radius = d[k - 1];
            (0..g.nrows()).any(|j| sq_dist(r, i, g, j) <= radius)
        })
        .count();
    Ok(covered as f64 / r.nrows() as f64)
}

#[cfg(test)]
mod tests;
