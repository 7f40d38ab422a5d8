//! Dual-encoder alignment score between captions and trajectories.
//!
//! Text side: a pooled text latent from the generator's frozen encoder.
//! Trajectory side: standardized [`featurize`] vectors. Each side gets a
//! linear projection, trained with a symmetric InfoNCE loss.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{featurize, FEATURE_DIM, FEATURIZER_ID};
use crate::error::{Error, Result};
use crate::geometry::Trajectory;

/// Norms below this make a cosine undefined.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub dim: usize,
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { dim: 32, temperature: 0.1, steps: 300, lr: 1e-2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveHead {
    text_dim: usize,
    dim: usize,
    /// Row-major `text_dim x dim`.
    text_proj: Vec<f64>,
    /// Row-major `FEATURE_DIM x dim`.
    traj_proj: Vec<f64>,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
    trained: bool,
    pub featurizer: String,
    pub config: ContrastiveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    /// Mean cosine between matched caption/trajectory pairs.
    pub score: f64,
    /// Mean cosine over all mismatched pairs.
    pub random_pairing: f64,
    pub pairs: usize,
    pub featurizer: String,
    pub warnings: Vec<String>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

/// Unit rows plus the original norms.
fn normalize_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let n = m.row(i).norm();
        norms.push(n);
        if n > DEGENERATE_NORM {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (out, norms)
}

/// Backpropagates through row normalization.
fn normalize_rows_backward(unit: &DMatrix<f64>, norms: &[f64], d_unit: &DMatrix<f64>) -> DMatrix<f64> {
    let mut d = d_unit.clone();
    for (i, mut row) in d.row_iter_mut().enumerate() {
        if norms[i] <= DEGENERATE_NORM {
            row.fill(0.0);
            continue;
        }
        let u = unit.row(i);
        let dot = u.dot(&row);
        let new = (&row - u * dot) / norms[i];
        row.copy_from(&new);
    }
    d
}

fn log_softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.add_scalar_mut(-lse);
    }
    out
}

impl ContrastiveHead {
    /// Random projections; scoring refuses until [`ContrastiveHead::train`] runs.
    pub fn new(text_dim: usize, config: ContrastiveConfig) -> Result<Self> {
        if text_dim == 0 || config.dim == 0 {
            return Err(Error::invalid("contrastive head", "dimensions must be positive"));
        }
        if !(config.temperature > 0.0 && config.lr > 0.0) {
            return Err(Error::invalid("contrastive head", "temperature and lr must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = |rows: usize| {
            let n = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
            (0..rows * config.dim).map(|_| n.sample(&mut rng)).collect::<Vec<f64>>()
        };
        let text_proj = init(text_dim);
        let traj_proj = init(FEATURE_DIM);
        Ok(Self {
            text_dim,
            dim: config.dim,
            text_proj,
            traj_proj,
            feat_mean: vec![0.0; FEATURE_DIM],
            feat_std: vec![1.0; FEATURE_DIM],
            trained: false,
            featurizer: FEATURIZER_ID.to_string(),
            config,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn check_inputs(&self, text: &[Vec<f64>], feats: &[Vec<f64>]) -> Result<()> {
        if text.len() != feats.len() {
            return Err(Error::LengthMismatch { expected: text.len(), actual: feats.len() });
        }
        if let Some(t) = text.iter().find(|t| t.len() != self.text_dim) {
            return Err(Error::Shape(format!("text embedding has {} entries, head expects {}", t.len(), self.text_dim)));
        }
        Ok(())
    }

    fn standardized(&self, feats: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(feats.len(), FEATURE_DIM, |i, k| (feats[i][k] - self.feat_mean[k]) / self.feat_std[k])
    }

    fn text_matrix(text: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
        DMatrix::from_fn(text.len(), dim, |i, k| text[i][k])
    }

    /// Symmetric InfoNCE loss and gradients for the two projections.
    fn loss_and_grad(&self, a: &DMatrix<f64>, f: &DMatrix<f64>) -> (f64, DMatrix<f64>, DMatrix<f64>) {
        let wt = from_row_major(self.text_dim, self.dim, &self.text_proj);
        let wf = from_row_major(FEATURE_DIM, self.dim, &self.traj_proj);
        let u = a * &wt;
        let v = f * &wf;
        let (uh, un) = normalize_rows(&u);
        let (vh, vn) = normalize_rows(&v);
        let tau = self.config.temperature;
        let s = &uh * vh.transpose() / tau;
        let n = s.nrows() as f64;
        let lr = log_softmax_rows(&s);
        let lc = log_softmax_rows(&s.transpose());
        let loss = -(lr.diagonal().sum() + lc.diagonal().sum()) / (2.0 * n);
        let mut ds = lr.map(f64::exp) + lc.map(f64::exp).transpose();
        for i in 0..s.nrows() {
            ds[(i, i)] -= 2.0;
        }
        ds /= 2.0 * n * tau;
        let duh = &ds * &vh;
        let dvh = ds.transpose() * &uh;
        let du = normalize_rows_backward(&uh, &un, &duh);
        let dv = normalize_rows_backward(&vh, &vn, &dvh);
        (loss, a.transpose() * du, f.transpose() * dv)
    }

    /// Full-batch Adam on matched `(text embedding, trajectory)` pairs.
    /// Returns the loss per step.
    pub fn train(&mut self, text: &[Vec<f64>], trajectories: &[Trajectory]) -> Result<Vec<f64>> {
        let feats: Vec<Vec<f64>> = trajectories.iter().map(featurize).collect::<Result<_>>()?;
        self.check_inputs(text, &feats)?;
        if text.len() < 2 {
            return Err(Error::TooFewSamples { metric: "contrastive", required: 2, actual: text.len() });
        }
        let n = feats.len() as f64;
        for k in 0..FEATURE_DIM {
            let mean = feats.iter().map(|f| f[k]).sum::<f64>() / n;
            let var = feats.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n;
            self.feat_mean[k] = mean;
            self.feat_std[k] = var.sqrt().max(1e-9);
        }
        let a = Self::text_matrix(text, self.text_dim);
        let f = self.standardized(&feats);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut state = [(vec![0.0; self.text_proj.len()], vec![0.0; self.text_proj.len()]), (vec![0.0; self.traj_proj.len()], vec![0.0; self.traj_proj.len()])];
        let mut losses = Vec::with_capacity(self.config.steps);
        for t in 1..=self.config.steps {
            let (loss, gt, gf) = self.loss_and_grad(&a, &f);
            losses.push(loss);
            let c1 = 1.0 - f64::powi(b1, t as i32);
            let c2 = 1.0 - f64::powi(b2, t as i32);
            for ((w, g), (m, v)) in [(&mut self.text_proj, row_major(&gt)), (&mut self.traj_proj, row_major(&gf))].into_iter().zip(state.iter_mut()) {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    w[i] -= self.config.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        self.trained = true;
        Ok(losses)
    }

    /// Mean cosine of matched pairs, with the mean over mismatched pairs as
    /// the chance baseline.
    pub fn score(&self, text: &[Vec<f64>], trajectories: &[Trajectory]) -> Result<ContrastiveReport> {
        if !self.trained {
            return Err(Error::Model(
                "contrastive head is untrained; fit one with `trajgen clip-train` before requesting the clip metric".into(),
            ));
        }
        let feats: Vec<Vec<f64>> = trajectories.iter().map(featurize).collect::<Result<_>>()?;
        self.check_inputs(text, &feats)?;
        if text.is_empty() {
            return Err(Error::TooFewSamples { metric: "contrastive", required: 1, actual: 0 });
        }
        let wt = from_row_major(self.text_dim, self.dim, &self.text_proj);
        let wf = from_row_major(FEATURE_DIM, self.dim, &self.traj_proj);
        let (uh, un) = normalize_rows(&(Self::text_matrix(text, self.text_dim) * wt));
        let (vh, vn) = normalize_rows(&(self.standardized(&feats) * wf));
        let mut warnings = Vec::new();
        let degenerate = un.iter().chain(&vn).filter(|&&n| n <= DEGENERATE_NORM).count();
        if degenerate > 0 {
            let w = format!("{degenerate} embeddings have zero norm; their cosines count as 0");
            log::warn!("{w}");
            warnings.push(w);
        }
        let sims = &uh * vh.transpose();
        let n = sims.nrows();
        let score = sims.diagonal().sum() / n as f64;
        let random_pairing = if n > 1 { (sims.sum() - sims.diagonal().sum()) / (n * (n - 1)) as f64 } else { 0.0 };
        Ok(ContrastiveReport { score, random_pairing, pairs: n, featurizer: self.featurizer.clone(), warnings })
    }

    /// Cosine of one pair under the head (0 when either side is degenerate).
    pub fn cosine(&self, text: &[f64], traj: &Trajectory) -> Result<f64> {
        Ok(self.score(&[text.to_vec()], std::slice::from_ref(traj))?.score)
    }

    #[cfg(test)]
    fn numeric_check(&self, text: &[Vec<f64>], feats: &[Vec<f64>]) -> f64 {
        let a = Self::text_matrix(text, self.text_dim);
        let f = self.standardized(feats);
        let (_, gt, gf) = self.loss_and_grad(&a, &f);
        let (gt, gf) = (row_major(&gt), row_major(&gf));
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for side in 0..2 {
            let len = if side == 0 { self.text_proj.len() } else { self.traj_proj.len() };
            for i in (0..len).step_by(7) {
                let mut p = self.clone();
                let mut m = self.clone();
                let (wp, wm) = if side == 0 { (&mut p.text_proj, &mut m.text_proj) } else { (&mut p.traj_proj, &mut m.traj_proj) };
                wp[i] += h;
                wm[i] -= h;
                let num = (p.loss_and_grad(&a, &f).0 - m.loss_and_grad(&a, &f).0) / (2.0 * h);
                let ana = if side == 0 { gt[i] } else { gf[i] };
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            }
        }
        worst
    }
}

/// Mean over rows: a fixed-size embedding of a text latent.
pub fn pool_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len().max(1) as f64;
    let dim = rows.first().map_or(0, Vec::len);
    let sum = rows.iter().fold(DVector::zeros(dim), |acc, r| acc + DVector::from_column_slice(r));
    (sum / n).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_trajectory, SynthConfig};
    use crate::tagging::{tag_segments, TagThresholds};
    use rand::Rng;

    /// Text embeddings keyed on the dominant label of each trajectory, plus noise.
    fn corpus(n: usize) -> (Vec<Vec<f64>>, Vec<Trajectory>) {
        let cfg = SynthConfig { frames: 30, segments: [1, 1], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let th = TagThresholds::default();
        let mut text = Vec::new();
        let mut trajs = Vec::new();
        for s in 0..n as u64 {
            let rec = sample_trajectory(&cfg, s).unwrap();
            let tag = tag_segments(&rec.trajectory, &th).unwrap()[0].tag;
            let mut e: Vec<f64> = (0..16).map(|_| rng.random_range(-0.1..0.1)).collect();
            e[tag.translation_index() % 16] += 1.0;
            e[(tag.rotation.index() + 9) % 16] += 1.0;
            text.push(e);
            trajs.push(rec.trajectory);
        }
        (text, trajs)
    }

    #[test]
    fn gradients_match_differences() {
        let (text, trajs) = corpus(12);
        let feats: Vec<Vec<f64>> = trajs.iter().map(|t| featurize(t).unwrap()).collect();
        let head = ContrastiveHead::new(16, ContrastiveConfig { dim: 8, ..Default::default() }).unwrap();
        assert!(head.numeric_check(&text, &feats) < 1e-5);
    }

    #[test]
    fn untrained_head_refuses() {
        let (text, trajs) = corpus(4);
        let head = ContrastiveHead::new(16, ContrastiveConfig::default()).unwrap();
        assert!(matches!(head.score(&text, &trajs), Err(Error::Model(_))));
    }

    #[test]
    fn trained_head_separates_matched_pairs() {
        let (text, trajs) = corpus(200);
        let mut head = ContrastiveHead::new(16, ContrastiveConfig::default()).unwrap();
        let losses = head.train(&text[..150], &trajs[..150]).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let r = head.score(&text[150..], &trajs[150..]).unwrap();
        assert!(r.score - r.random_pairing >= 0.2, "{r:?}");
    }

    #[test]
    fn consistent_shuffle_keeps_score() {
        let (text, trajs) = corpus(40);
        let mut head = ContrastiveHead::new(16, ContrastiveConfig { steps: 50, ..Default::default() }).unwrap();
        head.train(&text, &trajs).unwrap();
        let a = head.score(&text, &trajs).unwrap();
        let (mut t2, mut j2) = (text.clone(), trajs.clone());
        t2.reverse();
        j2.reverse();
        let b = head.score(&t2, &j2).unwrap();
        assert!((a.score - b.score).abs() < 1e-12);
        assert!((a.random_pairing - b.random_pairing).abs() < 1e-12);
    }

    #[test]
    fn degenerate_embeddings_score_zero_with_warning() {
        let (_, trajs) = corpus(4);
        let mut head = ContrastiveHead::new(16, ContrastiveConfig { steps: 1, ..Default::default() }).unwrap();
        let (text, _) = corpus(4);
        head.train(&text, &trajs).unwrap();
        let zeros = vec![vec![0.0; 16]; 4];
        let r = head.score(&zeros, &trajs).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn head_serializes() {
        let head = ContrastiveHead::new(4, ContrastiveConfig { dim: 2, ..Default::default() }).unwrap();
        let json = serde_json::to_string(&head).unwrap();
        assert_eq!(serde_json::from_str::<ContrastiveHead>(&json).unwrap(), head);
        assert_eq!(pool_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), vec![2.0, 3.0]);
    }
}
