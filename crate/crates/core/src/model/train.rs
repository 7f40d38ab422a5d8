//! Teacher-forced training with AdamW, plus a finite-difference gradient check.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{Grads, ParamStore};
use super::ops::{cast, Real};
use super::{ConditionInput, Grid, LossParts, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::io::load_pgm;
use crate::preprocess::resample_fixed;
use crate::synth::{DatasetManifest, Split};
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup, in optimizer steps.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Stop once an evaluation pass over the training set reaches this
    /// mean cross-entropy. 0 disables early stopping.
    pub target_ce: f64,
    /// Reshuffle the data every epoch (seeded); otherwise keep file order.
    pub shuffle: bool,
    /// Seed for the data order.
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl Schedule {
    pub fn full() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_clip: 0.0,
            target_ce: 0.0,
            shuffle: true,
            seed: 0,
        }
    }

    /// A learning rate that converges in hundreds rather than tens of
    /// thousands of steps on small corpora.
    pub fn desk() -> Self {
        Self { epochs: 300, lr: 1e-3, warmup_steps: 50, grad_clip: 1.0, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        let finite_nonneg = [("lr", self.lr), ("eps", self.eps), ("weight_decay", self.weight_decay), ("grad_clip", self.grad_clip), ("target_ce", self.target_ce)];
        for (what, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(what, "must be finite and non-negative"));
            }
        }
        for (what, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(what, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
    pub step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let g = params.zero_grads();
        Self { m: g.values.clone(), v: g.values, step: 0 }
    }

    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &Grads<F>, sched: &Schedule) {
        let lr = sched.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (sched.beta1, sched.beta2);
        let c1 = cast::<F>(1.0 - b1.powi(t));
        let c2 = cast::<F>(1.0 - b2.powi(t));
        let (b1, b2) = (cast::<F>(b1), cast::<F>(b2));
        let (lr, eps, wd) = (cast::<F>(lr), cast::<F>(sched.eps), cast::<F>(sched.weight_decay));
        for (((entry, g), m), v) in params.entries_mut().iter_mut().zip(&grads.values).zip(&mut self.m).zip(&mut self.v) {
            let decay = entry.decay;
            ndarray::Zip::from(&mut entry.value).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mut delta = (*m / c1) / ((*v / c2).sqrt() + eps);
                if decay {
                    delta += wd * *p;
                }
                *p -= lr * delta;
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-token cross-entropy over the epoch's samples.
    pub mean_ce: f64,
    /// Mean `lambda * ||Z||^2` over the epoch's samples.
    pub reg_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: AdamW<F>,
    pub history: Vec<EpochStats>,
}

impl<F: Real> TrainState<F> {
    pub fn new(model: &Model<F>) -> Self {
        Self { epoch: 0, optimizer: AdamW::new(model.params()), history: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub condition: ConditionInput,
    /// `BOS, values, EOS`.
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Mean CE of the final evaluation pass, when early stopping triggered.
    pub converged_ce: Option<f64>,
}

/// Tokenizes the given splits of a manifest. Records that fail are listed;
/// more than 1% failures aborts with all reasons.
pub fn prepare_examples(manifest: &DatasetManifest, cfg: &ModelConfig, splits: &[Split]) -> Result<Vec<TrainExample>> {
    let codec = cfg.codec();
    let records: Vec<_> = manifest.records.iter().filter(|r| splits.contains(&r.split)).collect();
    if records.is_empty() {
        return Err(Error::invalid("dataset", "no records in the requested splits"));
    }
    let results: Vec<Result<TrainExample>> = records
        .par_iter()
        .map(|r| {
            let mut traj = manifest.load_trajectory(r)?;
            if traj.len() != cfg.traj_len {
                traj = resample_fixed(&traj, cfg.traj_len)?;
            }
            let ids = tokenize(&traj, &codec)?.into_ids();
            let (image, depth) = match (&r.frame, cfg.rgbd) {
                (_, false) => (None, None),
                (Some(f), true) => (
                    Some(Grid::image_from_gray(&load_pgm(&manifest.resolve(&f.image))?)),
                    Some(Grid::depth_from_gray(&load_pgm(&manifest.resolve(&f.depth))?)),
                ),
                (None, true) => return Err(Error::invalid("record", "RGBD training needs frame paths")),
            };
            Ok(TrainExample { id: r.id.clone(), condition: ConditionInput { text: r.caption.clone(), image, depth }, ids })
        })
        .collect();
    let mut examples = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(e) => examples.push(e),
            Err(e) => failures.push(format!("{}: {e}", r.id)),
        }
    }
    for f in &failures {
        log::warn!("skipping record {f}");
    }
    if failures.len() * 100 > records.len() {
        return Err(Error::TooManyInvalidRecords { invalid: failures.len(), total: records.len(), details: failures });
    }
    Ok(examples)
}

fn batch_grads<F: Real>(model: &Model<F>, batch: &[&TrainExample]) -> Result<(Vec<LossParts>, Grads<F>)> {
    let per_sample: Vec<Result<(LossParts, Grads<F>)>> =
        batch.par_iter().map(|e| model.loss_and_grad(&e.condition, &e.ids)).collect();
    let mut parts = Vec::with_capacity(batch.len());
    let mut total: Option<Grads<F>> = None;
    // Summed in batch order so results do not depend on thread scheduling.
    for r in per_sample {
        let (p, g) = r?;
        parts.push(p);
        match &mut total {
            Some(t) => t.add_assign(&g),
            None => total = Some(g),
        }
    }
    let mut total = total.ok_or_else(|| Error::invalid("batch", "empty"))?;
    total.scale(cast(1.0 / batch.len() as f64));
    Ok((parts, total))
}

/// Mean per-token cross-entropy of `examples` under the current weights.
pub fn evaluate<F: Real>(model: &Model<F>, examples: &[TrainExample]) -> Result<EpochStats> {
    let parts: Vec<Result<LossParts>> = examples.par_iter().map(|e| model.loss(&e.condition, &e.ids)).collect();
    summarize(0, &parts.into_iter().collect::<Result<Vec<_>>>()?)
}

fn summarize(epoch: usize, parts: &[LossParts]) -> Result<EpochStats> {
    let tokens: usize = parts.iter().map(|p| p.tokens).sum();
    if tokens == 0 {
        return Err(Error::invalid("dataset", "no target tokens"));
    }
    let ce = parts.iter().map(|p| p.ce * p.tokens as f64).sum::<f64>() / tokens as f64;
    let reg = parts.iter().map(|p| p.reg).sum::<f64>() / parts.len() as f64;
    Ok(EpochStats { epoch, mean_ce: ce, reg_term: reg })
}

fn epoch_order(n: usize, sched: &Schedule, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if sched.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Trains from `state` until `sched.epochs` epochs are complete or the
/// early-stopping target is reached. `on_epoch` runs after every epoch
/// (checkpointing, logging); its errors stop training.
pub fn train<F: Real>(
    model: &mut Model<F>,
    examples: &[TrainExample],
    sched: &Schedule,
    state: &mut TrainState<F>,
    mut on_epoch: impl FnMut(&Model<F>, &TrainState<F>, &EpochStats) -> Result<()>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("dataset", "no training examples"));
    }
    let mut converged_ce = None;
    while state.epoch < sched.epochs {
        let order = epoch_order(examples.len(), sched, state.epoch);
        let mut parts = Vec::with_capacity(examples.len());
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (p, mut grads) = batch_grads(model, &batch)?;
            if p.iter().any(|p| !p.total().is_finite()) {
                return Err(Error::Model(format!("non-finite loss in epoch {}", state.epoch)));
            }
            parts.extend(p);
            if sched.grad_clip > 0.0 {
                let norm = grads.norm();
                if norm > sched.grad_clip {
                    grads.scale(cast(sched.grad_clip / norm));
                }
            }
            state.optimizer.update(model.params_mut(), &grads, sched);
        }
        let stats = summarize(state.epoch, &parts)?;
        log::info!("epoch {} mean_ce {:.4} reg {:.3e}", stats.epoch, stats.mean_ce, stats.reg_term);
        state.history.push(stats);
        state.epoch += 1;
        on_epoch(model, state, &stats)?;
        if sched.target_ce > 0.0 && stats.mean_ce <= 2.0 * sched.target_ce {
            let eval = evaluate(model, examples)?;
            if eval.mean_ce <= sched.target_ce {
                converged_ce = Some(eval.mean_ce);
                break;
            }
        }
    }
    Ok(TrainOutcome { history: state.history.clone(), converged_ce })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst probe.
    pub worst: String,
}

/// Relative errors below this gradient magnitude are measured against it.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the training loss with central
/// differences at `probes` parameters, in 64-bit arithmetic. Tensors are
/// picked uniformly; within a tensor, entries with a non-zero analytic
/// gradient are preferred so unused embedding rows do not dilute the check.
pub fn gradient_check(cfg: &ModelConfig, probes: usize, seed: u64) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codec = cfg.codec();
    let mut ids = vec![codec.bos()];
    ids.extend((0..10 * cfg.traj_len).map(|_| rng.random_range(0..=cfg.bins)));
    ids.push(codec.eos());
    ids.push(codec.pad());
    let condition = if cfg.rgbd {
        let side = rgbd_side(cfg.image_len)?;
        let grid = |rng: &mut ChaCha8Rng| {
            Grid::new(side, side, (0..side * side * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
        };
        let image = grid(&mut rng);
        let depth = Grid::depth(side, side, &(0..side * side).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>())?;
        ConditionInput { text: "The camera trucks right, then pans left.".into(), image: Some(image), depth: Some(depth) }
    } else {
        ConditionInput::text("The camera trucks right, then pans left.")
    };
    let (_, grads) = model.loss_and_grad(&condition, &ids)?;
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    let n_tensors = model.params().len();
    for _ in 0..probes {
        let t = rng.random_range(0..n_tensors);
        let g = &grads.values[t];
        let nonzero: Vec<usize> = g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        let flat = if nonzero.is_empty() { rng.random_range(0..g.len()) } else { nonzero[rng.random_range(0..nonzero.len())] };
        let (r, c) = (flat / g.ncols(), flat % g.ncols());
        let mut probe = model.clone();
        let orig = probe.params().entries()[t].value[(r, c)];
        probe.params_mut().entries_mut()[t].value[(r, c)] = orig + h;
        let plus = probe.loss(&condition, &ids)?.total();
        probe.params_mut().entries_mut()[t].value[(r, c)] = orig - h;
        let minus = probe.loss(&condition, &ids)?.total();
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = g[(r, c)];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = model.params().entries()[t].name.clone();
        }
    }
    Ok(GradCheckReport { probes, max_rel_error: max_rel, worst })
}

/// Side length of a square grid giving `rows` latent rows.
pub(crate) fn rgbd_side(rows: usize) -> Result<usize> {
    let patches = rows.saturating_sub(1);
    let per_side = (patches as f64).sqrt().round() as usize;
    if per_side == 0 || per_side * per_side != patches {
        return Err(Error::invalid("image_len", format!("{rows} is not a square patch count plus one")));
    }
    Ok(per_side * super::PATCH)
}
