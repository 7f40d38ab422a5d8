//! Auto-regressive sampling with structural masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::decoder::{prefill, step, DecoderState};
use super::ops::Real;
use super::{LatentCode, Model};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, TOKENS_PER_POSE};

/// Poses a sequence must contain before EOS may be sampled.
const MIN_POSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    TopK(usize),
    Nucleus(f64),
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Nucleus(0.9)
    }
}

impl Sampler {
    pub fn validate(&self, temperature: f64) -> Result<()> {
        match *self {
            Sampler::Greedy => Ok(()),
            Sampler::TopK(0) => Err(Error::invalid("top-k", "k must be positive")),
            Sampler::Nucleus(p) if !(p > 0.0 && p <= 1.0) => Err(Error::invalid("nucleus", "p must lie in (0, 1]")),
            _ if !(temperature.is_finite() && temperature > 0.0) => Err(Error::invalid("temperature", "must be positive")),
            _ => Ok(()),
        }
    }

    /// Picks a class among `allowed` (ascending ids) given their logits.
    fn pick(&self, allowed: &[u32], logits: &[f64], temperature: f64, rng: &mut impl Rng) -> u32 {
        let argmax = || {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            allowed[best]
        };
        if *self == Sampler::Greedy {
            return argmax();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<(usize, f64)> = logits.iter().map(|&v| ((v - max) / temperature).exp()).enumerate().collect();
        // Descending probability, ascending id on ties.
        probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = match *self {
            Sampler::TopK(k) => k.min(probs.len()),
            Sampler::Nucleus(p) => {
                let total: f64 = probs.iter().map(|x| x.1).sum();
                let mut acc = 0.0;
                let mut n = 0;
                for (_, w) in &probs {
                    acc += w / total;
                    n += 1;
                    if acc >= p {
                        break;
                    }
                }
                n
            }
            Sampler::Greedy => unreachable!(),
        };
        probs.truncate(keep);
        let total: f64 = probs.iter().map(|x| x.1).sum();
        if !(total.is_finite() && total > 0.0) {
            return argmax();
        }
        let mut u = rng.random::<f64>() * total;
        for &(i, w) in &probs {
            if u < w {
                return allowed[i];
            }
            u -= w;
        }
        allowed[probs[probs.len() - 1].0]
    }
}

fn finish<F: Real>(
    model: &Model<F>,
    mut state: DecoderState<F>,
    sampler: Sampler,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    let cfg = model.config();
    let codec = cfg.codec();
    let heads = cfg.heads;
    let limit = TOKENS_PER_POSE * cfg.traj_len;
    let values: Vec<u32> = (0..=cfg.bins).collect();
    let mut with_eos = values.clone();
    with_eos.push(codec.eos());
    let mut ids = vec![codec.bos()];
    let mut logits = step(model.params(), &model.decoder, &mut state, codec.bos(), heads);
    loop {
        let produced = ids.len() - 1;
        if produced == limit {
            ids.push(codec.eos());
            break;
        }
        let eos_ok = produced % TOKENS_PER_POSE == 0 && produced / TOKENS_PER_POSE >= MIN_POSES;
        let allowed = if eos_ok { &with_eos } else { &values };
        let scores: Vec<f64> = allowed.iter().map(|&t| logits[t as usize].to_f64().unwrap_or(f64::NEG_INFINITY)).collect();
        let next = sampler.pick(allowed, &scores, temperature, rng);
        ids.push(next);
        if next == codec.eos() {
            break;
        }
        logits = step(model.params(), &model.decoder, &mut state, next, heads);
    }
    ids.resize(codec.sequence_len(), codec.pad());
    TokenSequence::parse(ids, cfg.bins)
}

fn start<F: Real>(model: &Model<F>, latent: &LatentCode<F>, sampler: Sampler, temperature: f64) -> Result<DecoderState<F>> {
    sampler.validate(temperature)?;
    model.check_prefix(&latent.z.view(), &[])?;
    let cfg = model.config();
    if latent.rows() != cfg.condition_rows() {
        return Err(Error::Model(format!("latent has {} rows, model expects {}", latent.rows(), cfg.condition_rows())));
    }
    Ok(prefill(model.params(), &model.decoder, &latent.z.view(), cfg.heads, cfg.capacity()))
}

/// One sequence from `BOS`: value tokens only at value positions, EOS only
/// after a whole pose (and at least two), forced after `10N` values.
pub fn generate<F: Real>(model: &Model<F>, latent: &LatentCode<F>, sampler: Sampler, temperature: f64, seed: u64) -> Result<TokenSequence> {
    let state = start(model, latent, sampler, temperature)?;
    finish(model, state, sampler, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `n` sequences sharing one condition prefill; sequence `i` draws from
/// stream `i` of the seeded generator, so results do not depend on threads.
pub fn generate_batch<F: Real>(
    model: &Model<F>,
    latent: &LatentCode<F>,
    n: usize,
    sampler: Sampler,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    let state = start(model, latent, sampler, temperature)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            finish(model, state.clone(), sampler, temperature, &mut rng)
        })
        .collect()
}
