//! Conditional auto-regressive trajectory generator: condition encoders,
//! latent fusion, causal decoder, loss, training and sampling.

mod checkpoint;
mod decoder;
mod generate;
mod layers;
mod ops;
mod rgbd;
mod text;
mod train;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generate::{generate, generate_batch, Sampler};
pub use layers::{Grads, ParamEntry, ParamId, ParamStore};
pub use ops::{AttentionMask, Real};
pub use rgbd::{Grid, PATCH};
pub use text::{TextTokenizer, HASH_BUCKETS};
pub use train::{
    evaluate, gradient_check, prepare_examples, train, AdamW, EpochStats, GradCheckReport, Schedule, TrainExample, TrainOutcome, TrainState,
};

use crate::error::{Error, Result};
use crate::tokenizer::{CodecConfig, TOKENS_PER_POSE};
use decoder::{DecoderCache, DecoderIds};
use rgbd::{PatchCache, PatchEncoderIds};
use text::{TextCache, TextEncoderIds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Quantization bins `B`; the vocabulary is `B + 4`.
    pub bins: u32,
    /// Poses per trajectory `N`.
    pub traj_len: usize,
    /// Latent width `L`.
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Text latent rows `M_T`.
    pub text_len: usize,
    /// Image latent rows `M_I` (RGBD mode only).
    pub image_len: usize,
    /// Depth latent rows `M_D` (RGBD mode only).
    pub depth_len: usize,
    pub text_layers: usize,
    /// Weight of the `||Z||^2` term.
    pub lambda: f64,
    /// Whether the model is conditioned on a first RGB frame and depth map.
    pub rgbd: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-scale configuration: width 1024, 12 layers, N=60.
    pub fn full() -> Self {
        Self {
            bins: 256,
            traj_len: 60,
            latent_dim: 1024,
            layers: 12,
            // 1024 is not divisible by 12; 16 heads of width 64.
            heads: 16,
            text_len: 77,
            image_len: 257,
            depth_len: 257,
            text_layers: 2,
            lambda: 1e-8,
            rgbd: false,
            seed: 0,
        }
    }

    /// Small configuration that trains on a CPU in minutes. RGBD inputs
    /// are 64x64 (16 patches plus a summary row).
    pub fn desk() -> Self {
        Self { latent_dim: 128, layers: 4, heads: 4, traj_len: 30, text_len: 32, image_len: 17, depth_len: 17, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bins", self.bins as usize),
            ("traj_len", self.traj_len),
            ("latent_dim", self.latent_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("text_len", self.text_len),
            ("text_layers", self.text_layers),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::invalid(what, "must be positive"));
            }
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::invalid("heads", format!("latent_dim {} is not divisible by {}", self.latent_dim, self.heads)));
        }
        if self.rgbd && (self.image_len < 2 || self.depth_len < 2) {
            return Err(Error::invalid("image_len/depth_len", "RGBD mode needs a summary row and at least one patch"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda", "must be finite and non-negative"));
        }
        self.codec().validate()
    }

    pub fn vocab_size(&self) -> usize {
        self.bins as usize + 4
    }

    /// Condition rows `M`.
    pub fn condition_rows(&self) -> usize {
        self.text_len + if self.rgbd { self.image_len + self.depth_len } else { 0 }
    }

    /// Longest token prefix the decoder accepts: `10N + 2`.
    pub fn max_tokens(&self) -> usize {
        TOKENS_PER_POSE * self.traj_len + 2
    }

    pub fn capacity(&self) -> usize {
        self.condition_rows() + self.max_tokens()
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig { bins: self.bins, traj_len: self.traj_len, ..CodecConfig::default() }
    }
}

/// Caption plus, in RGBD mode, the first frame and its depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInput {
    pub text: String,
    pub image: Option<Grid>,
    pub depth: Option<Grid>,
}

impl ConditionInput {
    pub fn text(caption: impl Into<String>) -> Self {
        Self { text: caption.into(), image: None, depth: None }
    }
}

/// Fused condition matrix `Z = [Z_T; Z_I; Z_D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<F> {
    pub z: Array2<F>,
    pub text_rows: usize,
    pub image_rows: usize,
    pub depth_rows: usize,
}

impl<F: Real> LatentCode<F> {
    pub fn rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn squared_norm(&self) -> f64 {
        self.z.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum()
    }
}

/// Row-wise concatenation in text, image, depth order. Image and depth
/// must both be present or both absent.
pub fn fuse_conditions<F: Real>(text: Array2<F>, image: Option<Array2<F>>, depth: Option<Array2<F>>) -> Result<LatentCode<F>> {
    let text_rows = text.nrows();
    match (image, depth) {
        (None, None) => Ok(LatentCode { z: text, text_rows, image_rows: 0, depth_rows: 0 }),
        (Some(i), Some(d)) => {
            if i.ncols() != text.ncols() || d.ncols() != text.ncols() {
                return Err(Error::Shape("condition latents differ in width".into()));
            }
            let (image_rows, depth_rows) = (i.nrows(), d.nrows());
            let z = concatenate(Axis(0), &[text.view(), i.view(), d.view()]).expect("same width");
            Ok(LatentCode { z, text_rows, image_rows, depth_rows })
        }
        _ => Err(Error::invalid("condition", "image and depth must be given together")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Mean cross-entropy over non-PAD targets.
    pub ce: f64,
    /// `lambda * ||Z||^2`.
    pub reg: f64,
    pub tokens: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.reg
    }
}

/// PAD-masked mean cross-entropy of `logits` (row `i` predicts
/// `targets[i]`) plus `lambda * ||z||^2`.
pub fn compute_loss<F: Real>(logits: &Array2<F>, targets: &[u32], pad: u32, z: &Array2<F>, lambda: f64) -> Result<LossParts> {
    loss_and_grad(logits, targets, pad, z, lambda, false).map(|(l, _)| l)
}

fn loss_and_grad<F: Real>(
    logits: &Array2<F>,
    targets: &[u32],
    pad: u32,
    z: &Array2<F>,
    lambda: f64,
    want_grad: bool,
) -> Result<(LossParts, Option<Array2<F>>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::LengthMismatch { expected: logits.nrows(), actual: targets.len() });
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.ncols()) {
        return Err(Error::invalid("target", format!("id {t} outside {} classes", logits.ncols())));
    }
    let tokens = targets.iter().filter(|&&t| t != pad).count();
    let mut probs = logits.clone();
    softmax_rows_wide(&mut probs);
    let mut ce = 0.0;
    for (row, &t) in probs.rows().into_iter().zip(targets) {
        if t != pad {
            ce -= row[t as usize].to_f64().unwrap_or(f64::NAN).max(f64::MIN_POSITIVE).ln();
        }
    }
    let denom = tokens.max(1) as f64;
    let reg = lambda * z.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>();
    let parts = LossParts { ce: ce / denom, reg, tokens };
    let grad = want_grad.then(|| {
        let inv = ops::cast::<F>(1.0 / denom);
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            if t == pad {
                row.fill(F::zero());
            } else {
                row[t as usize] -= F::one();
                row.mapv_inplace(|v| v * inv);
            }
        }
        probs
    });
    Ok((parts, grad))
}

/// Softmax computed in f64 per row for an accurate loss even in f32 mode.
fn softmax_rows_wide<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap_or(f64::NAN)));
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64().unwrap_or(f64::NAN) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (v, e) in row.iter_mut().zip(exps) {
            *v = ops::cast(e / sum);
        }
    }
}

/// Model weights and the handles that name them.
#[derive(Debug, Clone)]
pub struct Model<F> {
    cfg: ModelConfig,
    params: ParamStore<F>,
    text: TextEncoderIds,
    image: Option<PatchEncoderIds>,
    depth: Option<PatchEncoderIds>,
    decoder: DecoderIds,
    tokenizer: TextTokenizer,
}

pub(crate) struct ConditionCache<F> {
    text: TextCache<F>,
    image: Option<PatchCache<F>>,
    depth: Option<PatchCache<F>>,
}

pub(crate) struct ForwardCache<F> {
    condition: ConditionCache<F>,
    decoder: DecoderCache<F>,
    latent: LatentCode<F>,
}

impl<F: Real> Model<F> {
    /// Randomly initialized weights, deterministic in `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tokenizer = TextTokenizer::new();
        let l = cfg.latent_dim;
        let mut params = ParamStore::default();
        let text = TextEncoderIds::init(&mut params, tokenizer.vocab_size(), cfg.text_len, l, cfg.text_layers, &mut rng);
        let (image, depth) = if cfg.rgbd {
            (
                Some(PatchEncoderIds::init(&mut params, "image", cfg.image_len, l, &mut rng)),
                Some(PatchEncoderIds::init(&mut params, "depth", cfg.depth_len, l, &mut rng)),
            )
        } else {
            (None, None)
        };
        let decoder = DecoderIds::init(&mut params, cfg.vocab_size(), cfg.capacity(), l, cfg.layers, &mut rng);
        Ok(Self { cfg, params, text, image, depth, decoder, tokenizer })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match
    /// the layout `cfg` implies, in order.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        let expected = model.params.entries();
        if expected.len() != params.len() {
            return Err(Error::Model(format!("expected {} tensors, found {}", expected.len(), params.len())));
        }
        for (a, b) in expected.iter().zip(params.entries()) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::Model(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.dim(),
                    a.name,
                    a.value.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn tokenizer(&self) -> &TextTokenizer {
        &self.tokenizer
    }

    /// Same architecture and weights in another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            text: self.text.clone(),
            image: self.image,
            depth: self.depth,
            decoder: self.decoder.clone(),
            tokenizer: self.tokenizer.clone(),
        }
    }

    /// `M_T x L` text latent.
    pub fn encode_text(&self, caption: &str) -> Array2<F> {
        text::text_forward(&self.params, &self.text, self.tokenizer.tokenize(caption), self.cfg.heads).0
    }

    /// Mean over the rows of the text latent, for retrieval and scoring.
    pub fn text_embedding(&self, caption: &str) -> Vec<f64> {
        let z = self.encode_text(caption);
        z.mean_axis(Axis(0)).expect("at least one row").iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// `(M_I x L, M_D x L)` latents of the first frame and its depth map.
    pub fn encode_rgbd(&self, image: &Grid, depth: &Grid) -> Result<(Array2<F>, Array2<F>)> {
        let (ie, de) = self.rgbd_encoders()?;
        if (image.height(), image.width()) != (depth.height(), depth.width()) {
            return Err(Error::Shape("image and depth grids differ in size".into()));
        }
        let zi = rgbd::patch_forward(&self.params, &ie, image)?.0;
        let zd = rgbd::patch_forward(&self.params, &de, depth)?.0;
        Ok((zi, zd))
    }

    fn rgbd_encoders(&self) -> Result<(PatchEncoderIds, PatchEncoderIds)> {
        match (self.image, self.depth) {
            (Some(i), Some(d)) => Ok((i, d)),
            _ => Err(Error::Model("this model was trained on text only; RGBD conditions are not supported".into())),
        }
    }

    /// Encodes and fuses a condition, checking it matches the trained modality.
    pub fn encode(&self, cond: &ConditionInput) -> Result<LatentCode<F>> {
        self.encode_cached(cond).map(|(l, _)| l)
    }

    pub(crate) fn encode_cached(&self, cond: &ConditionInput) -> Result<(LatentCode<F>, ConditionCache<F>)> {
        let (zt, text) = text::text_forward(&self.params, &self.text, self.tokenizer.tokenize(&cond.text), self.cfg.heads);
        let (zi, zd, image, depth) = match (&cond.image, &cond.depth, self.cfg.rgbd) {
            (None, None, false) => (None, None, None, None),
            (Some(i), Some(d), true) => {
                let (ie, de) = self.rgbd_encoders()?;
                if (i.height(), i.width()) != (d.height(), d.width()) {
                    return Err(Error::Shape("image and depth grids differ in size".into()));
                }
                let (zi, ci) = rgbd::patch_forward(&self.params, &ie, i)?;
                let (zd, cd) = rgbd::patch_forward(&self.params, &de, d)?;
                (Some(zi), Some(zd), Some(ci), Some(cd))
            }
            (None, None, true) => {
                return Err(Error::Model("this model was trained with text + RGBD conditions; an image and depth map are required".into()))
            }
            (Some(_), Some(_), false) => {
                return Err(Error::Model("this model was trained on text only; RGBD conditions are not supported".into()))
            }
            _ => return Err(Error::invalid("condition", "image and depth must be given together")),
        };
        let latent = fuse_conditions(zt, zi, zd)?;
        Ok((latent, ConditionCache { text, image, depth }))
    }

    fn condition_backward(&self, cache: &ConditionCache<F>, latent: &LatentCode<F>, dz: &Array2<F>, grads: &mut Grads<F>) {
        let t = latent.text_rows;
        text::text_backward(&self.params, &self.text, &cache.text, &dz.slice(s![..t, ..]).to_owned(), grads);
        if let (Some(ie), Some(ci)) = (&self.image, &cache.image) {
            let d = dz.slice(s![t..t + latent.image_rows, ..]).to_owned();
            rgbd::patch_backward(&self.params, ie, ci, &d, grads);
        }
        if let (Some(de), Some(cd)) = (&self.depth, &cache.depth) {
            let d = dz.slice(s![t + latent.image_rows.., ..]).to_owned();
            rgbd::patch_backward(&self.params, de, cd, &d, grads);
        }
    }

    fn check_prefix(&self, z: &ArrayView2<F>, ids: &[u32]) -> Result<()> {
        if z.ncols() != self.cfg.latent_dim {
            return Err(Error::Shape(format!("latent width {} != {}", z.ncols(), self.cfg.latent_dim)));
        }
        if z.nrows() + ids.len() > self.cfg.capacity() {
            return Err(Error::Model(format!(
                "{} condition rows + {} tokens exceed decoder capacity {}",
                z.nrows(),
                ids.len(),
                self.cfg.capacity()
            )));
        }
        if let Some(&t) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size()) {
            return Err(Error::TokenOutOfRange { token: t, offset: 0, max: self.cfg.vocab_size() as u32 - 1 });
        }
        Ok(())
    }

    /// One logit row over `B + 4` classes per id of `prev_ids`.
    pub fn logits(&self, latent: &LatentCode<F>, prev_ids: &[u32]) -> Result<Array2<F>> {
        self.check_prefix(&latent.z.view(), prev_ids)?;
        Ok(decoder::decoder_forward(&self.params, &self.decoder, &latent.z.view(), prev_ids, self.cfg.heads).0)
    }

    pub(crate) fn forward(&self, cond: &ConditionInput, inputs: &[u32]) -> Result<(Array2<F>, ForwardCache<F>)> {
        let (latent, condition) = self.encode_cached(cond)?;
        self.check_prefix(&latent.z.view(), inputs)?;
        let (logits, decoder) = decoder::decoder_forward(&self.params, &self.decoder, &latent.z.view(), inputs, self.cfg.heads);
        Ok((logits, ForwardCache { condition, decoder, latent }))
    }

    /// Teacher-forced loss of one token sequence (`BOS ... EOS PAD*`).
    pub fn loss(&self, cond: &ConditionInput, ids: &[u32]) -> Result<LossParts> {
        let (inputs, targets) = shift(ids)?;
        let (logits, cache) = self.forward(cond, inputs)?;
        compute_loss(&logits, targets, self.cfg.bins + 3, &cache.latent.z, self.cfg.lambda)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, cond: &ConditionInput, ids: &[u32]) -> Result<(LossParts, Grads<F>)> {
        let (inputs, targets) = shift(ids)?;
        let (logits, cache) = self.forward(cond, inputs)?;
        let (parts, dlogits) = loss_and_grad(&logits, targets, self.cfg.bins + 3, &cache.latent.z, self.cfg.lambda, true)?;
        let mut grads = self.params.zero_grads();
        let mut dz = decoder::decoder_backward(&self.params, &self.decoder, &cache.decoder, &dlogits.expect("requested"), &mut grads);
        let two_lambda = ops::cast::<F>(2.0 * self.cfg.lambda);
        dz.zip_mut_with(&cache.latent.z, |d, &z| *d += two_lambda * z);
        self.condition_backward(&cache.condition, &cache.latent, &dz, &mut grads);
        Ok((parts, grads))
    }
}

/// Teacher forcing: inputs drop the last id, targets drop the first.
fn shift(ids: &[u32]) -> Result<(&[u32], &[u32])> {
    if ids.len() < 2 {
        return Err(Error::invalid("token sequence", "need at least BOS and one target"));
    }
    Ok((&ids[..ids.len() - 1], &ids[1..]))
}
