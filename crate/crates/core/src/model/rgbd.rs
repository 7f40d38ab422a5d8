//! Patch encoders for the first RGB frame and its depth map.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::layers::{Grads, ParamId, ParamStore, INIT_STD};
use super::ops::{cast, gelu, gelu_grad, linear, linear_backward, normal_init, Real};
use crate::error::{Error, Result};
use crate::preprocess::GrayFrame;

pub const PATCH: usize = 16;
pub const CHANNELS: usize = 3;
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

/// Row-major `height x width x 3` grid of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!("grid {height}x{width}x3 needs {} values, got {}", height * width * CHANNELS, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid value"));
        }
        Ok(Self { height, width, data })
    }

    /// Grayscale image in `[-1, 1]`, replicated to three channels.
    pub fn image_from_gray(frame: &GrayFrame) -> Self {
        Self::replicate(frame, |p| p / 127.5 - 1.0)
    }

    /// Depth in `[0, 1]` from an 8-bit depth map, replicated to three channels.
    pub fn depth_from_gray(frame: &GrayFrame) -> Self {
        Self::replicate(frame, |p| p / 255.0)
    }

    /// Single-channel depth values (finite, non-negative) expanded to three channels.
    pub fn depth(height: usize, width: usize, depth: &[f64]) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::Shape(format!("depth {height}x{width} needs {} values, got {}", height * width, depth.len())));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid("depth", "values must be finite and non-negative"));
        }
        Self::new(height, width, depth.iter().flat_map(|&d| [d; CHANNELS]).collect())
    }

    fn replicate(frame: &GrayFrame, f: impl Fn(f64) -> f64) -> Self {
        let data = frame.pixels().iter().flat_map(|&p| [f(p as f64); CHANNELS]).collect();
        Self { height: frame.height(), width: frame.width(), data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Latent rows this grid produces: one per patch plus the summary row.
    pub fn latent_rows(&self) -> usize {
        (self.height / PATCH) * (self.width / PATCH) + 1
    }

    /// Non-overlapping 16x16 patches in raster order, each flattened
    /// row-major with channels innermost.
    pub fn patches<F: Real>(&self) -> Result<Array2<F>> {
        if self.height % PATCH != 0 || self.width % PATCH != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!("grid {}x{} is not a positive multiple of {PATCH}", self.height, self.width)));
        }
        let (ph, pw) = (self.height / PATCH, self.width / PATCH);
        let mut out = Array2::zeros((ph * pw, PATCH_DIM));
        for (p, mut row) in out.rows_mut().into_iter().enumerate() {
            let (py, px) = (p / pw, p % pw);
            let mut k = 0;
            for y in 0..PATCH {
                let start = ((py * PATCH + y) * self.width + px * PATCH) * CHANNELS;
                for &v in &self.data[start..start + PATCH * CHANNELS] {
                    row[k] = cast(v);
                    k += 1;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PatchEncoderIds {
    pub w_embed: ParamId,
    pub b_embed: ParamId,
    pub summary: ParamId,
    pub pos: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

impl PatchEncoderIds {
    pub fn init<F: Real>(store: &mut ParamStore<F>, name: &str, rows: usize, l: usize, rng: &mut impl Rng) -> Self {
        let embed_std = 1.0 / (PATCH_DIM as f64).sqrt();
        Self {
            w_embed: store.add(format!("{name}.w_embed"), normal_init(PATCH_DIM, l, embed_std, rng), true),
            b_embed: store.add(format!("{name}.b_embed"), Array2::zeros((1, l)), false),
            summary: store.add(format!("{name}.summary"), normal_init(1, l, INIT_STD, rng), false),
            pos: store.add(format!("{name}.pos"), normal_init(rows, l, INIT_STD, rng), true),
            w_1: store.add(format!("{name}.mlp.w_1"), normal_init(l, l, INIT_STD, rng), true),
            b_1: store.add(format!("{name}.mlp.b_1"), Array2::zeros((1, l)), false),
            w_2: store.add(format!("{name}.mlp.w_2"), normal_init(l, l, INIT_STD, rng), true),
            b_2: store.add(format!("{name}.mlp.b_2"), Array2::zeros((1, l)), false),
        }
    }
}

pub struct PatchCache<F> {
    patches: Array2<F>,
    h: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

/// Embeds patches, prepends a summary row (mean patch embedding plus a
/// learned vector), adds positions and applies a residual MLP.
pub fn patch_forward<F: Real>(p: &ParamStore<F>, enc: &PatchEncoderIds, grid: &Grid) -> Result<(Array2<F>, PatchCache<F>)> {
    let rows = p.get(enc.pos).nrows();
    if grid.latent_rows() != rows || grid.height % PATCH != 0 || grid.width % PATCH != 0 {
        return Err(Error::Shape(format!(
            "{}x{} grid gives {} latent rows, encoder expects {rows}",
            grid.height,
            grid.width,
            grid.latent_rows()
        )));
    }
    let patches = grid.patches::<F>()?;
    let e = linear(&patches.view(), p.get(enc.w_embed), p.get(enc.b_embed));
    let mut h = p.get(enc.pos).clone();
    let mean = e.mean_axis(Axis(0)).expect("at least one patch");
    {
        let mut s0 = h.row_mut(0);
        s0 += &mean;
        s0 += &p.get(enc.summary).row(0);
    }
    h.slice_mut(s![1.., ..]).zip_mut_with(&e, |a, &b| *a += b);
    let pre = linear(&h.view(), p.get(enc.w_1), p.get(enc.b_1));
    let act = pre.mapv(gelu);
    let out = linear(&act.view(), p.get(enc.w_2), p.get(enc.b_2)) + &h;
    Ok((out, PatchCache { patches, h, pre, act }))
}

pub fn patch_backward<F: Real>(p: &ParamStore<F>, enc: &PatchEncoderIds, cache: &PatchCache<F>, dout: &Array2<F>, grads: &mut Grads<F>) {
    let (gw, gb) = grads.pair_mut(enc.w_2, enc.b_2);
    let mut dpre = linear_backward(&cache.act.view(), p.get(enc.w_2), &dout.view(), gw, gb);
    dpre.zip_mut_with(&cache.pre, |d, &z| *d *= gelu_grad(z));
    let (gw, gb) = grads.pair_mut(enc.w_1, enc.b_1);
    let mut dh = linear_backward(&cache.h.view(), p.get(enc.w_1), &dpre.view(), gw, gb);
    dh += dout;
    *grads.get_mut(enc.pos) += &dh;
    let ds = dh.row(0).to_owned();
    grads.get_mut(enc.summary).row_mut(0).zip_mut_with(&ds, |g, &d| *g += d);
    let n = cache.patches.nrows();
    let share = ds.mapv(|v| v / cast::<F>(n as f64));
    let mut de = dh.slice(s![1.., ..]).to_owned();
    for mut row in de.rows_mut() {
        row += &share;
    }
    let (gw, gb) = grads.pair_mut(enc.w_embed, enc.b_embed);
    // The input gradient is not needed; patches are data.
    let _ = linear_backward(&cache.patches.view(), p.get(enc.w_embed), &de.view(), gw, gb);
}
