//! Named parameter storage and the pre-norm transformer block.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::ops::{
    attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, normal_init,
    AttentionMask, LayerNormCache, Real,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Array2<F>,
    /// Whether AdamW weight decay applies (matrices yes, gains/biases no).
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads { values: self.entries.iter().map(|e| Array2::zeros(e.value.raw_dim())).collect() }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.mapv(|v| G::from_f64(v.to_f64().expect("finite")).expect("castable")),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}

/// Gradients laid out like the owning [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub values: Vec<Array2<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    /// Two distinct gradient buffers at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Array2<F>, &mut Array2<F>) {
        assert_ne!(a.0, b.0, "distinct parameters");
        if a.0 < b.0 {
            let (lo, hi) = self.values.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.values.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: F) {
        for a in &mut self.values {
            a.mapv_inplace(|v| v * k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|a| a.iter())
            .map(|v| {
                let f = v.to_f64().unwrap_or(f64::NAN);
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameters of one pre-norm block: attention then a 4x feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

pub fn ln_params<F: Real>(store: &mut ParamStore<F>, name: &str, l: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Array2::ones((1, l)), false);
    let b = store.add(format!("{name}.b"), Array2::zeros((1, l)), false);
    (g, b)
}

impl BlockIds {
    /// Normal(0, 0.02) weights; the two residual output projections are
    /// additionally scaled by `1 / sqrt(2 * depth)`.
    pub fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, l: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let out_std = INIT_STD / ((2 * depth) as f64).sqrt();
        let (ln1_g, ln1_b) = ln_params(store, &format!("{prefix}.ln1"), l);
        let w_qkv = store.add(format!("{prefix}.attn.w_qkv"), normal_init(l, 3 * l, INIT_STD, rng), true);
        let b_qkv = store.add(format!("{prefix}.attn.b_qkv"), Array2::zeros((1, 3 * l)), false);
        let w_o = store.add(format!("{prefix}.attn.w_o"), normal_init(l, l, out_std, rng), true);
        let b_o = store.add(format!("{prefix}.attn.b_o"), Array2::zeros((1, l)), false);
        let (ln2_g, ln2_b) = ln_params(store, &format!("{prefix}.ln2"), l);
        let w_1 = store.add(format!("{prefix}.ffn.w_1"), normal_init(l, 4 * l, INIT_STD, rng), true);
        let b_1 = store.add(format!("{prefix}.ffn.b_1"), Array2::zeros((1, 4 * l)), false);
        let w_2 = store.add(format!("{prefix}.ffn.w_2"), normal_init(4 * l, l, out_std, rng), true);
        let b_2 = store.add(format!("{prefix}.ffn.b_2"), Array2::zeros((1, l)), false);
        Self { ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2 }
    }
}

pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    h1: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    ln2: LayerNormCache<F>,
    h2: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

pub fn block_forward<F: Real>(
    p: &ParamStore<F>,
    ids: &BlockIds,
    x: &ArrayView2<F>,
    heads: usize,
    mask: AttentionMask,
) -> (Array2<F>, BlockCache<F>) {
    let (h1, ln1) = layer_norm(x, p.get(ids.ln1_g), p.get(ids.ln1_b));
    let qkv = linear(&h1.view(), p.get(ids.w_qkv), p.get(ids.b_qkv));
    let (attn, probs) = attention(&qkv, heads, mask);
    let x1 = linear(&attn.view(), p.get(ids.w_o), p.get(ids.b_o)) + x;
    let (h2, ln2) = layer_norm(&x1.view(), p.get(ids.ln2_g), p.get(ids.ln2_b));
    let pre = linear(&h2.view(), p.get(ids.w_1), p.get(ids.b_1));
    let act = pre.mapv(gelu);
    let y = linear(&act.view(), p.get(ids.w_2), p.get(ids.b_2)) + &x1;
    (y, BlockCache { ln1, h1, qkv, probs, attn, ln2, h2, pre, act })
}

pub fn block_backward<F: Real>(
    p: &ParamStore<F>,
    ids: &BlockIds,
    cache: &BlockCache<F>,
    dy: &ArrayView2<F>,
    grads: &mut Grads<F>,
) -> Array2<F> {
    let (gw, gb) = grads.pair_mut(ids.w_2, ids.b_2);
    let mut dpre = linear_backward(&cache.act.view(), p.get(ids.w_2), dy, gw, gb);
    dpre.zip_mut_with(&cache.pre, |d, &z| *d *= gelu_grad(z));
    let (gw, gb) = grads.pair_mut(ids.w_1, ids.b_1);
    let dh2 = linear_backward(&cache.h2.view(), p.get(ids.w_1), &dpre.view(), gw, gb);
    let (gg, gb) = grads.pair_mut(ids.ln2_g, ids.ln2_b);
    let mut dx1 = layer_norm_backward(&dh2.view(), &cache.ln2, p.get(ids.ln2_g), gg, gb);
    dx1 += dy;

    let (gw, gb) = grads.pair_mut(ids.w_o, ids.b_o);
    let dattn = linear_backward(&cache.attn.view(), p.get(ids.w_o), &dx1.view(), gw, gb);
    let dqkv = attention_backward(&cache.qkv, &cache.probs, &dattn.view());
    let (gw, gb) = grads.pair_mut(ids.w_qkv, ids.b_qkv);
    let dh1 = linear_backward(&cache.h1.view(), p.get(ids.w_qkv), &dqkv.view(), gw, gb);
    let (gg, gb) = grads.pair_mut(ids.ln1_g, ids.ln1_b);
    let mut dx = layer_norm_backward(&dh1.view(), &cache.ln1, p.get(ids.ln1_g), gg, gb);
    dx += &dx1;
    dx
}

