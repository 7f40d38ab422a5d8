//! Causal decoder over `[Z; codebook[ids]]` with an incremental KV cache.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{block_backward, block_forward, ln_params, BlockCache, BlockIds, Grads, ParamId, ParamStore, INIT_STD};
use super::ops::{cast, gelu, layer_norm, layer_norm_backward, linear, linear_backward, normal_init, softmax_rows, AttentionMask, LayerNormCache, Real};

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub codebook: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w_head: ParamId,
    pub b_head: ParamId,
}

impl DecoderIds {
    /// `capacity` is the number of positional rows: condition rows plus
    /// the longest token prefix.
    pub fn init<F: Real>(store: &mut ParamStore<F>, vocab: usize, capacity: usize, l: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let codebook = store.add("decoder.codebook", normal_init(vocab, l, INIT_STD, rng), true);
        let pos = store.add("decoder.pos", normal_init(capacity, l, INIT_STD, rng), true);
        let blocks = (0..layers).map(|i| BlockIds::init(store, &format!("decoder.block{i}"), l, layers, rng)).collect();
        let (ln_g, ln_b) = ln_params(store, "decoder.ln_f", l);
        let w_head = store.add("decoder.head.w", normal_init(l, vocab, INIT_STD, rng), true);
        let b_head = store.add("decoder.head.b", Array2::zeros((1, vocab)), false);
        Self { codebook, pos, blocks, ln_g, ln_b, w_head, b_head }
    }
}

pub struct DecoderCache<F> {
    prefix: usize,
    ids: Vec<u32>,
    blocks: Vec<BlockCache<F>>,
    ln: LayerNormCache<F>,
    hidden: Array2<F>,
}

/// Logits (one row per id) for the sequence `[z; ids]`. The caller checks
/// capacity.
pub fn decoder_forward<F: Real>(
    p: &ParamStore<F>,
    dec: &DecoderIds,
    z: &ArrayView2<F>,
    ids: &[u32],
    heads: usize,
) -> (Array2<F>, DecoderCache<F>) {
    let m = z.nrows();
    let t = m + ids.len();
    let codebook = p.get(dec.codebook);
    let mut x = p.get(dec.pos).slice(s![..t, ..]).to_owned();
    x.slice_mut(s![..m, ..]).zip_mut_with(z, |a, &b| *a += b);
    for (r, &id) in ids.iter().enumerate() {
        x.row_mut(m + r).zip_mut_with(&codebook.row(id as usize), |a, &b| *a += b);
    }
    let mask = AttentionMask { prefix: m, causal: true, valid_keys: t };
    let mut caches = Vec::with_capacity(dec.blocks.len());
    for b in &dec.blocks {
        let (y, c) = block_forward(p, b, &x.view(), heads, mask);
        x = y;
        caches.push(c);
    }
    let (hidden, ln) = layer_norm(&x.slice(s![m.., ..]), p.get(dec.ln_g), p.get(dec.ln_b));
    let logits = linear(&hidden.view(), p.get(dec.w_head), p.get(dec.b_head));
    (logits, DecoderCache { prefix: m, ids: ids.to_vec(), blocks: caches, ln, hidden })
}

/// Accumulates parameter gradients and returns the gradient for `z`.
pub fn decoder_backward<F: Real>(
    p: &ParamStore<F>,
    dec: &DecoderIds,
    cache: &DecoderCache<F>,
    dlogits: &Array2<F>,
    grads: &mut Grads<F>,
) -> Array2<F> {
    let m = cache.prefix;
    let (gw, gb) = grads.pair_mut(dec.w_head, dec.b_head);
    let dhidden = linear_backward(&cache.hidden.view(), p.get(dec.w_head), &dlogits.view(), gw, gb);
    let (gg, gb) = grads.pair_mut(dec.ln_g, dec.ln_b);
    let dtok = layer_norm_backward(&dhidden.view(), &cache.ln, p.get(dec.ln_g), gg, gb);
    let mut dx = concatenate(Axis(0), &[Array2::zeros((m, dtok.ncols())).view(), dtok.view()]).expect("same width");
    for (b, c) in dec.blocks.iter().zip(&cache.blocks).rev() {
        dx = block_backward(p, b, c, &dx.view(), grads);
    }
    grads.get_mut(dec.pos).slice_mut(s![..dx.nrows(), ..]).zip_mut_with(&dx, |g, &d| *g += d);
    let gc = grads.get_mut(dec.codebook);
    for (r, &id) in cache.ids.iter().enumerate() {
        gc.row_mut(id as usize).zip_mut_with(&dx.row(m + r), |g, &d| *g += d);
    }
    dx.slice(s![..m, ..]).to_owned()
}

/// Keys and values of every processed row, per layer, for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecoderState<F> {
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    len: usize,
}

/// Runs the condition rows through every layer and returns the cache.
/// Condition rows attend to each other only, so this is shared by every
/// sequence generated from the same `z`.
pub fn prefill<F: Real>(p: &ParamStore<F>, dec: &DecoderIds, z: &ArrayView2<F>, heads: usize, capacity: usize) -> DecoderState<F> {
    let m = z.nrows();
    let l = z.ncols();
    let mut x = p.get(dec.pos).slice(s![..m, ..]).to_owned() + z;
    let mask = AttentionMask { prefix: m, causal: true, valid_keys: m };
    let mut keys = Vec::with_capacity(dec.blocks.len());
    let mut values = Vec::with_capacity(dec.blocks.len());
    for b in &dec.blocks {
        let (h1, _) = layer_norm(&x.view(), p.get(b.ln1_g), p.get(b.ln1_b));
        let qkv = linear(&h1.view(), p.get(b.w_qkv), p.get(b.b_qkv));
        let mut k = Array2::zeros((capacity, l));
        let mut v = Array2::zeros((capacity, l));
        k.slice_mut(s![..m, ..]).assign(&qkv.slice(s![.., l..2 * l]));
        v.slice_mut(s![..m, ..]).assign(&qkv.slice(s![.., 2 * l..]));
        keys.push(k);
        values.push(v);
        let (y, _) = block_forward(p, b, &x.view(), heads, mask);
        x = y;
    }
    DecoderState { keys, values, len: m }
}

/// Appends one token and returns its logit row.
pub fn step<F: Real>(p: &ParamStore<F>, dec: &DecoderIds, state: &mut DecoderState<F>, id: u32, heads: usize) -> Vec<F> {
    let pos = state.len;
    let l = p.get(dec.codebook).ncols();
    let dh = l / heads;
    let scale = cast::<F>(1.0 / (dh as f64).sqrt());
    let mut x = (&p.get(dec.codebook).row(id as usize) + &p.get(dec.pos).row(pos)).insert_axis(Axis(0));
    for (layer, b) in dec.blocks.iter().enumerate() {
        let (h1, _) = layer_norm(&x.view(), p.get(b.ln1_g), p.get(b.ln1_b));
        let qkv = linear(&h1.view(), p.get(b.w_qkv), p.get(b.b_qkv));
        state.keys[layer].row_mut(pos).assign(&qkv.slice(s![0, l..2 * l]));
        state.values[layer].row_mut(pos).assign(&qkv.slice(s![0, 2 * l..]));
        let keys = state.keys[layer].slice(s![..=pos, ..]);
        let vals = state.values[layer].slice(s![..=pos, ..]);
        let mut attn = Array2::zeros((1, l));
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let q = qkv.slice(s![.., cols.clone()]);
            let mut scores = q.dot(&keys.slice(s![.., cols.clone()]).t()) * scale;
            softmax_rows(&mut scores.view_mut());
            attn.slice_mut(s![.., cols.clone()]).assign(&scores.dot(&vals.slice(s![.., cols])));
        }
        let x1 = linear(&attn.view(), p.get(b.w_o), p.get(b.b_o)) + &x;
        let (h2, _) = layer_norm(&x1.view(), p.get(b.ln2_g), p.get(b.ln2_b));
        let act = linear(&h2.view(), p.get(b.w_1), p.get(b.b_1)).mapv(gelu);
        x = linear(&act.view(), p.get(b.w_2), p.get(b.b_2)) + &x1;
    }
    state.len += 1;
    let (hidden, _) = layer_norm(&x.view(), p.get(dec.ln_g), p.get(dec.ln_b));
    linear(&hidden.view(), p.get(dec.w_head), p.get(dec.b_head)).into_raw_vec_and_offset().0
}
