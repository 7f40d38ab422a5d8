//! Caption tokenization and the bidirectional text encoder.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand::Rng;

use super::layers::{block_backward, block_forward, ln_params, BlockCache, BlockIds, Grads, ParamId, ParamStore, INIT_STD};
use super::ops::{layer_norm, layer_norm_backward, normal_init, AttentionMask, LayerNormCache, Real};
use crate::tagging::caption_words;

/// Buckets for words outside the caption vocabulary.
pub const HASH_BUCKETS: usize = 4096;
pub const TEXT_PAD: u32 = 0;

const PUNCTUATION: [&str; 6] = [",", ".", "+", ";", "(", ")"];
const SUFFIXES: [&str; 6] = ["##s", "##es", "##ies", "##ing", "##ed", "##ly"];

/// Greedy longest-match word-piece tokenizer over the caption vocabulary.
/// Words it cannot cover are hashed (FNV-1a) into [`HASH_BUCKETS`] ids.
#[derive(Debug, Clone)]
pub struct TextTokenizer {
    vocab: HashMap<String, u32>,
}

impl Default for TextTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl TextTokenizer {
    pub fn new() -> Self {
        let mut vocab = HashMap::new();
        let pieces = caption_words().into_iter().chain(PUNCTUATION).chain(SUFFIXES);
        for piece in pieces {
            let next = vocab.len() as u32 + 1;
            vocab.entry(piece.to_string()).or_insert(next);
        }
        Self { vocab }
    }

    /// Ids span `0..vocab_size()`; 0 is padding.
    pub fn vocab_size(&self) -> usize {
        1 + self.vocab.len() + HASH_BUCKETS
    }

    fn hash_id(&self, word: &str) -> u32 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (1 + self.vocab.len() + (h % HASH_BUCKETS as u64) as usize) as u32
    }

    fn word_pieces(&self, word: &str) -> Option<Vec<u32>> {
        let mut out = Vec::new();
        let mut rest = word;
        let mut first = true;
        while !rest.is_empty() {
            let found = (1..=rest.len()).rev().filter(|&n| rest.is_char_boundary(n)).find_map(|n| {
                let piece = if first { rest[..n].to_string() } else { format!("##{}", &rest[..n]) };
                self.vocab.get(&piece).map(|&id| (id, n))
            });
            let (id, n) = found?;
            out.push(id);
            rest = &rest[n..];
            first = false;
        }
        Some(out)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        let mut ids = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, ids: &mut Vec<u32>| {
            if !word.is_empty() {
                ids.extend(self.word_pieces(word).unwrap_or_else(|| vec![self.hash_id(word)]));
                word.clear();
            }
        };
        for ch in lower.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                flush(&mut word, &mut ids);
                if !ch.is_whitespace() {
                    let s = ch.to_string();
                    ids.push(self.vocab.get(&s).copied().unwrap_or_else(|| self.hash_id(&s)));
                }
            }
        }
        flush(&mut word, &mut ids);
        ids
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoderIds {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl TextEncoderIds {
    pub fn init<F: Real>(store: &mut ParamStore<F>, vocab: usize, rows: usize, l: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let embed = store.add("text.embed", normal_init(vocab, l, INIT_STD, rng), true);
        let pos = store.add("text.pos", normal_init(rows, l, INIT_STD, rng), true);
        let blocks = (0..layers).map(|i| BlockIds::init(store, &format!("text.block{i}"), l, layers, rng)).collect();
        let (ln_g, ln_b) = ln_params(store, "text.ln_f", l);
        Self { embed, pos, blocks, ln_g, ln_b }
    }
}

pub struct TextCache<F> {
    ids: Vec<u32>,
    blocks: Vec<BlockCache<F>>,
    ln: LayerNormCache<F>,
}

/// Pads or truncates `ids` to `rows` entries; returns them with the count
/// of real (attendable) positions, at least one.
pub fn fit_ids(mut ids: Vec<u32>, rows: usize) -> (Vec<u32>, usize) {
    ids.truncate(rows);
    let valid = ids.len().max(1);
    ids.resize(rows, TEXT_PAD);
    (ids, valid)
}

pub fn text_forward<F: Real>(
    p: &ParamStore<F>,
    enc: &TextEncoderIds,
    ids: Vec<u32>,
    heads: usize,
) -> (Array2<F>, TextCache<F>) {
    let pos = p.get(enc.pos);
    let rows = pos.nrows();
    let (ids, valid) = fit_ids(ids, rows);
    let embed = p.get(enc.embed);
    let mut x = pos.clone();
    for (r, &id) in ids.iter().enumerate() {
        x.row_mut(r).zip_mut_with(&embed.row(id as usize), |a, &e| *a += e);
    }
    let mask = AttentionMask { prefix: 0, causal: false, valid_keys: valid };
    let mut caches = Vec::with_capacity(enc.blocks.len());
    for b in &enc.blocks {
        let (y, c) = block_forward(p, b, &x.view(), heads, mask);
        x = y;
        caches.push(c);
    }
    let (z, ln) = layer_norm(&x.view(), p.get(enc.ln_g), p.get(enc.ln_b));
    (z, TextCache { ids, blocks: caches, ln })
}

pub fn text_backward<F: Real>(p: &ParamStore<F>, enc: &TextEncoderIds, cache: &TextCache<F>, dz: &Array2<F>, grads: &mut Grads<F>) {
    let (gg, gb) = grads.pair_mut(enc.ln_g, enc.ln_b);
    let mut dx = layer_norm_backward(&dz.view(), &cache.ln, p.get(enc.ln_g), gg, gb);
    for (b, c) in enc.blocks.iter().zip(&cache.blocks).rev() {
        dx = block_backward(p, b, c, &dx.view(), grads);
    }
    *grads.get_mut(enc.pos) += &dx;
    let ge = grads.get_mut(enc.embed);
    for (r, &id) in cache.ids.iter().enumerate() {
        let mut row = ge.slice_mut(s![id as usize, ..]);
        row += &dx.row(r);
    }
}
