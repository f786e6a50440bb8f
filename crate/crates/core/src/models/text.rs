//! Hashed-vocabulary caption embedder with a learned null sequence.

use perco_tensor::{concat, embedding, Elem, ParamId, ParamStore, Rng, Session, Tensor};

use crate::error::Result;

pub const PAD: usize = 0;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Whitespace tokens hashed into `1..vocab`; id 0 pads to `max_tokens`.
/// Longer captions are truncated.
pub fn tokenize(caption: &str, vocab: usize, max_tokens: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = caption
        .split_whitespace()
        .take(max_tokens)
        .map(|w| 1 + (fnv1a(w.as_bytes()) % (vocab as u64 - 1)) as usize)
        .collect();
    ids.resize(max_tokens, PAD);
    ids
}

#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub table: ParamId,
    pub pos: ParamId,
    pub null: ParamId,
    pub vocab: usize,
    pub max_tokens: usize,
    pub dim: usize,
}

impl TextEmbedder {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, vocab: usize, max_tokens: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let table = store.add_normal("text.table", &[vocab, dim], 1.0, rng)?;
        let pos = store.add_normal("text.pos", &[1, max_tokens, dim], 0.1, rng)?;
        let null = store.add_normal("text.null", &[1, max_tokens, dim], 1.0, rng)?;
        Ok(TextEmbedder {
            table,
            pos,
            null,
            vocab,
            max_tokens,
            dim,
        })
    }

    pub fn tokens(&self, caption: &str) -> Vec<usize> {
        tokenize(caption, self.vocab, self.max_tokens)
    }

    /// The learned null sequence repeated over a batch: `[b, L, E]`.
    pub fn null_batch<T: Elem>(&self, s: &Session<T>, b: usize) -> Result<Tensor<T>> {
        let zeros = Tensor::zeros(&[b, self.max_tokens, self.dim]);
        Ok(zeros.add_broadcast(s.param(self.null))?)
    }

    /// Embed pre-tokenised captions; `None` entries get the null sequence.
    pub fn embed_ids<T: Elem>(&self, s: &Session<T>, ids: &[Option<Vec<usize>>]) -> Result<Tensor<T>> {
        let embed_run = |run: &[Vec<usize>]| -> Result<Tensor<T>> {
            let flat: Vec<usize> = run.iter().flatten().copied().collect();
            let e = embedding(s.param(self.table), &flat)?.reshape(&[run.len(), self.max_tokens, self.dim])?;
            Ok(e.add_broadcast(s.param(self.pos))?)
        };
        if ids.iter().all(Option::is_some) {
            let run: Vec<Vec<usize>> = ids.iter().map(|i| i.clone().unwrap()).collect();
            return embed_run(&run);
        }
        if ids.iter().all(Option::is_none) {
            return self.null_batch(s, ids.len());
        }
        let parts = ids
            .iter()
            .map(|i| match i {
                Some(i) => embed_run(std::slice::from_ref(i)),
                None => self.null_batch(s, 1),
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(concat(&refs, 0)?)
    }

    /// Embed captions; `None` and empty captions map to the null sequence.
    pub fn embed<T: Elem>(&self, s: &Session<T>, captions: &[Option<&str>]) -> Result<Tensor<T>> {
        let ids: Vec<Option<Vec<usize>>> = captions
            .iter()
            .map(|c| c.filter(|c| !c.trim().is_empty()).map(|c| self.tokens(c)))
            .collect();
        self.embed_ids(s, &ids)
    }
}
