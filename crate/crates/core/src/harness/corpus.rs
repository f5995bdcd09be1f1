use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::model::TokenSequence;

/// Successor weights of every context, most likely first.
pub const SUCCESSOR_PROBS: [f64; 3] = [0.6, 0.3, 0.1];

/// Order-2 Markov source over the first `text_vocab` token ids. Each context
/// `(a, b)` has three distinct successors drawn from a seeded table.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    text_vocab: usize,
    table: Vec<[u32; 3]>,
}

impl MarkovSource {
    pub fn new(seed: u64, text_vocab: usize) -> Result<Self> {
        if text_vocab < SUCCESSOR_PROBS.len() {
            return param_err(format!("text vocabulary {text_vocab} is smaller than the successor count"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let table = (0..text_vocab * text_vocab)
            .map(|_| {
                let idx = sample(&mut rng, text_vocab, 3);
                [idx.index(0) as u32, idx.index(1) as u32, idx.index(2) as u32]
            })
            .collect();
        Ok(Self { text_vocab, table })
    }

    pub fn text_vocab(&self) -> usize {
        self.text_vocab
    }

    /// Successors of context `(a, b)` paired with their probabilities.
    pub fn transition(&self, a: u32, b: u32) -> [(u32, f64); 3] {
        let s = self.table[a as usize * self.text_vocab + b as usize];
        [(s[0], SUCCESSOR_PROBS[0]), (s[1], SUCCESSOR_PROBS[1]), (s[2], SUCCESSOR_PROBS[2])]
    }

    pub fn next(&self, rng: &mut impl Rng, a: u32, b: u32) -> u32 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let t = self.transition(a, b);
        for &(tok, p) in &t {
            acc += p;
            if u < acc {
                return tok;
            }
        }
        t[t.len() - 1].0
    }

    /// A stream of `len` tokens started from two uniform tokens.
    pub fn stream(&self, rng: &mut impl Rng, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len.min(2) {
            out.push(rng.gen_range(0..self.text_vocab as u32));
        }
        while out.len() < len {
            let n = out.len();
            let t = self.next(rng, out[n - 2], out[n - 1]);
            out.push(t);
        }
        out
    }
}

/// Text vocabulary used by [`gen_corpus`] for a full vocabulary `vocab`.
pub fn text_vocab_for(vocab: usize) -> usize {
    (vocab / 64).clamp(8, 64).min(vocab)
}

/// Identifier length used by [`gen_corpus`] for sequences of `seq_len`.
pub fn identifier_len_for(seq_len: usize) -> usize {
    (seq_len / 8).clamp(1, 8)
}

/// Train, validation and held-out sequences; the three are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpora {
    pub seed: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
}

/// Synthesizes `n_train` training sequences and `n_val` each of validation
/// and held-out sequences. Each sequence is a Markov stream over the text
/// vocabulary with a random identifier drawn from the full vocabulary spliced
/// in at a random position, which makes every sequence individually
/// memorizable.
pub fn gen_corpus(seed: u64, n_train: usize, n_val: usize, seq_len: usize, vocab: usize) -> Result<Corpora> {
    if vocab < 8 {
        return param_err(format!("vocabulary of {vocab} is too small (need at least 8)"));
    }
    if n_train == 0 || n_val == 0 {
        return param_err("corpus sizes must be positive");
    }
    if seq_len < 4 {
        return param_err(format!("sequence length {seq_len} is too short (need at least 4)"));
    }
    let source = MarkovSource::new(seed, text_vocab_for(vocab))?;
    let id_len = identifier_len_for(seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw = |count: usize| -> Result<Vec<TokenSequence>> {
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                return param_err("could not draw enough distinct sequences");
            }
            let mut tokens = source.stream(&mut rng, seq_len - id_len);
            let at = rng.gen_range(2..=tokens.len());
            let id: Vec<u32> = (0..id_len).map(|_| rng.gen_range(0..vocab as u32)).collect();
            tokens.splice(at..at, id);
            if seen.insert(tokens.clone()) {
                out.push(TokenSequence::new(tokens, vocab)?);
            }
        }
        Ok(out)
    };
    let train = draw(n_train)?;
    let validation = draw(n_val)?;
    let heldout = draw(n_val)?;
    Ok(Corpora {
        seed,
        vocab_size: vocab,
        seq_len,
        train,
        validation,
        heldout,
    })
}

/// Uniform sample of `k` sequences without replacement, and the rest in
/// their original order.
pub fn select_forget(corpus: &[TokenSequence], k: usize, seed: u64) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    if k > corpus.len() {
        return param_err(format!("cannot select {k} of {} sequences", corpus.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, corpus.len(), k).into_vec();
    let mut chosen = vec![false; corpus.len()];
    for &i in &picked {
        chosen[i] = true;
    }
    let forget = picked.iter().map(|&i| corpus[i].clone()).collect();
    let rest = corpus
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(s, _)| s.clone())
        .collect();
    Ok((forget, rest))
}
