//! Shared helpers for integration tests: an independent model oracle and
//! random score-set generators.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A deliberately naive re-implementation of the reference model used as
/// an oracle: plain string-keyed count maps, full distributions
/// materialized per step, row totals summed on demand. It shares no code
/// with the library beyond the model definition itself.
pub struct BruteForceLm {
    pub vocab: Vec<String>,
    unigram: HashMap<String, u64>,
    bigram: HashMap<(String, String), u64>,
    total: u64,
    lambda: f64,
    alpha: f64,
    copy_alpha: f64,
}

impl BruteForceLm {
    pub fn new(corpus: &str, lambda: f64, alpha: f64, copy_alpha: f64) -> Self {
        let words: Vec<String> = corpus
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect();
        let mut distinct: BTreeSet<String> = words.iter().cloned().collect();
        distinct.remove("<unk>");
        let mut vocab = vec!["<unk>".to_string()];
        vocab.extend(distinct);

        let mut unigram: HashMap<String, u64> = HashMap::new();
        let mut bigram: HashMap<(String, String), u64> = HashMap::new();
        let canon = |w: &String| -> String {
            if vocab.contains(w) {
                w.clone()
            } else {
                "<unk>".to_string()
            }
        };
        for w in &words {
            *unigram.entry(canon(w)).or_insert(0) += 1;
        }
        for pair in words.windows(2) {
            *bigram.entry((canon(&pair[0]), canon(&pair[1]))).or_insert(0) += 1;
        }
        BruteForceLm {
            vocab,
            unigram,
            bigram,
            total: words.len() as u64,
            lambda,
            alpha,
            copy_alpha,
        }
    }

    fn canon(&self, w: &str) -> String {
        let w = w.to_lowercase();
        if self.vocab.contains(&w) {
            w
        } else {
            "<unk>".to_string()
        }
    }

    fn row_total(&self, h: &str) -> u64 {
        self.bigram
            .iter()
            .filter(|((a, _), _)| a == h)
            .map(|(_, c)| *c)
            .sum()
    }

    fn base(&self, history: Option<&str>, w: &str) -> f64 {
        let v = self.vocab.len() as f64;
        match history {
            None => {
                let c = self.unigram.get(w).copied().unwrap_or(0);
                (c as f64 + self.alpha) / (self.total as f64 + self.alpha * v)
            }
            Some(h) => {
                let c = self
                    .bigram
                    .get(&(h.to_string(), w.to_string()))
                    .copied()
                    .unwrap_or(0);
                (c as f64 + self.alpha) / (self.row_total(h) as f64 + self.alpha * v)
            }
        }
    }

    /// The full next-token distribution, materialized over the whole
    /// vocabulary and explicitly normalized when tempered.
    pub fn dist(&self, history: Option<&str>, context: Option<&str>, t: f64) -> Vec<f64> {
        let ctx_words: Option<Vec<String>> =
            context.map(|c| c.split_whitespace().map(|w| self.canon(w)).collect());
        let raw: Vec<f64> = self
            .vocab
            .iter()
            .map(|w| {
                let base = self.base(history, w);
                match &ctx_words {
                    None => base,
                    Some(ctx) => {
                        let count = ctx.iter().filter(|cw| *cw == w).count();
                        let v = self.vocab.len() as f64;
                        let copy = (count as f64 + self.copy_alpha)
                            / (ctx.len() as f64 + self.copy_alpha * v);
                        self.lambda * copy + (1.0 - self.lambda) * base
                    }
                }
            })
            .collect();
        if t == 1.0 {
            return raw;
        }
        let tempered: Vec<f64> = raw.iter().map(|p| p.powf(1.0 / t)).collect();
        let z: f64 = tempered.iter().sum();
        tempered.into_iter().map(|p| p / z).collect()
    }

    /// Per-token log-probabilities of `target`, mirroring the scoring
    /// contract: the first token has no history, the context only feeds
    /// the copy channel.
    pub fn score(&self, context: Option<&str>, target: &str, t: f64) -> Vec<f64> {
        let words: Vec<String> = target
            .split_whitespace()
            .map(|w| self.canon(w))
            .collect();
        let mut history: Option<String> = None;
        let mut out = Vec::with_capacity(words.len());
        for w in &words {
            let dist = self.dist(history.as_deref(), context, t);
            let idx = self.vocab.iter().position(|v| v == w).unwrap();
            out.push(dist[idx].ln());
            history = Some(w.clone());
        }
        out
    }
}

/// A random well-formed logprob vector: `n` tokens, each ln p with
/// p drawn log-uniformly from [e^-8, 1].
pub fn random_logprobs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| -rng.gen_range(0.0..8.0)).collect()
}
