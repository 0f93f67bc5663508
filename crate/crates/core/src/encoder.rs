//! Frozen text encoder standing in for a pre-trained language model.
//!
//! Text is tokenized on whitespace. Unigrams, bigrams and character n-grams
//! of each token (with `<` `>` boundary marks, as in subword embeddings) are
//! feature-hashed (FNV-1a 64, seeded) into `buckets` signed counts, projected through a
//! fixed random matrix, centered and scaled to unit root-mean-square, like
//! the output of a final layer norm. The projection is built
//! once from the seed and never exposed mutably, so no optimizer can reach it.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::par::Exec;
use crate::rng;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub buckets: usize,
    pub ngram_orders: Vec<usize>,
    pub bigram_weight: f64,
    /// Character n-gram length; 0 disables subword features.
    pub char_ngram: usize,
    /// Total weight of one token's character n-grams.
    pub char_ngram_weight: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            buckets: 4096,
            ngram_orders: vec![1],
            bigram_weight: 0.5,
            char_ngram: 3,
            char_ngram_weight: 2.0,
            seed: 0x5EED_0001,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    projection: Vec<f32>,
    null_embedding: Vec<f32>,
}

/// Output of [`FrozenEncoder::embed`].
#[derive(Debug, Clone)]
pub struct Embedded<F> {
    pub embeddings: Tensor<F>,
    /// Rows whose text had no tokens and received the null embedding.
    pub null_rows: Vec<usize>,
}

fn hash_token(seed: u64, parts: &[&str]) -> u64 {
    let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ seed);
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.write_u8(0x1f);
        }
        h.write(p.as_bytes());
    }
    h.finish()
}

fn center_normalize(v: &mut [f32]) -> bool {
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = (v.iter().map(|x| x * x).sum::<f32>() / n).sqrt();
    if norm <= f32::EPSILON {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.dim < 2 || config.buckets == 0 {
            return Err(Error::Config(format!(
                "encoder needs dim >= 2 and buckets >= 1 (dim = {}, buckets = {})",
                config.dim, config.buckets
            )));
        }
        if config.ngram_orders.is_empty() || config.ngram_orders.iter().any(|&o| o == 0 || o > 2) {
            return Err(Error::Config("encoder ngram_orders must be a subset of {1, 2}".into()));
        }
        let mut r = rng::substream(config.seed, "encoder.projection");
        let s = 3f32.sqrt();
        let projection = (0..config.buckets * config.dim)
            .map(|_| r.gen_range(-s..s))
            .collect();
        let mut null_embedding: Vec<f32> = (0..config.dim).map(|_| r.gen_range(-s..s)).collect();
        center_normalize(&mut null_embedding);
        Ok(Self {
            config,
            projection,
            null_embedding,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Embeds one text; `None` when the text has no tokens.
    pub fn embed_one(&self, text: &str) -> Option<Vec<f32>> {
        let toks: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if toks.is_empty() {
            return None;
        }
        let u = self.config.dim;
        let mut v = vec![0f32; u];
        let mut add = |parts: &[&str], w: f32| {
            let h = hash_token(self.config.seed, parts);
            let bucket = (h % self.config.buckets as u64) as usize;
            let sign = if h >> 63 == 1 { -w } else { w };
            let row = &self.projection[bucket * u..(bucket + 1) * u];
            v.iter_mut().zip(row).for_each(|(a, &b)| *a += sign * b);
        };
        let n = self.config.char_ngram;
        if n > 0 && self.config.char_ngram_weight != 0.0 {
            for t in &toks {
                let marked: Vec<char> = format!("<{t}>").chars().collect();
                let grams: Vec<String> = marked.windows(n.min(marked.len())).map(|w| w.iter().collect()).collect();
                let w = (self.config.char_ngram_weight / (grams.len() as f64).sqrt()) as f32;
                grams.iter().for_each(|gram| add(&["#char", gram], w));
            }
        }
        for &order in &self.config.ngram_orders {
            match order {
                1 => toks.iter().for_each(|t| add(&[t], 1.0)),
                _ => toks
                    .windows(2)
                    .for_each(|w| add(&[&w[0], &w[1]], self.config.bigram_weight as f32)),
            }
        }
        center_normalize(&mut v).then_some(v)
    }

    pub fn embed<F: Real, S: AsRef<str> + Sync>(&self, texts: &[S], exec: Exec) -> Embedded<F> {
        let rows = exec.map(texts, |t| self.embed_one(t.as_ref()));
        let mut null_rows = Vec::new();
        let mut data = Vec::with_capacity(texts.len() * self.dim());
        for (i, r) in rows.into_iter().enumerate() {
            let r = r.unwrap_or_else(|| {
                null_rows.push(i);
                self.null_embedding.clone()
            });
            data.extend(r.into_iter().map(|x| F::of(x as f64)));
        }
        Embedded {
            embeddings: Tensor::new(&[texts.len(), self.dim()], data).expect("embedding shape"),
            null_rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> FrozenEncoder {
        FrozenEncoder::new(EncoderConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_and_unit_rms() {
        let e = enc();
        let a = e.embed::<f32, _>(&["abc"], Exec::Sequential);
        let b = enc().embed::<f32, _>(&["abc"], Exec::Sequential);
        assert_eq!(a.embeddings, b.embeddings);
        let texts = ["the plot was great", "awful acting", "x", "a b c d e f g"];
        let out = e.embed::<f64, _>(&texts, Exec::available());
        for i in 0..texts.len() {
            let n: f64 = (out.embeddings.row(i).iter().map(|x| x * x).sum::<f64>() / 64.0).sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {i} norm {n}");
        }
    }

    #[test]
    fn empty_text_gets_null_embedding() {
        let e = enc();
        let out = e.embed::<f32, _>(&["", "ok", "   "], Exec::Sequential);
        assert_eq!(out.null_rows, vec![0, 2]);
        assert_eq!(out.embeddings.row(0), out.embeddings.row(2));
        let n: f32 = (out.embeddings.row(0).iter().map(|x| x * x).sum::<f32>() / 64.0).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn different_seeds_give_different_embeddings() {
        let a = enc().embed_one("hello world").unwrap();
        let b = FrozenEncoder::new(EncoderConfig {
            seed: 99,
            ..Default::default()
        })
        .unwrap()
        .embed_one("hello world")
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(FrozenEncoder::new(EncoderConfig {
            dim: 1,
            ..Default::default()
        })
        .is_err());
        assert!(FrozenEncoder::new(EncoderConfig {
            ngram_orders: vec![3],
            ..Default::default()
        })
        .is_err());
    }
}
