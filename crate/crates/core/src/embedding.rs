//! Shared representation space for spans, memories, queries and skill
//! descriptions.
//!
//! Two embedders are provided: [`HashEmbedder`], a deterministic offline
//! bag-of-tokens feature hasher, and [`RemoteEmbedder`], which talks to any
//! HTTP endpoint speaking the common `{"model", "input"}` embedding protocol.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense real vector. All values are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// L2-normalizes in place. The all-zero vector is left as is.
    pub fn normalize(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for v in &mut self.0 {
                *v /= n;
            }
        }
        self
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::DimensionMismatch { left, right });
    }
    Ok(())
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that maps text into the shared space. Implementations are
/// immutable after construction and may be called from several threads.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// One normalized vector per input, in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::Protocol("embedder returned no vectors".into()))
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of",
    "on", "or", "that", "the", "this", "to", "was", "were", "with",
];

/// Lowercases and splits on anything that is not alphanumeric, dropping stop
/// words.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOP_WORDS.contains(&t.as_str()))
}

// FNV-1a, 64 bit. Stable across platforms and releases, unlike std's SipHash
// keys.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

const INDEX_SEED: u64 = 0x5157_11e5_0000_0001;
const SIGN_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Signed feature-hashing embedding of `text` (unnormalized accumulation).
pub fn hash_accumulate(text: &str, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for tok in tokenize(text) {
        let idx = (mix64(fnv1a(INDEX_SEED, tok.as_bytes())) % dim as u64) as usize;
        let sign = if mix64(fnv1a(SIGN_SEED, tok.as_bytes())) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        acc[idx] += sign;
    }
    acc
}

/// Deterministic offline embedding: bag-of-tokens feature hashing followed by
/// L2 normalization. Text without content tokens maps to the zero vector.
pub fn hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("hash_embed dim must be >= 2, got {dim}")));
    }
    Ok(EmbeddingVector(hash_accumulate(text, dim)).normalize())
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("hash embedder dim must be >= 2, got {dim}")));
        }
        Ok(Self { dim })
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| hash_embed(t, self.dim)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RemoteEmbedderConfig {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub max_attempts: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/embeddings".into(),
            model: "text-embedding".into(),
            api_key_env: Some("SKILLMEM_EMBED_API_KEY".into()),
            max_attempts: 3,
            timeout_secs: 60,
            backoff_ms: 250,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// HTTP embedding client. The dimension is learned from the first response.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    dim: std::sync::OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport { attempts: 0, message: e.to_string() })?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Ok(Self {
            config,
            client,
            api_key,
            dim: std::sync::OnceLock::new(),
        })
    }

    /// Dimension reported by the backend, or probes it with a one-item call.
    pub fn probe_dim(&self) -> Result<usize> {
        if let Some(d) = self.dim.get() {
            return Ok(*d);
        }
        let v = self.embed("dimension probe")?;
        Ok(v.dim())
    }

    fn post_once(&self, texts: &[&str]) -> std::result::Result<EmbedResponse, String> {
        let mut req = self.client.post(&self.config.url).json(&EmbedRequest {
            model: &self.config.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let resp = resp.error_for_status().map_err(|e| e.to_string())?;
        resp.json::<EmbedResponse>().map_err(|e| e.to_string())
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim.get().copied().unwrap_or(0)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("empty embedding batch".into()));
        }
        let mut attempts = 0;
        let response = loop {
            attempts += 1;
            match self.post_once(texts) {
                Ok(r) => break r,
                Err(message) if attempts >= self.config.max_attempts.max(1) => {
                    return Err(Error::Transport { attempts, message });
                }
                Err(_) => {
                    std::thread::sleep(Duration::from_millis(
                        self.config.backoff_ms * u64::from(attempts),
                    ));
                }
            }
        };
        decode_embeddings(response.data.into_iter().map(|d| (d.index, d.embedding)).collect(), texts.len())
            .and_then(|vs| {
                let d = vs[0].dim();
                let known = *self.dim.get_or_init(|| d);
                if known != d {
                    return Err(Error::Protocol(format!(
                        "embedding dimension changed from {known} to {d}"
                    )));
                }
                Ok(vs)
            })
    }
}

/// Reorders `(index, vector)` pairs, checks arity and dimension agreement and
/// normalizes every vector.
pub fn decode_embeddings(
    mut data: Vec<(usize, Vec<f64>)>,
    expected: usize,
) -> Result<Vec<EmbeddingVector>> {
    if data.len() != expected {
        return Err(Error::Protocol(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    data.sort_by_key(|(i, _)| *i);
    for (pos, (i, _)) in data.iter().enumerate() {
        if *i != pos {
            return Err(Error::Protocol(format!("missing embedding for index {pos}")));
        }
    }
    let dim = data[0].1.len();
    data.into_iter()
        .map(|(_, v)| {
            if v.len() != dim {
                return Err(Error::Protocol(format!(
                    "dimension mismatch within batch: {dim} vs {}",
                    v.len()
                )));
            }
            EmbeddingVector::new(v)
                .map(EmbeddingVector::normalize)
                .map_err(|e| Error::Protocol(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_zero_vector() {
        let v = hash_embed("", 64).unwrap();
        assert_eq!(v.dim(), 64);
        assert!(v.is_zero());
        assert!(hash_embed("the a an", 64).unwrap().is_zero());
    }

    #[test]
    fn repeated_token_has_same_direction() {
        let one = hash_embed("alice", 64).unwrap();
        let two = hash_embed("alice alice", 64).unwrap();
        let acc = hash_accumulate("alice alice", 64);
        assert_eq!(acc.iter().map(|v| v.abs()).sum::<f64>(), 2.0);
        for (a, b) in one.as_slice().iter().zip(two.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn order_invariant() {
        assert_eq!(
            hash_embed("the cat sat", 64).unwrap(),
            hash_embed("sat cat the", 64).unwrap()
        );
    }

    #[test]
    fn rejects_tiny_dim() {
        assert!(hash_embed("x", 1).is_err());
    }

    #[test]
    fn cosine_conventions() {
        let v = EmbeddingVector::new(vec![0.3, -2.0, 1.5]).unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let e1 = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let e2 = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&v, &EmbeddingVector::zeros(3)).unwrap(), 0.0);
        assert!(matches!(
            cosine(&e1, &v),
            Err(Error::DimensionMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn decode_reorders_and_checks_arity() {
        let out = decode_embeddings(vec![(1, vec![0.0, 2.0]), (0, vec![3.0, 4.0])], 2).unwrap();
        assert_eq!(out[0].as_slice(), &[0.6, 0.8]);
        assert_eq!(out[1].as_slice(), &[0.0, 1.0]);
        assert!(matches!(
            decode_embeddings(vec![(0, vec![1.0]), (1, vec![1.0])], 3),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            decode_embeddings(vec![(0, vec![1.0]), (1, vec![1.0, 2.0])], 2),
            Err(Error::Protocol(_))
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let once = EmbeddingVector::new(v).unwrap().normalize();
            let twice = once.clone().normalize();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            if !once.is_zero() {
                prop_assert!((once.norm() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn cosine_symmetric_bounded(
            pair in (1usize..16).prop_flat_map(|d| (
                proptest::collection::vec(-10f64..10.0, d),
                proptest::collection::vec(-10f64..10.0, d),
            ))
        ) {
            let a = EmbeddingVector::new(pair.0).unwrap();
            let b = EmbeddingVector::new(pair.1).unwrap();
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn hash_embed_deterministic(s in ".{0,64}") {
            let a = hash_embed(&s, 32).unwrap();
            let b = hash_embed(&s, 32).unwrap();
            prop_assert_eq!(
                a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
