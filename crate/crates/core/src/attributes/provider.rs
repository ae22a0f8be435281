use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maps a description string to a fixed-dimension vector.
pub trait TextProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Seeded bag-of-subwords embedder: whole words and boundary-marked character
/// trigrams are hashed into signed buckets, then the vector is L2-normalised.
#[derive(Clone, Debug)]
pub struct HashingProvider {
    dim: usize,
    seed: u64,
}

impl HashingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "provider dimension must be positive");
        HashingProvider { dim, seed }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(feature.as_bytes());
        let digest = h.finalize();
        let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let sign = if x >> 63 == 1 { -1.0 } else { 1.0 };
        ((x % self.dim as u64) as usize, sign)
    }
}

impl TextProvider for HashingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        if words.is_empty() {
            return Err(Error::Provider { description: text.to_string(), reason: "no tokens".into() });
        }
        let mut v = vec![0.0; self.dim];
        for w in words {
            let (i, s) = self.bucket(&format!("w:{w}"));
            v[i] += s;
            let marked: Vec<char> = format!("<{w}>").chars().collect();
            for tri in marked.windows(3) {
                let (i, s) = self.bucket(&format!("t:{}", tri.iter().collect::<String>()));
                v[i] += 0.5 * s;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Provider { description: text.to_string(), reason: "hash collisions cancelled".into() });
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Wraps a provider and counts calls; used to audit that inference never
/// reaches a text encoder.
pub struct CountingProvider<P> {
    inner: P,
    calls: Arc<AtomicUsize>,
}

impl<P: TextProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        CountingProvider { inner, calls: Arc::new(AtomicUsize::new(0)) }
    }

    /// Shared counter that outlives the provider.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        self.calls.clone()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: TextProvider> TextProvider for CountingProvider<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_unit_vectors() {
        let p = HashingProvider::new(64, 3);
        let a = p.embed("Shape: Cystic").unwrap();
        assert_eq!(a, p.embed("Shape: Cystic").unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, HashingProvider::new(64, 4).embed("Shape: Cystic").unwrap());
        assert_ne!(a, p.embed("Shape: Nodular").unwrap());
    }

    #[test]
    fn empty_text_is_an_error() {
        let p = HashingProvider::new(8, 0);
        assert!(matches!(p.embed(" :: "), Err(Error::Provider { .. })));
    }

    #[test]
    fn counting_wrapper_counts() {
        let p = CountingProvider::new(HashingProvider::new(8, 0));
        let c = p.counter();
        p.embed("a").unwrap();
        p.embed("b").unwrap();
        assert_eq!(p.calls(), 2);
        drop(p);
        assert_eq!(c.load(Ordering::SeqCst), 2);
    }
}
