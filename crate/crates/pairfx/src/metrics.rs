//! Explanation scoring: corpus BLEU with brevity penalty, ROUGE-1/2/L,
//! and Fréchet distance between embedding distributions with a PSD matrix
//! square root. Embedding providers are pluggable; the hash embedder is a
//! deterministic stand-in for learned text encoders.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_items;
use crate::rng::SplitMix64;
use crate::text::tokenize;

// ---------------------------------------------------------------------------
// BLEU

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU for every n in 1..=max_n. Modified n-gram precision
/// with clipping, geometric mean over orders 1..n, and brevity penalty
/// BP = exp(1 - r/c) when the candidate corpus is shorter than the
///// reference corpus. No smoothing: a zero precision at any order zeroes
/// that BLEU-n.
pub fn bleu(candidates: &[String], references: &[String], max_n: usize) -> Result<Vec<f64>> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::fault(format!(
            "bleu needs equal non-empty corpora, got {} candidates / {} references",
            candidates.len(),
            references.len()
        )));
    }
    let cand_tokens: Vec<Vec<String>> = map_items(candidates, |c| tokenize(c));
    let ref_tokens: Vec<Vec<String>> = map_items(references, |r| tokenize(r));

    let c_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let r_len: usize = ref_tokens.iter().map(Vec::len).sum();
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };

    // Clipped matches and candidate totals per order.
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (cand, reference) in cand_tokens.iter().zip(&ref_tokens) {
        for n in 1..=max_n {
            let c_counts = ngram_counts(cand, n);
            let r_counts = ngram_counts(reference, n);
            for (gram, &count) in &c_counts {
                total[n - 1] += count;
                matched[n - 1] += count.min(r_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            }
        })
        .collect();

    Ok((1..=max_n)
        .map(|n| {
            if precisions[..n].iter().any(|&p| p == 0.0) {
                0.0
            } else {
                let log_mean: f64 =
                    precisions[..n].iter().map(|&p| p.ln()).sum::<f64>() / n as f64;
                bp * log_mean.exp()
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// ROUGE

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Sentence-level ROUGE F1 for one candidate/reference pair.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    if cand.is_empty() || reference.is_empty() {
        eprintln!("warning: rouge on empty text scores 0");
        return 0.0;
    }
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let c_counts = ngram_counts(&cand, n);
            let r_counts = ngram_counts(&reference, n);
            let c_total: usize = c_counts.values().sum();
            let r_total: usize = r_counts.values().sum();
            if c_total == 0 || r_total == 0 {
                return 0.0;
            }
            let overlap: usize = c_counts
                .iter()
                .map(|(gram, &c)| c.min(r_counts.get(gram).copied().unwrap_or(0)))
                .sum();
            f1(overlap as f64 / c_total as f64, overlap as f64 / r_total as f64)
        }
        RougeVariant::L => {
            let lcs = lcs_len(&cand, &reference) as f64;
            f1(lcs / cand.len() as f64, lcs / reference.len() as f64)
        }
    }
}

/// Mean ROUGE F1 over aligned pairs.
pub fn rouge_corpus(candidates: &[String], references: &[String], variant: RougeVariant) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::fault("rouge needs equal non-empty corpora"));
    }
    let pairs: Vec<(String, String)> = candidates
        .iter()
        .cloned()
        .zip(references.iter().cloned())
        .collect();
    let scores = map_items(&pairs, |(c, r)| rouge(c, r, variant));
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

// ---------------------------------------------------------------------------
// Embeddings

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub provider_id: String,
    pub dim: usize,
}

pub trait EmbeddingProvider: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Signed feature hashing over bag-of-tokens, l2-normalized. Bag-based by
/// construction: token order does not affect the vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-{}-{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = tokenize(text);
        let mut values = vec![0.0f32; self.dim];
        if tokens.is_empty() {
            eprintln!("warning: embedding empty text as zero vector");
            return Ok(values);
        }
        for token in &tokens {
            let mut rng = SplitMix64::substream(self.seed, token);
            let h = rng.next_u64();
            let bucket = (h >> 1) as usize % self.dim;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        }
        let norm: f64 = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(values)
    }
}

pub fn embed_texts(provider: &dyn EmbeddingProvider, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    let id = provider.id();
    let dim = provider.dim();
    let results = map_items(texts, |t| provider.embed(t));
    results
        .into_iter()
        .map(|r| {
            r.map(|values| EmbeddingVector {
                values,
                provider_id: id.clone(),
                dim,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// FID

/// PSD matrix square root via eigendecomposition with eigenvalues clamped
/// at zero. Inputs must be symmetric within 1e-6; they are symmetrized
/// before decomposition.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if m.ncols() != d {
        return Err(Error::Shape("matrix_sqrt_psd needs a square matrix".into()));
    }
    let mut max_asym = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if max_asym > 1e-6 {
        return Err(Error::fault(format!(
            "matrix not symmetric: max asymmetry {max_asym:e}"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())
}

fn mean_and_cov(set: &[Vec<f32>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::fault("fid needs at least 2 samples per set"));
    }
    let d = set[0].len();
    if set.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("embedding dims differ within a set".into()));
    }
    let mut mean = DVector::zeros(d);
    for v in set {
        for i in 0..d {
            mean[i] += v[i] as f64;
        }
    }
    mean /= n as f64;
    // Unbiased (n-1) sample covariance.
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let centered = DVector::from_iterator(d, v.iter().map(|&x| x as f64)) - &mean;
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Fréchet distance between Gaussian fits of two embedding sets, using the
/// symmetric-product form sqrt(Sx^{1/2} Sy Sx^{1/2}) so the square root
/// always sees a symmetric PSD matrix. Tiny negative totals clamp to 0.
pub fn fid(x: &[Vec<f32>], y: &[Vec<f32>]) -> Result<f64> {
    let (mu_x, cov_x) = mean_and_cov(x)?;
    let (mu_y, cov_y) = mean_and_cov(y)?;
    if mu_x.len() != mu_y.len() {
        return Err(Error::Shape("embedding dims differ between sets".into()));
    }
    let sqrt_x = matrix_sqrt_psd(&cov_x)?;
    let product = &sqrt_x * &cov_y * &sqrt_x;
    let sym = (&product + product.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&sym)?;
    let mean_term = (&mu_x - &mu_y).norm_squared();
    let trace_term = cov_x.trace() + cov_y.trace() - 2.0 * cross.trace();
    let value = mean_term + trace_term;
    Ok(value.max(0.0))
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub embedder: String,
    pub embed_dim: usize,
    pub embed_seed: u64,
}

/// Scores in 0-1 everywhere; Table-style displays typically show BLEU x100.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu_1: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub fid: f64,
    pub n_pairs: usize,
    pub config: MetricsConfig,
}

pub fn score_corpus(
    candidates: &[String],
    references: &[String],
    provider: &dyn EmbeddingProvider,
    config: MetricsConfig,
) -> Result<MetricsReport> {
    let bleu_scores = bleu(candidates, references, 4)?;
    let cand_emb: Vec<Vec<f32>> = embed_texts(provider, candidates)?
        .into_iter()
        .map(|e| e.values)
        .collect();
    let ref_emb: Vec<Vec<f32>> = embed_texts(provider, references)?
        .into_iter()
        .map(|e| e.values)
        .collect();
    Ok(MetricsReport {
        bleu_1: bleu_scores[0],
        bleu_4: bleu_scores[3],
        rouge_1: rouge_corpus(candidates, references, RougeVariant::One)?,
        rouge_2: rouge_corpus(candidates, references, RougeVariant::Two)?,
        rouge_l: rouge_corpus(candidates, references, RougeVariant::L)?,
        fid: fid(&cand_emb, &ref_emb)?,
        n_pairs: candidates.len(),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_identity_is_one() {
        let texts = s(&["the cat sat on the mat"]);
        let scores = bleu(&texts, &texts, 4).unwrap();
        for sc in scores {
            assert!((sc - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_brevity_penalty_hand_fixture() {
        // Precision 2/2, BP = exp(1 - 3/2).
        let scores = bleu(&s(&["the cat"]), &s(&["the cat sat"]), 1).unwrap();
        assert!((scores[0] - (1.0f64 - 1.5).exp()).abs() < 1e-4, "{}", scores[0]);
    }

    #[test]
    fn bleu_no_overlap_is_zero() {
        let scores = bleu(&s(&["dog runs"]), &s(&["the cat sat"]), 1).unwrap();
        assert_eq!(scores[0], 0.0);
    }

    #[test]
    fn bleu_rejects_length_mismatch() {
        assert!(bleu(&s(&["a"]), &s(&["a", "b"]), 1).is_err());
    }

    #[test]
    fn rouge_identity_is_one() {
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            assert!((rouge("a nice warm coat", "a nice warm coat", v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rouge1_hand_fixture() {
        // P = 1, R = 2/3, F1 = 0.8.
        assert!((rouge("the cat", "the cat sat", RougeVariant::One) - 0.8).abs() < 1e-4);
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            assert_eq!(rouge("dog runs", "the cat sat", v), 0.0);
        }
    }

    #[test]
    fn hash_embedder_deterministic_unit_norm() {
        let e = HashEmbedder { dim: 32, seed: 5 };
        let a = e.embed("frilly blush skirt").unwrap();
        let b = e.embed("frilly blush skirt").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hash_embedder_is_bag_based() {
        let e = HashEmbedder { dim: 32, seed: 5 };
        assert_eq!(e.embed("a b").unwrap(), e.embed("b a").unwrap());
    }

    #[test]
    fn sqrt_psd_identity_and_diagonal() {
        let id = DMatrix::<f64>::identity(3, 3);
        let root = matrix_sqrt_psd(&id).unwrap();
        assert!((root - &id).norm() < 1e-12);

        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let root = matrix_sqrt_psd(&m).unwrap();
        assert!((root[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((root[(1, 1)] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn sqrt_psd_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&m).is_err());
    }

    #[test]
    fn sqrt_psd_reconstructs_random_psd() {
        let mut rng = SplitMix64::new(17);
        let a = DMatrix::from_fn(8, 8, |_, _| rng.uniform(-1.0, 1.0));
        let m = a.transpose() * &a;
        let root = matrix_sqrt_psd(&m).unwrap();
        let rel = (&root * &root - &m).norm() / m.norm().max(1e-12);
        assert!(rel < 1e-5, "reconstruction error {rel:e}");
        // Output symmetric and PSD.
        assert!((&root - root.transpose()).norm() < 1e-8);
        let eig = root.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-8));
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let e = HashEmbedder { dim: 8, seed: 1 };
        let set: Vec<Vec<f32>> = ["a coat", "a hat", "warm boots", "red scarf"]
            .iter()
            .map(|t| e.embed(t).unwrap())
            .collect();
        assert!(fid(&set, &set).unwrap() <= 1e-6);
    }

    #[test]
    fn fid_one_dimensional_hand_fixture() {
        let x = vec![vec![0.0f32], vec![2.0]];
        let y = vec![vec![1.0f32], vec![3.0]];
        // mu 1 vs 2, s^2 = 2 both: 1 + (2 + 2 - 2*2) = 1.
        assert!((fid(&x, &y).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fid_symmetric() {
        let mut rng = SplitMix64::new(3);
        let x: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
            .collect();
        let y: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..4).map(|_| rng.uniform(0.0, 2.0) as f32).collect())
            .collect();
        let a = fid(&x, &y).unwrap();
        let b = fid(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn fid_rejects_tiny_sets() {
        assert!(fid(&[vec![1.0f32]], &[vec![0.0f32], vec![1.0]]).is_err());
    }
}
