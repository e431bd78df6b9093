//! Codebook-health and reconstruction diagnostics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Selection statistics over one evaluation pass.
#[derive(Debug, Clone)]
pub struct UsageStats {
    pub counts: Vec<u64>,
    /// Fraction of codes selected at least once.
    pub usage: f64,
    /// exp(entropy) of the empirical index distribution, in [1, K].
    pub perplexity: f64,
}

/// Per-code selection counts, merged batch by batch over an eval pass.
#[derive(Debug, Clone)]
pub struct UsageAccumulator {
    counts: Vec<u64>,
}

impl UsageAccumulator {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "usage accumulator needs K >= 1");
        UsageAccumulator { counts: vec![0; k] }
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            assert!(i < self.counts.len(), "index {i} out of K={}", self.counts.len());
            self.counts[i] += 1;
        }
    }

    pub fn merge(&mut self, other: &UsageAccumulator) {
        assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn finalize(&self) -> UsageStats {
        let total = self.total();
        assert!(total > 0, "usage over an empty eval pass");
        let k = self.counts.len();
        let used = self.counts.iter().filter(|&&c| c > 0).count();
        let mut entropy = 0.0f64;
        for &c in &self.counts {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
        UsageStats {
            counts: self.counts.clone(),
            usage: used as f64 / k as f64,
            perplexity: entropy.exp(),
        }
    }
}

/// Usage and perplexity of an index stream against codebook size `k`.
pub fn codebook_usage(indices: &[usize], k: usize) -> UsageStats {
    let mut acc = UsageAccumulator::new(k);
    acc.record(indices);
    acc.finalize()
}

/// 10*log10(peak^2 / mse) with peak = 2 for [-1,1] pixels; +inf when the
/// images are identical.
pub fn psnr(x_hat: &Tensor<f32>, x: &Tensor<f32>) -> f64 {
    assert_eq!(x_hat.shape(), x.shape(), "psnr shape mismatch");
    let mse: f64 = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / mse).log10()
    }
}

/// Scalar proxy for how far codes drifted from the feature distribution:
/// mean over codes of the distance to the nearest feature row, normalized by
/// the mean feature norm.
pub fn distribution_gap(codebook: &Tensor<f32>, features: &Tensor<f32>) -> f64 {
    let (k, d) = codebook.dims2();
    let (n, df) = features.dims2();
    assert_eq!(d, df, "distribution_gap dim mismatch {d} vs {df}");
    assert!(n > 0, "distribution_gap over an empty feature sample");
    let mut mean_dist = 0.0f64;
    for c in 0..k {
        let row = codebook.row(c);
        let mut best = f64::INFINITY;
        for f in 0..n {
            let dist: f64 = row
                .iter()
                .zip(features.row(f))
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum();
            best = best.min(dist);
        }
        mean_dist += best.sqrt();
    }
    mean_dist /= k as f64;
    let mean_norm: f64 = (0..n)
        .map(|f| {
            features
                .row(f)
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64;
    mean_dist / mean_norm.max(1e-12)
}

/// Labeled rows (source, D columns) for external projection tools.
pub fn export_embeddings_csv(
    codebook: &Tensor<f32>,
    features: &Tensor<f32>,
    path: &Path,
) -> Result<()> {
    let (k, d) = codebook.dims2();
    let (n, df) = features.dims2();
    assert_eq!(d, df, "export dim mismatch {d} vs {df}");
    let mut out = String::from("source");
    for j in 0..d {
        out.push_str(&format!(",c{j}"));
    }
    out.push('\n');
    for i in 0..k {
        out.push_str("code");
        for &v in codebook.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    for i in 0..n {
        out.push_str("feature");
        for &v in features.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn degenerate_stream_has_min_usage_and_unit_perplexity() {
        let stats = codebook_usage(&vec![0usize; 50], 256);
        assert!((stats.usage - 1.0 / 256.0).abs() < 1e-12);
        assert!((stats.perplexity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_coverage_has_full_usage_and_perplexity_k() {
        let indices: Vec<usize> = (0..64).collect();
        let stats = codebook_usage(&indices, 64);
        assert_eq!(stats.usage, 1.0);
        assert!((stats.perplexity - 64.0).abs() < 1e-9);
    }

    #[test]
    fn counts_match_brute_force_and_permutation_invariance() {
        let mut rng = Rng::new(6);
        let indices: Vec<usize> = (0..500).map(|_| rng.below(32)).collect();
        let stats = codebook_usage(&indices, 32);
        let mut brute = vec![0u64; 32];
        for &i in &indices {
            brute[i] += 1;
        }
        assert_eq!(stats.counts, brute);
        let mut shuffled = indices.clone();
        Rng::new(9).shuffle(&mut shuffled);
        let stats2 = codebook_usage(&shuffled, 32);
        assert_eq!(stats2.usage, stats.usage);
        assert!((stats2.perplexity - stats.perplexity).abs() < 1e-12);
    }

    #[test]
    fn accumulator_is_monotone_and_merge_matches_single_pass() {
        let mut acc = UsageAccumulator::new(16);
        acc.record(&[1, 2, 3]);
        let u1 = acc.finalize().usage;
        acc.record(&[4, 5]);
        let u2 = acc.finalize().usage;
        assert!(u2 >= u1);

        let mut a = UsageAccumulator::new(16);
        a.record(&[1, 1, 2]);
        let mut b = UsageAccumulator::new(16);
        b.record(&[2, 7]);
        a.merge(&b);
        assert_eq!(a.finalize().counts, codebook_usage(&[1, 1, 2, 2, 7], 16).counts);
    }

    #[test]
    #[should_panic(expected = "empty eval pass")]
    fn empty_pass_is_a_contract_error() {
        UsageAccumulator::new(8).finalize();
    }

    #[test]
    fn psnr_extremes_and_direct_formula() {
        let mut rng = Rng::new(2);
        let a: Tensor<f32> = rng.tensor_uniform(vec![1, 3, 4, 4], -1.0, 1.0);
        assert_eq!(psnr(&a, &a), f64::INFINITY);

        // MSE == peak^2 -> 0 dB: craft b = a shifted by exactly 2 where possible.
        let ones = Tensor::full(vec![4], 1.0f32);
        let minus = Tensor::full(vec![4], -1.0f32);
        assert!((psnr(&ones, &minus) - 0.0).abs() < 1e-12);

        let b: Tensor<f32> = rng.tensor_uniform(vec![1, 3, 4, 4], -1.0, 1.0);
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / 48.0;
        let direct = 10.0 * (4.0 / mse).log10();
        assert!((psnr(&a, &b) - direct).abs() < 1e-9);
    }

    #[test]
    fn gap_zero_when_codes_subsample_features() {
        let mut rng = Rng::new(3);
        let features: Tensor<f32> = rng.tensor_normal(vec![20, 8], 0.0, 1.0);
        let codebook = Tensor::new(vec![5, 8], features.data()[..40].to_vec());
        assert!(distribution_gap(&codebook, &features) < 1e-9);
    }

    #[test]
    fn gap_tracks_constant_displacement() {
        // Tight feature cluster, codebook displaced by a constant offset:
        // gap ≈ ||delta|| / mean feature norm.
        let features = Tensor::full(vec![10, 4], 1.0f32);
        let codebook = Tensor::full(vec![6, 4], 1.5f32);
        let delta_norm = (4.0f64 * 0.25).sqrt();
        let feature_norm = 2.0;
        let expected = delta_norm / feature_norm;
        assert!((distribution_gap(&codebook, &features) - expected).abs() < 1e-9);
    }

    #[test]
    fn gap_matches_brute_force() {
        let mut rng = Rng::new(4);
        let features: Tensor<f32> = rng.tensor_normal(vec![15, 6], 0.0, 1.0);
        let codebook: Tensor<f32> = rng.tensor_normal(vec![7, 6], 0.0, 1.0);
        let mut mean = 0.0f64;
        for c in 0..7 {
            let mut best = f64::INFINITY;
            for f in 0..15 {
                let d: f64 = codebook
                    .row(c)
                    .iter()
                    .zip(features.row(f))
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                best = best.min(d);
            }
            mean += best.sqrt();
        }
        mean /= 7.0;
        let norm: f64 = (0..15)
            .map(|f| features.row(f).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 15.0;
        assert!((distribution_gap(&codebook, &features) - mean / norm).abs() < 1e-12);
    }

    #[test]
    fn embeddings_csv_shape() {
        let mut rng = Rng::new(5);
        let codebook: Tensor<f32> = rng.tensor_normal(vec![4, 3], 0.0, 1.0);
        let features: Tensor<f32> = rng.tensor_normal(vec![6, 3], 0.0, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        export_embeddings_csv(&codebook, &features, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 6);
        assert_eq!(lines[0], "source,c0,c1,c2");
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 4);
        }
        // Values survive a parse round trip at f32 precision.
        let first_code: f32 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(first_code, codebook.data()[0]);
    }
}
