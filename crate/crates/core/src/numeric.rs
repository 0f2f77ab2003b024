//! Small numeric helpers shared across modules.

/// Compensated (Neumaier) summation. Keeps probability vectors and metric
/// reductions accurate to ~1 ulp even for 1e5+ terms.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Log-sum-exp over a slice with max subtraction. The exponential terms are
/// accumulated in ascending order so the result is invariant to any
/// permutation of `xs` (bit-exact), not just mathematically.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut terms: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).expect("exp values are never NaN"));
    max + terms.iter().sum::<f64>().ln()
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Returns an error description for zero-norm inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_handles_many_small_terms() {
        let n = 100_000;
        let v = 1.0 / n as f64;
        let sum = kahan_sum(std::iter::repeat(v).take(n));
        assert!((sum - 1.0).abs() < 1e-14, "sum = {sum}");
    }

    #[test]
    fn log_sum_exp_matches_naive_on_small_inputs() {
        let xs = [0.3f64, -1.2, 2.5, 0.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_permutation_bit_exact() {
        let xs = [0.11, 3.7, -2.0, 1.4142, 0.9999];
        let mut ys = xs;
        ys.reverse();
        assert_eq!(log_sum_exp(&xs).to_bits(), log_sum_exp(&ys).to_bits());
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let xs = [1000.0f64, 999.0];
        let expect = 1000.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((log_sum_exp(&xs) - expect).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_none());
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }
}
