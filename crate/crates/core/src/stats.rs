//! Small descriptive-statistics helpers.

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard deviation with divisor `n - ddof`.
pub fn sd(v: &[f64], ddof: usize) -> f64 {
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len() - ddof) as f64).sqrt()
}

/// Empirical percentile with linear interpolation between order statistics
/// (the `(n-1)p` rule). `p` is in `[0, 1]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorts a copy (NaNs excluded) and returns the 2.5th / 97.5th percentiles.
pub fn percentile_ci95(draws: &[f64]) -> (f64, f64) {
    let mut s: Vec<f64> = draws.iter().copied().filter(|x| x.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    (percentile(&s, 0.025), percentile(&s, 0.975))
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Seed for a named sub-task: the first eight bytes of
/// `sha256(seed ‖ part₀ ‖ 0 ‖ part₁ ‖ 0 …)`.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 0.5), 3.0);
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 1.0), 5.0);
        assert!((percentile(&s, 0.1) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn sample_sd() {
        assert!((sd(&[1.0, 2.0, 3.0], 1) - 1.0).abs() < 1e-15);
    }
}
