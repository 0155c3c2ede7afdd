//! Float formatting for emitted tables and figures.

/// Rounds to six significant digits, then prints the shortest string that
/// round-trips the rounded value. `-0` prints as `0`.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.5e}").parse().unwrap_or(x);
    if rounded == 0.0 {
        return "0".to_string();
    }
    format!("{rounded}")
}

pub fn sig6_opt(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_default()
}

/// Full-precision shortest round-trip form used in interchange files.
pub fn exact(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x}")
    }
}

pub fn exact_opt(x: Option<f64>) -> String {
    x.map(exact).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(1234567.0), "1234570");
        assert_eq!(sig6(-0.0), "0");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(-2.0e-9), "-0.000000002");
        assert_eq!(sig6(f64::NAN), "NaN");
    }

    #[test]
    fn exact_roundtrips() {
        let x = 0.1 + 0.2;
        assert_eq!(exact(x).parse::<f64>().unwrap(), x);
    }
}
