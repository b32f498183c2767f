//! Small signal helpers shared by the prosody stages and metrics.

use crate::error::{Error, Result};

/// Linear resampling of a sequence to `len` points. Endpoint-aligned: the
/// first and last samples are preserved. A single-point input broadcasts.
pub fn resample_linear(xs: &[f64], len: usize) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::domain("resample_linear", "empty input"));
    }
    if len == 0 {
        return Err(Error::domain("resample_linear", "zero output length"));
    }
    if xs.len() == 1 {
        return Ok(vec![xs[0]; len]);
    }
    if len == 1 {
        return Ok(vec![xs[0]]);
    }
    let scale = (xs.len() - 1) as f64 / (len - 1) as f64;
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        let pos = j as f64 * scale;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(xs.len() - 1);
        let frac = pos - lo as f64;
        out.push(xs[lo] * (1.0 - frac) + xs[hi] * frac);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_lengths_match() {
        let xs = vec![1.0, 3.0, 2.0, 5.0];
        assert_eq!(resample_linear(&xs, 4).unwrap(), xs);
    }

    #[test]
    fn upsampling_interpolates_midpoints() {
        let out = resample_linear(&[0.0, 2.0], 3).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn downsampling_keeps_endpoints() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let out = resample_linear(&xs, 5).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[4], 99.0);
        assert!((out[2] - 49.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_lengths() {
        assert_eq!(resample_linear(&[7.0], 3).unwrap(), vec![7.0, 7.0, 7.0]);
        assert_eq!(resample_linear(&[1.0, 9.0], 1).unwrap(), vec![1.0]);
        assert!(resample_linear(&[], 4).is_err());
        assert!(resample_linear(&[1.0], 0).is_err());
    }
}
