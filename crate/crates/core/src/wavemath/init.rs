use rand::Rng;

use crate::error::{Error, Result};

/// Xavier/Glorot uniform weights on `±sqrt(6 / (fan_in + fan_out))`,
/// `fan_out × fan_in` entries in row-major order.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::config(format!(
            "xavier init needs positive fans, got in={fan_in} out={fan_out}"
        )));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok((0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavemath::rng::RngStreams;

    #[test]
    fn deterministic_for_fixed_seed() {
        let s = RngStreams::new(9);
        let a = xavier_init(5, 7, &mut s.stream("w", 0)).unwrap();
        let b = xavier_init(5, 7, &mut s.stream("w", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bound_for_equal_fans() {
        let w = xavier_init(3, 3, &mut RngStreams::new(1).stream("w", 0)).unwrap();
        assert!(w.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn variance_matches_uniform_law() {
        // 10^5 samples; uniform on ±a has variance a²/3 = 2/(fan_in + fan_out).
        let w = xavier_init(250, 400, &mut RngStreams::new(2).stream("w", 0)).unwrap();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 650.0;
        assert!((var - expect).abs() < 0.1 * expect, "var {var} expect {expect}");
    }

    #[test]
    fn zero_fan_rejected() {
        let mut r = RngStreams::new(1).stream("w", 0);
        assert!(matches!(xavier_init(0, 3, &mut r), Err(Error::Config(_))));
    }
}
