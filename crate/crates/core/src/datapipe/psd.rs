//! Averaged periodogram over non-overlapping rectangular windows.
//!
//! Forward DFT is un-normalized, `X_k = Σ_n x_n e^{-2πikn/W}`, and each
//! one-sided bin is `|X_k|²/W`, averaged over windows. Under this convention
//! `P_0 + 2·Σ_{0<k<W/2} P_k + P_{W/2}` equals the per-window energy `Σ x_n²`.

use rustfft::{num_complex::Complex, FftPlanner};

use super::DataError;

pub const DEFAULT_WINDOW: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    /// `⌊W/2⌋ + 1` non-negative bins.
    pub bins: Vec<f64>,
    /// Number of windows averaged.
    pub windows: usize,
    /// Set when the series was shorter than one window and got zero-padded.
    pub zero_padded: bool,
}

impl Psd {
    /// Frequency in Hz of bin `k`.
    pub fn frequency(k: usize, window: usize, sample_rate: f64) -> f64 {
        k as f64 * sample_rate / window as f64
    }
}

pub fn psd(series: &[f64], sample_rate: f64, window: usize) -> Result<Psd, DataError> {
    if series.len() < 2 {
        return Err(DataError::Invalid(format!(
            "psd needs at least 2 samples, got {}",
            series.len()
        )));
    }
    if window < 2 {
        return Err(DataError::Invalid(format!(
            "psd window must be ≥ 2, got {window}"
        )));
    }
    if !(sample_rate > 0.0) {
        return Err(DataError::Invalid(format!(
            "sample rate must be positive, got {sample_rate}"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Invalid(
            "psd input contains non-finite values".into(),
        ));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let nbins = window / 2 + 1;
    let mut bins = vec![0.0; nbins];
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let zero_padded = series.len() < window;
    let chunks: Vec<&[f64]> = if zero_padded {
        vec![series]
    } else {
        series.chunks_exact(window).collect()
    };
    for chunk in &chunks {
        for (b, &x) in buf
            .iter_mut()
            .zip(chunk.iter().chain(std::iter::repeat(&0.0)))
        {
            *b = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (p, x) in bins.iter_mut().zip(&buf) {
            *p += x.norm_sqr() / window as f64;
        }
    }
    let n = chunks.len() as f64;
    bins.iter_mut().for_each(|p| *p /= n);
    Ok(Psd {
        bins,
        windows: chunks.len(),
        zero_padded,
    })
}

/// `Σ_k c_k P_k` with the one-sided fold weights; equals mean window energy.
pub fn folded_power(bins: &[f64], window: usize) -> f64 {
    bins.iter()
        .enumerate()
        .map(|(k, p)| {
            if k == 0 || (window.is_multiple_of(2) && k == window / 2) {
                *p
            } else {
                2.0 * p
            }
        })
        .sum()
}

/// Mean and (population) standard deviation of the raw series.
pub fn center_and_spread(series: &[f64]) -> (f64, f64) {
    let n = series.len().max(1) as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    /// O(n²) one-sided periodogram straight from the definition.
    fn direct_dft_power(x: &[f64]) -> Vec<f64> {
        let w = x.len();
        (0..=w / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / w as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im) / w as f64
            })
            .collect()
    }

    #[test]
    fn constant_series_is_dc() {
        let c = 1.5;
        let p = psd(&[c; 64], 100.0, 64).unwrap();
        assert_eq!(p.bins.len(), 33);
        assert!((p.bins[0] - c * c * 64.0).abs() < 1e-9);
        assert!(p.bins[1..].iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn tone_at_bin_three_matches_direct_dft() {
        let x: Vec<f64> = (0..64)
            .map(|n| (2.0 * PI * 3.0 * n as f64 / 64.0 + 0.4).sin())
            .collect();
        let p = psd(&x, 64.0, 64).unwrap();
        let oracle = direct_dft_power(&x);
        for (a, b) in p.bins.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        let peak = p
            .bins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 3);
        assert!((p.bins[3] - 16.0).abs() < 1e-9);
    }

    #[test]
    fn white_noise_is_flat() {
        let mut rng = rng_from_seed(11);
        let x: Vec<f64> = (0..64 * 100)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let p = psd(&x, 64.0, 64).unwrap();
        assert_eq!(p.windows, 100);
        // interior bins have E = σ² = 1 and relative sd 1/√100
        let interior = &p.bins[1..32];
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn parseval_single_window() {
        let mut rng = rng_from_seed(5);
        let x: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = psd(&x, 64.0, 64).unwrap();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!((folded_power(&p.bins, 64) - energy).abs() < 1e-9);
    }

    #[test]
    fn short_series_zero_padded() {
        let p = psd(&[1.0, -1.0, 0.5], 10.0, 64).unwrap();
        assert!(p.zero_padded);
        assert_eq!(p.windows, 1);
        assert_eq!(p.bins.len(), 33);
        assert!(psd(&[1.0], 10.0, 64).is_err());
    }

    #[test]
    fn phase_shift_invariance() {
        for shift in [0.0, 0.3, 1.7, 3.0] {
            let x: Vec<f64> = (0..128)
                .map(|n| (2.0 * PI * 5.0 * n as f64 / 64.0 + shift).cos())
                .collect();
            let p = psd(&x, 64.0, 64).unwrap();
            assert!((p.bins[5] - 16.0).abs() < 1e-9);
        }
    }
}
