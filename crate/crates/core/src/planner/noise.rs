//! Temporally correlated Gaussian noise with a power-law spectrum.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Sampler of length-`h` sequences whose power spectral density falls as
/// `1/f^beta`. Every time step has exactly unit variance.
#[derive(Clone)]
pub struct ColoredNoise {
    h: usize,
    /// Per-bin amplitude for bins `0..=h/2`, scaled so the variance is one.
    amp: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ColoredNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ColoredNoise").field("h", &self.h).field("amp", &self.amp).finish()
    }
}

impl ColoredNoise {
    /// `h` must be at least 1.
    pub fn new(beta: f64, h: usize) -> Self {
        assert!(h >= 1, "noise length must be at least 1");
        let n = h as f64;
        // The DC bin takes the amplitude of the lowest nonzero frequency.
        let mut amp: Vec<f64> = (0..=h / 2).map(|k| (k.max(1) as f64 / n).powf(-beta / 2.0)).collect();
        // Self-conjugate bins hold their whole power in one bin; interior
        // bins split it across a conjugate pair.
        amp[0] *= std::f64::consts::FRAC_1_SQRT_2;
        if h % 2 == 0 {
            amp[h / 2] *= std::f64::consts::FRAC_1_SQRT_2;
        }
        let var: f64 = amp.iter().map(|a| a * a).sum();
        amp.iter_mut().for_each(|a| *a /= var.sqrt());
        let fft = FftPlanner::new().plan_fft_inverse(h);
        Self { h, amp, fft }
    }

    pub fn len(&self) -> usize {
        self.h
    }

    pub fn is_empty(&self) -> bool {
        self.h == 0
    }

    /// One sequence for a single dimension.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let h = self.h;
        let mut spec = vec![Complex::new(0.0, 0.0); h];
        for (k, &w) in self.amp.iter().enumerate() {
            let a: f64 = rng.sample(StandardNormal);
            if k == 0 || 2 * k == h {
                spec[k] = Complex::new(w * a, 0.0);
            } else {
                let b: f64 = rng.sample(StandardNormal);
                let c = Complex::new(0.5 * w * a, -0.5 * w * b);
                spec[k] = c;
                spec[h - k] = c.conj();
            }
        }
        self.fft.process(&mut spec);
        spec.into_iter().map(|c| c.re).collect()
    }

    /// `h × dims` noise, row `t` holding every dimension at step `t`.
    pub fn sample_matrix<R: Rng + ?Sized>(&self, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let cols: Vec<Vec<f64>> = (0..dims).map(|_| self.sample(rng)).collect();
        (0..self.h).map(|t| cols.iter().map(|c| c[t]).collect()).collect()
    }
}

/// `h × dims` zero-mean, unit-variance noise with PSD ∝ `1/f^beta` per dimension.
pub fn colored_noise<R: Rng + ?Sized>(beta: f64, h: usize, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
    ColoredNoise::new(beta, h).sample_matrix(dims, rng)
}
