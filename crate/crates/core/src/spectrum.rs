//! DFT analysis: principal week/day/half-day components, 7-bin
//! reconstruction, amplitude/phase features and amplitude variance.
//!
//! Forward transform is unnormalised, X[k] = Σ_{n=0}^{N−1} x[n]·e^{−2πikn/N};
//! the inverse carries the 1/N.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::{Scalar, SLOTS_PER_WEEK};

/// Amplitude below which a component's phase is reported as 0 and flagged.
pub const NULL_AMPLITUDE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("length {0} is not a whole number of weeks; give explicit principal indices")]
    NonCanonical(usize),
    #[error("principal index {k} out of range for N = {n}")]
    IndexRange { k: usize, n: usize },
    #[error("need at least {need} spectra, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("spectra have different lengths")]
    Ragged,
    #[error("zero DC component; relative features undefined")]
    ZeroDc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    pub coeffs: Vec<Complex<T>>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
    pub fn amplitude(&self, k: usize) -> T {
        self.coeffs[k].norm()
    }
}

/// Cached FFT plans keyed by length.
pub struct DftEngine<T: Scalar> {
    planner: FftPlanner<T>,
    forward: Option<(usize, Arc<dyn Fft<T>>)>,
    inverse: Option<(usize, Arc<dyn Fft<T>>)>,
}

impl<T: Scalar> Default for DftEngine<T> {
    fn default() -> Self {
        DftEngine { planner: FftPlanner::new(), forward: None, inverse: None }
    }
}

impl<T: Scalar> DftEngine<T> {
    pub fn forward(&mut self, x: &[T]) -> Spectrum<T> {
        let n = x.len();
        if n == 0 {
            return Spectrum { coeffs: Vec::new() };
        }
        if self.forward.as_ref().map_or(true, |(m, _)| *m != n) {
            self.forward = Some((n, self.planner.plan_fft_forward(n)));
        }
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward.as_ref().expect("planned").1.process(&mut buf);
        Spectrum { coeffs: buf }
    }

    pub fn inverse_complex(&mut self, coeffs: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = coeffs.len();
        if n == 0 {
            return Vec::new();
        }
        if self.inverse.as_ref().map_or(true, |(m, _)| *m != n) {
            self.inverse = Some((n, self.planner.plan_fft_inverse(n)));
        }
        let mut buf = coeffs.to_vec();
        self.inverse.as_ref().expect("planned").1.process(&mut buf);
        let scale = T::one() / T::of_usize(n);
        buf.iter_mut().for_each(|z| *z = *z * scale);
        buf
    }

    /// Real part of the inverse transform.
    pub fn inverse(&mut self, s: &Spectrum<T>) -> Vec<T> {
        self.inverse_complex(&s.coeffs).into_iter().map(|z| z.re).collect()
    }
}

pub fn dft<T: Scalar>(x: &[T]) -> Spectrum<T> {
    DftEngine::default().forward(x)
}

/// Direct O(N²) evaluation of the DFT formula.
pub fn naive_dft<T: Scalar>(x: &[T]) -> Vec<Complex<T>> {
    let n = x.len();
    let tau = T::of(std::f64::consts::TAU);
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(T::zero(), T::zero()), |acc, (j, &v)| {
                let ang = -tau * T::of_usize((k * j) % n) / T::of_usize(n);
                acc + Complex::new(ang.cos(), ang.sin()) * v
            })
        })
        .collect()
}

/// Bins for the one-week, one-day and half-day periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrincipalIndices {
    pub k: [usize; 3],
}

impl PrincipalIndices {
    pub const CANONICAL: PrincipalIndices = PrincipalIndices { k: [4, 28, 56] };

    /// `weeks, 7·weeks, 14·weeks` for a whole number of weeks.
    pub fn for_len(n: usize) -> Result<Self, SpectrumError> {
        if n == 0 || n % SLOTS_PER_WEEK != 0 {
            return Err(SpectrumError::NonCanonical(n));
        }
        let w = n / SLOTS_PER_WEEK;
        Ok(PrincipalIndices { k: [w, 7 * w, 14 * w] })
    }

    pub fn custom(k: [usize; 3], n: usize) -> Result<Self, SpectrumError> {
        match k.iter().find(|&&k| k == 0 || k >= n) {
            Some(&k) => Err(SpectrumError::IndexRange { k, n }),
            None => Ok(PrincipalIndices { k }),
        }
    }

    /// The seven retained bins: 0, k, N−k.
    pub fn kept_bins(&self, n: usize) -> Vec<usize> {
        let mut v = vec![0];
        for &k in &self.k {
            v.push(k);
            v.push(n - k);
        }
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Principal value in (−π, π]; 0 with `true` when the amplitude is null.
pub fn phase<T: Scalar>(z: Complex<T>) -> (T, bool) {
    if z.norm() < T::of(NULL_AMPLITUDE) {
        return (T::zero(), true);
    }
    let p = z.im.atan2(z.re);
    let pi = T::of(std::f64::consts::PI);
    (if p <= -pi { pi } else { p }, false)
}

/// Column names of the canonical feature triple, in file order.
pub const FEATURE_COLUMNS: [&str; 6] = ["A4", "P4", "A28", "P28", "A56", "P56"];
pub const RELATIVE_COLUMNS: [&str; 6] = ["R4", "I4", "R28", "I28", "R56", "I56"];

/// Amplitudes and phases at the week, day and half-day bins (named A4/P4,
/// A28/P28, A56/P56 whatever N is).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeature<T> {
    pub tower_id: String,
    pub amplitude: [T; 3],
    pub phase: [T; 3],
    pub null_phase: [bool; 3],
}

impl<T: Scalar> SpectralFeature<T> {
    /// Values in [`FEATURE_COLUMNS`] order.
    pub fn row(&self) -> [T; 6] {
        let (a, p) = (self.amplitude, self.phase);
        [a[0], p[0], a[1], p[1], a[2], p[2]]
    }
}

pub fn principal_components<T: Scalar>(tower_id: &str, s: &Spectrum<T>, idx: &PrincipalIndices) -> SpectralFeature<T> {
    let mut f = SpectralFeature { tower_id: tower_id.to_string(), amplitude: [T::zero(); 3], phase: [T::zero(); 3], null_phase: [false; 3] };
    for (i, &k) in idx.k.iter().enumerate() {
        let z = s.coeffs[k];
        f.amplitude[i] = z.norm();
        let (p, null) = phase(z);
        f.phase[i] = p;
        f.null_phase[i] = null;
    }
    f
}

/// X[k]/X[0] at the principal bins as (re, im) pairs — linear in mixtures
/// of raw (un-normalised) series.
pub fn relative_features<T: Scalar>(s: &Spectrum<T>, idx: &PrincipalIndices) -> Result<[T; 6], SpectrumError> {
    let dc = s.coeffs[0];
    if dc.norm() == T::zero() {
        return Err(SpectrumError::ZeroDc);
    }
    let mut out = [T::zero(); 6];
    for (i, &k) in idx.k.iter().enumerate() {
        let r = s.coeffs[k] / dc;
        out[2 * i] = r.re;
        out[2 * i + 1] = r.im;
    }
    Ok(out)
}

/// Spectrum with everything but bins {0, ±k} zeroed.
pub fn truncate<T: Scalar>(s: &Spectrum<T>, idx: &PrincipalIndices) -> Spectrum<T> {
    let n = s.len();
    let mut coeffs = vec![Complex::new(T::zero(), T::zero()); n];
    for b in idx.kept_bins(n) {
        coeffs[b] = s.coeffs[b];
    }
    Spectrum { coeffs }
}

pub fn reconstruct<T: Scalar>(engine: &mut DftEngine<T>, s: &Spectrum<T>, idx: &PrincipalIndices) -> Vec<T> {
    engine.inverse(&truncate(s, idx))
}

/// Σ x_r² / Σ x² of the 7-bin reconstruction.
pub fn energy_retention<T: Scalar>(engine: &mut DftEngine<T>, x: &[T], idx: &PrincipalIndices) -> T {
    let s = engine.forward(x);
    let xr = reconstruct(engine, &s, idx);
    let e: T = x.iter().map(|&v| v * v).sum();
    let er: T = xr.iter().map(|&v| v * v).sum();
    if e == T::zero() {
        T::one()
    } else {
        er / e
    }
}

/// Population variance of |X[k]| across spectra, for k = 1..=N/2
/// (element `i` is k = i + 1).
pub fn amplitude_variance<T: Scalar>(spectra: &[Spectrum<T>]) -> Result<Vec<T>, SpectrumError> {
    if spectra.len() < 2 {
        return Err(SpectrumError::TooFew { need: 2, got: spectra.len() });
    }
    let n = spectra[0].len();
    if spectra.iter().any(|s| s.len() != n) {
        return Err(SpectrumError::Ragged);
    }
    let m = T::of_usize(spectra.len());
    Ok((1..=n / 2)
        .map(|k| {
            let mean = spectra.iter().map(|s| s.amplitude(k)).sum::<T>() / m;
            spectra.iter().map(|s| (s.amplitude(k) - mean).powi(2)).sum::<T>() / m
        })
        .collect())
}

/// The `count` bins with the largest variance, descending (ties → lower k).
pub fn top_bins<T: Scalar>(variance: &[T], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..variance.len()).collect();
    idx.sort_by(|&a, &b| variance[b].partial_cmp(&variance[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.into_iter().take(count).map(|i| i + 1).collect()
}
