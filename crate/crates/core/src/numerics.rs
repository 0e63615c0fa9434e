//! Real-signal mathematics shared by every stage: one-sided FFTs, power
//! spectra, circular cross-correlation, spectral-mask band-pass filtering,
//! Pearson correlation, sub-bin peak interpolation and the lower median.
//!
//! Everything here runs in `f64`. FFT lengths always equal the signal length
//! (no padding), so correlations are circular.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, undefined, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// A uniformly sampled real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSignal {
    samples: Vec<f64>,
    rate_hz: f64,
}

impl RealSignal {
    pub fn new(samples: Vec<f64>, rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("signal must contain at least one sample"));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(invalid(format!("sample rate must be positive, got {rate_hz}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Duration covered by the samples, `len / rate`.
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }
}

impl AsRef<[f64]> for RealSignal {
    fn as_ref(&self) -> &[f64] {
        &self.samples
    }
}

/// One-sided spectrum of a real signal: `floor(n/2) + 1` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub bins: Vec<Complex64>,
    pub source_length: usize,
}

/// Squared magnitudes of a one-sided spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub power: Vec<f64>,
    pub bin_hz: f64,
}

impl PowerSpectrum {
    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.bin_hz
    }
}

/// A closed frequency band in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl Band {
    /// 0.66 to 3.0 Hz, i.e. 40 to 180 bpm.
    pub const HEART_RATE: Band = Band {
        lo_hz: 0.66,
        hi_hz: 3.0,
    };

    pub fn contains(&self, f: f64) -> bool {
        f >= self.lo_hz && f <= self.hi_hz
    }
}

impl Default for Band {
    fn default() -> Self {
        Self::HEART_RATE
    }
}

pub fn rfft(x: &RealSignal) -> Result<ComplexSpectrum> {
    Ok(ComplexSpectrum {
        bins: rfft_slice(x.samples())?,
        source_length: x.len(),
    })
}

pub fn rfft_slice(x: &[f64]) -> Result<Vec<Complex64>> {
    let n = x.len();
    if n < 2 {
        return Err(invalid(format!("FFT needs at least 2 samples, got {n}")));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n));
    fft.process(&mut buf);
    buf.truncate(n / 2 + 1);
    Ok(buf)
}

/// Inverse of [`rfft`]; imaginary parts of the DC and Nyquist bins are ignored.
pub fn irfft(spec: &ComplexSpectrum) -> Result<Vec<f64>> {
    irfft_slice(&spec.bins, spec.source_length)
}

pub fn irfft_slice(bins: &[Complex64], n: usize) -> Result<Vec<f64>> {
    if n < 2 || bins.len() != n / 2 + 1 {
        return Err(invalid(format!(
            "{} bins cannot describe a length-{n} real signal",
            bins.len()
        )));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..bins.len()].copy_from_slice(bins);
    for k in 1..bins.len() {
        if n - k >= bins.len() {
            full[n - k] = bins[k].conj();
        }
    }
    let ifft = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    ifft.process(&mut full);
    let scale = 1.0 / n as f64;
    Ok(full.iter().map(|c| c.re * scale).collect())
}

/// `r(τ) = Σ_t x(t)·y(t+τ)` with indices taken modulo the length, computed
/// as `irfft(conj(rfft(x)) · rfft(y))`.
pub fn circular_xcorr(x: &RealSignal, y: &RealSignal) -> Result<RealSignal> {
    if x.rate_hz() != y.rate_hz() {
        return Err(invalid(format!(
            "sample rates differ: {} vs {}",
            x.rate_hz(),
            y.rate_hz()
        )));
    }
    let r = circular_xcorr_slices(x.samples(), y.samples())?;
    RealSignal::new(r, x.rate_hz())
}

pub fn circular_xcorr_slices(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(invalid(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let fx = rfft_slice(x)?;
    let fy = rfft_slice(y)?;
    let prod: Vec<Complex64> = fx.iter().zip(&fy).map(|(a, b)| a.conj() * b).collect();
    irfft_slice(&prod, x.len())
}

pub fn power_spectrum(x: &RealSignal) -> Result<PowerSpectrum> {
    let power = power_spectrum_slice(x.samples())?;
    Ok(PowerSpectrum {
        power,
        bin_hz: x.rate_hz() / x.len() as f64,
    })
}

/// `|rfft(x)[k]|²` for every one-sided bin.
pub fn power_spectrum_slice(x: &[f64]) -> Result<Vec<f64>> {
    Ok(rfft_slice(x)?.iter().map(|c| c.norm_sqr()).collect())
}

/// Symmetric Hann window, `0.5 − 0.5·cos(2πn/(N−1))`.
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos())
        .collect()
}

/// Spectral-mask band-pass: every bin whose centre frequency lies outside
/// `[lo_hz, hi_hz]` is zeroed, DC included.
pub fn bandpass(x: &RealSignal, lo_hz: f64, hi_hz: f64) -> Result<RealSignal> {
    let nyquist = x.rate_hz() / 2.0;
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < nyquist) {
        return Err(invalid(format!(
            "band [{lo_hz}, {hi_hz}] Hz must satisfy 0 < lo < hi < {nyquist}"
        )));
    }
    let n = x.len();
    let mut bins = rfft_slice(x.samples())?;
    let bin_hz = x.rate_hz() / n as f64;
    for (k, b) in bins.iter_mut().enumerate() {
        let f = k as f64 * bin_hz;
        if f < lo_hz || f > hi_hz {
            *b = Complex64::new(0.0, 0.0);
        }
    }
    RealSignal::new(irfft_slice(&bins, n)?, x.rate_hz())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "pearson_r inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(invalid("pearson_r needs at least 2 samples"));
    }
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(undefined("pearson_r of a zero-variance input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Powers below this fraction of the local peak are treated as numerically
/// zero when fitting the log-parabola.
const LOG_POWER_FLOOR: f64 = 1e-12;

/// Refines the frequency of peak bin `k` by fitting a parabola through the
/// log-power of bins `k−1, k, k+1`. The vertex offset is clamped to half a bin.
pub fn quadratic_peak_interp(spec: &PowerSpectrum, k: usize) -> Result<f64> {
    let n = spec.power.len();
    if k == 0 || k + 1 >= n {
        return Err(invalid(format!(
            "peak bin {k} has no neighbours in a {n}-bin spectrum"
        )));
    }
    let (pa, pb, pc) = (spec.power[k - 1], spec.power[k], spec.power[k + 1]);
    let peak = pa.max(pb).max(pc);
    if peak <= 0.0 {
        return Ok(spec.frequency(k));
    }
    let floor = peak * LOG_POWER_FLOOR;
    let (a, b, c) = (pa.max(floor).ln(), pb.max(floor).ln(), pc.max(floor).ln());
    let curvature = a - 2.0 * b + c;
    let offset = if curvature < 0.0 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok((k as f64 + offset) * spec.bin_hz)
}

/// Lower median: for even lengths the smaller of the two middle elements.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("median of an empty sequence"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Relative threshold below which a standardized output is considered to
/// carry no signal.
pub const DEGENERATE_REL: f64 = 1e-9;

/// Zero-mean, unit-variance copy of `x`. Fails when the standard deviation is
/// at or below `DEGENERATE_REL · reference_scale`.
pub fn standardize(x: &[f64], reference_scale: f64) -> Result<Vec<f64>> {
    let m = mean(x);
    let s = std_dev(x);
    if !(s > DEGENERATE_REL * reference_scale.abs()) || s == 0.0 {
        return Err(undefined(format!(
            "zero variance (std {s:e} against scale {reference_scale:e})"
        )));
    }
    Ok(x.iter().map(|v| (v - m) / s).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Linear resampling from `src.len()` to `len` points using half-pixel
/// centres (`src_pos = (i + 0.5)·n_src/len − 0.5`), clamped at the ends.
pub fn resample_linear(src: &[f64], len: usize) -> Vec<f64> {
    let n = src.len();
    if n == 1 {
        return vec![src[0]; len];
    }
    let scale = n as f64 / len as f64;
    (0..len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            src[lo] * (1.0 - frac) + src[hi] * frac
        })
        .collect()
}
