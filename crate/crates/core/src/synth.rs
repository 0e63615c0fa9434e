//! Synthetic pulsatile clips with known ground truth.
//!
//! Pixel noise comes from ChaCha8 seeded with `seed`, one stream per frame,
//! so frames can be generated independently and in any order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::media_io::FrameSequence;
use crate::numerics::{standardize, RealSignal};

/// Per-channel share of the pulse amplitude, green strongest.
pub const CHANNEL_GAINS: [f64; 3] = [0.5, 1.0, 0.3];
/// Slope of the moving luminance gradient, in counts per pixel.
pub const GRADIENT_SLOPE: f64 = 0.25;
/// Oscillation frequency of the moving gradient.
pub const MOTION_HZ: f64 = 0.2;
/// Clipped-pixel fraction above which a clip is flagged.
pub const CLIP_WARN_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub fps: f64,
    pub hr_bpm: f64,
    /// Pulse amplitude in 8-bit counts, scaled per channel by [`CHANNEL_GAINS`].
    pub amplitude: f64,
    pub base_color: [f64; 3],
    pub noise_sigma: f64,
    pub drift_hz: f64,
    pub drift_amp: f64,
    pub motion_px: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            duration_s: 30.0,
            fps: 30.0,
            hr_bpm: 72.0,
            amplitude: 4.0,
            base_color: [170.0, 120.0, 100.0],
            noise_sigma: 2.0,
            drift_hz: 0.1,
            drift_amp: 0.0,
            motion_px: 0.0,
            seed: 0,
            width: 64,
            height: 64,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(40.0..=180.0).contains(&self.hr_bpm) {
            return Err(invalid(format!("heart rate {} bpm is outside [40, 180]", self.hr_bpm)));
        }
        if !(self.fps > 2.0 * self.hr_bpm / 60.0) {
            return Err(invalid(format!(
                "{} fps cannot carry a {} bpm pulse",
                self.fps, self.hr_bpm
            )));
        }
        if !(0.0..=20.0).contains(&self.amplitude) {
            return Err(invalid(format!("amplitude {} is outside [0, 20]", self.amplitude)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise sigma must be finite and non-negative"));
        }
        let finite = [self.drift_hz, self.drift_amp, self.motion_px]
            .iter()
            .chain(&self.base_color)
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("drift, motion and base colour must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("frame size must be positive"));
        }
        if self.frame_count() < 2 {
            return Err(invalid(format!(
                "{} s at {} fps gives fewer than two frames",
                self.duration_s, self.fps
            )));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        let n = (self.duration_s * self.fps).round();
        if n.is_finite() && n > 0.0 {
            n as usize
        } else {
            0
        }
    }

    pub fn frequency_hz(&self) -> f64 {
        self.hr_bpm / 60.0
    }
}

/// Fundamental plus a phase-shifted second harmonic, standardized.
pub fn gen_bvp(spec: &SynthSpec) -> Result<RealSignal> {
    spec.validate()?;
    let f = spec.frequency_hz();
    let raw: Vec<f64> = (0..spec.frame_count())
        .map(|i| {
            let t = i as f64 / spec.fps;
            (2.0 * PI * f * t).sin() + 0.3 * (4.0 * PI * f * t + PI / 4.0).sin()
        })
        .collect();
    RealSignal::new(standardize(&raw, 1.0)?, spec.fps)
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub frames: FrameSequence,
    pub bvp: RealSignal,
    /// Fraction of channel values that hit 0 or 255 before quantization.
    pub clipped_fraction: f64,
}

impl SynthClip {
    pub fn quality_warning(&self) -> bool {
        self.clipped_fraction > CLIP_WARN_FRACTION
    }
}

pub fn gen_clip(spec: &SynthSpec) -> Result<SynthClip> {
    let bvp = gen_bvp(spec)?;
    let (w, h) = (spec.width, spec.height);
    let centre = (w as f64 - 1.0) / 2.0;
    let results: Vec<(Vec<u8>, usize)> = bvp
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, &b)| {
            let t = i as f64 / spec.fps;
            let drift = spec.drift_amp * (2.0 * PI * spec.drift_hz * t).sin();
            let shift = spec.motion_px * (2.0 * PI * MOTION_HZ * t).sin();
            let level: [f64; 3] =
                std::array::from_fn(|c| spec.base_color[c] + CHANNEL_GAINS[c] * spec.amplitude * b + drift);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut frame = Vec::with_capacity(w * h * 3);
            let mut clipped = 0;
            for _y in 0..h {
                for x in 0..w {
                    let lum = if spec.motion_px != 0.0 {
                        GRADIENT_SLOPE * (x as f64 - centre - shift)
                    } else {
                        0.0
                    };
                    for l in level {
                        let noise = if spec.noise_sigma > 0.0 {
                            spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        let v = l + lum + noise;
                        if !(0.0..=255.0).contains(&v) {
                            clipped += 1;
                        }
                        frame.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            (frame, clipped)
        })
        .collect();
    let clipped: usize = results.iter().map(|(_, c)| c).sum();
    let total = (results.len() * w * h * 3) as f64;
    let frames = results.into_iter().map(|(f, _)| f).collect();
    Ok(SynthClip {
        frames: FrameSequence::new(w, h, spec.fps, frames)?,
        bvp,
        clipped_fraction: clipped as f64 / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::rgb_trace;
    use crate::numerics::{mean, power_spectrum, std_dev};

    #[test]
    fn bvp_cases() {
        let spec = SynthSpec::default();
        let b = gen_bvp(&spec).unwrap();
        assert_eq!(b.len(), 900);
        // Raw b(0) = 0.3·sin(π/4); recover it through the standardization.
        let f = spec.frequency_hz();
        let raw: Vec<f64> = (0..900)
            .map(|i| {
                let t = i as f64 / 30.0;
                (2.0 * PI * f * t).sin() + 0.3 * (4.0 * PI * f * t + PI / 4.0).sin()
            })
            .collect();
        assert!((raw[0] - 0.212_132_034_355_964_2).abs() < 1e-12);
        let expect0 = (raw[0] - mean(&raw)) / std_dev(&raw);
        assert!((b.samples()[0] - expect0).abs() < 1e-12);

        let p = power_spectrum(&b).unwrap();
        let peak = (1..p.power.len()).max_by(|&i, &j| p.power[i].total_cmp(&p.power[j])).unwrap();
        assert!((p.frequency(peak) - 1.2).abs() < 1e-9);
    }

    #[test]
    fn spec_validation() {
        let ok = SynthSpec::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SynthSpec { hr_bpm: 30.0, ..ok.clone() },
            SynthSpec { hr_bpm: 200.0, ..ok.clone() },
            SynthSpec { fps: 3.0, hr_bpm: 120.0, ..ok.clone() },
            SynthSpec { amplitude: 25.0, ..ok.clone() },
            SynthSpec { duration_s: 0.0, ..ok.clone() },
            SynthSpec { noise_sigma: -1.0, ..ok.clone() },
        ] {
            assert!(gen_bvp(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn clean_clip_tracks_ideal_trace() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            duration_s: 5.0,
            width: 16,
            height: 16,
            ..SynthSpec::default()
        };
        let clip = gen_clip(&spec).unwrap();
        let g = rgb_trace(&clip.frames).unwrap();
        for (v, b) in g.g.samples().iter().zip(clip.bvp.samples()) {
            assert!((v - (120.0 + 4.0 * b)).abs() <= 0.5);
        }
        assert!(!clip.quality_warning());
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let spec = SynthSpec {
            duration_s: 2.0,
            motion_px: 3.0,
            drift_amp: 2.0,
            seed: 9,
            ..SynthSpec::default()
        };
        let a = gen_clip(&spec).unwrap();
        let b = gen_clip(&spec).unwrap();
        assert_eq!(a.frames, b.frames);
        let c = gen_clip(&SynthSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn saturated_colour_raises_warning() {
        let spec = SynthSpec {
            base_color: [255.0, 255.0, 10.0],
            duration_s: 1.0,
            width: 8,
            height: 8,
            ..SynthSpec::default()
        };
        let clip = gen_clip(&spec).unwrap();
        assert!(clip.quality_warning());
    }

    #[test]
    fn noise_has_requested_spread() {
        let spec = SynthSpec {
            amplitude: 0.0,
            noise_sigma: 3.0,
            duration_s: 1.0,
            ..SynthSpec::default()
        };
        let clip = gen_clip(&spec).unwrap();
        let greens: Vec<f64> = clip.frames.frames()[0].chunks_exact(3).map(|p| p[1] as f64).collect();
        assert!((mean(&greens) - 120.0).abs() < 0.2);
        // Rounding adds variance 1/12.
        let expect = (9.0f64 + 1.0 / 12.0).sqrt();
        assert!((std_dev(&greens) - expect).abs() < 0.15);
    }
}
