//! Classical pulse extractors over spatially averaged RGB traces.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, undefined, Result};
use crate::media_io::FrameSequence;
use crate::numerics::{bandpass, mean, std_dev, standardize, Band, RealSignal, DEGENERATE_REL};

/// Per-frame spatial means of the three colour channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbTrace {
    pub r: RealSignal,
    pub g: RealSignal,
    pub b: RealSignal,
}

impl RgbTrace {
    pub fn new(r: RealSignal, g: RealSignal, b: RealSignal) -> Result<Self> {
        if r.len() != g.len() || g.len() != b.len() {
            return Err(invalid("RGB traces differ in length"));
        }
        if r.rate_hz() != g.rate_hz() || g.rate_hz() != b.rate_hz() {
            return Err(invalid("RGB traces differ in rate"));
        }
        Ok(Self { r, g, b })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn rate_hz(&self) -> f64 {
        self.g.rate_hz()
    }

    pub fn channels(&self) -> [&[f64]; 3] {
        [self.r.samples(), self.g.samples(), self.b.samples()]
    }
}

pub fn rgb_trace(clip: &FrameSequence) -> Result<RgbTrace> {
    let n = (clip.width() * clip.height()) as f64;
    let mut ch: [Vec<f64>; 3] = Default::default();
    for f in clip.frames() {
        let mut acc = [0u64; 3];
        for px in f.chunks_exact(3) {
            acc[0] += px[0] as u64;
            acc[1] += px[1] as u64;
            acc[2] += px[2] as u64;
        }
        for c in 0..3 {
            ch[c].push(acc[c] as f64 / n);
        }
    }
    let [r, g, b] = ch;
    let fps = clip.fps();
    RgbTrace::new(RealSignal::new(r, fps)?, RealSignal::new(g, fps)?, RealSignal::new(b, fps)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Green,
    Chrom,
    Pos,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "green" => Ok(Self::Green),
            "chrom" => Ok(Self::Chrom),
            "pos" => Ok(Self::Pos),
            other => Err(format!("unknown method {other:?} (expected green, chrom or pos)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Green => "green",
            Self::Chrom => "chrom",
            Self::Pos => "pos",
        })
    }
}

pub fn extract(method: Method, trace: &RgbTrace, band: Band) -> Result<RealSignal> {
    match method {
        Method::Green => green_method(trace, band),
        Method::Chrom => chrom_method(trace, band),
        Method::Pos => pos_method(trace, band),
    }
}

fn filtered(x: Vec<f64>, rate: f64, band: Band) -> Result<Vec<f64>> {
    Ok(bandpass(&RealSignal::new(x, rate)?, band.lo_hz, band.hi_hz)?.into_samples())
}

pub fn green_method(t: &RgbTrace, band: Band) -> Result<RealSignal> {
    let g = t.g.samples();
    let m = mean(g);
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let y = filtered(g.iter().map(|v| v - m).collect(), t.rate_hz(), band)?;
    RealSignal::new(standardize(&y, scale)?, t.rate_hz())
}

fn normalized(x: &[f64], what: &str) -> Result<Vec<f64>> {
    let m = mean(x);
    if m == 0.0 {
        return Err(invalid(format!("{what} channel has zero mean")));
    }
    Ok(x.iter().map(|v| v / m).collect())
}

pub fn chrom_method(t: &RgbTrace, band: Band) -> Result<RealSignal> {
    let [r, g, b] = t.channels();
    let rn = normalized(r, "red")?;
    let gn = normalized(g, "green")?;
    let bn = normalized(b, "blue")?;
    let x: Vec<f64> = rn.iter().zip(&gn).map(|(r, g)| 3.0 * r - 2.0 * g).collect();
    let y: Vec<f64> = rn
        .iter()
        .zip(&gn)
        .zip(&bn)
        .map(|((r, g), b)| 1.5 * r + g - 1.5 * b)
        .collect();
    let xf = filtered(x, t.rate_hz(), band)?;
    let yf = filtered(y, t.rate_hz(), band)?;
    let (sx, sy) = (std_dev(&xf), std_dev(&yf));
    if sy == 0.0 || sy <= DEGENERATE_REL * sx {
        return Err(undefined("CHROM Y signal has no in-band variance"));
    }
    let alpha = sx / sy;
    let s: Vec<f64> = xf.iter().zip(&yf).map(|(x, y)| x - alpha * y).collect();
    RealSignal::new(standardize(&s, sx)?, t.rate_hz())
}

/// Window length in samples for the plane-orthogonal method.
pub fn pos_window(fps: f64) -> usize {
    (1.6 * fps).round() as usize
}

pub fn pos_method(t: &RgbTrace, band: Band) -> Result<RealSignal> {
    let n = t.len();
    let l = pos_window(t.rate_hz());
    if l < 2 || l > n {
        return Err(invalid(format!(
            "POS window of {l} samples does not fit a {n}-sample trace"
        )));
    }
    let [r, g, b] = t.channels();
    let mut h = vec![0.0; n];
    let mut cover = vec![0u32; n];
    for start in 0..=n - l {
        let end = start + l;
        let rn = normalized(&r[start..end], "red")?;
        let gn = normalized(&g[start..end], "green")?;
        let bn = normalized(&b[start..end], "blue")?;
        let s1: Vec<f64> = gn.iter().zip(&bn).map(|(g, b)| g - b).collect();
        let s2: Vec<f64> = gn
            .iter()
            .zip(&bn)
            .zip(&rn)
            .map(|((g, b), r)| g + b - 2.0 * r)
            .collect();
        let sd2 = std_dev(&s2);
        let alpha = if sd2 == 0.0 { 0.0 } else { std_dev(&s1) / sd2 };
        let win: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        let m = mean(&win);
        for (acc, v) in h[start..end].iter_mut().zip(&win) {
            *acc += v - m;
        }
        cover[start..end].iter_mut().for_each(|c| *c += 1);
    }
    // Edge samples are covered by fewer windows; average instead of summing.
    for (v, &c) in h.iter_mut().zip(&cover) {
        *v /= c as f64;
    }
    let y = filtered(h, t.rate_hz(), band)?;
    RealSignal::new(standardize(&y, 1.0)?, t.rate_hz())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::pearson_r;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const FPS: f64 = 30.0;

    fn sig(x: Vec<f64>) -> RealSignal {
        RealSignal::new(x, FPS).unwrap()
    }

    fn pulse(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * f * t as f64 / FPS).sin()).collect()
    }

    fn trace_from(base: [f64; 3], gains: [f64; 3], p: &[f64]) -> RgbTrace {
        let ch = |c: usize| sig(p.iter().map(|v| base[c] + gains[c] * v).collect());
        RgbTrace::new(ch(0), ch(1), ch(2)).unwrap()
    }

    #[test]
    fn rgb_trace_cases() {
        let clip = FrameSequence::new(4, 3, FPS, vec![[100u8, 150, 200].repeat(12); 5]).unwrap();
        let t = rgb_trace(&clip).unwrap();
        assert!(t.r.samples().iter().all(|&v| v == 100.0));
        assert!(t.g.samples().iter().all(|&v| v == 150.0));
        assert!(t.b.samples().iter().all(|&v| v == 200.0));

        let mut f = vec![0u8; 4 * 3 * 3];
        f[(1 * 4 + 2) * 3 + 1] = 240;
        let clip = FrameSequence::new(4, 3, FPS, vec![f]).unwrap();
        assert_eq!(rgb_trace(&clip).unwrap().g.samples(), &[20.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<Vec<u8>> = (0..6).map(|_| (0..5 * 7 * 3).map(|_| rng.random()).collect()).collect();
        let clip = FrameSequence::new(5, 7, FPS, frames).unwrap();
        let t = rgb_trace(&clip).unwrap();
        for ti in 0..6 {
            for c in 0..3 {
                let mut acc = 0.0;
                for y in 0..7 {
                    for x in 0..5 {
                        acc += clip.pixel(ti, y, x)[c] as f64;
                    }
                }
                assert!((t.channels()[c][ti] - acc / 35.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn green_recovers_in_band_sine() {
        let p = pulse(1.2, 300);
        let t = trace_from([120.0, 140.0, 90.0], [0.0, 2.0, 0.0], &p);
        let y = green_method(&t, Band::HEART_RATE).unwrap();
        assert!((pearson_r(y.samples(), &p).unwrap() - 1.0).abs() < 1e-6);
        let flat = trace_from([120.0, 140.0, 90.0], [0.0, 0.0, 0.0], &p);
        assert!(matches!(green_method(&flat, Band::HEART_RATE), Err(Error::UndefinedStatistic(_))));
    }

    #[test]
    fn chrom_cases() {
        let p = pulse(1.2, 300);
        let achromatic: Vec<f64> = p.iter().map(|v| 1.0 + 0.01 * v).collect();
        let t = RgbTrace::new(
            sig(achromatic.iter().map(|v| 100.0 * v).collect()),
            sig(achromatic.iter().map(|v| 150.0 * v).collect()),
            sig(achromatic.iter().map(|v| 200.0 * v).collect()),
        )
        .unwrap();
        assert!(matches!(chrom_method(&t, Band::HEART_RATE), Err(Error::UndefinedStatistic(_))));

        let t = trace_from([170.0, 120.0, 100.0], [0.0, 1.5, 0.0], &p);
        let y = chrom_method(&t, Band::HEART_RATE).unwrap();
        assert!(pearson_r(y.samples(), &p).unwrap().abs() > 0.99);

        let zero = trace_from([0.0, 120.0, 100.0], [0.0, 1.0, 0.0], &p);
        assert!(matches!(chrom_method(&zero, Band::HEART_RATE), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pos_cases() {
        let p = pulse(1.2, 300);
        let flat = trace_from([170.0, 120.0, 100.0], [0.0; 3], &p);
        assert!(matches!(pos_method(&flat, Band::HEART_RATE), Err(Error::UndefinedStatistic(_))));

        let t = trace_from([170.0, 120.0, 100.0], [0.0, 1.5, 0.0], &p);
        let y = pos_method(&t, Band::HEART_RATE).unwrap();
        assert!(pearson_r(y.samples(), &p).unwrap().abs() > 0.99);

        let short = trace_from([170.0, 120.0, 100.0], [0.0, 1.5, 0.0], &p[..40]);
        assert!(matches!(pos_method(&short, Band::HEART_RATE), Err(Error::InvalidInput(_))));
        assert_eq!(pos_window(30.0), 48);
    }

    #[test]
    fn outputs_are_standardized_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = pulse(1.1, 400);
        let noisy = |base: f64, gain: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            p.iter().map(|v| base + gain * v + rng.random_range(-0.5..0.5)).collect()
        };
        let r = noisy(170.0, 0.5, &mut rng);
        let g = noisy(120.0, 1.0, &mut rng);
        let b = noisy(100.0, 0.3, &mut rng);
        let t = RgbTrace::new(sig(r.clone()), sig(g.clone()), sig(b.clone())).unwrap();
        let k = 0.37;
        let scaled = |x: &[f64]| sig(x.iter().map(|v| k * v).collect());
        let ts = RgbTrace::new(scaled(&r), scaled(&g), scaled(&b)).unwrap();
        for m in [Method::Green, Method::Chrom, Method::Pos] {
            let y = extract(m, &t, Band::HEART_RATE).unwrap();
            let m0 = mean(y.samples());
            assert!(m0.abs() < 1e-9 && (std_dev(y.samples()) - 1.0).abs() < 1e-9);
            let ys = extract(m, &ts, Band::HEART_RATE).unwrap();
            for (a, b) in y.samples().iter().zip(ys.samples()) {
                assert!((a - b).abs() < 1e-6, "{m}");
            }
        }
    }

    #[test]
    fn method_names_parse() {
        for m in [Method::Green, Method::Chrom, Method::Pos] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("POS".parse::<Method>().unwrap(), Method::Pos);
        assert!("ica".parse::<Method>().is_err());
    }
}
