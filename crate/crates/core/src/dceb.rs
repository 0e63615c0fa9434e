//! Dual-stream confidence-gated exchange.
//!
//! One block takes video features `v` (`C × T × Hv × Wv`) and STMap features
//! `s` (`C × H' × T`) at the same temporal scale and returns both updated:
//!
//! 1. spatial alignment maps in each direction (STMap→video template map,
//!    video→STMap pooled map);
//! 2. spatially pooled per-channel traces, channel-aligned through a
//!    projection of the other stream, then circularly cross-correlated;
//! 3. confidences from the peakedness of those correlations and from the
//!    spectral peakedness of each stream's pooled traces, evaluated over
//!    sliding windows;
//! 4. gains, gated residual traces and broadcast injection back into both
//!    streams.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::layers::{Linear, Matrix};
use crate::numerics::{circular_xcorr_slices, mean, median, power_spectrum_slice, sigmoid};
use crate::sdmu::FeatureMap2D;

/// Per-channel time series, channel-major.
pub type ChannelSignals = Vec<Vec<f64>>;

/// `C × T × Hv × Wv` video-branch features, indexed `(channel, time, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(
        channels: usize,
        frames: usize,
        height: usize,
        width: usize,
        fps: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels * frames * height * width == 0 {
            return Err(invalid("feature volume dimensions must be positive"));
        }
        if data.len() != channels * frames * height * width {
            return Err(invalid(format!(
                "feature volume holds {} values, expected {channels}x{frames}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature volume values must be finite"));
        }
        Ok(Self {
            channels,
            frames,
            height,
            width,
            fps,
            data,
        })
    }

    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize, fps: f64) -> Self {
        Self {
            channels,
            frames,
            height,
            width,
            fps,
            data: vec![0.0; channels * frames * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, c: usize, t: usize, i: usize, j: usize) -> usize {
        ((c * self.frames + t) * self.height + i) * self.width + j
    }

    pub fn get(&self, c: usize, t: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, t, i, j)]
    }

    /// The `Hv × Wv` plane of channel `c` at time `t`.
    pub fn plane(&self, c: usize, t: usize) -> &[f64] {
        let n = self.plane_len();
        let start = (c * self.frames + t) * n;
        &self.data[start..start + n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
    }
}

/// STMap→video map. The template is time-invariant, so one `Hv × Wv` plane
/// is stored and broadcast over `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapS2V {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub spatial: Vec<f64>,
}

impl AttentionMapS2V {
    pub fn get(&self, _t: usize, i: usize, j: usize) -> f64 {
        self.spatial[i * self.width + j]
    }
}

/// Video→STMap map, `T × H'`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapV2S {
    pub frames: usize,
    pub regions: usize,
    pub data: Vec<f64>,
}

impl AttentionMapV2S {
    pub fn get(&self, t: usize, region: usize) -> f64 {
        self.data[t * self.regions + region]
    }
}

/// Per-time-step confidence in `(0, 1)` together with the window it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTrace {
    pub values: Vec<f64>,
    pub window_len: usize,
    pub hop: usize,
}

impl ConfidenceTrace {
    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

/// The four traces one exchange block produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfBundle {
    pub s2v: ConfidenceTrace,
    pub v2s: ConfidenceTrace,
    pub video: ConfidenceTrace,
    pub stmap: ConfidenceTrace,
}

impl ConfBundle {
    /// Time means in the order `[s2v, v2s, video, stmap]`.
    pub fn means(&self) -> [f64; 4] {
        [self.s2v.mean(), self.v2s.mean(), self.video.mean(), self.stmap.mean()]
    }
}

/// Learnable parameters of one exchange block. `C` is shared by both streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeWeights {
    /// ROI grid `(rows, cols)` of the STMap; the template lives on it.
    pub grid: (usize, usize),
    /// Spatial template, `rows · cols`.
    pub m0: Vec<f64>,
    /// Per-region MLP over the time-averaged STMap channels: `C → C → 1`.
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
    /// `1×1×1` convolution collapsing video channels, `C` weights.
    pub conv_v2s: Vec<f64>,
    /// Projects pooled STMap traces into the video channel space.
    pub proj_tilde_s: Matrix,
    /// Projects pooled video traces into the STMap channel space.
    pub proj_tilde_v: Matrix,
    pub alpha_s2v: Vec<f64>,
    pub alpha_v2s: Vec<f64>,
}

impl ExchangeWeights {
    pub fn zeros(channels: usize, grid: (usize, usize)) -> Self {
        Self {
            grid,
            m0: vec![0.0; grid.0 * grid.1],
            mlp_hidden: Linear::zeros(channels, channels),
            mlp_out: Linear::zeros(1, channels),
            conv_v2s: vec![0.0; channels],
            proj_tilde_s: Matrix::zeros(channels, channels),
            proj_tilde_v: Matrix::zeros(channels, channels),
            alpha_s2v: vec![0.0; channels],
            alpha_v2s: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_v2s.len()
    }

    fn check(&self, v: &FeatureVolume, s: &FeatureMap2D) -> Result<()> {
        let c = self.channels();
        let regions = self.grid.0 * self.grid.1;
        let ok = self.m0.len() == regions
            && self.mlp_hidden.in_dim() == c
            && self.mlp_out.in_dim() == self.mlp_hidden.out_dim()
            && self.mlp_out.out_dim() == 1
            && self.proj_tilde_s.rows == c
            && self.proj_tilde_s.cols == c
            && self.proj_tilde_v.rows == c
            && self.proj_tilde_v.cols == c
            && self.alpha_s2v.len() == c
            && self.alpha_v2s.len() == c;
        if !ok {
            return Err(invalid("exchange weights have inconsistent shapes"));
        }
        if v.channels != c || s.channels() != c {
            return Err(invalid(format!(
                "exchange block built for {c} channels, got video {} / STMap {}",
                v.channels,
                s.channels()
            )));
        }
        if s.regions() != regions {
            return Err(invalid(format!(
                "STMap has {} regions, template grid has {regions}",
                s.regions()
            )));
        }
        Ok(())
    }
}

/// Constants of the confidence computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeConfig {
    /// Offset subtracted from raw peakedness scores before the sigmoid.
    pub score_offset: f64,
    /// Denominator guard.
    pub eps: f64,
    /// Sliding-window length in seconds at the block's own frame rate.
    pub window_s: f64,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self {
            score_offset: 4.0,
            eps: 1e-8,
            window_s: 2.0,
        }
    }
}

impl ExchangeConfig {
    /// `(window_len, hop)` for a trace of `frames` samples at `fps`: the
    /// window is `round(window_s · fps)`, kept within `[2, frames]`, and the
    /// hop is half of it.
    pub fn window(&self, fps: f64, frames: usize) -> (usize, usize) {
        let len = ((self.window_s * fps).round() as usize).clamp(2, frames.max(2)).min(frames);
        (len, (len / 2).max(1))
    }
}

/// Gates whose sigmoid value falls below this are treated as fully closed.
pub const GATE_FLOOR: f64 = 1e-8;

/// `σ(alpha)`, flushed to exactly zero below [`GATE_FLOOR`].
pub fn gate(alpha: f64) -> f64 {
    let g = sigmoid(alpha);
    if g < GATE_FLOOR {
        0.0
    } else {
        g
    }
}

/// Sigmoid kept inside the open interval `(0, 1)` in floating point.
pub fn sigmoid_open(x: f64) -> f64 {
    sigmoid(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// STMap→video attention: the time-averaged STMap goes through a per-region
/// MLP, the template is added on the ROI grid, and the grid is
/// nearest-neighbour upsampled to `height × width` before the sigmoid.
pub fn align_s2v(
    s: &FeatureMap2D,
    w: &ExchangeWeights,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<AttentionMapS2V> {
    let (rows, cols) = w.grid;
    if s.regions() != rows * cols || s.channels() != w.mlp_hidden.in_dim() || w.m0.len() != rows * cols {
        return Err(invalid("STMap features do not match the exchange template"));
    }
    if height == 0 || width == 0 {
        return Err(invalid("target resolution must be positive"));
    }
    let t = s.frames() as f64;
    let logits: Vec<f64> = (0..rows * cols)
        .map(|region| {
            let pooled: Vec<f64> = (0..s.channels())
                .map(|c| (0..s.frames()).map(|j| s.get(c, region, j)).sum::<f64>() / t)
                .collect();
            let mut hidden = w.mlp_hidden.apply(&pooled);
            crate::layers::relu_in_place(&mut hidden);
            w.m0[region] + w.mlp_out.apply(&hidden)[0]
        })
        .collect();
    let mut spatial = Vec::with_capacity(height * width);
    for i in 0..height {
        let r = i * rows / height;
        for j in 0..width {
            let c = j * cols / width;
            spatial.push(sigmoid_open(logits[r * cols + c]));
        }
    }
    Ok(AttentionMapS2V {
        frames,
        height,
        width,
        spatial,
    })
}

/// Video→STMap attention: a `1×1×1` convolution to one channel, then the
/// flattened `Hv·Wv` positions are averaged in `H'` equal-count bins.
pub fn align_v2s(v: &FeatureVolume, conv: &[f64], regions: usize) -> Result<AttentionMapV2S> {
    if conv.len() != v.channels {
        return Err(invalid(format!(
            "1x1x1 convolution has {} weights for {} channels",
            conv.len(),
            v.channels
        )));
    }
    let n = v.plane_len();
    if regions == 0 || regions > n {
        return Err(invalid(format!(
            "cannot pool {n} spatial positions into {regions} regions"
        )));
    }
    let mut data = Vec::with_capacity(v.frames * regions);
    let mut collapsed = vec![0.0; n];
    for t in 0..v.frames {
        collapsed.fill(0.0);
        for (c, &wc) in conv.iter().enumerate() {
            for (acc, x) in collapsed.iter_mut().zip(v.plane(c, t)) {
                *acc += wc * x;
            }
        }
        for h in 0..regions {
            let (a, b) = (h * n / regions, (h + 1) * n / regions);
            let m = collapsed[a..b].iter().sum::<f64>() / (b - a) as f64;
            data.push(sigmoid_open(m));
        }
    }
    Ok(AttentionMapV2S {
        frames: v.frames,
        regions,
        data,
    })
}

/// Spatial mean per channel and time step of a video volume.
pub fn global_pool_volume(v: &FeatureVolume) -> ChannelSignals {
    let n = v.plane_len() as f64;
    (0..v.channels)
        .map(|c| (0..v.frames).map(|t| v.plane(c, t).iter().sum::<f64>() / n).collect())
        .collect()
}

/// Mean over regions per channel and time step of an STMap feature map.
pub fn global_pool_map(s: &FeatureMap2D) -> ChannelSignals {
    let n = s.regions() as f64;
    (0..s.channels())
        .map(|c| {
            (0..s.frames())
                .map(|j| (0..s.regions()).map(|i| s.get(c, i, j)).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Channel mixing `out[o](t) = Σ_c P[o,c]·x[c](t)`.
pub fn project(x: &ChannelSignals, p: &Matrix) -> Result<ChannelSignals> {
    if p.cols != x.len() {
        return Err(invalid(format!(
            "projection expects {} channels, got {}",
            p.cols,
            x.len()
        )));
    }
    let t = x.first().map_or(0, Vec::len);
    Ok((0..p.rows)
        .map(|o| {
            let mut out = vec![0.0; t];
            for (c, xc) in x.iter().enumerate() {
                let w = p.get(o, c);
                for (acc, v) in out.iter_mut().zip(xc) {
                    *acc += w * v;
                }
            }
            out
        })
        .collect())
}

fn demeaned(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    x.iter().map(|v| v - m).collect()
}

/// Per-channel circular cross-correlation of mean-removed traces,
/// `r_c = irfft(conj(rfft(a_c)) · rfft(b_c))`.
pub fn waveform_match(a: &ChannelSignals, b: &ChannelSignals) -> Result<ChannelSignals> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(format!(
            "waveform matching needs equal, non-zero channel counts ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.len() != y.len() {
                return Err(invalid(format!(
                    "waveform matching needs equal lengths ({} vs {})",
                    x.len(),
                    y.len()
                )));
            }
            circular_xcorr_slices(&demeaned(x), &demeaned(y))
        })
        .collect()
}

/// Window start offsets covering `[0, len)`; a final window flush with the
/// end is appended when the hop grid does not land there.
pub fn window_starts(len: usize, window_len: usize, hop: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * hop)
        .take_while(|s| s + window_len <= len)
        .collect();
    if starts.last().is_some_and(|&s| s + window_len < len) {
        starts.push(len - window_len);
    }
    starts
}

/// Assigns every time step the score of the window whose centre is nearest
/// (earlier window on ties).
fn spread_windows(len: usize, window_len: usize, starts: &[usize], scores: &[f64]) -> Vec<f64> {
    let half = (window_len as f64 - 1.0) / 2.0;
    (0..len)
        .map(|t| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (w, &s) in starts.iter().enumerate() {
                let d = (t as f64 - (s as f64 + half)).abs();
                if d < best_d {
                    best_d = d;
                    best = w;
                }
            }
            scores[best]
        })
        .collect()
}

fn check_windows(x: &ChannelSignals, window_len: usize, hop: usize) -> Result<usize> {
    let len = x.first().map(Vec::len).ok_or_else(|| invalid("no channels"))?;
    if x.iter().any(|c| c.len() != len) {
        return Err(invalid("channels differ in length"));
    }
    if window_len == 0 || hop == 0 {
        return Err(invalid("window length and hop must be positive"));
    }
    if window_len > len {
        return Err(invalid(format!(
            "window of {window_len} samples exceeds the {len}-sample trace"
        )));
    }
    Ok(len)
}

fn windowed_confidence(
    x: &ChannelSignals,
    window_len: usize,
    hop: usize,
    cfg: &ExchangeConfig,
    ratio: impl Fn(&[f64]) -> Result<f64>,
) -> Result<ConfidenceTrace> {
    let len = check_windows(x, window_len, hop)?;
    let starts = window_starts(len, window_len, hop);
    let confs = starts
        .iter()
        .map(|&s| {
            let per_channel = x
                .iter()
                .map(|c| ratio(&c[s..s + window_len]))
                .collect::<Result<Vec<_>>>()?;
            Ok(sigmoid_open(median(&per_channel)? - cfg.score_offset))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfidenceTrace {
        values: spread_windows(len, window_len, &starts, &confs),
        window_len,
        hop,
    })
}

/// Cross-modal consistency: per window, the median over channels of
/// `max|r| / (ε + mean|r|)`, shifted by the score offset and squashed.
pub fn consistency_confidence(
    r: &ChannelSignals,
    window_len: usize,
    hop: usize,
    cfg: &ExchangeConfig,
) -> Result<ConfidenceTrace> {
    windowed_confidence(r, window_len, hop, cfg, |w| {
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let avg = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        Ok(peak / (cfg.eps + avg))
    })
}

/// Waveform intensity: per window, the median over channels of
/// `max P / (ε + mean P)` over the non-DC bins of the window's power spectrum.
pub fn spectral_confidence(
    g: &ChannelSignals,
    window_len: usize,
    hop: usize,
    cfg: &ExchangeConfig,
) -> Result<ConfidenceTrace> {
    if window_len < 2 {
        return Err(invalid("spectral confidence needs windows of at least 2 samples"));
    }
    windowed_confidence(g, window_len, hop, cfg, |w| {
        let p = power_spectrum_slice(w)?;
        let bins = &p[1..];
        let peak = bins.iter().fold(0.0f64, |m, &v| m.max(v));
        let avg = bins.iter().sum::<f64>() / bins.len() as f64;
        Ok(peak / (cfg.eps + avg))
    })
}

/// `gain_v = conf_s2v · conf_s`, `gain_s = conf_v2s · conf_v`.
pub fn gains(
    conf_s2v: &ConfidenceTrace,
    conf_s: &ConfidenceTrace,
    conf_v2s: &ConfidenceTrace,
    conf_v: &ConfidenceTrace,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = conf_s2v.values.len();
    if [conf_s.values.len(), conf_v2s.values.len(), conf_v.values.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(invalid("confidence traces differ in length"));
    }
    let mul = |a: &ConfidenceTrace, b: &ConfidenceTrace| -> Vec<f64> {
        a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect()
    };
    Ok((mul(conf_s2v, conf_s), mul(conf_v2s, conf_v)))
}

/// `res(c, t) = gate(alpha_c) · (r(c, t) · gain(t))`.
pub fn residual_traces(r: &ChannelSignals, gain: &[f64], alpha: &[f64]) -> Result<ChannelSignals> {
    if r.len() != alpha.len() {
        return Err(invalid(format!(
            "{} channels but {} gate parameters",
            r.len(),
            alpha.len()
        )));
    }
    r.iter()
        .zip(alpha)
        .map(|(rc, &a)| {
            if rc.len() != gain.len() {
                return Err(invalid("correlation and gain lengths differ"));
            }
            let g = gate(a);
            Ok(rc.iter().zip(gain).map(|(x, k)| g * (x * k)).collect())
        })
        .collect()
}

/// Broadcasts the residual traces through the attention maps and adds them
/// to the original features.
pub fn inject(
    v: &FeatureVolume,
    s: &FeatureMap2D,
    res_v: &ChannelSignals,
    res_s: &ChannelSignals,
    a_s2v: &AttentionMapS2V,
    a_v2s: &AttentionMapV2S,
) -> Result<(FeatureVolume, FeatureMap2D)> {
    let shapes_ok = res_v.len() == v.channels
        && res_v.iter().all(|r| r.len() == v.frames)
        && res_s.len() == s.channels()
        && res_s.iter().all(|r| r.len() == s.frames())
        && a_s2v.height == v.height
        && a_s2v.width == v.width
        && a_v2s.frames == s.frames()
        && a_v2s.regions == s.regions();
    if !shapes_ok {
        return Err(invalid("injection operands have inconsistent shapes"));
    }

    let mut v_out = v.clone();
    let plane = v.plane_len();
    v_out
        .data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ct, chunk)| {
            let (c, t) = (ct / v.frames, ct % v.frames);
            let r = res_v[c][t];
            for (x, a) in chunk.iter_mut().zip(&a_s2v.spatial) {
                *x += a * r;
            }
        });

    let mut s_out = s.clone();
    for c in 0..s.channels() {
        for i in 0..s.regions() {
            for t in 0..s.frames() {
                let idx = s.index(c, i, t);
                s_out.data_mut()[idx] += a_v2s.get(t, i) * res_s[c][t];
            }
        }
    }
    Ok((v_out, s_out))
}

/// Everything an exchange block produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeOutput {
    pub video: FeatureVolume,
    pub stmap: FeatureMap2D,
    pub confidence: ConfBundle,
}

pub fn exchange_block(
    v: &FeatureVolume,
    s: &FeatureMap2D,
    w: &ExchangeWeights,
    cfg: &ExchangeConfig,
) -> Result<ExchangeOutput> {
    if v.frames != s.frames() {
        return Err(invalid(format!(
            "streams differ in length: video {} vs STMap {}",
            v.frames,
            s.frames()
        )));
    }
    if v.fps != s.fps() {
        return Err(invalid(format!(
            "streams differ in rate: video {} vs STMap {}",
            v.fps,
            s.fps()
        )));
    }
    if v.frames < 2 {
        return Err(invalid("exchange needs at least two time steps"));
    }
    w.check(v, s)?;

    let a_s2v = align_s2v(s, w, v.frames, v.height, v.width)?;
    let a_v2s = align_v2s(v, &w.conv_v2s, s.regions())?;

    let v_global = global_pool_volume(v);
    let s_global = global_pool_map(s);
    let s_tilde = project(&s_global, &w.proj_tilde_s)?;
    let v_tilde = project(&v_global, &w.proj_tilde_v)?;
    let r_s2v = waveform_match(&v_global, &s_tilde)?;
    let r_v2s = waveform_match(&s_global, &v_tilde)?;

    let (window_len, hop) = cfg.window(v.fps, v.frames);
    let confidence = ConfBundle {
        s2v: consistency_confidence(&r_s2v, window_len, hop, cfg)?,
        v2s: consistency_confidence(&r_v2s, window_len, hop, cfg)?,
        video: spectral_confidence(&v_global, window_len, hop, cfg)?,
        stmap: spectral_confidence(&s_global, window_len, hop, cfg)?,
    };
    let (gain_v, gain_s) = gains(&confidence.s2v, &confidence.stmap, &confidence.v2s, &confidence.video)?;
    let res_v = residual_traces(&r_s2v, &gain_v, &w.alpha_s2v)?;
    let res_s = residual_traces(&r_v2s, &gain_s, &w.alpha_v2s)?;
    let (video, stmap) = inject(v, s, &res_v, &res_s, &a_s2v, &a_v2s)?;
    Ok(ExchangeOutput {
        video,
        stmap,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn cfg() -> ExchangeConfig {
        ExchangeConfig::default()
    }

    fn random_volume(rng: &mut ChaCha8Rng, c: usize, t: usize, h: usize, w: usize) -> FeatureVolume {
        let d = (0..c * t * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVolume::new(c, t, h, w, 30.0, d).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, t: usize) -> FeatureMap2D {
        let d = (0..c * h * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap2D::new(c, h, t, 30.0, d).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, c: usize, grid: (usize, usize)) -> ExchangeWeights {
        let mut w = ExchangeWeights::zeros(c, grid);
        let vals = w
            .m0
            .iter_mut()
            .chain(w.mlp_hidden.weight.data.iter_mut())
            .chain(w.mlp_hidden.bias.iter_mut())
            .chain(w.mlp_out.weight.data.iter_mut())
            .chain(w.conv_v2s.iter_mut())
            .chain(w.proj_tilde_s.data.iter_mut())
            .chain(w.proj_tilde_v.data.iter_mut())
            .chain(w.alpha_s2v.iter_mut())
            .chain(w.alpha_v2s.iter_mut());
        for v in vals {
            *v = rng.random_range(-1.0..1.0);
        }
        w
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn time_xcorr(x: &[f64], y: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|lag| (0..n).map(|t| x[t] * y[(t + lag) % n]).sum())
            .collect()
    }

    fn trace(values: Vec<f64>) -> ConfidenceTrace {
        ConfidenceTrace {
            values,
            window_len: 1,
            hop: 1,
        }
    }

    #[test]
    fn align_s2v_zero_gives_half() {
        let s = FeatureMap2D::zeros(2, 4, 6, 30.0);
        let w = ExchangeWeights::zeros(2, (2, 2));
        let a = align_s2v(&s, &w, 6, 8, 8).unwrap();
        assert!(a.spatial.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn align_s2v_template_saturates_and_upsamples() {
        let s = FeatureMap2D::zeros(2, 4, 6, 30.0);
        let mut w = ExchangeWeights::zeros(2, (2, 2));
        w.m0[3] = 10.0;
        let a = align_s2v(&s, &w, 6, 8, 8).unwrap();
        // Cell (1,1) of the grid covers rows 4..8, cols 4..8.
        for i in 0..8 {
            for j in 0..8 {
                let v = a.get(0, i, j);
                if i >= 4 && j >= 4 {
                    assert!(v > 0.9999);
                } else {
                    assert_eq!(v, 0.5);
                }
            }
        }
    }

    #[test]
    fn align_v2s_cases() {
        let v = FeatureVolume::new(3, 2, 4, 4, 30.0, vec![0.7; 96]).unwrap();
        let a = align_v2s(&v, &[0.0; 3], 5).unwrap();
        assert!(a.data.iter().all(|&x| x == 0.5));
        let w = 0.25;
        let a = align_v2s(&v, &[w; 3], 5).unwrap();
        let expect = sigmoid(3.0 * 0.7 * w);
        assert!(a.data.iter().all(|&x| (x - expect).abs() < 1e-15));
        assert!(align_v2s(&v, &[0.0; 2], 5).is_err());
        assert!(align_v2s(&v, &[0.0; 3], 17).is_err());
    }

    #[test]
    fn align_v2s_pools_equal_count_bins() {
        // 1 channel, 1 frame, 2×3 plane pooled into 3 bins of 2 positions.
        let v = FeatureVolume::new(1, 1, 2, 3, 1.0, vec![1.0, 3.0, -2.0, 0.0, 5.0, 7.0]).unwrap();
        let a = align_v2s(&v, &[1.0], 3).unwrap();
        let expect = [sigmoid(2.0), sigmoid(-1.0), sigmoid(6.0)];
        for (x, e) in a.data.iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn global_pool_cases() {
        let v = FeatureVolume::new(2, 3, 2, 2, 30.0, vec![1.5; 24]).unwrap();
        assert!(global_pool_volume(&v).iter().flatten().all(|&x| x == 1.5));

        let mut v = FeatureVolume::zeros(1, 2, 3, 4, 30.0);
        let idx = v.index(0, 1, 2, 3);
        v.data_mut()[idx] = 6.0;
        assert_eq!(global_pool_volume(&v), vec![vec![0.0, 0.5]]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(&mut rng, 3, 5, 4, 6);
        let pooled = global_pool_volume(&v);
        for c in 0..3 {
            for t in 0..5 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..6 {
                        acc += v.get(c, t, i, j);
                    }
                }
                assert!((pooled[c][t] - acc / 24.0).abs() < 1e-12);
            }
        }
        let s = random_map(&mut rng, 2, 5, 7);
        let pooled = global_pool_map(&s);
        for c in 0..2 {
            for t in 0..7 {
                let acc: f64 = (0..5).map(|i| s.get(c, i, t)).sum();
                assert!((pooled[c][t] - acc / 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn waveform_match_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = demeaned(&noise(&mut rng, 64));
        let r = waveform_match(&vec![a.clone()], &vec![a.clone()]).unwrap();
        let energy: f64 = a.iter().map(|x| x * x).sum();
        assert!((r[0][0] - energy).abs() < 1e-9);
        assert!(r[0].iter().all(|x| x.abs() <= r[0][0] + 1e-9));

        let mut d0 = vec![0.0; 16];
        d0[0] = 1.0;
        let mut dk = vec![0.0; 16];
        dk[5] = 1.0;
        let r = waveform_match(&vec![d0], &vec![dk]).unwrap();
        let peak = (0..16).max_by(|&i, &j| r[0][i].total_cmp(&r[0][j])).unwrap();
        assert_eq!(peak, 5);

        let x = noise(&mut rng, 50);
        let y = noise(&mut rng, 50);
        let r = waveform_match(&vec![x.clone()], &vec![y.clone()]).unwrap();
        let o = time_xcorr(&demeaned(&x), &demeaned(&y));
        for (p, q) in r[0].iter().zip(o) {
            assert!((p - q).abs() < 1e-9);
        }
        assert!(waveform_match(&vec![vec![0.0; 4]], &vec![vec![0.0; 5]]).is_err());
    }

    #[test]
    fn window_layout() {
        assert_eq!(window_starts(10, 4, 2), vec![0, 2, 4, 6]);
        assert_eq!(window_starts(11, 4, 2), vec![0, 2, 4, 6, 7]);
        assert_eq!(window_starts(4, 4, 2), vec![0]);
        assert_eq!(cfg().window(30.0, 160), (60, 30));
        assert_eq!(cfg().window(7.5, 40), (15, 7));
        assert_eq!(cfg().window(30.0, 20), (20, 10));
    }

    #[test]
    fn consistency_zero_and_spike() {
        let c = cfg();
        let z = consistency_confidence(&vec![vec![0.0; 128]], 128, 64, &c).unwrap();
        assert!(z.values.iter().all(|&v| (v - sigmoid(-4.0)).abs() < 1e-15));
        assert!((z.values[0] - 0.01798620996209156).abs() < 1e-12);

        let mut spike = vec![0.0; 128];
        spike[40] = 3.0;
        // peak 3, mean 3/128, ratio 128
        let s = consistency_confidence(&vec![spike], 128, 64, &c).unwrap();
        let expect = sigmoid(3.0 / (1e-8 + 3.0 / 128.0) - 4.0);
        assert!((s.values[0] - expect).abs() < 1e-12);
        assert!(s.values[0] > 0.999999);
        assert!(consistency_confidence(&vec![vec![0.0; 10]], 11, 5, &c).is_err());
    }

    #[test]
    fn consistency_rewards_peaked_not_periodic_correlation() {
        // max|r|/mean|r| of |cos| is exactly π/2; white noise scores higher, so
        // a smooth periodic correlation is *less* confident than noise.
        let c = cfg();
        let n = 128;
        let periodic: Vec<f64> = (0..n).map(|t| (2.0 * PI * 4.0 * t as f64 / n as f64).cos().abs()).collect();
        let p = consistency_confidence(&vec![periodic.clone()], n, n / 2, &c).unwrap();
        let peak = periodic.iter().cloned().fold(0.0, f64::max);
        let avg = periodic.iter().sum::<f64>() / n as f64;
        assert!((peak / avg - PI / 2.0).abs() < 1e-2);
        assert!((p.values[0] - sigmoid(peak / (1e-8 + avg) - 4.0)).abs() < 1e-12);
        let mut below = 0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = consistency_confidence(&vec![noise(&mut rng, n)], n, n / 2, &c).unwrap();
            if q.values[0] > p.values[0] {
                below += 1;
            }
        }
        assert_eq!(below, 50);
    }

    #[test]
    fn spectral_cases() {
        let c = cfg();
        let z = spectral_confidence(&vec![vec![0.0; 128]], 128, 64, &c).unwrap();
        assert!(z.values.iter().all(|&v| (v - sigmoid(-4.0)).abs() < 1e-15));

        let sine: Vec<f64> = (0..128).map(|t| (2.0 * PI * 9.0 * t as f64 / 128.0).sin()).collect();
        let p = power_spectrum_slice(&sine).unwrap();
        let bins = &p[1..];
        assert_eq!(bins.len(), 64);
        let score = bins.iter().cloned().fold(0.0, f64::max) / (1e-8 + bins.iter().sum::<f64>() / 64.0);
        assert!((score - 64.0).abs() < 1e-6);
        let s = spectral_confidence(&vec![sine], 128, 64, &c).unwrap();
        assert!((s.values[0] - sigmoid(60.0)).abs() < 1e-12);
    }

    #[test]
    fn spectral_sine_beats_noise() {
        let c = cfg();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rng.random_range(0.7..3.0);
            let sine: Vec<f64> = (0..300)
                .map(|t| (2.0 * PI * f * t as f64 / 30.0).sin() * 2f64.sqrt())
                .collect();
            let s = spectral_confidence(&vec![sine], 60, 30, &c).unwrap();
            let n = spectral_confidence(&vec![noise(&mut rng, 300)], 60, 30, &c).unwrap();
            assert!(s.mean() > n.mean());
        }
    }

    #[test]
    fn median_over_channels() {
        let c = cfg();
        let mut spike = vec![0.0; 32];
        spike[3] = 1.0;
        // Two zero channels outvote one spiky channel.
        let t = consistency_confidence(&vec![spike.clone(), vec![0.0; 32], vec![0.0; 32]], 32, 16, &c).unwrap();
        assert!((t.values[0] - sigmoid(-4.0)).abs() < 1e-15);
        let t = consistency_confidence(&vec![spike.clone(), spike, vec![0.0; 32]], 32, 16, &c).unwrap();
        assert!(t.values[0] > 0.99);
    }

    #[test]
    fn gains_cases() {
        let (gv, gs) = gains(
            &trace(vec![0.8]),
            &trace(vec![0.5]),
            &trace(vec![0.2]),
            &trace(vec![1e-300]),
        )
        .unwrap();
        assert!((gv[0] - 0.4).abs() < 1e-15);
        assert!(gs[0] < 1e-299);
        assert!(gains(&trace(vec![0.5; 2]), &trace(vec![0.5]), &trace(vec![0.5; 2]), &trace(vec![0.5; 2])).is_err());
    }

    #[test]
    fn residual_cases() {
        let r = vec![vec![3.0, -2.0], vec![1.0, 4.0]];
        let g = [0.5, 0.25];
        let closed = residual_traces(&r, &g, &[-20.0, -20.0]).unwrap();
        for (rc, oc) in r.iter().zip(&closed) {
            for ((x, k), o) in rc.iter().zip(&g).zip(oc) {
                assert!(o.abs() <= 1e-8 * (x * k).abs());
            }
        }
        let half = residual_traces(&r, &g, &[0.0, 0.0]).unwrap();
        assert_eq!(half, vec![vec![0.75, -0.25], vec![0.25, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alpha = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let res = residual_traces(&r, &g, &alpha).unwrap();
        for c in 0..2 {
            for t in 0..2 {
                assert!((res[c][t] - sigmoid(alpha[c]) * r[c][t] * g[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inject_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = random_volume(&mut rng, 2, 3, 2, 2);
        let s = random_map(&mut rng, 2, 4, 3);
        let a_s2v = AttentionMapS2V {
            frames: 3,
            height: 2,
            width: 2,
            spatial: vec![0.5; 4],
        };
        let a_v2s = AttentionMapV2S {
            frames: 3,
            regions: 4,
            data: (0..12).map(|_| rng.random_range(0.01..0.99)).collect(),
        };
        let zeros = vec![vec![0.0; 3]; 2];
        let (vo, so) = inject(&v, &s, &zeros, &zeros, &a_s2v, &a_v2s).unwrap();
        assert_eq!((vo, so), (v.clone(), s.clone()));

        let twos = vec![vec![2.0; 3]; 2];
        let (vo, _) = inject(&v, &s, &twos, &zeros, &a_s2v, &a_v2s).unwrap();
        for (o, i) in vo.data().iter().zip(v.data()) {
            assert_eq!(*o, i + 1.0);
        }

        let res_v: ChannelSignals = (0..2).map(|_| noise(&mut rng, 3)).collect();
        let res_s: ChannelSignals = (0..2).map(|_| noise(&mut rng, 3)).collect();
        let a_s2v = AttentionMapS2V {
            frames: 3,
            height: 2,
            width: 2,
            spatial: (0..4).map(|_| rng.random_range(0.01..0.99)).collect(),
        };
        let (vo, so) = inject(&v, &s, &res_v, &res_s, &a_s2v, &a_v2s).unwrap();
        for c in 0..2 {
            for t in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let e = v.get(c, t, i, j) + a_s2v.get(t, i, j) * res_v[c][t];
                        assert!((vo.get(c, t, i, j) - e).abs() < 1e-12);
                    }
                }
                for i in 0..4 {
                    let e = s.get(c, i, t) + a_v2s.get(t, i) * res_s[c][t];
                    assert!((so.get(c, i, t) - e).abs() < 1e-12);
                }
            }
        }
        assert!(inject(&v, &s, &vec![vec![0.0; 2]; 2], &zeros, &a_s2v, &a_v2s).is_err());
    }

    #[test]
    fn closed_gates_make_block_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = random_volume(&mut rng, 3, 40, 6, 6);
        let s = random_map(&mut rng, 3, 4, 40);
        let mut w = random_weights(&mut rng, 3, (2, 2));
        w.alpha_s2v.fill(-20.0);
        w.alpha_v2s.fill(-20.0);
        let out = exchange_block(&v, &s, &w, &cfg()).unwrap();
        assert_eq!(out.video, v);
        assert_eq!(out.stmap, s);
    }

    fn pulse_streams(rng: &mut ChaCha8Rng, shared: bool) -> (FeatureVolume, FeatureMap2D) {
        // Both streams carry a broadband pulse-like trace, spatially constant.
        let t = 64;
        let a = noise(rng, t);
        let b = if shared {
            a.iter().map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            noise(rng, t)
        };
        let mut v = FeatureVolume::zeros(2, t, 3, 3, 30.0);
        for c in 0..2 {
            for (ti, x) in a.iter().enumerate() {
                for i in 0..3 {
                    for j in 0..3 {
                        let idx = v.index(c, ti, i, j);
                        v.data_mut()[idx] = *x;
                    }
                }
            }
        }
        let mut s = FeatureMap2D::zeros(2, 4, t, 30.0);
        for c in 0..2 {
            for i in 0..4 {
                for (ti, x) in b.iter().enumerate() {
                    let idx = s.index(c, i, ti);
                    s.data_mut()[idx] = *x;
                }
            }
        }
        (v, s)
    }

    #[test]
    fn shared_pulse_raises_consistency() {
        let mut w = ExchangeWeights::zeros(2, (2, 2));
        w.proj_tilde_s = Matrix::identity(2);
        w.proj_tilde_v = Matrix::identity(2);
        let (mut shared, mut indep) = (0.0, 0.0);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (v, s) = pulse_streams(&mut rng, true);
            shared += exchange_block(&v, &s, &w, &cfg()).unwrap().confidence.s2v.mean();
            let (v, s) = pulse_streams(&mut rng, false);
            indep += exchange_block(&v, &s, &w, &cfg()).unwrap().confidence.s2v.mean();
        }
        assert!(shared / 50.0 > indep / 50.0 + 0.1, "{shared} vs {indep}");
    }

    #[test]
    fn exchange_rejects_mismatch() {
        let v = FeatureVolume::zeros(2, 8, 4, 4, 30.0);
        let s = FeatureMap2D::zeros(2, 4, 6, 30.0);
        let w = ExchangeWeights::zeros(2, (2, 2));
        assert!(exchange_block(&v, &s, &w, &cfg()).is_err());
        let s = FeatureMap2D::zeros(2, 4, 8, 15.0);
        assert!(exchange_block(&v, &s, &w, &cfg()).is_err());
        let s = FeatureMap2D::zeros(3, 4, 8, 30.0);
        assert!(exchange_block(&v, &s, &w, &cfg()).is_err());
    }

    #[test]
    fn exchange_is_deterministic_and_shape_preserving() {
        for (c, t, h, wd, grid) in [(1, 8, 3, 3, (1, 2)), (4, 40, 8, 8, (5, 5)), (2, 17, 5, 7, (3, 2))] {
            let mut rng = ChaCha8Rng::seed_from_u64((c * t) as u64);
            let v = random_volume(&mut rng, c, t, h, wd);
            let s = random_map(&mut rng, c, grid.0 * grid.1, t);
            let w = random_weights(&mut rng, c, grid);
            let a = exchange_block(&v, &s, &w, &cfg()).unwrap();
            let b = exchange_block(&v, &s, &w, &cfg()).unwrap();
            assert_eq!(a, b);
            assert!(a.video.same_shape(&v));
            assert!(a.stmap.same_shape(&s));
            for tr in [&a.confidence.s2v, &a.confidence.v2s, &a.confidence.video, &a.confidence.stmap] {
                assert_eq!(tr.values.len(), t);
                assert!(tr.values.iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn attention_maps_in_open_unit_interval(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_map(&mut rng, 3, 6, 10);
            let w = random_weights(&mut rng, 3, (2, 3));
            let a = align_s2v(&s, &w, 10, 7, 9).unwrap();
            prop_assert!(a.spatial.iter().all(|&x| x > 0.0 && x < 1.0));
            let v = random_volume(&mut rng, 3, 10, 7, 9);
            let b = align_v2s(&v, &w.conv_v2s, 6).unwrap();
            prop_assert!(b.data.iter().all(|&x| x > 0.0 && x < 1.0));
        }

        #[test]
        fn gains_stay_in_unit_interval(a in 1e-6f64..1.0, b in 1e-6f64..1.0, c in 1e-6f64..1.0, d in 1e-6f64..1.0) {
            let (gv, gs) = gains(&trace(vec![a]), &trace(vec![b]), &trace(vec![c]), &trace(vec![d])).unwrap();
            prop_assert!(gv[0] > 0.0 && gv[0] < 1.0 && gs[0] > 0.0 && gs[0] < 1.0);
        }

        #[test]
        fn waveform_match_is_bilinear(seed in any::<u64>(), scale in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = noise(&mut rng, 40);
            let y = noise(&mut rng, 40);
            let scaled: Vec<f64> = x.iter().map(|v| scale * v).collect();
            let r1 = waveform_match(&vec![scaled], &vec![y.clone()]).unwrap();
            let r0 = waveform_match(&vec![x], &vec![y]).unwrap();
            for (p, q) in r1[0].iter().zip(&r0[0]) {
                prop_assert!((p - scale * q).abs() < 1e-9);
            }
        }
    }
}
