//! Video and STMap encoders and the end-to-end forward pass.

use rayon::prelude::*;

use crate::dceb::{exchange_block, ConfBundle, ExchangeConfig, FeatureVolume};
use crate::decoder::decode;
use crate::error::{invalid, Result};
use crate::media_io::FrameSequence;
use crate::numerics::RealSignal;
use crate::sdmu::{sdmu_block, FeatureMap2D};
use crate::stmap::STMap;
use crate::weights::{Conv2d, Conv3d, ModelWeights};

/// Box-averaged resize of every frame to `size × size`, scaled to `[0, 1]`.
pub fn frames_to_volume(clip: &FrameSequence, size: usize) -> Result<FeatureVolume> {
    if size == 0 {
        return Err(invalid("target frame size must be positive"));
    }
    let (w, h, t) = (clip.width(), clip.height(), clip.len());
    let span = |i: usize, src: usize| {
        let a = i * src / size;
        let b = ((i + 1) * src / size).max(a + 1);
        (a, b)
    };
    let plane = size * size;
    let mut data = vec![0.0; 3 * t * plane];
    for ti in 0..t {
        let f = clip.frame(ti);
        for i in 0..size {
            let (y0, y1) = span(i, h);
            for j in 0..size {
                let (x0, x1) = span(j, w);
                let mut acc = [0u64; 3];
                for y in y0..y1 {
                    for px in f[(y * w + x0) * 3..(y * w + x1) * 3].chunks_exact(3) {
                        acc[0] += px[0] as u64;
                        acc[1] += px[1] as u64;
                        acc[2] += px[2] as u64;
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64 * 255.0;
                for c in 0..3 {
                    data[(c * t + ti) * plane + i * size + j] = acc[c] as f64 / n;
                }
            }
        }
    }
    FeatureVolume::new(3, t, size, size, clip.fps(), data)
}

fn out_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Output index range `[lo, hi)` whose input tap `o·stride + k − 1` lies in `[0, len)`.
fn valid_range(len: usize, out: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = if len < k { 0 } else { ((len - k) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

/// `3×3×3` convolution with zero padding, stride `(time, space, space)`,
/// followed by ReLU.
pub fn conv3d_relu(x: &FeatureVolume, conv: &Conv3d, t_stride: usize, s_stride: usize) -> Result<FeatureVolume> {
    if x.channels() != conv.in_channels
        || conv.weight.len() != conv.out_channels * conv.in_channels * 27
        || conv.bias.len() != conv.out_channels
    {
        return Err(invalid("3-D convolution weights do not match the input"));
    }
    let (t, h, w) = (x.frames(), x.height(), x.width());
    let (to, ho, wo) = (out_len(t, t_stride), out_len(h, s_stride), out_len(w, s_stride));
    let out_plane = ho * wo;
    let in_plane = h * w;
    let src = x.data();
    let cin = conv.in_channels;

    let t_ranges: Vec<_> = (0..3).map(|k| valid_range(t, to, t_stride, k)).collect();
    let h_ranges: Vec<_> = (0..3).map(|k| valid_range(h, ho, s_stride, k)).collect();
    let w_ranges: Vec<_> = (0..3).map(|k| valid_range(w, wo, s_stride, k)).collect();

    let mut data = vec![0.0; conv.out_channels * to * out_plane];
    data.par_chunks_mut(to * out_plane)
        .enumerate()
        .for_each(|(co, out)| {
            out.fill(conv.bias[co]);
            for ci in 0..cin {
                let input = &src[ci * t * in_plane..(ci + 1) * t * in_plane];
                for kt in 0..3 {
                    let (t0, t1) = t_ranges[kt];
                    for ki in 0..3 {
                        let (i0, i1) = h_ranges[ki];
                        for kj in 0..3 {
                            let (j0, j1) = w_ranges[kj];
                            let wgt = conv.weight[(((co * cin + ci) * 3 + kt) * 3 + ki) * 3 + kj];
                            for ot in t0..t1 {
                                let it = ot * t_stride + kt - 1;
                                for oi in i0..i1 {
                                    let ii = oi * s_stride + ki - 1;
                                    let in_row = &input[it * in_plane + ii * w..][..w];
                                    let out_row = &mut out[ot * out_plane + oi * wo..][..wo];
                                    if s_stride == 1 {
                                        let src_row = &in_row[j0 + kj - 1..j1 + kj - 1];
                                        for (o, v) in out_row[j0..j1].iter_mut().zip(src_row) {
                                            *o += wgt * v;
                                        }
                                    } else {
                                        for oj in j0..j1 {
                                            out_row[oj] += wgt * in_row[oj * s_stride + kj - 1];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        });
    FeatureVolume::new(conv.out_channels, to, ho, wo, x.fps() / t_stride as f64, data)
}

/// `3×3` convolution over `(region, time)` with replicate padding and time
/// stride, followed by ReLU.
pub fn conv2d_relu(x: &FeatureMap2D, conv: &Conv2d, t_stride: usize) -> Result<FeatureMap2D> {
    if x.channels() != conv.in_channels
        || conv.weight.len() != conv.out_channels * conv.in_channels * 9
        || conv.bias.len() != conv.out_channels
    {
        return Err(invalid("2-D convolution weights do not match the input"));
    }
    let (h, t) = (x.regions(), x.frames());
    let to = out_len(t, t_stride);
    let cin = conv.in_channels;
    let mut data = vec![0.0; conv.out_channels * h * to];
    data.par_chunks_mut(h * to).enumerate().for_each(|(co, out)| {
        for i in 0..h {
            for oj in 0..to {
                let mut acc = conv.bias[co];
                for ci in 0..cin {
                    for ki in 0..3 {
                        let ii = (i as isize + ki as isize - 1).clamp(0, h as isize - 1);
                        for kj in 0..3 {
                            let jj = (oj as isize * t_stride as isize + kj as isize - 1).clamp(0, t as isize - 1);
                            acc += conv.weight[((co * cin + ci) * 3 + ki) * 3 + kj] * x.get_clamped(ci, ii, jj);
                        }
                    }
                }
                out[i * to + oj] = acc.max(0.0);
            }
        }
    });
    FeatureMap2D::new(conv.out_channels, h, to, x.fps() / t_stride as f64, data)
}

const STRIDES: [usize; 3] = [1, 2, 2];

fn check_frames(frames: usize) -> Result<()> {
    if frames % 4 != 0 || frames < 8 {
        return Err(invalid(format!(
            "clip length {frames} must be a multiple of 4 and at least 8"
        )));
    }
    Ok(())
}

/// Features after the stem, stage 1 and stage 2 (scales `T`, `T/2`, `T/4`).
pub fn video_encoder(clip: &FrameSequence, w: &ModelWeights) -> Result<Vec<FeatureVolume>> {
    check_frames(clip.len())?;
    let mut x = frames_to_volume(clip, w.config.frame_size)?;
    let mut taps = Vec::with_capacity(3);
    for (conv, stride) in w.video.iter().zip(STRIDES) {
        x = conv3d_relu(&x, conv, stride, stride)?;
        taps.push(x.clone());
    }
    Ok(taps)
}

pub fn stmap_to_features(s: &STMap) -> FeatureMap2D {
    FeatureMap2D::new(3, s.regions(), s.frames(), s.fps(), s.data().to_vec()).expect("STMap values are finite")
}

/// Stem, stage 1 and stage 2, each a convolution followed by a residual SDMU.
pub fn stmap_encoder(s: &STMap, w: &ModelWeights) -> Result<Vec<FeatureMap2D>> {
    check_frames(s.frames())?;
    let mut x = stmap_to_features(s);
    let mut taps = Vec::with_capacity(3);
    for ((conv, pdc), stride) in w.stmap.iter().zip(&w.sdmu).zip(STRIDES) {
        x = sdmu_block(&conv2d_relu(&x, conv, stride)?, pdc)?;
        taps.push(x.clone());
    }
    Ok(taps)
}

/// Per-scale intermediate results of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub confidences: Vec<ConfBundle>,
    pub video: FeatureVolume,
    pub stmap: FeatureMap2D,
    pub signal: RealSignal,
}

/// Encoders interleaved with exchange blocks at `T`, `T/2`, `T/4`, then the
/// fusion decoder. Returns a standardized signal of the clip's length.
pub fn physnext_forward_trace(
    clip: &FrameSequence,
    s: &STMap,
    w: &ModelWeights,
    cfg: &ExchangeConfig,
) -> Result<ForwardTrace> {
    if clip.len() != s.frames() {
        return Err(invalid(format!(
            "clip has {} frames, STMap {}",
            clip.len(),
            s.frames()
        )));
    }
    if clip.fps() != s.fps() {
        return Err(invalid(format!("clip runs at {} fps, STMap at {}", clip.fps(), s.fps())));
    }
    if s.grid() != w.config.grid {
        return Err(invalid(format!(
            "STMap grid {:?} does not match the weights' {:?}",
            s.grid(),
            w.config.grid
        )));
    }
    check_frames(clip.len())?;
    let mut v = frames_to_volume(clip, w.config.frame_size)?;
    let mut m = stmap_to_features(s);
    let mut confidences = Vec::with_capacity(3);
    for k in 0..3 {
        v = conv3d_relu(&v, &w.video[k], STRIDES[k], STRIDES[k])?;
        m = sdmu_block(&conv2d_relu(&m, &w.stmap[k], STRIDES[k])?, &w.sdmu[k])?;
        let out = exchange_block(&v, &m, &w.exchange[k], cfg)?;
        v = out.video;
        m = out.stmap;
        confidences.push(out.confidence);
    }
    let deepest = confidences.last().expect("three scales");
    let p = decode(&v, &m, deepest, &w.decoder, clip.len())?;
    Ok(ForwardTrace {
        signal: RealSignal::new(p, clip.fps())?,
        confidences,
        video: v,
        stmap: m,
    })
}

pub fn physnext_forward(
    clip: &FrameSequence,
    s: &STMap,
    w: &ModelWeights,
    cfg: &ExchangeConfig,
) -> Result<RealSignal> {
    physnext_forward_trace(clip, s, w, cfg).map(|t| t.signal)
}
