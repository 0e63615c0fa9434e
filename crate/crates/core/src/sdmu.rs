//! Spatio-temporal difference modeling: pixel-difference convolution over
//! the 3×3 neighbourhood of every STMap feature position.
//!
//! Two difference sets are taken at each `(region, time)` position: central
//! differences `x(neighbour) − x(centre)` and ring differences between
//! clockwise-adjacent neighbours. Each set goes through its own
//! `Cout × C × 8` kernel, the two results are concatenated and fused by a
//! `1×1` map, then passed through ReLU. There are no bias terms, so constant
//! inputs produce exactly zero. Borders use replicate padding.

use crate::error::{invalid, Result};

/// `C × H' × T` feature map of the STMap branch, indexed `(channel, region, time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D {
    channels: usize,
    regions: usize,
    frames: usize,
    fps: f64,
    data: Vec<f64>,
}

impl FeatureMap2D {
    pub fn new(channels: usize, regions: usize, frames: usize, fps: f64, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || regions == 0 || frames == 0 {
            return Err(invalid("feature map dimensions must be positive"));
        }
        if data.len() != channels * regions * frames {
            return Err(invalid(format!(
                "feature map data holds {} values, expected {channels}x{regions}x{frames}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map values must be finite"));
        }
        Ok(Self {
            channels,
            regions,
            frames,
            fps,
            data,
        })
    }

    pub fn zeros(channels: usize, regions: usize, frames: usize, fps: f64) -> Self {
        Self {
            channels,
            regions,
            frames,
            fps,
            data: vec![0.0; channels * regions * frames],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn frames(&self) -> usize {
        self.frames
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

    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.regions + i) * self.frames + j
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, i, j)]
    }

    /// Value at a possibly out-of-range position, clamped to the border.
    pub fn get_clamped(&self, c: usize, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.regions as isize - 1) as usize;
        let j = j.clamp(0, self.frames as isize - 1) as usize;
        self.get(c, i, j)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.regions == other.regions && self.frames == other.frames
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Neighbour offsets `(Δregion, Δtime)` in the fixed order N, NE, E, SE, S,
/// SW, W, NW. Walking the list is a clockwise tour of the ring starting at N.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

fn ring_values(x: &FeatureMap2D, c: usize, i: usize, j: usize) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (o, (dy, dt)) in out.iter_mut().zip(NEIGHBOURS) {
        *o = x.get_clamped(c, i as isize + dy, j as isize + dt);
    }
    out
}

/// `x(i+Δy, j+Δt) − x(i, j)` for each channel, neighbours in [`NEIGHBOURS`] order.
pub fn central_diffs(x: &FeatureMap2D, i: usize, j: usize) -> Vec<[f64; 8]> {
    (0..x.channels)
        .map(|c| {
            let centre = x.get(c, i, j);
            ring_values(x, c, i, j).map(|v| v - centre)
        })
        .collect()
}

/// `x(p_k) − x(p_{k+1})` around the clockwise ring, with `p_9 = p_1`.
pub fn ring_diffs(x: &FeatureMap2D, i: usize, j: usize) -> Vec<[f64; 8]> {
    (0..x.channels)
        .map(|c| {
            let ring = ring_values(x, c, i, j);
            std::array::from_fn(|k| ring[k] - ring[(k + 1) % 8])
        })
        .collect()
}

/// Kernels of one pixel-difference unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PdcWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    /// `Cout × C × 8`, applied to central differences.
    pub wc: Vec<f64>,
    /// `Cout × C × 8`, applied to ring differences.
    pub wr: Vec<f64>,
    /// `Cout × 2·Cout`, fuses `[central ; ring]`.
    pub wf: Vec<f64>,
}

impl PdcWeights {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            wc: vec![0.0; out_channels * in_channels * 8],
            wr: vec![0.0; out_channels * in_channels * 8],
            wf: vec![0.0; out_channels * 2 * out_channels],
        }
    }

    fn check(&self, x: &FeatureMap2D) -> Result<()> {
        let k = self.out_channels * self.in_channels * 8;
        if self.wc.len() != k || self.wr.len() != k || self.wf.len() != 2 * self.out_channels * self.out_channels {
            return Err(invalid("PDC weight shapes are inconsistent"));
        }
        if x.channels != self.in_channels {
            return Err(invalid(format!(
                "PDC expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }
}

/// `W_f · [W_c·D_central ; W_r·D_ring]` before the activation.
pub fn pdc_preactivation(x: &FeatureMap2D, w: &PdcWeights) -> Result<FeatureMap2D> {
    w.check(x)?;
    let (cin, cout) = (w.in_channels, w.out_channels);
    let mut out = FeatureMap2D::zeros(cout, x.regions, x.frames, x.fps);
    let mut central = vec![0.0; cin * 8];
    let mut ring = vec![0.0; cin * 8];
    let mut mixed = vec![0.0; 2 * cout];
    for i in 0..x.regions {
        for j in 0..x.frames {
            for c in 0..cin {
                let centre = x.get(c, i, j);
                let vals = ring_values(x, c, i, j);
                for k in 0..8 {
                    central[c * 8 + k] = vals[k] - centre;
                    ring[c * 8 + k] = vals[k] - vals[(k + 1) % 8];
                }
            }
            for o in 0..cout {
                let row = &w.wc[o * cin * 8..(o + 1) * cin * 8];
                mixed[o] = row.iter().zip(&central).map(|(a, b)| a * b).sum();
                let row = &w.wr[o * cin * 8..(o + 1) * cin * 8];
                mixed[cout + o] = row.iter().zip(&ring).map(|(a, b)| a * b).sum();
            }
            for o in 0..cout {
                let row = &w.wf[o * 2 * cout..(o + 1) * 2 * cout];
                let idx = out.index(o, i, j);
                out.data[idx] = row.iter().zip(&mixed).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(out)
}

pub fn pdc_forward(x: &FeatureMap2D, w: &PdcWeights) -> Result<FeatureMap2D> {
    Ok(pdc_preactivation(x, w)?.map(|v| v.max(0.0)))
}

/// Residual unit `x + pdc_forward(x)`; needs `Cout = C`.
pub fn sdmu_block(x: &FeatureMap2D, w: &PdcWeights) -> Result<FeatureMap2D> {
    if w.out_channels != x.channels {
        return Err(invalid(format!(
            "residual SDMU needs Cout = C, got {} vs {}",
            w.out_channels, x.channels
        )));
    }
    let delta = pdc_forward(x, w)?;
    let mut out = x.clone();
    for (o, d) in out.data.iter_mut().zip(&delta.data) {
        *o += d;
    }
    Ok(out)
}
