//! Spatial-temporal maps: the frame is cut into a `rows × cols` grid of ROI
//! cells, each cell's per-channel mean becomes one time series, and each
//! `(channel, cell)` series is min-max normalized over time.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::media_io::{read_tensor, write_tensor, FrameSequence, NamedTensorFile, TensorEntry};

pub const DEFAULT_GRID: (usize, usize) = (5, 5);

/// `3 × H' × T` map with values in `[0, 1]`, `H' = rows · cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct STMap {
    data: Vec<f64>,
    frames: usize,
    fps: f64,
    grid: (usize, usize),
}

impl STMap {
    pub fn from_parts(data: Vec<f64>, frames: usize, fps: f64, grid: (usize, usize)) -> Result<Self> {
        let (rows, cols) = grid;
        if rows * cols == 0 || frames == 0 {
            return Err(invalid("STMap needs a non-empty grid and at least one frame"));
        }
        if data.len() != 3 * rows * cols * frames {
            return Err(invalid(format!(
                "STMap data holds {} values, expected 3x{}x{frames}",
                data.len(),
                rows * cols
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("STMap values must lie in [0, 1]"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(invalid("STMap fps must be positive"));
        }
        Ok(Self {
            data,
            frames,
            fps,
            grid,
        })
    }

    /// Number of ROI rows `H'`.
    pub fn regions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, region: usize, t: usize) -> f64 {
        self.data[(channel * self.regions() + region) * self.frames + t]
    }

    pub fn row(&self, channel: usize, region: usize) -> &[f64] {
        let start = (channel * self.regions() + region) * self.frames;
        &self.data[start..start + self.frames]
    }

    pub fn truncated(&self, frames: usize) -> Result<Self> {
        if frames == 0 || frames > self.frames {
            return Err(invalid(format!("cannot keep {frames} of {} frames", self.frames)));
        }
        let data = (0..3 * self.regions())
            .flat_map(|r| {
                let start = r * self.frames;
                self.data[start..start + frames].iter().copied()
            })
            .collect();
        Ok(Self {
            data,
            frames,
            fps: self.fps,
            grid: self.grid,
        })
    }

    /// Entries `stmap` `[3, H', T]`, `stmap.fps` `[1]` and `stmap.grid` `[2]`.
    pub fn to_tensor_file(&self) -> NamedTensorFile {
        let mut f = NamedTensorFile::new();
        let entries = [
            TensorEntry::new(
                "stmap",
                vec![3, self.regions(), self.frames],
                self.data.iter().map(|&v| v as f32).collect(),
            ),
            TensorEntry::new("stmap.fps", vec![1], vec![self.fps as f32]),
            TensorEntry::new(
                "stmap.grid",
                vec![2],
                vec![self.grid.0 as f32, self.grid.1 as f32],
            ),
        ];
        for e in entries {
            f.push(e.expect("consistent shapes")).expect("unique names");
        }
        f
    }

    pub fn from_tensor_file(file: &NamedTensorFile) -> Result<Self> {
        let need = |name: &str| {
            file.get(name)
                .ok_or_else(|| Error::CorruptFile(format!("STMap file lacks entry {name:?}")))
        };
        let map = need("stmap")?;
        let fps = need("stmap.fps")?.data.first().copied().unwrap_or(0.0) as f64;
        let grid = &need("stmap.grid")?.data;
        if grid.len() != 2 || map.dims.len() != 3 || map.dims[0] != 3 {
            return Err(Error::CorruptFile("malformed STMap entries".into()));
        }
        let grid = (grid[0] as usize, grid[1] as usize);
        if grid.0 * grid.1 != map.dims[1] {
            return Err(Error::CorruptFile("STMap grid does not match its row count".into()));
        }
        Self::from_parts(
            map.data.iter().map(|&v| v as f64).collect(),
            map.dims[2],
            fps,
            grid,
        )
        .map_err(|e| Error::CorruptFile(e.to_string()))
    }
}

pub fn write_stmap(map: &STMap, path: &Path) -> Result<()> {
    write_tensor(&map.to_tensor_file(), path)
}

pub fn read_stmap(path: &Path) -> Result<STMap> {
    STMap::from_tensor_file(&read_tensor(path)?)
}

/// Pixel bounds `[start, end)` of cell `i` when `len` pixels are split into
/// `n` cells; the last cell takes the remainder.
fn cell_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    let size = len / n;
    let start = i * size;
    let end = if i + 1 == n { len } else { start + size };
    (start, end)
}

pub fn build_stmap(clip: &FrameSequence, rows: usize, cols: usize) -> Result<STMap> {
    if rows == 0 || cols == 0 {
        return Err(invalid("STMap grid needs at least one row and one column"));
    }
    if rows > clip.height() || cols > clip.width() {
        return Err(invalid(format!(
            "{rows}x{cols} grid does not fit a {}x{} frame",
            clip.width(),
            clip.height()
        )));
    }
    let regions = rows * cols;
    let frames = clip.len();
    let width = clip.width();

    // Integer channel sums per (channel, region, t); normalizing the sums
    // directly keeps the map exactly invariant to per-frame constant offsets.
    let sums: Vec<[Vec<u64>; 3]> = (0..regions)
        .into_par_iter()
        .map(|region| {
            let (y0, y1) = cell_bounds(clip.height(), rows, region / cols);
            let (x0, x1) = cell_bounds(width, cols, region % cols);
            let mut out = [vec![0u64; frames], vec![0u64; frames], vec![0u64; frames]];
            for t in 0..frames {
                let f = clip.frame(t);
                let mut acc = [0u64; 3];
                for y in y0..y1 {
                    let row = &f[(y * width + x0) * 3..(y * width + x1) * 3];
                    for px in row.chunks_exact(3) {
                        acc[0] += px[0] as u64;
                        acc[1] += px[1] as u64;
                        acc[2] += px[2] as u64;
                    }
                }
                for c in 0..3 {
                    out[c][t] = acc[c];
                }
            }
            out
        })
        .collect();

    let mut data = vec![0.0; 3 * regions * frames];
    for c in 0..3 {
        for (region, per_channel) in sums.iter().enumerate() {
            let series = &per_channel[c];
            let lo = *series.iter().min().expect("non-empty");
            let hi = *series.iter().max().expect("non-empty");
            let out = &mut data[(c * regions + region) * frames..][..frames];
            if lo == hi {
                out.fill(0.5);
            } else {
                let range = (hi - lo) as f64;
                for (o, &s) in out.iter_mut().zip(series) {
                    *o = (s - lo) as f64 / range;
                }
            }
        }
    }
    STMap::from_parts(data, frames, clip.fps(), (rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_from_fn(w: usize, h: usize, t: usize, f: impl Fn(usize, usize, usize) -> [u8; 3]) -> FrameSequence {
        let frames = (0..t)
            .map(|ti| {
                let mut v = Vec::with_capacity(w * h * 3);
                for y in 0..h {
                    for x in 0..w {
                        v.extend_from_slice(&f(ti, y, x));
                    }
                }
                v
            })
            .collect();
        FrameSequence::new(w, h, 30.0, frames).unwrap()
    }

    #[test]
    fn constant_clip_maps_to_half() {
        let clip = clip_from_fn(20, 20, 10, |_, _, _| [100, 150, 200]);
        let map = build_stmap(&clip, 5, 5).unwrap();
        assert_eq!(map.regions(), 25);
        assert!(map.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ramp_normalizes_to_unit_ramp() {
        let clip = clip_from_fn(4, 4, 256, |t, _, _| [10, t as u8, 10]);
        let map = build_stmap(&clip, 1, 1).unwrap();
        for (t, &v) in map.row(1, 0).iter().enumerate() {
            assert!((v - t as f64 / 255.0).abs() < 1e-15);
        }
        assert!(map.row(0, 0).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn remainder_pixels_go_to_last_cell() {
        assert_eq!(cell_bounds(7, 3, 0), (0, 2));
        assert_eq!(cell_bounds(7, 3, 2), (4, 7));
        // Bright column 6 only lands in the last column cell.
        let clip = clip_from_fn(7, 3, 4, |t, _, x| if x == 6 { [0, (t * 10) as u8, 0] } else { [0, 0, 0] });
        let map = build_stmap(&clip, 1, 3).unwrap();
        assert!(map.row(1, 0).iter().all(|&v| v == 0.5));
        assert_eq!(map.row(1, 2), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn grid_larger_than_frame_is_rejected() {
        let clip = clip_from_fn(4, 4, 2, |_, _, _| [0, 0, 0]);
        assert!(build_stmap(&clip, 5, 1).is_err());
        assert!(build_stmap(&clip, 0, 1).is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let clip = clip_from_fn(10, 10, 8, |t, y, x| [(t + x) as u8, (t * y) as u8, 3]);
        let map = build_stmap(&clip, 2, 5).unwrap();
        let file = map.to_tensor_file();
        assert_eq!(file.get("stmap").unwrap().dims, vec![3, 10, 8]);
        let back = STMap::from_tensor_file(&file).unwrap();
        assert_eq!(back.grid(), (2, 5));
        for (a, b) in back.data().iter().zip(map.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
