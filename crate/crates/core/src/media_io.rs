//! File formats: PPM frame directories with a JSON manifest, two-column
//! signal CSVs, and the `PNXT` named-tensor container used for weights and
//! STMaps. This is the only module that touches the filesystem.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};
use crate::numerics::RealSignal;

pub const MANIFEST_FILE: &str = "manifest.json";

/// `frame_000042.ppm` style name for frame `index`.
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// `T` RGB frames, 8 bits per channel, row-major interleaved `RGBRGB...`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    width: usize,
    height: usize,
    fps: f64,
    frames: Vec<Vec<u8>>,
}

impl FrameSequence {
    pub fn new(width: usize, height: usize, fps: f64, frames: Vec<Vec<u8>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("frame dimensions must be positive"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(invalid(format!("fps must be positive, got {fps}")));
        }
        if frames.is_empty() {
            return Err(invalid("a clip needs at least one frame"));
        }
        let expect = width * height * 3;
        if let Some(i) = frames.iter().position(|f| f.len() != expect) {
            return Err(invalid(format!(
                "frame {i} holds {} bytes, expected {expect}",
                frames[i].len()
            )));
        }
        Ok(Self {
            width,
            height,
            fps,
            frames,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<u8>] {
        &self.frames
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        let f = &self.frames[t];
        [f[i], f[i + 1], f[i + 2]]
    }

    /// Keeps the first `len` frames.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return Err(invalid(format!("cannot keep {len} of {} frames", self.len())));
        }
        Self::new(self.width, self.height, self.fps, self.frames[..len].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_signal: Option<String>,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Parses a binary `P6` image with maxval 255, returning `(width, height, rgb)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::UnsupportedFormat("not a binary PPM (P6) image".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptClip("malformed PPM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptClip("PPM header value out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PPM maxval {maxval} (only 255 supported)"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::CorruptClip("malformed PPM header".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::CorruptClip("PPM dimensions overflow".into()))?;
    let data = &bytes[pos..];
    if data.len() != need {
        return Err(Error::CorruptClip(format!(
            "PPM pixel data holds {} bytes, expected {need}",
            data.len()
        )));
    }
    Ok((width, height, data.to_vec()))
}

/// Writes frames plus `manifest.json` into `dir`, creating it if needed.
pub fn write_clip(dir: &Path, clip: &FrameSequence, gt_signal: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, frame) in clip.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        fs::write(&path, encode_ppm(clip.width, clip.height, frame)).at(&path)?;
    }
    let manifest = ClipManifest {
        fps: clip.fps,
        width: clip.width,
        height: clip.height,
        frame_count: clip.len(),
        gt_signal: gt_signal.map(str::to_owned),
    };
    write_manifest(dir, &manifest)
}

pub fn write_manifest(dir: &Path, manifest: &ClipManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").at(&path)
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::CorruptClip(format!("{}: {e}", path.display())))
}

pub fn read_clip(dir: &Path) -> Result<FrameSequence> {
    let manifest = read_manifest(dir)?;
    if manifest.frame_count == 0 {
        return Err(Error::CorruptClip("manifest declares zero frames".into()));
    }
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for i in 0..manifest.frame_count {
        let path = dir.join(frame_file_name(i));
        if !path.is_file() {
            return Err(Error::CorruptClip(format!("missing frame {}", path.display())));
        }
        let bytes = fs::read(&path).at(&path)?;
        let (w, h, rgb) = decode_ppm(&bytes)?;
        if w != manifest.width || h != manifest.height {
            return Err(Error::CorruptClip(format!(
                "{} is {w}x{h}, manifest says {}x{}",
                path.display(),
                manifest.width,
                manifest.height
            )));
        }
        frames.push(rgb);
    }
    if dir.join(frame_file_name(manifest.frame_count)).exists() {
        return Err(Error::CorruptClip(format!(
            "more frame files present than the {} declared",
            manifest.frame_count
        )));
    }
    FrameSequence::new(manifest.width, manifest.height, manifest.fps, frames)
        .map_err(|e| Error::CorruptClip(e.to_string()))
}

/// Path of the ground-truth signal declared by a clip manifest, if any.
pub fn clip_gt_path(dir: &Path) -> Result<Option<PathBuf>> {
    Ok(read_manifest(dir)?.gt_signal.map(|p| dir.join(p)))
}

const CSV_HEADER: &str = "time_s,value";

/// `%.9g`-style formatting: nine significant digits, trailing zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_owned()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    }
}

pub fn signal_to_csv(s: &RealSignal) -> String {
    let mut out = String::with_capacity(16 * (s.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (i, v) in s.samples().iter().enumerate() {
        out.push_str(&format_sig9(i as f64 / s.rate_hz()));
        out.push(',');
        out.push_str(&format_sig9(*v));
        out.push('\n');
    }
    out
}

pub fn write_signal_csv(s: &RealSignal, path: &Path) -> Result<()> {
    fs::write(path, signal_to_csv(s)).at(path)
}

/// Parses a signal CSV. The sample rate is recovered from the last timestamp
/// as `(n − 1) / t_last`, rounded to 1e-6 Hz, so at least two rows are needed.
pub fn parse_signal_csv(text: &str, path: &Path) -> Result<RealSignal> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("expected header {CSV_HEADER:?}, got {h:?}"))),
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| parse_err(lineno, format!("expected two fields in {line:?}")))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad time {t:?}: {e}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad value {v:?}: {e}")))?;
        if !(t.is_finite() && v.is_finite()) {
            return Err(parse_err(lineno, "non-finite field".into()));
        }
        times.push(t);
        values.push(v);
    }
    if values.len() < 2 {
        return Err(parse_err(
            values.len() + 1,
            "at least two rows are needed to recover the sample rate".into(),
        ));
    }
    let t_last = *times.last().expect("non-empty");
    if t_last <= times[0] {
        return Err(parse_err(values.len() + 1, "timestamps do not increase".into()));
    }
    let rate = ((values.len() - 1) as f64 / (t_last - times[0]) * 1e6).round() / 1e6;
    RealSignal::new(values, rate)
}

pub fn read_signal_csv(path: &Path) -> Result<RealSignal> {
    let text = fs::read_to_string(path).at(path)?;
    parse_signal_csv(&text, path)
}

/// One named, shaped `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "tensor {name:?}: dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }
}

/// Ordered collection of uniquely named tensors, serialized as `PNXT` v1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorFile {
    entries: Vec<TensorEntry>,
}

pub const TENSOR_MAGIC: &[u8; 4] = b"PNXT";
pub const TENSOR_VERSION: u32 = 1;

impl NamedTensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, entry: TensorEntry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(invalid(format!("duplicate tensor name {:?}", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != TENSOR_MAGIC {
            return Err(Error::UnsupportedFormat("bad tensor file magic".into()));
        }
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "tensor file version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut file = NamedTensorFile::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptFile("tensor name is not utf-8".into()))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(Error::CorruptFile(format!("duplicate tensor name {name:?}")));
            }
            let ndim = r.u32()? as usize;
            // each dim takes 4 bytes; refuse counts the remaining bytes cannot hold
            if ndim > r.remaining() / 4 {
                return Err(truncated());
            }
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptFile(format!("tensor {name:?} dims overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            file.entries.push(TensorEntry { name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptFile(format!(
                "{} trailing bytes after the last tensor",
                r.remaining()
            )));
        }
        Ok(file)
    }
}

fn truncated() -> Error {
    Error::CorruptFile("tensor file is truncated".into())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(truncated());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor(file: &NamedTensorFile, path: &Path) -> Result<()> {
    fs::write(path, file.to_bytes()).at(path)
}

pub fn read_tensor(path: &Path) -> Result<NamedTensorFile> {
    NamedTensorFile::from_bytes(&fs::read(path).at(path)?)
}
