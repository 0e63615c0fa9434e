//! Heart-rate estimation, clip-level metrics and report artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, undefined, IoContext, Result};
use crate::media_io::format_sig9;
use crate::numerics::{hann_window, mean, pearson_r, power_spectrum, quadratic_peak_interp, standardize, Band, PowerSpectrum, RealSignal};

/// Minimum signal length for an estimate, in seconds.
pub const MIN_DURATION_S: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrEstimate {
    pub bpm: f64,
    pub peak_bin: usize,
    /// Power within one bin of the peak against the rest of the band.
    pub snr_db: f64,
    /// The strongest non-DC bin of the whole spectrum lies outside the band.
    pub out_of_band: bool,
}

/// Mean-removed, Hann-windowed power spectrum.
pub fn windowed_psd(p: &RealSignal) -> Result<PowerSpectrum> {
    let m = mean(p.samples());
    let w = hann_window(p.len());
    let x: Vec<f64> = p.samples().iter().zip(&w).map(|(v, h)| (v - m) * h).collect();
    power_spectrum(&RealSignal::new(x, p.rate_hz())?)
}

pub fn estimate_hr(p: &RealSignal, band: Band) -> Result<HrEstimate> {
    if (p.len() as f64) < MIN_DURATION_S * p.rate_hz() {
        return Err(invalid(format!(
            "{} samples at {} Hz is shorter than {MIN_DURATION_S} s",
            p.len(),
            p.rate_hz()
        )));
    }
    let psd = windowed_psd(p)?;
    let in_band: Vec<usize> = (1..psd.power.len()).filter(|&k| band.contains(psd.frequency(k))).collect();
    if in_band.is_empty() {
        return Err(invalid("no spectral bin falls inside the band"));
    }
    let argmax = |ks: &mut dyn Iterator<Item = usize>| {
        ks.max_by(|&a, &b| psd.power[a].total_cmp(&psd.power[b]).then(b.cmp(&a)))
            .expect("non-empty")
    };
    let k = argmax(&mut in_band.iter().copied());
    let peak = psd.power[k];
    let band_mean = in_band.iter().map(|&i| psd.power[i]).sum::<f64>() / in_band.len() as f64;
    if !(peak > 0.0) || peak <= band_mean * (1.0 + 1e-9) {
        return Err(undefined("flat spectrum, no dominant in-band peak"));
    }
    let f = if k + 1 < psd.power.len() {
        quadratic_peak_interp(&psd, k)?
    } else {
        psd.frequency(k)
    };
    let global = argmax(&mut (1..psd.power.len()));
    let (signal, rest) = in_band.iter().fold((0.0, 0.0), |(s, r), &i| {
        if i.abs_diff(k) <= 1 {
            (s + psd.power[i], r)
        } else {
            (s, r + psd.power[i])
        }
    });
    Ok(HrEstimate {
        bpm: 60.0 * f,
        peak_bin: k,
        snr_db: 10.0 * (signal / rest).log10(),
        out_of_band: !band.contains(psd.frequency(global)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
    /// `None` with fewer than two pairs or zero variance on either side.
    pub pearson_r: Option<f64>,
    pub n: usize,
}

pub fn metrics(pred_bpm: &[f64], gt_bpm: &[f64]) -> Result<MetricsRow> {
    if pred_bpm.len() != gt_bpm.len() {
        return Err(invalid(format!(
            "{} predictions for {} ground-truth values",
            pred_bpm.len(),
            gt_bpm.len()
        )));
    }
    if pred_bpm.is_empty() {
        return Err(invalid("metrics need at least one pair"));
    }
    let n = pred_bpm.len();
    let diffs: Vec<f64> = pred_bpm.iter().zip(gt_bpm).map(|(p, g)| p - g).collect();
    let mae = diffs.iter().map(|d| d.abs()).sum::<f64>() / n as f64;
    let rmse = (diffs.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    let r = if n >= 2 { pearson_r(pred_bpm, gt_bpm).ok() } else { None };
    Ok(MetricsRow {
        mae_bpm: mae,
        // Rounding can leave the root a hair below the mean of |d|.
        rmse_bpm: rmse.max(mae),
        pearson_r: r,
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrPair {
    pub clip: String,
    pub pred_bpm: f64,
    pub gt_bpm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformPair {
    pub clip: String,
    pub pred: RealSignal,
    pub gt: RealSignal,
}

pub const REPORT_CSV: &str = "report.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SCATTER_SVG: &str = "scatter.svg";
pub const WAVEFORM_SVG: &str = "waveform.svg";
pub const PSD_SVG: &str = "psd.svg";

pub fn report_csv(pairs: &[HrPair]) -> String {
    let mut out = String::from("clip,pred_bpm,gt_bpm,abs_err\n");
    for p in pairs {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(&p.clip),
            format_sig9(p.pred_bpm),
            format_sig9(p.gt_bpm),
            format_sig9((p.pred_bpm - p.gt_bpm).abs())
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn metrics_csv(m: &MetricsRow) -> String {
    format!(
        "n,mae_bpm,rmse_bpm,pearson_r\n{},{},{},{}\n",
        m.n,
        format_sig9(m.mae_bpm),
        format_sig9(m.rmse_bpm),
        m.pearson_r.map(format_sig9).unwrap_or_default()
    )
}

/// Writes the CSV tables and the three plots into `out_dir` and returns the
/// metrics over all pairs.
pub fn render_report(pairs: &[HrPair], waveforms: Option<&WaveformPair>, band: Band, out_dir: &Path) -> Result<MetricsRow> {
    let pred: Vec<f64> = pairs.iter().map(|p| p.pred_bpm).collect();
    let gt: Vec<f64> = pairs.iter().map(|p| p.gt_bpm).collect();
    let m = metrics(&pred, &gt)?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        fs::write(&path, text).at(&path)?;
        Ok(path)
    };
    write(REPORT_CSV, report_csv(pairs))?;
    write(METRICS_CSV, metrics_csv(&m))?;
    write(SCATTER_SVG, scatter_svg(pairs))?;
    write(WAVEFORM_SVG, waveform_svg(waveforms))?;
    write(PSD_SVG, psd_svg(waveforms, band)?)?;
    Ok(m)
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const PRED_COLOUR: &str = "#d62728";
const GT_COLOUR: &str = "#1f77b4";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Data-to-pixel mapping with labelled axes.
struct Canvas {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    body: String,
}

impl Canvas {
    fn new(title: &str, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> Self {
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
        let (y0, y1) = if y1 > y0 { (y0, y1) } else { (y0 - 1.0, y0 + 1.0) };
        let mut c = Self {
            x0,
            x1,
            y0,
            y1,
            body: String::new(),
        };
        let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(
            c.body,
            "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-size=\"18\">{}</text>",
            num(WIDTH / 2.0),
            escape(title)
        );
        let _ = writeln!(
            c.body,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#000\"/>",
            num(l),
            num(t),
            num(r - l),
            num(b - t)
        );
        for i in 0..=5 {
            let fx = x0 + (x1 - x0) * i as f64 / 5.0;
            let px = c.px(fx);
            let _ = writeln!(
                c.body,
                "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"#000\"/><text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
                num(b),
                num(b + 5.0),
                num(b + 20.0),
                tick(fx)
            );
            let fy = y0 + (y1 - y0) * i as f64 / 5.0;
            let py = c.py(fy);
            let _ = writeln!(
                c.body,
                "<line x1=\"{}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"#000\"/><text x=\"{}\" y=\"{py}\" text-anchor=\"end\" dominant-baseline=\"middle\" font-size=\"12\">{}</text>",
                num(l - 5.0),
                num(l),
                num(l - 8.0),
                tick(fy)
            );
        }
        let _ = writeln!(
            c.body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            num((l + r) / 2.0),
            num(HEIGHT - 20.0),
            escape(x_label)
        );
        let _ = writeln!(
            c.body,
            "<text x=\"20\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 20 {})\">{}</text>",
            num((t + b) / 2.0),
            num((t + b) / 2.0),
            escape(y_label)
        );
        c
    }

    fn px(&self, x: f64) -> String {
        num(LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT))
    }

    fn py(&self, y: f64) -> String {
        num(HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM))
    }

    fn path_data(&self, pts: impl Iterator<Item = (f64, f64)>) -> String {
        let mut d = String::new();
        for (i, (x, y)) in pts.enumerate() {
            let _ = write!(d, "{}{},{} ", if i == 0 { 'M' } else { 'L' }, self.px(x), self.py(y));
        }
        d.trim_end().to_string()
    }

    fn path(&mut self, id: &str, colour: &str, d: &str) {
        let _ = writeln!(
            self.body,
            "<path id=\"{id}\" d=\"{d}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>"
        );
    }

    fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, colour)) in entries.iter().enumerate() {
            let y = TOP + 20.0 + 18.0 * i as f64;
            let x = WIDTH - RIGHT - 150.0;
            let _ = writeln!(
                self.body,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{colour}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\" dominant-baseline=\"middle\" font-size=\"12\">{}</text>",
                num(x),
                num(y),
                num(x + 25.0),
                num(y),
                num(x + 32.0),
                num(y),
                escape(label)
            );
        }
    }

    fn note(&mut self, text: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            num(WIDTH / 2.0),
            num(HEIGHT / 2.0),
            escape(text)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{}</svg>\n",
            self.body,
            w = WIDTH,
            h = HEIGHT
        )
    }
}

fn tick(v: f64) -> String {
    let s = if v.abs() >= 100.0 { format!("{v:.0}") } else { format!("{v:.1}") };
    if s == "-0.0" || s == "-0" {
        s[1..].to_string()
    } else {
        s
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn scatter_svg(pairs: &[HrPair]) -> String {
    let (lo, hi) = range(pairs.iter().flat_map(|p| [p.pred_bpm, p.gt_bpm]));
    let (lo, hi) = if lo.is_finite() { (lo - 5.0, hi + 5.0) } else { (40.0, 180.0) };
    let mut c = Canvas::new("Predicted vs ground-truth heart rate", "Ground-truth HR (bpm)", "Predicted HR (bpm)", (lo, hi), (lo, hi));
    let _ = writeln!(
        c.body,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\" stroke-dasharray=\"6 4\"/>",
        c.px(lo),
        c.py(lo),
        c.px(hi),
        c.py(hi)
    );
    for p in pairs {
        let _ = writeln!(
            c.body,
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{PRED_COLOUR}\"><title>{}</title></circle>",
            c.px(p.gt_bpm),
            c.py(p.pred_bpm),
            escape(&p.clip)
        );
    }
    c.finish()
}

fn display_form(s: &RealSignal) -> Vec<f64> {
    let scale = s.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    standardize(s.samples(), scale).unwrap_or_else(|_| s.samples().to_vec())
}

pub fn waveform_svg(w: Option<&WaveformPair>) -> String {
    let Some(w) = w else {
        let mut c = Canvas::new("Waveform", "Time (s)", "Amplitude (z-score)", (0.0, 1.0), (-1.0, 1.0));
        c.note("no waveform available");
        return c.finish();
    };
    let pred = display_form(&w.pred);
    let gt = display_form(&w.gt);
    let t_max = w.pred.duration_s().max(w.gt.duration_s());
    let (lo, hi) = range(pred.iter().chain(&gt).copied());
    let mut c = Canvas::new(&format!("Waveform: {}", w.clip), "Time (s)", "Amplitude (z-score)", (0.0, t_max), (lo, hi));
    let d_gt = c.path_data(gt.iter().enumerate().map(|(i, &v)| (i as f64 / w.gt.rate_hz(), v)));
    let d_pred = c.path_data(pred.iter().enumerate().map(|(i, &v)| (i as f64 / w.pred.rate_hz(), v)));
    c.path("gt", GT_COLOUR, &d_gt);
    c.path("pred", PRED_COLOUR, &d_pred);
    c.legend(&[("ground truth", GT_COLOUR), ("prediction", PRED_COLOUR)]);
    c.finish()
}

/// Normalized in-view PSD points `(bpm, power / max)`.
fn psd_points(s: &RealSignal, max_hz: f64) -> Result<Vec<(f64, f64)>> {
    let psd = windowed_psd(s)?;
    let ks: Vec<usize> = (1..psd.power.len()).filter(|&k| psd.frequency(k) <= max_hz).collect();
    let peak = ks.iter().map(|&k| psd.power[k]).fold(0.0f64, f64::max);
    let norm = if peak > 0.0 { peak } else { 1.0 };
    Ok(ks.iter().map(|&k| (60.0 * psd.frequency(k), psd.power[k] / norm)).collect())
}

pub fn psd_svg(w: Option<&WaveformPair>, band: Band) -> Result<String> {
    let max_hz = band.hi_hz * 1.2;
    let Some(w) = w else {
        let mut c = Canvas::new("Power spectral density", "Frequency (bpm)", "Normalized power", (0.0, 60.0 * max_hz), (0.0, 1.0));
        c.note("no waveform available");
        return Ok(c.finish());
    };
    let gt = psd_points(&w.gt, max_hz)?;
    let pred = psd_points(&w.pred, max_hz)?;
    let mut c = Canvas::new(&format!("Power spectral density: {}", w.clip), "Frequency (bpm)", "Normalized power", (0.0, 60.0 * max_hz), (0.0, 1.05));
    for edge in [band.lo_hz, band.hi_hz] {
        let _ = writeln!(
            c.body,
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#bbb\" stroke-dasharray=\"3 3\"/>",
            c.py(0.0),
            c.py(1.05),
            x = c.px(60.0 * edge)
        );
    }
    let d_gt = c.path_data(gt.into_iter());
    let d_pred = c.path_data(pred.into_iter());
    c.path("gt", GT_COLOUR, &d_gt);
    c.path("pred", PRED_COLOUR, &d_pred);
    c.legend(&[("ground truth", GT_COLOUR), ("prediction", PRED_COLOUR)]);
    Ok(c.finish())
}
