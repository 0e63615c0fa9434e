use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use physnext::backbones::physnext_forward;
use physnext::baselines::{extract, rgb_trace, Method};
use physnext::config::RunConfig;
use physnext::eval::{estimate_hr, render_report, HrPair, WaveformPair};
use physnext::media_io::{clip_gt_path, read_clip, read_signal_csv, read_tensor, write_clip, write_signal_csv};
use physnext::selftest;
use physnext::stmap::{build_stmap, read_stmap, write_stmap, DEFAULT_GRID};
use physnext::synth::{gen_clip, SynthSpec};
use physnext::weights::{load_weights, ModelConfig, ModelWeights};
use physnext::{Error, Result};

const GT_FILE: &str = "gt.csv";

#[derive(Parser)]
#[command(name = "physnext", version, about = "Remote photoplethysmography toolkit")]
struct Cli {
    /// key=value file overriding tau, lambda, s0, eps, band_lo, band_hi, window_s.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pulsatile clip and its ground-truth signal.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long, default_value_t = 72.0)]
        hr: f64,
        #[arg(long, default_value_t = 4.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        drift_amp: f64,
        #[arg(long, default_value_t = 0.1)]
        drift_hz: f64,
        #[arg(long, default_value_t = 0.0)]
        motion: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
    },
    /// Build a spatial-temporal map from a clip.
    Stmap {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GRID.0)]
        rows: usize,
        #[arg(long, default_value_t = DEFAULT_GRID.1)]
        cols: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a pulse signal with a classical method.
    Baseline {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the dual-stream network on a clip and its STMap.
    Infer {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        stmap: PathBuf,
        /// Weight file; without it weights are initialized from --seed.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted signals against ground truth and write a report.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
    /// Print the parameter count and tensor names.
    Params {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth {
            out,
            duration,
            fps,
            hr,
            amplitude,
            noise,
            drift_amp,
            drift_hz,
            motion,
            seed,
            width,
            height,
        } => {
            let spec = SynthSpec {
                duration_s: duration,
                fps,
                hr_bpm: hr,
                amplitude,
                noise_sigma: noise,
                drift_amp,
                drift_hz,
                motion_px: motion,
                seed,
                width,
                height,
                ..SynthSpec::default()
            };
            let clip = gen_clip(&spec)?;
            if clip.quality_warning() {
                eprintln!(
                    "warning: {:.1}% of channel values clipped",
                    100.0 * clip.clipped_fraction
                );
            }
            write_clip(&out, &clip.frames, Some(GT_FILE))?;
            write_signal_csv(&clip.bvp, &out.join(GT_FILE))?;
        }
        Command::Stmap { clip, rows, cols, out } => {
            let map = build_stmap(&read_clip(&clip)?, rows, cols)?;
            make_parent(&out)?;
            write_stmap(&map, &out)?;
        }
        Command::Baseline { clip, method, out } => {
            let trace = rgb_trace(&read_clip(&clip)?)?;
            make_parent(&out)?;
            write_signal_csv(&extract(method, &trace, cfg.band)?, &out)?;
        }
        Command::Infer {
            clip,
            stmap,
            weights,
            seed,
            out,
        } => {
            let clip = read_clip(&clip)?;
            let map = read_stmap(&stmap)?;
            // The network halves time twice; drop the tail that does not divide.
            let frames = clip.len().min(map.frames()) / 4 * 4;
            let clip = clip.truncated(frames)?;
            let map = map.truncated(frames)?;
            let model = ModelConfig {
                grid: map.grid(),
                tau: cfg.tau,
                lambda: cfg.lambda,
                ..ModelConfig::default()
            };
            let w = match weights {
                Some(path) => load_weights(&path, &model)?,
                None => ModelWeights::init(seed, &model),
            };
            let p = physnext_forward(&clip, &map, &w, &cfg.exchange)?;
            make_parent(&out)?;
            write_signal_csv(&p, &out)?;
        }
        Command::Eval { pred_dir, gt_dir, out } => {
            let names = prediction_names(&pred_dir)?;
            if names.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "no prediction CSVs in {}",
                    pred_dir.display()
                )));
            }
            let loaded: Vec<_> = names
                .par_iter()
                .map(|name| -> Result<_> {
                    let pred = read_signal_csv(&pred_dir.join(format!("{name}.csv")))?;
                    let gt = read_signal_csv(&gt_path(&gt_dir, name)?)?;
                    let pair = HrPair {
                        clip: name.clone(),
                        pred_bpm: estimate_hr(&pred, cfg.band)?.bpm,
                        gt_bpm: estimate_hr(&gt, cfg.band)?.bpm,
                    };
                    Ok((pair, pred, gt))
                })
                .collect::<Result<_>>()?;
            let pairs: Vec<HrPair> = loaded.iter().map(|(p, _, _)| p.clone()).collect();
            let (first, pred, gt) = &loaded[0];
            let wave = WaveformPair {
                clip: first.clip.clone(),
                pred: pred.clone(),
                gt: gt.clone(),
            };
            let m = render_report(&pairs, Some(&wave), cfg.band, &out)?;
            let r = m.pearson_r.map_or("undefined".to_string(), |r| format!("{r:.4}"));
            println!("clips {}  MAE {:.3} bpm  RMSE {:.3} bpm  R {r}", m.n, m.mae_bpm, m.rmse_bpm);
        }
        Command::Selftest => {
            let mut ok = true;
            for r in selftest::run_all() {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<20} {}", r.name, r.detail);
                ok &= r.passed;
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Params { weights } => {
            let model = ModelConfig {
                tau: cfg.tau,
                lambda: cfg.lambda,
                ..ModelConfig::default()
            };
            let file = match weights {
                Some(path) => {
                    let file = read_tensor(&path)?;
                    ModelWeights::from_tensor_file(&file, &model)?;
                    file
                }
                None => ModelWeights::init(0, &model).to_tensor_file(),
            };
            let total: usize = file.entries().iter().map(|e| e.data.len()).sum();
            let mut text = format!("parameters {total}\n");
            for e in file.entries() {
                text += &format!("{} {:?}\n", e.name, e.dims);
            }
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn make_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

/// Stems of the `*.csv` files in `dir`, sorted.
fn prediction_names(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names = Vec::new();
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Ground truth for `name`: `<gt_dir>/<name>.csv`, or the signal declared by
/// the clip directory `<gt_dir>/<name>`.
fn gt_path(gt_dir: &Path, name: &str) -> Result<PathBuf> {
    let csv = gt_dir.join(format!("{name}.csv"));
    if csv.is_file() {
        return Ok(csv);
    }
    let clip = gt_dir.join(name);
    if clip.is_dir() {
        if let Some(p) = clip_gt_path(&clip)? {
            return Ok(p);
        }
    }
    Err(Error::InvalidInput(format!("no ground truth for {name} in {}", gt_dir.display())))
}
