//! Quick oracle and invariant checks runnable from the command line.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{pos_method, rgb_trace};
use crate::dceb::{exchange_block, spectral_confidence, ExchangeConfig, ExchangeWeights, FeatureVolume};
use crate::decoder::{build_mask, masked_mhsa_with_weights, AttentionWeights, TokenSet};
use crate::error::Result;
use crate::eval::{estimate_hr, metrics};
use crate::layers::{Linear, Matrix};
use crate::media_io::{parse_signal_csv, signal_to_csv, NamedTensorFile, TensorEntry};
use crate::numerics::{circular_xcorr_slices, Band, RealSignal};
use crate::sdmu::{pdc_forward, FeatureMap2D, PdcWeights};
use crate::synth::{gen_clip, SynthSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<Option<String>>;

/// Runs every suite; a suite fails when it returns a message or an error.
pub fn run_all() -> Vec<SuiteResult> {
    let suites: [(&'static str, Check); 8] = [
        ("fft_xcorr", fft_xcorr),
        ("pdc_dc_rejection", pdc_dc_rejection),
        ("attention_mask", attention_mask),
        ("gated_identity", gated_identity),
        ("spectral_confidence", spectral_discrimination),
        ("pos_recovery", pos_recovery),
        ("format_round_trip", format_round_trip),
        ("metrics", metric_identities),
    ];
    suites
        .into_iter()
        .map(|(name, check)| match check() {
            Ok(None) => SuiteResult {
                name,
                passed: true,
                detail: "ok".into(),
            },
            Ok(Some(msg)) => SuiteResult {
                name,
                passed: false,
                detail: msg,
            },
            Err(e) => SuiteResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn fail(msg: impl Into<String>) -> Result<Option<String>> {
    Ok(Some(msg.into()))
}

fn fft_xcorr() -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(2..200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = circular_xcorr_slices(&x, &y)?;
        for (lag, v) in r.iter().enumerate() {
            let o: f64 = (0..n).map(|t| x[t] * y[(t + lag) % n]).sum();
            if (v - o).abs() > 1e-9 {
                return fail(format!("n={n} lag={lag}: {v} vs {o}"));
            }
        }
    }
    Ok(None)
}

fn pdc_dc_rejection() -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut w = PdcWeights::zeros(3, 2);
    for v in w.wc.iter_mut().chain(&mut w.wr).chain(&mut w.wf) {
        *v = rng.random_range(-1.0..1.0);
    }
    let data: Vec<f64> = (0..2 * 5 * 9).map(|_| rng.random_range(-1024..=1024) as f64 / 1024.0).collect();
    let x = FeatureMap2D::new(2, 5, 9, 30.0, data)?;
    let base = pdc_forward(&x, &w)?;
    for c in [-10.0, 0.0, 10.0] {
        if pdc_forward(&x.map(|v| v + c), &w)? != base {
            return fail(format!("offset {c} changed the output"));
        }
    }
    let flat = pdc_forward(&FeatureMap2D::new(2, 5, 9, 30.0, vec![3.25; 90])?, &w)?;
    if flat.data().iter().any(|&v| v != 0.0) {
        return fail("constant input gave a non-zero response");
    }
    Ok(None)
}

fn attention_mask() -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, q, d) = (8, 8, 16);
    let mut tokens = Matrix::zeros(2 * t + 1 + q, d);
    tokens.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    let x = TokenSet::new(t, q, tokens)?;
    let mut lin = || {
        let mut l = Linear::zeros(d, d);
        l.weight.data.iter_mut().for_each(|v| *v = rng.random_range(-0.25..0.25));
        l
    };
    let w = AttentionWeights {
        heads: 4,
        query: lin(),
        key: lin(),
        value: lin(),
        output: lin(),
    };
    let mask = build_mask(t, q, 0.3, 0.7, 1.0, 0.5)?;
    let (_, heads) = masked_mhsa_with_weights(&x, &mask, &w)?;
    for a in &heads {
        for i in 0..a.rows {
            let sum: f64 = a.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return fail(format!("row {i} sums to {sum}"));
            }
            for j in 2 * t + 1..a.cols {
                let blocked = i < 2 * t || (i > 2 * t && i != j);
                if blocked && a.get(i, j) != 0.0 {
                    return fail(format!("blocked entry ({i}, {j}) = {}", a.get(i, j)));
                }
            }
        }
    }
    Ok(None)
}

fn gated_identity() -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, t) = (3, 24);
    let v = FeatureVolume::new(c, t, 4, 4, 30.0, (0..c * t * 16).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let s = FeatureMap2D::new(c, 4, t, 30.0, (0..c * 4 * t).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut w = ExchangeWeights::zeros(c, (2, 2));
    w.proj_tilde_s = Matrix::identity(c);
    w.proj_tilde_v = Matrix::identity(c);
    w.conv_v2s.fill(0.5);
    w.alpha_s2v.fill(-20.0);
    w.alpha_v2s.fill(-20.0);
    let out = exchange_block(&v, &s, &w, &ExchangeConfig::default())?;
    if out.video != v || out.stmap != s {
        return fail("closed gates changed the features");
    }
    Ok(None)
}

fn spectral_discrimination() -> Result<Option<String>> {
    let cfg = ExchangeConfig::default();
    let (mut sine, mut noise) = (0.0, 0.0);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rng.random_range(0.8..2.8);
        let s: Vec<f64> = (0..300).map(|i| 2f64.sqrt() * (2.0 * PI * f * i as f64 / 30.0).sin()).collect();
        let n: Vec<f64> = (0..300).map(|_| rng.random_range(-3f64.sqrt()..3f64.sqrt())).collect();
        sine += spectral_confidence(&vec![s], 60, 30, &cfg)?.mean();
        noise += spectral_confidence(&vec![n], 60, 30, &cfg)?.mean();
    }
    if sine / 10.0 < noise / 10.0 + 0.1 {
        return fail(format!("sine {} vs noise {}", sine / 10.0, noise / 10.0));
    }
    Ok(None)
}

fn pos_recovery() -> Result<Option<String>> {
    let spec = SynthSpec {
        duration_s: 12.0,
        width: 32,
        height: 32,
        ..SynthSpec::default()
    };
    let clip = gen_clip(&spec)?;
    let bvp = pos_method(&rgb_trace(&clip.frames)?, Band::HEART_RATE)?;
    let hr = estimate_hr(&bvp, Band::HEART_RATE)?;
    if (hr.bpm - spec.hr_bpm).abs() > 1.0 {
        return fail(format!("estimated {} bpm for a {} bpm clip", hr.bpm, spec.hr_bpm));
    }
    Ok(None)
}

fn format_round_trip() -> Result<Option<String>> {
    let mut f = NamedTensorFile::new();
    f.push(TensorEntry::new("w", vec![2, 3], vec![1.5, -2.0, 0.0, 3.25, 1e-7, -1e7])?)?;
    let bytes = f.to_bytes();
    if NamedTensorFile::from_bytes(&bytes)?.to_bytes() != bytes {
        return fail("tensor file bytes changed on round trip");
    }
    for cut in 0..bytes.len() {
        if NamedTensorFile::from_bytes(&bytes[..cut]).is_ok() {
            return fail(format!("truncation at {cut} bytes was accepted"));
        }
    }
    let s = RealSignal::new((0..50).map(|i| (i as f64 * 0.37).sin()).collect(), 30.0)?;
    let back = parse_signal_csv(&signal_to_csv(&s), Path::new("<memory>"))?;
    if back.samples().iter().zip(s.samples()).any(|(a, b)| (a - b).abs() > 1e-8) {
        return fail("signal CSV lost precision");
    }
    Ok(None)
}

fn metric_identities() -> Result<Option<String>> {
    let m = metrics(&[70.0, 80.0, 90.0], &[72.0, 78.0, 95.0])?;
    if (m.mae_bpm - 3.0).abs() > 1e-9 || (m.rmse_bpm - 3.317).abs() > 5e-4 {
        return fail(format!("MAE {} RMSE {}", m.mae_bpm, m.rmse_bpm));
    }
    Ok(None)
}
