//! Run-time constants, overridable from `key=value` files.
//!
//! Recognised keys: `tau`, `lambda`, `s0`, `eps`, `band_lo`, `band_hi`,
//! `window_s`. Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use crate::dceb::ExchangeConfig;
use crate::error::{Error, IoContext, Result};
use crate::numerics::Band;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    /// Confidence threshold of the decoder mask, used when weights are initialized.
    pub tau: f64,
    /// Mask penalty scale, used when weights are initialized.
    pub lambda: f64,
    pub exchange: ExchangeConfig,
    pub band: Band,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda: 1.0,
            exchange: ExchangeConfig::default(),
            band: Band::HEART_RATE,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("value for {key} is not a number")))?;
            if !value.is_finite() {
                return Err(err(format!("value for {key} must be finite")));
            }
            match key {
                "tau" => cfg.tau = value,
                "lambda" => cfg.lambda = value,
                "s0" => cfg.exchange.score_offset = value,
                "eps" => cfg.exchange.eps = value,
                "band_lo" => cfg.band.lo_hz = value,
                "band_hi" => cfg.band.hi_hz = value,
                "window_s" => cfg.exchange.window_s = value,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e,
        })?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        if self.lambda < 0.0 {
            return Err("lambda must be non-negative".into());
        }
        if self.exchange.eps < 0.0 {
            return Err("eps must be non-negative".into());
        }
        if self.exchange.window_s <= 0.0 {
            return Err("window_s must be positive".into());
        }
        if !(self.band.lo_hz > 0.0 && self.band.lo_hz < self.band.hi_hz) {
            return Err("band needs 0 < band_lo < band_hi".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides() {
        let p = Path::new("run.cfg");
        let cfg = RunConfig::parse("# comment\n\ntau = 0.4\ns0=3\nband_lo=0.7\nband_hi=2.5\nwindow_s=4\n", p).unwrap();
        assert_eq!(cfg.tau, 0.4);
        assert_eq!(cfg.exchange.score_offset, 3.0);
        assert_eq!(cfg.band, Band { lo_hz: 0.7, hi_hz: 2.5 });
        assert_eq!(cfg.exchange.window_s, 4.0);
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(RunConfig::parse("", p).unwrap(), RunConfig::default());
    }

    #[test]
    fn reports_bad_lines() {
        let p = Path::new("run.cfg");
        for (text, line) in [("tau=0.5\nfoo=1\n", 2), ("tau\n", 1), ("eps=abc\n", 1), ("lambda=inf\n", 1)] {
            match RunConfig::parse(text, p) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(RunConfig::parse("band_lo=4\n", p).is_err());
    }
}
