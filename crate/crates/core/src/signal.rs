//! Sampled waveforms and small array helpers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};

/// Sampled signal with an explicit sampling frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return domain(format!("sampling frequency must be > 0, got {fs}"));
        }
        if samples.len() < 2 {
            return shape(format!("waveform needs >= 2 samples, got {}", samples.len()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return domain("waveform contains non-finite samples");
        }
        Ok(Self { samples, fs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fs
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn zscored(&self) -> Self {
        Self {
            samples: zscore(&self.samples),
            fs: self.fs,
        }
    }

    /// Writes a one-column CSV with header `value` plus a `<path>.json`
    /// sidecar carrying `fs`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.samples.len() * 16 + 8);
        out.push_str("value\n");
        for v in &self.samples {
            out.push_str(&format!("{v:e}"));
            out.push('\n');
        }
        fs::write(path, out)?;
        let sidecar = serde_json::json!({ "fs": self.fs });
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Reads a CSV written by [`Waveform::write_csv`]. `fs` comes from the
    /// sidecar unless given explicitly.
    pub fn read_csv(path: &Path, fs: Option<f64>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "value" => {}
            other => {
                return Err(Error::Parse {
                    record: 0,
                    message: format!("expected header `value`, got {other:?}"),
                })
            }
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line.trim().parse().map_err(|e| Error::Parse {
                record: i + 1,
                message: format!("{e}: {line:?}"),
            })?;
            samples.push(v);
        }
        let fs = match fs {
            Some(f) => f,
            None => {
                let side = fs::read_to_string(sidecar_path(path))?;
                let v: serde_json::Value = serde_json::from_str(&side)?;
                v["fs"].as_f64().ok_or_else(|| Error::Parse {
                    record: 0,
                    message: "sidecar missing numeric `fs`".into(),
                })?
            }
        };
        Waveform::new(samples, fs)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Nine significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Zero mean, unit population variance. Constant input maps to zeros.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    let sd = std_dev(x);
    if sd <= f64::EPSILON * m.abs().max(1.0) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - m) / sd).collect()
}

/// First differences `x[i+1] - x[i]`.
pub fn diff(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Linear resampling of `x` (rate `from_fs`) onto `n` samples at `to_fs`.
pub fn resample_linear(x: &[f64], from_fs: f64, to_fs: f64, n: usize) -> Vec<f64> {
    let last = x.len() - 1;
    (0..n)
        .map(|i| {
            let pos = i as f64 * from_fs / to_fs;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = (pos - lo as f64).clamp(0.0, 1.0);
            x[lo] + (x[hi] - x[lo]) * frac
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_has_unit_moments() {
        let z = zscore(&[1.0, 2.0, 3.0, 10.0]);
        assert!(mean(&z).abs() < 1e-12);
        assert!((std_dev(&z) - 1.0).abs() < 1e-12);
        assert_eq!(zscore(&[4.0, 4.0, 4.0]), vec![0.0; 3]);
    }

    #[test]
    fn waveform_validation() {
        assert!(Waveform::new(vec![1.0], 10.0).is_err());
        assert!(Waveform::new(vec![1.0, 2.0], 0.0).is_err());
        assert!(Waveform::new(vec![1.0, f64::NAN], 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let w = Waveform::new(vec![0.1, -2.5, 3.25e-7], 120.0).unwrap();
        w.write_csv(&path).unwrap();
        let back = Waveform::read_csv(&path, None).unwrap();
        assert_eq!(back.fs, 120.0);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-30));
        }
    }

    #[test]
    fn resample_identity_and_upsample() {
        let x = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(resample_linear(&x, 10.0, 10.0, 4), x.to_vec());
        let up = resample_linear(&x, 1.0, 2.0, 7);
        assert_eq!(up, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }
}
