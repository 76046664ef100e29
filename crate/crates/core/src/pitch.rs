//! Monophonic fundamental-frequency tracking.
//!
//! A single-candidate autocorrelation tracker: every frame is Hann-windowed,
//! its autocorrelation is normalized by the window's own autocorrelation,
//! and the strongest lag peak in `[sr/fmax, sr/fmin]` (with a small octave
//! cost favouring shorter lags) is refined by parabolic interpolation. A
//! frame is voiced iff the refined peak strength reaches the voicing
//! threshold.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PitchConfig {
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub hop_s: f64,
    pub frame_s: f64,
    /// Minimum normalized-autocorrelation peak strength, in [0, 1].
    pub voicing_threshold: f64,
    /// Penalty per octave of lag, applied when ranking candidate peaks.
    pub octave_cost: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin_hz: 75.0,
            fmax_hz: 600.0,
            hop_s: 0.010,
            frame_s: 0.040,
            voicing_threshold: 0.45,
            octave_cost: 0.01,
        }
    }
}

impl PitchConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.fmin_hz > 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz < nyquist) {
            return Err(Error::Config(format!(
                "pitch range must satisfy 0 < fmin ({}) < fmax ({}) < sample_rate/2 ({nyquist})",
                self.fmin_hz, self.fmax_hz
            )));
        }
        if !(self.hop_s > 0.0 && self.hop_s <= self.frame_s) {
            return Err(Error::Config(format!(
                "hop_s ({}) must be positive and no longer than frame_s ({})",
                self.hop_s, self.frame_s
            )));
        }
        if !(0.0..=1.0).contains(&self.voicing_threshold) {
            return Err(Error::Config(format!(
                "voicing_threshold {} outside [0, 1]",
                self.voicing_threshold
            )));
        }
        let frame_len = (self.frame_s * f64::from(sample_rate)).round() as usize;
        let max_lag = (f64::from(sample_rate) / self.fmin_hz).ceil() as usize;
        if frame_len < max_lag + 2 {
            return Err(Error::Config(format!(
                "frame of {frame_len} samples cannot hold a period of fmin ({} Hz)",
                self.fmin_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchFrame {
    /// Centre of the analysis window, in seconds.
    pub t: f64,
    /// `None` marks an unvoiced frame.
    pub f0_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitchContour {
    pub hop_s: f64,
    pub frames: Vec<PitchFrame>,
}

impl PitchContour {
    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().filter_map(|f| f.f0_hz)
    }

    /// Writes `t,f0` rows, with `f0=-1` for unvoiced frames.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(out, "t,f0")?;
            for f in &self.frames {
                writeln!(out, "{},{}", f.t, f.f0_hz.unwrap_or(-1.0))?;
            }
            out.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut frames = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let parse = |idx: usize| -> Result<f64> {
                row.get(idx)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Input(format!("{}: bad contour row {}", path.display(), i + 1)))
            };
            let t = parse(0)?;
            let f0 = parse(1)?;
            frames.push(PitchFrame {
                t,
                f0_hz: (f0 > 0.0).then_some(f0),
            });
        }
        let hop_s = match frames.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => PitchConfig::default().hop_s,
        };
        Ok(Self { hop_s, frames })
    }
}

/// Tracks f0 over `samples` at `sample_rate`.
pub fn track_pitch(samples: &[f64], sample_rate: u32, cfg: &PitchConfig) -> Result<PitchContour> {
    if samples.is_empty() {
        return Err(Error::Input("cannot track pitch of empty audio".into()));
    }
    if sample_rate < 8000 {
        return Err(Error::Input(format!(
            "sample rate {sample_rate} Hz below the 8000 Hz minimum"
        )));
    }
    cfg.validate(sample_rate)?;

    let sr = f64::from(sample_rate);
    let frame_len = (cfg.frame_s * sr).round() as usize;
    let hop = ((cfg.hop_s * sr).round() as usize).max(1);
    let min_lag = ((sr / cfg.fmax_hz).floor() as usize).max(1);
    let max_lag = (sr / cfg.fmin_hz).ceil() as usize;

    let window: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (frame_len - 1) as f64).cos())
        .collect();
    let window_ac = autocorrelation(&window, max_lag + 1);
    let window_ac: Vec<f64> = window_ac.iter().map(|v| v / window_ac[0]).collect();

    let n_frames = if samples.len() >= frame_len {
        (samples.len() - frame_len) / hop + 1
    } else {
        0
    };

    let mut buf = vec![0.0; frame_len];
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = i * hop;
        let chunk = &samples[start..start + frame_len];
        let mean = chunk.iter().sum::<f64>() / frame_len as f64;
        for ((b, &s), &w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = (s - mean) * w;
        }
        let f0_hz = frame_f0(&buf, &window_ac, min_lag, max_lag, sr, cfg);
        frames.push(PitchFrame {
            t: (start as f64 + frame_len as f64 / 2.0) / sr,
            f0_hz,
        });
    }

    Ok(PitchContour {
        hop_s: hop as f64 / sr,
        frames,
    })
}

fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    (0..=max_lag)
        .map(|lag| {
            if lag >= x.len() {
                return 0.0;
            }
            x[..x.len() - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn frame_f0(
    windowed: &[f64],
    window_ac: &[f64],
    min_lag: usize,
    max_lag: usize,
    sr: f64,
    cfg: &PitchConfig,
) -> Option<f64> {
    let raw = autocorrelation(windowed, max_lag + 1);
    let energy = raw[0];
    if energy.is_nan() || energy <= f64::MIN_POSITIVE {
        return None;
    }
    let r: Vec<f64> = raw
        .iter()
        .zip(window_ac)
        .map(|(v, w)| if *w > 0.0 { v / energy / w } else { 0.0 })
        .collect();

    let mut best: Option<(f64, f64, f64)> = None; // (score, strength, lag)
    for lag in min_lag.max(1)..=max_lag {
        let (prev, cur, next) = (r[lag - 1], r[lag], r[lag + 1]);
        if !(cur > prev && cur >= next) {
            continue;
        }
        let denom = prev - 2.0 * cur + next;
        let delta = if denom.abs() > f64::EPSILON {
            (0.5 * (prev - next) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let strength = cur - 0.25 * (prev - next) * delta;
        let lag_s = (lag as f64 + delta) / sr;
        let score = strength - cfg.octave_cost * (cfg.fmin_hz * lag_s).log2();
        if best.is_none_or(|(s, _, _)| score > s) {
            best = Some((score, strength, lag as f64 + delta));
        }
    }

    let (_, strength, lag) = best?;
    let f0 = sr / lag;
    (strength >= cfg.voicing_threshold && f0 >= cfg.fmin_hz && f0 <= cfg.fmax_hz).then_some(f0)
}

/// Synthesizes a unit-amplitude sine, used by tests and the audio renderer.
pub fn sine(freq_hz: f64, sample_rate: u32, duration_s: f64, amplitude: f64) -> Vec<f64> {
    let n = (duration_s * f64::from(sample_rate)).round() as usize;
    let sr = f64::from(sample_rate);
    (0..n)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sr).sin())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn sine_at_220_is_recovered() {
        let x = sine(220.0, 16_000, 1.0, 0.5);
        let c = track_pitch(&x, 16_000, &PitchConfig::default()).unwrap();
        let m = median(c.voiced().collect());
        assert!((m - 220.0).abs() / 220.0 < 0.01, "median {m}");
    }

    #[test]
    fn silence_is_unvoiced() {
        let c = track_pitch(&vec![0.0; 16_000], 16_000, &PitchConfig::default()).unwrap();
        assert!(!c.frames.is_empty());
        assert!(c.frames.iter().all(|f| f.f0_hz.is_none()));
    }

    #[test]
    fn frame_count_matches_formula() {
        let cfg = PitchConfig::default();
        for n in [640usize, 641, 800, 16_000, 16_123] {
            let c = track_pitch(&vec![0.1; n], 16_000, &cfg).unwrap();
            let dur = n as f64 / 16_000.0;
            let expected = ((dur - cfg.frame_s) / cfg.hop_s + 1e-9).floor() as usize + 1;
            assert_eq!(c.frames.len(), expected, "n = {n}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = PitchConfig::default();
        assert!(track_pitch(&[], 16_000, &cfg).is_err());
        assert!(track_pitch(&[0.0; 100], 4000, &cfg).is_err());
        let bad = PitchConfig {
            fmin_hz: 700.0,
            ..cfg.clone()
        };
        assert!(track_pitch(&[0.0; 1000], 16_000, &bad).is_err());
        let bad = PitchConfig { hop_s: 0.05, ..cfg };
        assert!(track_pitch(&[0.0; 1000], 16_000, &bad).is_err());
    }

    #[test]
    fn contour_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let c = PitchContour {
            hop_s: 0.01,
            frames: vec![
                PitchFrame {
                    t: 0.02,
                    f0_hz: Some(220.5),
                },
                PitchFrame { t: 0.03, f0_hz: None },
            ],
        };
        c.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t,f0\n0.02,220.5\n0.03,-1\n");
        let back = PitchContour::read_csv(&path).unwrap();
        assert_eq!(back.frames, c.frames);
    }
}
