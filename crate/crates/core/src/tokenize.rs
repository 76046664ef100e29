//! Tonic normalization, k-level quantization and the token vocabulary.
//!
//! A pitch `f` relative to tonic `T` becomes `1200·log2(f/T)` cents; the
//! quantized value is that figure scaled to `k` levels per half step and
//! rounded half away from zero. Quantized values within a clamp range about
//! the tonic map to vocabulary ids; everything else maps to OOV.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pitch::PitchContour;

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;
const FIRST_VALUE_ID: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizerConfig {
    /// Levels per half step.
    pub k: u32,
    /// Octaves above and below the tonic kept in-vocabulary.
    pub clamp_octaves: u32,
    /// Emit the OOV slot for unvoiced frames instead of dropping them.
    pub rest_token: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            k: 5,
            clamp_octaves: 2,
            rest_token: false,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.clamp_octaves == 0 {
            return Err(Error::Config("clamp_octaves must be at least 1".into()));
        }
        Ok(())
    }
}

/// Bijection between clamped quantized values and dense ids. Id 0 is PAD and
/// id 1 is OOV; the value `v` maps to `v + R + 2` where `R = 12·k·clamp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    k: u32,
    clamp_octaves: u32,
    half_range: i32,
}

impl Vocabulary {
    pub fn new(cfg: &QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            k: cfg.k,
            clamp_octaves: cfg.clamp_octaves,
            half_range: (12 * cfg.k * cfg.clamp_octaves) as i32,
        })
    }

    pub fn len(&self) -> usize {
        2 * self.half_range as usize + 1 + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn clamp_octaves(&self) -> u32 {
        self.clamp_octaves
    }

    pub fn is_consistent_with(&self, cfg: &QuantizerConfig) -> bool {
        self.k == cfg.k && self.clamp_octaves == cfg.clamp_octaves
    }

    pub fn id(&self, value: i32) -> u32 {
        if value.abs() <= self.half_range {
            (value + self.half_range) as u32 + FIRST_VALUE_ID
        } else {
            OOV_ID
        }
    }

    pub fn value(&self, id: u32) -> Option<i32> {
        (id >= FIRST_VALUE_ID && (id as usize) < self.len())
            .then(|| (id - FIRST_VALUE_ID) as i32 - self.half_range)
    }

    pub fn encode(&self, values: &[i32]) -> Vec<u32> {
        values.iter().map(|&v| self.id(v)).collect()
    }
}

/// A tokenized recording (or a slice of one).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_id: String,
    /// Class index of the recording's raga.
    pub raga: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, source_id: impl Into<String>, raga: usize) -> Self {
        Self {
            ids,
            source_id: source_id.into(),
            raga,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_positive(f: f64, tonic: f64) -> Result<()> {
    if !(f > 0.0 && f.is_finite()) {
        return Err(Error::Input(format!("frequency must be positive, got {f}")));
    }
    if !(tonic > 0.0 && tonic.is_finite()) {
        return Err(Error::Input(format!("tonic must be positive, got {tonic}")));
    }
    Ok(())
}

/// Tonic-normalized pitch in cents.
pub fn normalize_cents(f: f64, tonic: f64) -> Result<f64> {
    check_positive(f, tonic)?;
    Ok(1200.0 * (f / tonic).log2())
}

/// Quantized pitch at `k` levels per half step, rounded half away from zero.
pub fn quantize(f: f64, tonic: f64, k: u32) -> Result<i32> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let cents = normalize_cents(f, tonic)?;
    Ok((cents * f64::from(k) / 100.0).round() as i32)
}

/// Quantized values of the voiced frames. With `rest_token`, unvoiced frames
/// are reported as `None` instead of being dropped.
pub fn quantize_contour(
    contour: &PitchContour,
    tonic: f64,
    cfg: &QuantizerConfig,
) -> Result<Vec<Option<i32>>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(contour.frames.len());
    for frame in &contour.frames {
        match frame.f0_hz {
            Some(f) => out.push(Some(quantize(f, tonic, cfg.k)?)),
            None if cfg.rest_token => out.push(None),
            None => {}
        }
    }
    Ok(out)
}

pub fn tokenize_contour(
    contour: &PitchContour,
    tonic: f64,
    cfg: &QuantizerConfig,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    if !vocab.is_consistent_with(cfg) {
        return Err(Error::Config(
            "vocabulary was built for a different quantizer configuration".into(),
        ));
    }
    let ids = quantize_contour(contour, tonic, cfg)?
        .into_iter()
        .map(|v| v.map_or(OOV_ID, |v| vocab.id(v)))
        .collect();
    Ok(TokenSequence::new(ids, "", 0))
}

/// Reads newline-delimited signed quantized values. Blank lines are skipped.
pub fn read_token_file(path: &Path) -> Result<Vec<i32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<i32>().map_err(|_| {
                Error::Input(format!("{}:{}: not an integer: `{line}`", path.display(), i + 1))
            })?,
        );
    }
    Ok(values)
}

pub fn write_token_file(path: &Path, values: &[i32]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    values
        .iter()
        .try_for_each(|v| writeln!(out, "{v}"))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pitch::PitchFrame;
    use proptest::prelude::*;

    const T: f64 = 146.83;

    fn contour(f0s: &[Option<f64>]) -> PitchContour {
        PitchContour {
            hop_s: 0.01,
            frames: f0s
                .iter()
                .enumerate()
                .map(|(i, &f0_hz)| PitchFrame {
                    t: i as f64 * 0.01,
                    f0_hz,
                })
                .collect(),
        }
    }

    #[test]
    fn cents_examples() {
        assert_eq!(normalize_cents(T, T).unwrap(), 0.0);
        assert!((normalize_cents(2.0 * T, T).unwrap() - 1200.0).abs() < 1e-9);
        let semitone = T * 2f64.powf(1.0 / 12.0);
        assert!((normalize_cents(semitone, T).unwrap() - 100.0).abs() < 1e-9);
        assert!(normalize_cents(0.0, T).is_err());
        assert!(normalize_cents(T, -1.0).is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(T, T, 5).unwrap(), 0);
        assert_eq!(quantize(T * 2f64.powf(1.0 / 12.0), T, 5).unwrap(), 5);
        assert_eq!(quantize(2.0 * T, T, 5).unwrap(), 60);
        assert!(quantize(T, T, 0).is_err());
        // Exactly half a level below the tonic rounds away from zero.
        let half_down = T * 2f64.powf(-10.0 / 1200.0);
        assert_eq!(quantize(half_down, T, 5).unwrap(), -1);
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new(&QuantizerConfig::default()).unwrap();
        assert_eq!(v.len(), 243);
        assert_eq!(v.id(-120), 2);
        assert_eq!(v.id(120), 242);
        assert_eq!(v.id(121), OOV_ID);
        assert_eq!(v.id(-121), OOV_ID);
        assert_eq!(v.value(v.id(60)), Some(60));
        assert_eq!(v.value(PAD_ID), None);
        assert_eq!(v.value(OOV_ID), None);
        assert_eq!(v.value(243), None);
    }

    #[test]
    fn constant_octave_contour() {
        let cfg = QuantizerConfig::default();
        let vocab = Vocabulary::new(&cfg).unwrap();
        let seq = tokenize_contour(&contour(&[Some(2.0 * T); 100]), T, &cfg, &vocab).unwrap();
        assert_eq!(seq.len(), 100);
        assert!(seq.ids.iter().all(|&id| id == vocab.id(60)));
    }

    #[test]
    fn unvoiced_frames_are_dropped() {
        let cfg = QuantizerConfig::default();
        let vocab = Vocabulary::new(&cfg).unwrap();
        let seq = tokenize_contour(&contour(&[None; 30]), T, &cfg, &vocab).unwrap();
        assert!(seq.is_empty());

        let rest = QuantizerConfig {
            rest_token: true,
            ..cfg
        };
        let seq = tokenize_contour(&contour(&[None, Some(T)]), T, &rest, &vocab).unwrap();
        assert_eq!(seq.ids, vec![OOV_ID, vocab.id(0)]);
    }

    #[test]
    fn three_octaves_below_is_oov() {
        let cfg = QuantizerConfig::default();
        let vocab = Vocabulary::new(&cfg).unwrap();
        let seq = tokenize_contour(&contour(&[Some(T / 8.0)]), T, &cfg, &vocab).unwrap();
        assert_eq!(seq.ids, vec![OOV_ID]);
    }

    #[test]
    fn mismatched_vocabulary_is_rejected() {
        let vocab = Vocabulary::new(&QuantizerConfig {
            k: 3,
            ..Default::default()
        })
        .unwrap();
        let r = tokenize_contour(&contour(&[Some(T)]), T, &QuantizerConfig::default(), &vocab);
        assert!(r.is_err());
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tok");
        write_token_file(&path, &[0, -5, 60, 121]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0\n-5\n60\n121\n");
        assert_eq!(read_token_file(&path).unwrap(), vec![0, -5, 60, 121]);
    }

    proptest! {
        #[test]
        fn transposition_invariance(f in 20.0f64..2000.0, t in 50.0f64..500.0, r in 0.5f64..2.0, k in 1u32..12) {
            prop_assert_eq!(quantize(r * f, r * t, k).unwrap(), quantize(f, t, k).unwrap());
        }

        #[test]
        fn monotone_in_frequency(f1 in 20.0f64..2000.0, f2 in 20.0f64..2000.0, k in 1u32..12) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(quantize(lo, T, k).unwrap() <= quantize(hi, T, k).unwrap());
        }

        #[test]
        fn adjacent_levels_are_twenty_cents_apart(level in -100i32..100) {
            let f = T * 2f64.powf(level as f64 * 20.0 / 1200.0);
            prop_assert_eq!(quantize(f, T, 5).unwrap(), level);
        }
    }
}
