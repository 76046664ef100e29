//! Dataset manifests and the synthetic raga corpus.
//!
//! A manifest is a UTF-8 CSV with header `id,audio_path,token_path,tonic_hz,raga`;
//! exactly one of the two path columns is filled per row. Relative paths are
//! resolved against the manifest's directory.
//!
//! Synthetic ragas are first-order Markov chains over scale notes whose
//! transition masks encode ascending/descending movement rules. Each
//! generated token is a note value on the `k`-levels-per-half-step grid.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pitch::{self, PitchConfig, PitchContour};
use crate::tokenize::{self, QuantizerConfig, TokenSequence, Vocabulary};
use crate::wav;

/// Tonic shared by every synthetic recording (D3).
pub const SYNTH_TONIC_HZ: f64 = 146.83;
/// Duration of one rendered synthetic note.
pub const SYNTH_NOTE_S: f64 = 0.120;

#[derive(Debug, Clone, PartialEq)]
pub enum EntrySource {
    Audio(PathBuf),
    Tokens(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: EntrySource,
    pub tonic_hz: f64,
    pub raga: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    audio_path: String,
    token_path: String,
    tonic_hz: String,
    raga: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    /// Raga label → class index, assigned in lexicographic label order.
    pub class_map: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if !(e.tonic_hz > 0.0 && e.tonic_hz.is_finite()) {
                return Err(Error::Input(format!(
                    "entry `{}` has non-positive tonic {}",
                    e.id, e.tonic_hz
                )));
            }
        }
        let labels: std::collections::BTreeSet<&str> = entries.iter().map(|e| e.raga.as_str()).collect();
        let class_map = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l.to_string(), i))
            .collect();
        Ok(Self { entries, class_map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn class_of(&self, raga: &str) -> Option<usize> {
        self.class_map.get(raga).copied()
    }

    /// Labels ordered by class index.
    pub fn class_names(&self) -> Vec<String> {
        self.class_map.keys().cloned().collect()
    }

    /// Per-class entry counts, indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for e in &self.entries {
            counts[self.class_map[&e.raga]] += 1;
        }
        counts
    }

    /// The common per-raga count, if every raga has the same number of entries.
    pub fn balanced_count(&self) -> Option<usize> {
        let counts = self.class_counts();
        let first = *counts.first()?;
        counts.iter().all(|&c| c == first).then_some(first)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// A dataset restricted to `ids`, keeping this dataset's class map.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let entries: Vec<_> = self
            .entries
            .iter()
            .filter(|e| wanted.contains(e.id.as_str()))
            .cloned()
            .collect();
        if entries.len() != wanted.len() {
            return Err(Error::Input("subset names ids missing from the dataset".into()));
        }
        Ok(Self {
            entries,
            class_map: self.class_map.clone(),
        })
    }

    /// Tokenizes every entry: token files are encoded directly, audio goes
    /// through the pitch tracker first.
    pub fn load_sequences(&self, qcfg: &QuantizerConfig, pcfg: &PitchConfig) -> Result<Vec<TokenSequence>> {
        let vocab = Vocabulary::new(qcfg)?;
        self.entries
            .par_iter()
            .map(|e| {
                let raga = self.class_map[&e.raga];
                let ids = match &e.source {
                    EntrySource::Tokens(p) => vocab.encode(&tokenize::read_token_file(p)?),
                    EntrySource::Audio(p) => {
                        let (samples, sr) = wav::read_wav(p)?;
                        let contour = pitch::track_pitch(&samples, sr, pcfg)?;
                        tokenize::tokenize_contour(&contour, e.tonic_hz, qcfg, &vocab)?.ids
                    }
                };
                Ok(TokenSequence::new(ids, e.id.clone(), raga))
            })
            .collect()
    }
}

fn resolve(base: &Path, field: &str) -> Option<PathBuf> {
    let field = field.trim();
    if field.is_empty() {
        return None;
    }
    let p = PathBuf::from(field);
    Some(if p.is_absolute() { p } else { base.join(p) })
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row_no = i + 1;
        let bad = |msg: String| Error::ManifestRow { row: row_no, msg };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.id.trim().is_empty() {
            return Err(bad("empty id".into()));
        }
        let tonic_hz: f64 = row
            .tonic_hz
            .trim()
            .parse()
            .map_err(|_| bad(format!("missing or unparsable tonic_hz `{}`", row.tonic_hz)))?;
        if !(tonic_hz > 0.0 && tonic_hz.is_finite()) {
            return Err(bad(format!("tonic_hz must be positive, got {tonic_hz}")));
        }
        let source = match (resolve(base, &row.audio_path), resolve(base, &row.token_path)) {
            (Some(a), None) => EntrySource::Audio(a),
            (None, Some(t)) => EntrySource::Tokens(t),
            _ => return Err(bad("exactly one of audio_path/token_path must be set".into())),
        };
        if row.raga.trim().is_empty() {
            return Err(bad("empty raga label".into()));
        }
        entries.push(ManifestEntry {
            id: row.id.trim().to_string(),
            source,
            tonic_hz,
            raga: row.raga.trim().to_string(),
        });
    }
    Dataset::from_entries(entries)
}

/// Writes `dataset` as a manifest. Paths under the manifest's directory are
/// written relative to it.
pub fn write_manifest(path: &Path, dataset: &Dataset) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for e in &dataset.entries {
        let (audio_path, token_path) = match &e.source {
            EntrySource::Audio(p) => (rel(p), String::new()),
            EntrySource::Tokens(p) => (String::new(), rel(p)),
        };
        w.serialize(ManifestRow {
            id: e.id.clone(),
            audio_path,
            token_path,
            tonic_hz: e.tonic_hz.to_string(),
            raga: e.raga.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One synthetic raga: a Markov chain over scale notes (semitones relative
/// to the tonic). A zero weight forbids the transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagaModel {
    pub name: String,
    pub notes: Vec<i32>,
    pub transitions: Vec<Vec<f64>>,
}

impl RagaModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.notes.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "raga `{}` needs at least 2 notes",
                self.name
            )));
        }
        if self.transitions.len() != n {
            return Err(Error::Config(format!(
                "raga `{}`: {} transition rows for {n} notes",
                self.name,
                self.transitions.len()
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != n || row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::Config(format!(
                    "raga `{}`: transition row {i} malformed",
                    self.name
                )));
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!(
                    "raga `{}`: note {} is a dead end (no allowed successor)",
                    self.name, self.notes[i]
                )));
            }
        }
        Ok(())
    }

    fn walk(&self, len: usize, k: u32, noise_rate: f64, rng: &mut impl Rng) -> Vec<i32> {
        let lo = *self.notes.iter().min().unwrap();
        let hi = *self.notes.iter().max().unwrap();
        let mut state = rng.gen_range(0..self.notes.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let semitone = if noise_rate > 0.0 && rng.gen_bool(noise_rate) {
                rng.gen_range(lo..=hi)
            } else {
                self.notes[state]
            };
            out.push(semitone * k as i32);
            let row = &self.transitions[state];
            let total: f64 = row.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            state = row
                .iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or_else(|| row.iter().rposition(|&w| w > 0.0).unwrap());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_ragas: usize,
    pub recordings_per_raga: usize,
    /// Tokens (notes) per recording.
    pub seq_len: usize,
    pub seed: u64,
    pub render_audio: bool,
    pub k_levels: u32,
    /// Probability that a note is replaced by a uniformly random semitone
    /// within the raga's range (ornament / tracker-error noise).
    pub noise_rate: f64,
    /// Explicit raga definitions; generated from the seed when absent.
    pub ragas: Option<Vec<RagaModel>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ragas: 5,
            recordings_per_raga: 12,
            seq_len: 6000,
            seed: 0,
            render_audio: false,
            k_levels: 5,
            noise_rate: 0.0,
            ragas: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ragas < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 ragas".into()));
        }
        if self.recordings_per_raga == 0 || self.seq_len == 0 || self.k_levels == 0 {
            return Err(Error::Config(
                "recordings_per_raga, seq_len and k_levels must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        if let Some(ragas) = &self.ragas {
            if ragas.len() != self.n_ragas {
                return Err(Error::Config(format!(
                    "{} raga models supplied for n_ragas = {}",
                    ragas.len(),
                    self.n_ragas
                )));
            }
            for r in ragas {
                r.validate()?;
            }
        }
        Ok(())
    }

    pub fn raga_models(&self) -> Result<Vec<RagaModel>> {
        self.validate()?;
        match &self.ragas {
            Some(r) => Ok(r.clone()),
            None => generate_ragas(self.n_ragas, self.seed),
        }
    }
}

/// Draws `n` ragas with distinct seven-note scales (Sa and Pa fixed, the
/// other five svaras in one of two positions), spanning a fifth below the
/// tonic to a fifth above the upper octave.
pub fn generate_ragas(n: usize, seed: u64) -> Result<Vec<RagaModel>> {
    const CHOICES: [[i32; 2]; 5] = [[1, 2], [3, 4], [5, 6], [8, 9], [10, 11]];
    if n > 32 {
        return Err(Error::Config("at most 32 distinct synthetic scales exist".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5241_4741);
    let mut masks: Vec<u32> = (0..32).collect();
    masks.shuffle(&mut rng);

    masks[..n]
        .iter()
        .enumerate()
        .map(|(r, &mask)| {
            let mut pcs = vec![0, 7];
            for (bit, pair) in CHOICES.iter().enumerate() {
                pcs.push(pair[((mask >> bit) & 1) as usize]);
            }
            pcs.sort_unstable();
            let notes: Vec<i32> = (-1..=2)
                .flat_map(|oct| pcs.iter().map(move |pc| pc + 12 * oct))
                .filter(|s| (-5..=19).contains(s))
                .collect();
            let m = notes.len();
            // Per-raga movement style: weights for repeat, step up/down, leaps.
            let repeat = rng.gen_range(0.2..1.0);
            let up = rng.gen_range(0.3..1.0);
            let down = rng.gen_range(0.3..1.0);
            let skip_up = rng.gen_range(0.0..0.6);
            let skip_down = rng.gen_range(0.0..0.6);
            let transitions = (0..m)
                .map(|i| {
                    let mut row = vec![0.0; m];
                    row[i] = repeat;
                    if i + 1 < m {
                        row[i + 1] = up;
                    }
                    if i >= 1 {
                        row[i - 1] = down;
                    }
                    if i + 2 < m {
                        row[i + 2] = skip_up;
                    }
                    if i >= 2 {
                        row[i - 2] = skip_down;
                    }
                    row
                })
                .collect();
            Ok(RagaModel {
                name: format!("raga{r:02}"),
                notes,
                transitions,
            })
        })
        .collect()
}

/// A generated recording: its id, raga label and note values.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecording {
    pub id: String,
    pub raga: String,
    pub values: Vec<i32>,
}

/// Generates every recording in memory. Each recording has its own RNG
/// stream derived from the seed, so output does not depend on order.
pub fn synthesize_recordings(cfg: &SynthConfig) -> Result<Vec<SynthRecording>> {
    let models = cfg.raga_models()?;
    Ok(models
        .iter()
        .enumerate()
        .flat_map(|(r, model)| {
            (0..cfg.recordings_per_raga).map(move |i| {
                let stream = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((r as u64) << 32 | i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                SynthRecording {
                    id: format!("{}_{i:02}", model.name),
                    raga: model.name.clone(),
                    values: model.walk(cfg.seq_len, cfg.k_levels, cfg.noise_rate, &mut rng),
                }
            })
        })
        .collect())
}

/// Token sequences and class map for an in-memory synthetic corpus.
pub fn synthesize_sequences(cfg: &SynthConfig, vocab: &Vocabulary) -> Result<(Dataset, Vec<TokenSequence>)> {
    let recs = synthesize_recordings(cfg)?;
    let entries = recs
        .iter()
        .map(|r| ManifestEntry {
            id: r.id.clone(),
            source: EntrySource::Tokens(PathBuf::from(format!("tokens/{}.tok", r.id))),
            tonic_hz: SYNTH_TONIC_HZ,
            raga: r.raga.clone(),
        })
        .collect();
    let dataset = Dataset::from_entries(entries)?;
    let seqs = recs
        .iter()
        .map(|r| TokenSequence::new(vocab.encode(&r.values), r.id.clone(), dataset.class_map[&r.raga]))
        .collect();
    Ok((dataset, seqs))
}

/// Renders note values as phase-continuous sine segments.
pub fn render_notes(values: &[i32], k: u32, tonic_hz: f64, sample_rate: u32, note_s: f64) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let per_note = (note_s * sr).round() as usize;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(per_note * values.len());
    for &v in values {
        let f = tonic_hz * 2f64.powf(f64::from(v) / (12.0 * f64::from(k)));
        let step = 2.0 * std::f64::consts::PI * f / sr;
        for _ in 0..per_note {
            out.push(0.5 * phase.sin());
            phase = (phase + step) % (2.0 * std::f64::consts::PI);
        }
    }
    out
}

/// Reads back one quantized value per note, from the frame centred nearest
/// the note's midpoint. `None` where that frame is unvoiced.
pub fn note_values_from_contour(
    contour: &PitchContour,
    tonic_hz: f64,
    k: u32,
    note_s: f64,
    n_notes: usize,
) -> Result<Vec<Option<i32>>> {
    let mut out = Vec::with_capacity(n_notes);
    for j in 0..n_notes {
        let mid = (j as f64 + 0.5) * note_s;
        let frame = contour
            .frames
            .iter()
            .min_by(|a, b| (a.t - mid).abs().partial_cmp(&(b.t - mid).abs()).unwrap());
        out.push(match frame.and_then(|f| f.f0_hz) {
            Some(f) => Some(tokenize::quantize(f, tonic_hz, k)?),
            None => None,
        });
    }
    Ok(out)
}

/// Writes the corpus under `out_dir` (`manifest.csv` plus `tokens/` or
/// `audio/`) and returns the loaded manifest.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    let recs = synthesize_recordings(cfg)?;
    let sub = if cfg.render_audio { "audio" } else { "tokens" };
    let dir = out_dir.join(sub);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut entries = Vec::with_capacity(recs.len());
    for r in &recs {
        let source = if cfg.render_audio {
            let p = dir.join(format!("{}.wav", r.id));
            let audio = render_notes(
                &r.values,
                cfg.k_levels,
                SYNTH_TONIC_HZ,
                wav::DEFAULT_SAMPLE_RATE,
                SYNTH_NOTE_S,
            );
            wav::write_wav(&p, &audio, wav::DEFAULT_SAMPLE_RATE)?;
            EntrySource::Audio(p)
        } else {
            let p = dir.join(format!("{}.tok", r.id));
            tokenize::write_token_file(&p, &r.values)?;
            EntrySource::Tokens(p)
        };
        entries.push(ManifestEntry {
            id: r.id.clone(),
            source,
            tonic_hz: SYNTH_TONIC_HZ,
            raga: r.raga.clone(),
        });
    }
    let dataset = Dataset::from_entries(entries)?;
    write_manifest(&out_dir.join("manifest.csv"), &dataset)?;
    Ok(dataset)
}
