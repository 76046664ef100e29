//! Subsequence extraction: random windows for training, a fixed tiling for
//! whole-recording inference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenize::{TokenSequence, PAD_ID};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Subsequence length in tokens.
    pub subseq_len: usize,
    /// Replaces the computed per-recording sample count when set.
    pub num_samples_override: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            subseq_len: 5000,
            num_samples_override: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subseq_len == 0 {
            return Err(Error::Config("subsequence length must be at least 1".into()));
        }
        if self.num_samples_override == Some(0) {
            return Err(Error::Config("sample count override must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self, max_len: usize) -> usize {
        self.num_samples_override
            .unwrap_or_else(|| compute_num_samples(max_len, self.subseq_len))
    }
}

/// `ceil(2.2 · max_len / subseq_len)`, evaluated in exact integer arithmetic.
pub fn compute_num_samples(max_len: usize, subseq_len: usize) -> usize {
    assert!(subseq_len >= 1, "subsequence length must be positive");
    let num = 22 * max_len as u128;
    let den = 10 * subseq_len as u128;
    num.div_ceil(den) as usize
}

fn left_padded(ids: &[u32], len: usize) -> Vec<u32> {
    let mut out = vec![PAD_ID; len.saturating_sub(ids.len())];
    out.extend_from_slice(ids);
    out
}

/// Uniform start indices in `[0, len - subseq_len]` (all zero for short inputs).
pub fn sample_starts<R: Rng + ?Sized>(
    len: usize,
    subseq_len: usize,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let last = len.saturating_sub(subseq_len);
    (0..count).map(|_| rng.gen_range(0..=last)).collect()
}

pub fn sample_subsequences<R: Rng + ?Sized>(
    seq: &TokenSequence,
    subseq_len: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    if seq.is_empty() {
        return Err(Error::Input(format!(
            "cannot sample from empty sequence `{}`",
            seq.source_id
        )));
    }
    if subseq_len == 0 || count == 0 {
        return Err(Error::Config(
            "subsequence length and sample count must be at least 1".into(),
        ));
    }
    Ok(sample_starts(seq.len(), subseq_len, count, rng)
        .into_iter()
        .map(|start| {
            let end = (start + subseq_len).min(seq.len());
            TokenSequence::new(
                left_padded(&seq.ids[start..end], subseq_len),
                seq.source_id.clone(),
                seq.raga,
            )
        })
        .collect())
}

/// Consecutive non-overlapping windows. A trailing remainder is kept
/// (left-padded) when it spans at least half a window, or when it is the
/// only material the sequence has.
pub fn split_for_inference(seq: &TokenSequence, subseq_len: usize) -> Result<Vec<TokenSequence>> {
    if seq.is_empty() {
        return Err(Error::Input(format!(
            "cannot split empty sequence `{}`",
            seq.source_id
        )));
    }
    if subseq_len == 0 {
        return Err(Error::Config("subsequence length must be at least 1".into()));
    }
    let mut windows: Vec<TokenSequence> = seq
        .ids
        .chunks_exact(subseq_len)
        .map(|w| TokenSequence::new(w.to_vec(), seq.source_id.clone(), seq.raga))
        .collect();
    let rem = seq.len() % subseq_len;
    if rem > 0 && (2 * rem >= subseq_len || windows.is_empty()) {
        windows.push(TokenSequence::new(
            left_padded(&seq.ids[seq.len() - rem..], subseq_len),
            seq.source_id.clone(),
            seq.raga,
        ));
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize) -> TokenSequence {
        TokenSequence::new((0..len as u32).map(|i| 2 + i % 50).collect(), "r", 1)
    }

    #[test]
    fn num_samples_examples() {
        assert_eq!(compute_num_samples(500_000, 5000), 220);
        assert_eq!(compute_num_samples(5000, 5000), 3);
        assert_eq!(compute_num_samples(1000, 4000), 1);
        // 2.2 · 5 / 11 is exactly 1.
        assert_eq!(compute_num_samples(5, 11), 1);
    }

    #[test]
    fn random_windows_stay_in_bounds() {
        let s = seq(10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let starts = sample_starts(s.len(), 5000, 500, &mut rng);
        assert!(starts.iter().all(|&st| st <= 5000));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let subs = sample_subsequences(&s, 5000, 220, &mut rng).unwrap();
        assert_eq!(subs.len(), 220);
        for (sub, &st) in subs.iter().zip(&starts) {
            assert_eq!(sub.len(), 5000);
            assert_eq!(sub.ids[..], s.ids[st..st + 5000]);
        }
    }

    #[test]
    fn short_sequences_are_left_padded() {
        let s = seq(3000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for sub in sample_subsequences(&s, 5000, 4, &mut rng).unwrap() {
            assert_eq!(sub.len(), 5000);
            assert!(sub.ids[..2000].iter().all(|&id| id == PAD_ID));
            assert_eq!(sub.ids[2000..], s.ids[..]);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_subsequences(&seq(0), 10, 1, &mut rng).is_err());
        assert!(split_for_inference(&seq(0), 10).is_err());
    }

    #[test]
    fn seeds_change_the_windows() {
        let a = sample_starts(100_000, 500, 50, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_starts(100_000, 500, 50, &mut ChaCha8Rng::seed_from_u64(1));
        let c = sample_starts(100_000, 500, 50, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn inference_tiling() {
        assert_eq!(split_for_inference(&seq(12_000), 5000).unwrap().len(), 2);
        let w = split_for_inference(&seq(12_600), 5000).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w[2].ids[..2400].iter().all(|&id| id == PAD_ID));
        let s = seq(5000);
        let w = split_for_inference(&s, 5000).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0], s);
        // Too short for the half-window rule, but still the only material.
        assert_eq!(split_for_inference(&seq(100), 5000).unwrap().len(), 1);
    }
}
