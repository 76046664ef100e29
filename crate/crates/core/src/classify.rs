//! Whole-recording classification by voting over inference windows, with
//! optional log-probability ensembling of several trained models.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nnet::{self, Head, ModelConfig, ModelParams, Real, LOG_EPS};
use crate::sampling::split_for_inference;
use crate::tokenize::TokenSequence;

/// A recording is labelled only when its top class holds at least
/// `MAJORITY_NUM / MAJORITY_DEN` of the votes.
pub const MAJORITY_NUM: usize = 3;
pub const MAJORITY_DEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Label(usize),
    Abstain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub outcome: Outcome,
    /// Fraction of window votes per class.
    pub vote_fractions: Vec<f64>,
    /// Largest entry of `vote_fractions`.
    pub majority_fraction: f64,
    /// Predicted class of each window, in window order.
    pub window_votes: Vec<usize>,
}

/// Counts votes. The top class wins if it is unique and holds at least 60%
/// of the votes; otherwise the verdict abstains.
pub fn tally(votes: &[usize], n_classes: usize) -> Result<Verdict> {
    if votes.is_empty() {
        return Err(Error::Input("no votes to tally".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &v in votes {
        *counts
            .get_mut(v)
            .ok_or_else(|| Error::Input(format!("vote for class {v} of {n_classes}")))? += 1;
    }
    let top = *counts.iter().max().expect("n_classes > 0");
    let leaders: Vec<usize> = (0..n_classes).filter(|&c| counts[c] == top).collect();
    let total = votes.len();
    let outcome = if leaders.len() == 1 && top * MAJORITY_DEN >= total * MAJORITY_NUM {
        Outcome::Label(leaders[0])
    } else {
        Outcome::Abstain
    };
    Ok(Verdict {
        outcome,
        vote_fractions: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        majority_fraction: top as f64 / total as f64,
        window_votes: votes.to_vec(),
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Normalized product of distributions, computed as a softmax over summed
/// floored log-probabilities.
pub fn combine_log_probs(per_model: &[Vec<f64>]) -> Result<Vec<f64>> {
    let c = per_model.first().map_or(0, Vec::len);
    if c == 0 || per_model.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("ensemble members disagree on class count".into()));
    }
    let logits: Vec<f64> = (0..c)
        .map(|j| per_model.iter().map(|p| (p[j] + LOG_EPS).ln()).sum())
        .collect();
    Ok(nnet::softmax(&logits))
}

/// One or more trained classifiers sharing a configuration.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    cfg: ModelConfig,
    members: Vec<ModelParams<T>>,
}

impl<T: Real> Classifier<T> {
    pub fn single(cfg: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        Self::ensemble(vec![(cfg, params)])
    }

    /// All members must have the same configuration and a softmax head.
    pub fn ensemble(models: Vec<(ModelConfig, ModelParams<T>)>) -> Result<Self> {
        let cfg = match models.first() {
            Some((cfg, _)) => cfg.clone(),
            None => return Err(Error::Config("no models given".into())),
        };
        if cfg.head != Head::Classifier {
            return Err(Error::Config("model has no softmax head".into()));
        }
        let mut members = Vec::with_capacity(models.len());
        for (i, (c, p)) in models.into_iter().enumerate() {
            if c != cfg {
                return Err(Error::Config(format!("model {i} has a different configuration")));
            }
            p.check_shapes(&c)?;
            members.push(p);
        }
        Ok(Self { cfg, members })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Class probabilities for one window: the single model's output, or the
    /// log-combined ensemble.
    pub fn probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let per_model = self
            .members
            .iter()
            .map(|p| {
                Ok(nnet::forward_eval(p, &self.cfg, tokens)?
                    .into_iter()
                    .map(Real::as_f64)
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        if per_model.len() == 1 {
            Ok(per_model.into_iter().next().expect("one member"))
        } else {
            combine_log_probs(&per_model)
        }
    }

    /// Predicted class of every inference window of `seq`.
    pub fn window_votes(&self, seq: &TokenSequence, subseq_len: usize) -> Result<Vec<usize>> {
        split_for_inference(seq, subseq_len)?
            .par_iter()
            .map(|w| Ok(argmax(&self.probs(&w.ids)?)))
            .collect()
    }

    pub fn classify(&self, seq: &TokenSequence, subseq_len: usize) -> Result<Verdict> {
        tally(&self.window_votes(seq, subseq_len)?, self.cfg.n_classes)
    }
}

/// Votes over the inference windows of `seq` using one model, or an
/// ensemble when several are given.
pub fn classify_recording<T: Real>(
    models: &[(ModelConfig, ModelParams<T>)],
    seq: &TokenSequence,
    subseq_len: usize,
) -> Result<Verdict> {
    Classifier::ensemble(models.to_vec())?.classify(seq, subseq_len)
}

/// Log-combined probabilities of at least two models.
pub fn ensemble_probs<T: Real>(models: &[(ModelConfig, ModelParams<T>)], tokens: &[u32]) -> Result<Vec<f64>> {
    if models.len() < 2 {
        return Err(Error::Config("an ensemble needs at least 2 models".into()));
    }
    Classifier::ensemble(models.to_vec())?.probs(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(spec: &[(usize, usize)]) -> Vec<usize> {
        spec.iter()
            .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
            .collect()
    }

    #[test]
    fn sixty_percent_is_enough() {
        let v = tally(&votes(&[(0, 6), (1, 4)]), 3).unwrap();
        assert_eq!(v.outcome, Outcome::Label(0));
        assert_eq!(v.majority_fraction, 0.6);
    }

    #[test]
    fn even_split_abstains() {
        let v = tally(&votes(&[(0, 5), (1, 5)]), 2).unwrap();
        assert_eq!(v.outcome, Outcome::Abstain);
    }

    #[test]
    fn unanimity() {
        let v = tally(&votes(&[(2, 7)]), 3).unwrap();
        assert_eq!(v.outcome, Outcome::Label(2));
        assert_eq!(v.vote_fractions, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_votes() {
        assert!(tally(&[], 2).is_err());
        assert!(tally(&[2], 2).is_err());
    }

    #[test]
    fn product_of_two_distributions() {
        let p = combine_log_probs(&[vec![0.8, 0.2], vec![0.5, 0.5]]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-9 && (p[1] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn zero_probability_is_floored() {
        let p = combine_log_probs(&[vec![0.0, 1.0], vec![0.9, 0.1]]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p[0] <= 1e-10);
    }

    #[test]
    fn mismatched_members() {
        assert!(combine_log_probs(&[vec![0.5, 0.5], vec![1.0]]).is_err());
        assert!(combine_log_probs(&[]).is_err());
    }
}
