//! Cross-validation splits, scoring, and the experiment drivers built on
//! them: per-fold training with voted inference, retrieval precision, and
//! the subsequence-length study.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classify::{tally, Classifier, Outcome, Verdict};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{ModelConfig, ModelParams, Real};
use crate::rank::EmbeddingIndex;
use crate::sampling::{self, SamplerConfig};
use crate::tokenize::TokenSequence;
use crate::train::{self, SequenceClassification, TrainConfig, TrainReport};

/// Recording ids for training and testing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Ids of each class, sorted, in class order.
fn ids_by_class(ds: &Dataset) -> Vec<Vec<String>> {
    let mut by: Vec<Vec<String>> = vec![Vec::new(); ds.n_classes()];
    for e in &ds.entries {
        by[ds.class_map[&e.raga]].push(e.id.clone());
    }
    by.iter_mut().for_each(|v| v.sort());
    by
}

/// Builds folds from a per-class assignment `fold_of[class][j]` of the
/// class's j-th (sorted) id.
fn folds_from(by_class: &[Vec<String>], fold_of: &[Vec<usize>], k: usize) -> Vec<Fold> {
    (0..k)
        .map(|f| {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (ids, assign) in by_class.iter().zip(fold_of) {
                for (id, &a) in ids.iter().zip(assign) {
                    if a == f {
                        test.push(id.clone());
                    } else {
                        train.push(id.clone());
                    }
                }
            }
            train.sort();
            test.sort();
            Fold { train, test }
        })
        .collect()
}

/// One fold per recording slot: fold `i` tests the `i`-th recording (by
/// sorted id) of every class. All classes must have the same count.
pub fn loocv_splits(ds: &Dataset) -> Result<Vec<Fold>> {
    let n = ds.balanced_count().ok_or_else(|| {
        Error::Input("leave-one-out folds need the same number of recordings per class".into())
    })?;
    if n < 2 {
        return Err(Error::Input(
            "leave-one-out folds need at least 2 recordings per class".into(),
        ));
    }
    let by = ids_by_class(ds);
    let fold_of: Vec<Vec<usize>> = by.iter().map(|ids| (0..ids.len()).collect()).collect();
    Ok(folds_from(&by, &fold_of, n))
}

/// `k` folds; within each class a seeded shuffle is dealt round-robin, with
/// the starting fold rotated from class to class to even out fold sizes.
pub fn stratified_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config("k must be at least 2".into()));
    }
    let smallest = ds.class_counts().into_iter().min().unwrap_or(0);
    if k > smallest {
        return Err(Error::Input(format!(
            "k = {k} exceeds the smallest class size {smallest}"
        )));
    }
    let by = ids_by_class(ds);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    let fold_of: Vec<Vec<usize>> = by
        .iter()
        .map(|ids| {
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.shuffle(&mut rng);
            let mut assign = vec![0; ids.len()];
            for (slot, &j) in order.iter().enumerate() {
                assign[j] = (start + slot) % k;
            }
            start = (start + ids.len()) % k;
            assign
        })
        .collect();
    Ok(folds_from(&by, &fold_of, k))
}

/// `per_class_test` seeded random recordings of every class for testing.
pub fn holdout_split(ds: &Dataset, per_class_test: usize, seed: u64) -> Result<Fold> {
    if per_class_test == 0 {
        return Err(Error::Config("per_class_test must be at least 1".into()));
    }
    let by = ids_by_class(ds);
    if let Some(ids) = by.iter().find(|ids| ids.len() <= per_class_test) {
        return Err(Error::Input(format!(
            "a class has {} recordings; holding out {per_class_test} needs at least {}",
            ids.len(),
            per_class_test + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fold_of: Vec<Vec<usize>> = by
        .iter()
        .map(|ids| {
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.shuffle(&mut rng);
            let mut assign = vec![1; ids.len()];
            for &j in &order[..per_class_test] {
                assign[j] = 0;
            }
            assign
        })
        .collect();
    Ok(folds_from(&by, &fold_of, 1).remove(0))
}

/// Rows are true classes; columns are predicted classes plus a final
/// abstention column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes + 1]; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn record(&mut self, truth: usize, outcome: Outcome) {
        let col = match outcome {
            Outcome::Label(c) => c,
            Outcome::Abstain => self.n_classes,
        };
        self.counts[truth][col] += 1;
    }

    pub fn count(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth][predicted]
    }

    pub fn abstained(&self, truth: usize) -> usize {
        self.counts[truth][self.n_classes]
    }

    pub fn row_total(&self, truth: usize) -> usize {
        self.counts[truth].iter().sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.n_classes).map(|c| self.counts[c][c]).sum()
    }

    /// Correct over total; abstentions count as wrong. Zero when empty.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Grid with a header row of class names followed by `ABSTAIN`.
    pub fn write_csv_to<W: Write>(&self, w: W, names: &[String]) -> Result<()> {
        if names.len() != self.n_classes {
            return Err(Error::Shape("one name per class required".into()));
        }
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["true".to_string()];
        header.extend(names.iter().cloned());
        header.push("ABSTAIN".into());
        out.write_record(&header)?;
        for (name, row) in names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(usize::to_string));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Fraction of the first `k` retrieved labels equal to `query`.
pub fn precision_at_k(retrieved: &[usize], query: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if retrieved.len() < k {
        return Err(Error::Input(format!(
            "{} results retrieved, {k} needed",
            retrieved.len()
        )));
    }
    Ok(retrieved[..k].iter().filter(|&&r| r == query).count() as f64 / k as f64)
}

pub fn average_precision_at_k(precisions: &[f64]) -> Result<f64> {
    if precisions.is_empty() {
        return Err(Error::Input("no precisions to average".into()));
    }
    Ok(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

/// Mean precision@k for each `k` in `ks`, querying with every index entry
/// against the rest of the index (the query entry itself is excluded).
pub fn retrieval_precision(index: &EmbeddingIndex, ks: &[usize]) -> Result<Vec<f64>> {
    let k_max = ks
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Input("no k given".into()))?;
    let per_query = index
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let r = index.query_excluding(&e.embedding, k_max, Some(i))?;
            let labels: Vec<usize> = r.hits.iter().map(|h| index.entries()[h.index].raga).collect();
            ks.iter().map(|&k| precision_at_k(&labels, e.raga, k)).collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    (0..ks.len())
        .map(|j| average_precision_at_k(&per_query.iter().map(|p| p[j]).collect::<Vec<_>>()))
        .collect()
}

/// Everything needed to train and evaluate a classifier on one fold.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// `n_classes` and `subseq_len` are overwritten per experiment.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()
    }
}

#[derive(Debug, Clone)]
pub struct RecordingResult {
    pub id: String,
    pub truth: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub recordings: Vec<RecordingResult>,
    /// Verdicts per recording, abstentions included.
    pub recording_confusion: ConfusionMatrix,
    /// One vote per inference window.
    pub subsequence_confusion: ConfusionMatrix,
    pub report: TrainReport,
    pub num_samples: usize,
    pub params: ModelParams<f32>,
    pub model: ModelConfig,
}

fn lookup<'a>(seqs: &'a [TokenSequence], ids: &[String]) -> Result<Vec<&'a TokenSequence>> {
    let by_id: BTreeMap<&str, &TokenSequence> = seqs.iter().map(|s| (s.source_id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("no sequence for `{id}`")))
        })
        .collect()
}

/// Draws the training subsequences of a fold: `N_r` per recording, with
/// `N_r` derived from the longest training recording unless overridden.
pub fn training_subsequences(
    train: &[&TokenSequence],
    sampler: &SamplerConfig,
) -> Result<(Vec<TokenSequence>, usize)> {
    sampler.validate()?;
    let max_len = train.iter().map(|s| s.len()).max().unwrap_or(0);
    let n_r = sampler.num_samples(max_len);
    let mut out = Vec::with_capacity(n_r * train.len());
    for (i, s) in train.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        rng.set_stream(i as u64);
        out.extend(sampling::sample_subsequences(
            s,
            sampler.subseq_len,
            n_r,
            &mut rng,
        )?);
    }
    Ok((out, n_r))
}

/// Trains a fresh `f32` classifier on the fold's training recordings and
/// scores its test recordings by voting over inference windows.
pub fn run_fold(
    seqs: &[TokenSequence],
    n_classes: usize,
    fold: &Fold,
    cfg: &ExperimentConfig,
) -> Result<FoldResult> {
    cfg.validate()?;
    let train_seqs = lookup(seqs, &fold.train)?;
    let test_seqs = lookup(seqs, &fold.test)?;
    let (subseqs, num_samples) = training_subsequences(&train_seqs, &cfg.sampler)?;
    let model = ModelConfig {
        n_classes,
        subseq_len: cfg.sampler.subseq_len,
        ..cfg.model.clone()
    };
    let objective = SequenceClassification::<f32>::new(&model, &subseqs)?;
    let init = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    let (params, report) = train::train(&objective, init, &cfg.train, None)?;

    let classifier = Classifier::single(model.clone(), params.clone())?;
    let mut recording_confusion = ConfusionMatrix::new(n_classes);
    let mut subsequence_confusion = ConfusionMatrix::new(n_classes);
    let mut recordings = Vec::with_capacity(test_seqs.len());
    for s in test_seqs {
        let votes = classifier.window_votes(s, cfg.sampler.subseq_len)?;
        for &v in &votes {
            subsequence_confusion.record(s.raga, Outcome::Label(v));
        }
        let verdict = tally(&votes, n_classes)?;
        recording_confusion.record(s.raga, verdict.outcome);
        recordings.push(RecordingResult {
            id: s.source_id.clone(),
            truth: s.raga,
            verdict,
        });
    }
    Ok(FoldResult {
        recordings,
        recording_confusion,
        subsequence_confusion,
        report,
        num_samples,
        params,
        model,
    })
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub recording_confusion: ConfusionMatrix,
    pub subsequence_confusion: ConfusionMatrix,
}

impl CrossValidation {
    pub fn recording_accuracy(&self) -> f64 {
        self.recording_confusion.accuracy()
    }

    pub fn subsequence_accuracy(&self) -> f64 {
        self.subsequence_confusion.accuracy()
    }
}

/// Runs every fold in turn and pools their confusion matrices.
pub fn cross_validate(
    seqs: &[TokenSequence],
    n_classes: usize,
    folds: &[Fold],
    cfg: &ExperimentConfig,
) -> Result<CrossValidation> {
    let mut recording_confusion = ConfusionMatrix::new(n_classes);
    let mut subsequence_confusion = ConfusionMatrix::new(n_classes);
    let mut results = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let r = run_fold(seqs, n_classes, fold, cfg)?;
        log::info!(
            "fold {}/{}: recording accuracy {:.3}, subsequence accuracy {:.3}",
            i + 1,
            folds.len(),
            r.recording_confusion.accuracy(),
            r.subsequence_confusion.accuracy()
        );
        recording_confusion.merge(&r.recording_confusion);
        subsequence_confusion.merge(&r.subsequence_confusion);
        results.push(r);
    }
    Ok(CrossValidation {
        folds: results,
        recording_confusion,
        subsequence_confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthRow {
    pub subseq_len: usize,
    /// `None` when the threshold was not reached within the epoch budget.
    pub epochs_to_threshold: Option<usize>,
    pub wall_s: f64,
    /// Recording-level accuracy on the test side of the split.
    pub accuracy: f64,
}

impl LengthRow {
    pub fn converged(&self) -> bool {
        self.epochs_to_threshold.is_some()
    }
}

/// Trains one model per subsequence length on the same split and seeds,
/// stopping each run once its epoch loss reaches `loss_threshold`.
pub fn run_length_study(
    lengths: &[usize],
    seqs: &[TokenSequence],
    n_classes: usize,
    fold: &Fold,
    cfg: &ExperimentConfig,
    loss_threshold: f64,
) -> Result<Vec<LengthRow>> {
    if lengths.is_empty() {
        return Err(Error::Input("no subsequence lengths given".into()));
    }
    lengths
        .iter()
        .map(|&len| {
            let mut c = cfg.clone();
            c.sampler.subseq_len = len;
            c.train.loss_threshold = Some(loss_threshold);
            c.train.stop_at_threshold = true;
            let start = Instant::now();
            let r = run_fold(seqs, n_classes, fold, &c)?;
            let row = LengthRow {
                subseq_len: len,
                epochs_to_threshold: r.report.epochs_to_threshold,
                wall_s: start.elapsed().as_secs_f64(),
                accuracy: r.recording_confusion.accuracy(),
            };
            log::info!("length {len}: {row:?}");
            Ok(row)
        })
        .collect()
}

/// `subseq_len,epochs_to_converge,converged,wall_s,accuracy`; the epoch
/// column is empty for runs that did not converge.
pub fn write_length_study_csv<W: Write>(rows: &[LengthRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "subseq_len",
        "epochs_to_converge",
        "converged",
        "wall_s",
        "accuracy",
    ])?;
    for r in rows {
        out.write_record([
            r.subseq_len.to_string(),
            r.epochs_to_threshold.map(|e| e.to_string()).unwrap_or_default(),
            r.converged().to_string(),
            format!("{:.3}", r.wall_s),
            format!("{:.4}", r.accuracy),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Whether epochs-to-threshold never increases with length; a run that
/// never converged counts as taking forever.
pub fn epochs_nonincreasing(rows: &[LengthRow]) -> bool {
    let key = |r: &LengthRow| r.epochs_to_threshold.unwrap_or(usize::MAX);
    let mut sorted: Vec<&LengthRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.subseq_len);
    sorted.windows(2).all(|w| key(w[1]) <= key(w[0]))
}

/// Median of a non-empty slice (mean of the middle pair for even counts).
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix, names: &[String]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    cm.write_csv_to(f, names)
}

/// Embeds the given subsequences with an embedding-head model.
pub fn build_index<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    items: &[(TokenSequence, usize)],
) -> Result<EmbeddingIndex> {
    let embeddings = items
        .par_iter()
        .map(|(s, _)| crate::rank::embed(cfg, params, &s.ids))
        .collect::<Result<Vec<_>>>()?;
    let mut index = EmbeddingIndex::new(cfg.n_classes)?;
    for ((s, offset), e) in items.iter().zip(embeddings) {
        index.push(crate::rank::IndexEntry {
            embedding: e.into_iter().map(|x| x.as_f64() as f32).collect(),
            raga: s.raga,
            source_id: s.source_id.clone(),
            offset: *offset,
        })?;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntrySource, ManifestEntry};
    use std::path::PathBuf;

    fn dataset(ragas: usize, per: usize) -> Dataset {
        let entries = (0..ragas * per)
            .map(|i| ManifestEntry {
                id: format!("r{:02}_{:02}", i / per, i % per),
                source: EntrySource::Tokens(PathBuf::from("x.tok")),
                tonic_hz: 150.0,
                raga: format!("raga{}", i / per),
            })
            .collect();
        Dataset::from_entries(entries).unwrap()
    }

    fn check_partition(ds: &Dataset, folds: &[Fold]) {
        let mut tested: Vec<String> = folds.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort();
        let mut all: Vec<String> = ds.entries.iter().map(|e| e.id.clone()).collect();
        all.sort();
        assert_eq!(tested, all);
        for f in folds {
            assert!(f.train.iter().all(|id| !f.test.contains(id)));
            assert_eq!(f.train.len() + f.test.len(), ds.len());
        }
    }

    #[test]
    fn loocv_forty_by_twelve() {
        let ds = dataset(40, 12);
        let folds = loocv_splits(&ds).unwrap();
        assert_eq!(folds.len(), 12);
        assert!(folds.iter().all(|f| f.test.len() == 40));
        check_partition(&ds, &folds);
        assert!(folds[3].test.iter().all(|id| id.ends_with("_03")));
    }

    #[test]
    fn loocv_needs_balance() {
        let mut ds = dataset(3, 4);
        ds.entries.pop();
        let ds = Dataset::from_entries(ds.entries).unwrap();
        assert!(loocv_splits(&ds).is_err());
    }

    #[test]
    fn kfold_is_stratified_and_seeded() {
        let ds = dataset(10, 12);
        let folds = stratified_kfold(&ds, 12, 4).unwrap();
        check_partition(&ds, &folds);
        for f in &folds {
            for r in 0..10 {
                assert_eq!(
                    f.test
                        .iter()
                        .filter(|id| id.starts_with(&format!("r{r:02}")))
                        .count(),
                    1
                );
            }
        }
        assert_eq!(folds, stratified_kfold(&ds, 12, 4).unwrap());
        assert_ne!(folds, stratified_kfold(&ds, 12, 5).unwrap());

        let ds = dataset(7, 12);
        for k in [2, 5, 7, 12] {
            let folds = stratified_kfold(&ds, k, 1).unwrap();
            check_partition(&ds, &folds);
            for f in &folds {
                for r in 0..7 {
                    let c = f
                        .test
                        .iter()
                        .filter(|id| id.starts_with(&format!("r{r:02}")))
                        .count();
                    assert!(c == 12 / k || c == 12_usize.div_ceil(k));
                }
            }
        }
        assert!(stratified_kfold(&ds, 13, 1).is_err());
    }

    #[test]
    fn holdout_five_of_twelve() {
        let ds = dataset(40, 12);
        let f = holdout_split(&ds, 5, 9).unwrap();
        assert_eq!((f.test.len(), f.train.len()), (200, 280));
        for r in 0..40 {
            assert_eq!(
                f.test
                    .iter()
                    .filter(|id| id.starts_with(&format!("r{r:02}")))
                    .count(),
                5
            );
        }
        assert!(holdout_split(&dataset(2, 5), 5, 0).is_err());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[1, 1, 1], 1, 3).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[0, 2], 1, 2).unwrap(), 0.0);
        assert_eq!(precision_at_k(&[1, 0, 1, 0], 1, 4).unwrap(), 0.5);
        assert!(precision_at_k(&[1], 1, 2).is_err());
        assert_eq!(average_precision_at_k(&[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(average_precision_at_k(&[0.3]).unwrap(), 0.3);
        assert!(average_precision_at_k(&[]).is_err());
    }

    #[test]
    fn confusion_counts_abstentions_as_wrong() {
        let mut cm = ConfusionMatrix::new(2);
        cm.record(0, Outcome::Label(0));
        cm.record(0, Outcome::Abstain);
        cm.record(1, Outcome::Label(0));
        cm.record(1, Outcome::Label(1));
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.row_total(0), 2);
        assert_eq!(cm.abstained(0), 1);
        assert_eq!(cm.accuracy(), 0.5);
        let mut buf = Vec::new();
        cm.write_csv_to(&mut buf, &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "true,a,b,ABSTAIN\na,1,0,1\nb,1,1,0\n"
        );
    }

    #[test]
    fn trend_treats_non_convergence_as_infinite() {
        let row = |l, e| LengthRow {
            subseq_len: l,
            epochs_to_threshold: e,
            wall_s: 0.0,
            accuracy: 1.0,
        };
        assert!(epochs_nonincreasing(&[
            row(500, Some(12)),
            row(1500, Some(6)),
            row(3000, Some(5))
        ]));
        assert!(epochs_nonincreasing(&[row(500, None), row(1500, Some(6))]));
        assert!(!epochs_nonincreasing(&[row(500, Some(6)), row(1500, None)]));
        assert!(!epochs_nonincreasing(&[row(500, Some(4)), row(1500, Some(6))]));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
