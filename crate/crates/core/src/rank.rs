//! Sequence ranking: a trained classifier with its softmax layer swapped for
//! a wide linear embedding layer, fine-tuned with the triplet margin loss and
//! served through an exact nearest-neighbour index.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nnet::{self, loss, Head, ModelConfig, ModelParams, Real, Tensor};
use crate::tokenize::TokenSequence;
use crate::train::{adam_step, AdamState, ParamSet, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RankerConfig {
    pub embed_out_dim: usize,
    pub margin: f64,
    pub triplets_per_step: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            embed_out_dim: 600,
            margin: 1.0,
            triplets_per_step: 40,
            steps: 500,
            seed: 0,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_out_dim == 0 {
            return Err(Error::Config("embed_out_dim must be at least 1".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin {} must be finite and non-negative",
                self.margin
            )));
        }
        if self.triplets_per_step == 0 {
            return Err(Error::Config("triplets_per_step must be at least 1".into()));
        }
        Ok(())
    }
}

/// Replaces the classifier's output layer with a freshly initialized
/// `dense1_units × embed_out_dim` layer and drops the softmax. Every other
/// tensor is copied unchanged.
pub fn adapt_classifier<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    rcfg: &RankerConfig,
    rng: &mut R,
) -> Result<(ModelConfig, ModelParams<T>)> {
    rcfg.validate()?;
    cfg.validate()?;
    if cfg.head != Head::Classifier {
        return Err(Error::Config(
            "only a classifier can be adapted into a ranker".into(),
        ));
    }
    params.check_shapes(cfg)?;
    let out_cfg = ModelConfig {
        n_classes: rcfg.embed_out_dim,
        head: Head::Embedding,
        ..cfg.clone()
    };
    let mut out = params.clone();
    let a = 1.0 / (cfg.dense1_units as f64).sqrt();
    out.dense2_w = Tensor::zeros(&[cfg.dense1_units, rcfg.embed_out_dim]);
    out.dense2_w
        .data
        .iter_mut()
        .for_each(|w| *w = T::of(rng.gen_range(-a..a)));
    out.dense2_b = Tensor::zeros(&[rcfg.embed_out_dim]);
    Ok((out_cfg, out))
}

/// Eval-mode embedding of one token sequence.
pub fn embed<T: Real>(cfg: &ModelConfig, params: &ModelParams<T>, tokens: &[u32]) -> Result<Vec<T>> {
    if cfg.head != Head::Embedding {
        return Err(Error::Config(
            "model has a softmax head, not an embedding head".into(),
        ));
    }
    nnet::forward_eval(params, cfg, tokens)
}

/// Indices into a [`SubsequencePool`] with `ref` and `pos` from one raga and
/// `neg` from another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub reference: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Labelled subsequences grouped by raga.
#[derive(Debug, Clone)]
pub struct SubsequencePool {
    items: Vec<TokenSequence>,
    /// `(raga, item indices)` in ascending raga order.
    groups: Vec<(usize, Vec<usize>)>,
    /// Position in `groups` of each item's raga.
    group_of: Vec<usize>,
}

impl SubsequencePool {
    /// Needs at least two ragas, each with at least two subsequences.
    pub fn new(items: Vec<TokenSequence>) -> Result<Self> {
        let mut ragas: Vec<usize> = items.iter().map(|s| s.raga).collect();
        ragas.sort_unstable();
        ragas.dedup();
        if ragas.len() < 2 {
            return Err(Error::Input("triplet sampling needs at least two ragas".into()));
        }
        let mut groups: Vec<(usize, Vec<usize>)> = ragas.iter().map(|&r| (r, Vec::new())).collect();
        let mut group_of = Vec::with_capacity(items.len());
        for (i, s) in items.iter().enumerate() {
            let g = ragas.binary_search(&s.raga).expect("collected above");
            groups[g].1.push(i);
            group_of.push(g);
        }
        if let Some((r, _)) = groups.iter().find(|(_, m)| m.len() < 2) {
            return Err(Error::Input(format!("raga {r} has fewer than two subsequences")));
        }
        Ok(Self {
            items,
            groups,
            group_of,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[TokenSequence] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &TokenSequence {
        &self.items[i]
    }

    /// Reference uniform over all subsequences; positive uniform over the
    /// other subsequences of its raga; negative raga uniform over the other
    /// ragas; negative uniform within that raga.
    pub fn sample_triplet<R: Rng + ?Sized>(&self, rng: &mut R) -> Triplet {
        let reference = rng.gen_range(0..self.items.len());
        let gi = self.group_of[reference];
        let members = &self.groups[gi].1;
        let positive = loop {
            let p = members[rng.gen_range(0..members.len())];
            if p != reference {
                break p;
            }
        };
        let mut gj = rng.gen_range(0..self.groups.len() - 1);
        if gj >= gi {
            gj += 1;
        }
        let others = &self.groups[gj].1;
        let negative = others[rng.gen_range(0..others.len())];
        Triplet {
            reference,
            positive,
            negative,
        }
    }
}

#[derive(Clone)]
struct OutputLayer<T> {
    w: Vec<T>,
    b: Vec<T>,
}

impl<T: Real> ParamSet for OutputLayer<T> {
    type Scalar = T;

    fn slices(&self) -> Vec<(&'static str, &[T])> {
        vec![("dense2.w", &self.w), ("dense2.b", &self.b)]
    }

    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![("dense2.w", &mut self.w), ("dense2.b", &mut self.b)]
    }
}

fn project<T: Real>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let d = b.len();
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            nnet::axpy(xi, &w[i * d..(i + 1) * d], &mut out);
        }
    }
    out
}

/// Frozen-trunk features (dense1 after ReLU) of every pool item.
pub fn pool_features<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    pool: &SubsequencePool,
) -> Result<Vec<Vec<T>>> {
    pool.items
        .par_iter()
        .map(|s| nnet::trunk_features(params, cfg, &s.ids))
        .collect()
}

/// Mean triplet loss of eval-mode embeddings over the given triplets.
pub fn mean_triplet_loss<T: Real>(
    params: &ModelParams<T>,
    features: &[Vec<T>],
    triplets: &[Triplet],
    margin: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Input("no triplets".into()));
    }
    let (w, b) = (&params.dense2_w.data, &params.dense2_b.data);
    let mut total = 0.0;
    for t in triplets {
        let e = |i: usize| project(&features[i], w, b);
        total += loss::triplet_loss(&e(t.reference), &e(t.positive), &e(t.negative), T::of(margin))?.as_f64();
    }
    Ok(total / triplets.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankerReport {
    /// Mean training triplet loss of each step (with dropout).
    pub step_losses: Vec<f64>,
}

/// Adam on the output layer only, over triplets sampled afresh at each step.
/// Each triplet member gets its own dropout mask on the dense1 output.
pub fn finetune_ranker<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    pool: &SubsequencePool,
    rcfg: &RankerConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams<T>, RankerReport)> {
    rcfg.validate()?;
    tcfg.validate()?;
    if cfg.head != Head::Embedding || cfg.n_classes != rcfg.embed_out_dim {
        return Err(Error::Config("fine-tuning needs an adapted ranker model".into()));
    }
    params.check_shapes(cfg)?;
    let features = if rcfg.steps > 0 {
        pool_features(cfg, params, pool)?
    } else {
        Vec::new()
    };
    finetune_on_features(cfg, params, pool, &features, rcfg, tcfg)
}

/// [`finetune_ranker`] with the trunk features already computed.
pub fn finetune_on_features<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    pool: &SubsequencePool,
    features: &[Vec<T>],
    rcfg: &RankerConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams<T>, RankerReport)> {
    let mut layer = OutputLayer {
        w: params.dense2_w.data.clone(),
        b: params.dense2_b.data.clone(),
    };
    let mut report = RankerReport::default();
    if rcfg.steps == 0 {
        return Ok((params.clone(), report));
    }
    if features.len() != pool.len() {
        return Err(Error::Shape("one feature vector per pool item required".into()));
    }
    let mut state = AdamState::new(&layer);
    let adam = tcfg.adam();
    let rng: &mut ChaCha8Rng = &mut rand::SeedableRng::seed_from_u64(rcfg.seed);
    let p = cfg.dropout_rate;
    let keep = T::of(1.0 / (1.0 - p));
    let d = rcfg.embed_out_dim;
    let margin = T::of(rcfg.margin);
    let scale = T::of(1.0 / rcfg.triplets_per_step as f64);

    for _ in 0..rcfg.steps {
        let mut grads = OutputLayer {
            w: vec![T::zero(); layer.w.len()],
            b: vec![T::zero(); d],
        };
        let mut step_loss = 0.0;
        for _ in 0..rcfg.triplets_per_step {
            let t = pool.sample_triplet(rng);
            let inputs: Vec<Vec<T>> = [t.reference, t.positive, t.negative]
                .iter()
                .map(|&i| {
                    features[i]
                        .iter()
                        .map(|&x| {
                            if p > 0.0 && rng.gen::<f64>() < p {
                                T::zero()
                            } else if p > 0.0 {
                                x * keep
                            } else {
                                x
                            }
                        })
                        .collect()
                })
                .collect();
            let e: Vec<Vec<T>> = inputs.iter().map(|x| project(x, &layer.w, &layer.b)).collect();
            step_loss += loss::triplet_loss(&e[0], &e[1], &e[2], margin)?.as_f64();
            let (g0, g1, g2) = loss::triplet_grad(&e[0], &e[1], &e[2], margin)?;
            for (x, g) in inputs.iter().zip([&g0, &g1, &g2]) {
                for (i, &xi) in x.iter().enumerate() {
                    if xi != T::zero() {
                        nnet::axpy(xi * scale, g, &mut grads.w[i * d..(i + 1) * d]);
                    }
                }
                nnet::axpy(scale, g, &mut grads.b);
            }
        }
        adam_step(&mut layer, &grads, &mut state, &adam)?;
        report.step_losses.push(step_loss / rcfg.triplets_per_step as f64);
    }
    let mut out = params.clone();
    out.dense2_w.data = layer.w;
    out.dense2_b.data = layer.b;
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub embedding: Vec<f32>,
    pub raga: usize,
    pub source_id: String,
    /// Start of the subsequence within its recording.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Position of the entry in the index.
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
    /// Fewer than the requested `k` entries were available.
    pub truncated: bool,
}

/// Exact Euclidean nearest-neighbour search over stored embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("index dimension must be at least 1".into()));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding of dim {} for an index of dim {}",
                entry.embedding.len(),
                self.dim
            )));
        }
        if entry.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite embedding for `{}`",
                entry.source_id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// The `k` nearest entries by ascending distance, earlier entries first
    /// on ties.
    pub fn query_top_k(&self, query: &[f32], k: usize) -> Result<QueryResult> {
        self.query_excluding(query, k, None)
    }

    /// As [`query_top_k`](Self::query_top_k), skipping entry `exclude`.
    pub fn query_excluding(&self, query: &[f32], k: usize, exclude: Option<usize>) -> Result<QueryResult> {
        if k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::Input("index is empty".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query of dim {} for an index of dim {}",
                query.len(),
                self.dim
            )));
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != exclude)
            .map(|(i, e)| Hit {
                index: i,
                distance: distance(query, &e.embedding),
            })
            .collect();
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        let truncated = hits.len() < k;
        hits.truncate(k);
        Ok(QueryResult { hits, truncated })
    }

    /// Writes `u32 dim, u32 count` and the embeddings as little-endian `f32`
    /// to `path`, and labels to [`sidecar_path`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(&(self.dim as u32).to_le_bytes())?;
        write(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            for x in &e.embedding {
                write(&x.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let side = sidecar_path(path);
        let mut csv = csv::Writer::from_path(&side)?;
        csv.write_record(["source_id", "raga", "offset"])?;
        for e in &self.entries {
            csv.write_record([e.source_id.clone(), e.raga.to_string(), e.offset.to_string()])?;
        }
        csv.flush().map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Input(format!("{}: {msg}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (dim, count) = (word(0), word(4));
        if bytes.len() != 8 + 4 * dim * count {
            return Err(bad("size does not match header"));
        }
        let side = sidecar_path(path);
        let mut rows = csv::Reader::from_path(&side)?;
        let mut index = Self::new(dim)?;
        for (n, row) in rows.records().enumerate() {
            let row = row?;
            if n >= count || row.len() != 3 {
                return Err(bad("label file does not match the embeddings"));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in label file"));
            let start = 8 + 4 * dim * n;
            let embedding = bytes[start..start + 4 * dim]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            index.push(IndexEntry {
                embedding,
                raga: parse(&row[1])?,
                source_id: row[0].to_string(),
                offset: parse(&row[2])?,
            })?;
        }
        if index.len() != count {
            return Err(bad("label file does not match the embeddings"));
        }
        Ok(index)
    }
}

/// `index.bin` → `index.bin.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pool(ragas: usize, per: usize) -> SubsequencePool {
        let items = (0..ragas * per)
            .map(|i| TokenSequence::new(vec![2 + i as u32], format!("r{}", i / per), i / per))
            .collect();
        SubsequencePool::new(items).unwrap()
    }

    #[test]
    fn triplet_constraints_hold() {
        let p = pool(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5000 {
            let t = p.sample_triplet(&mut rng);
            let r = |i: usize| p.get(i).raga;
            assert_eq!(r(t.reference), r(t.positive));
            assert_ne!(t.reference, t.positive);
            assert_ne!(r(t.reference), r(t.negative));
        }
    }

    #[test]
    fn reference_raga_is_uniform() {
        let p = pool(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let zero = (0..n)
            .filter(|_| p.get(p.sample_triplet(&mut rng).reference).raga == 0)
            .count();
        assert!((zero as f64 / n as f64 - 0.5).abs() < 0.05);
    }

    #[test]
    fn negative_raga_is_uniform_over_the_rest() {
        let p = pool(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        let mut total = 0;
        while total < 10_000 {
            let t = p.sample_triplet(&mut rng);
            if p.get(t.reference).raga == 0 {
                counts[p.get(t.negative).raga] += 1;
                total += 1;
            }
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / total as f64 - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn pool_preconditions() {
        let one = |raga, id: &str| TokenSequence::new(vec![3], id, raga);
        assert!(SubsequencePool::new(vec![one(0, "a"), one(0, "b")]).is_err());
        assert!(SubsequencePool::new(vec![one(0, "a"), one(0, "b"), one(1, "c")]).is_err());
    }

    fn index(rows: &[[f32; 2]]) -> EmbeddingIndex {
        let mut ix = EmbeddingIndex::new(2).unwrap();
        for (i, r) in rows.iter().enumerate() {
            ix.push(IndexEntry {
                embedding: r.to_vec(),
                raga: i % 2,
                source_id: format!("s{i}"),
                offset: 10 * i,
            })
            .unwrap();
        }
        ix
    }

    #[test]
    fn self_query_comes_first_and_ties_keep_order() {
        let ix = index(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [5.0, 5.0]]);
        let r = ix.query_top_k(&[0.0, 1.0], 1).unwrap();
        assert_eq!(
            r.hits[0],
            Hit {
                index: 1,
                distance: 0.0
            }
        );
        let r = ix.query_top_k(&[0.0, 0.0], 4).unwrap();
        let order: Vec<usize> = r.hits.iter().map(|h| h.index).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        assert!(!r.truncated);
        let r = ix.query_top_k(&[0.0, 0.0], 9).unwrap();
        assert!(r.truncated && r.hits.len() == 4);
        let r = ix.query_excluding(&[0.0, 1.0], 1, Some(1)).unwrap();
        assert_ne!(r.hits[0].index, 1);
    }

    #[test]
    fn query_errors() {
        let ix = index(&[[1.0, 0.0]]);
        assert!(ix.query_top_k(&[0.0, 0.0], 0).is_err());
        assert!(ix.query_top_k(&[0.0], 1).is_err());
        assert!(EmbeddingIndex::new(2)
            .unwrap()
            .query_top_k(&[0.0, 0.0], 1)
            .is_err());
        let mut ix = ix;
        assert!(ix
            .push(IndexEntry {
                embedding: vec![f32::NAN, 0.0],
                raga: 0,
                source_id: "x".into(),
                offset: 0
            })
            .is_err());
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let ix = index(&[[1.5, -0.25], [3.0, 1e-7], [0.0, 2.0]]);
        ix.save(&path).unwrap();
        assert_eq!(EmbeddingIndex::load(&path).unwrap(), ix);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 3 * 2 * 4);
    }
}
