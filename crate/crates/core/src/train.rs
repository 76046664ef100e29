//! Mini-batch training with Adam, sequentially or through a shared parameter
//! store fed by several workers.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;
use std::marker::PhantomData;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nnet::{self, batchnorm, LossSpec, Mode, ModelConfig, ModelParams, Real};
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub workers: usize,
    /// A gradient is applied only if fewer than this many updates landed
    /// since its parameter snapshot was taken.
    pub staleness_bound: u64,
    pub seed: u64,
    /// Epoch loss at or below which a run counts as converged.
    pub loss_threshold: Option<f64>,
    /// End the run at the first epoch that reaches `loss_threshold`.
    pub stop_at_threshold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 40,
            learning_rate: 1e-4,
            max_epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            workers: 1,
            staleness_bound: 8,
            seed: 0,
            loss_threshold: None,
            stop_at_threshold: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.staleness_bound == 0 {
            return Err(Error::Config("staleness_bound must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        if self.stop_at_threshold && self.loss_threshold.is_none() {
            return Err(Error::Config("stop_at_threshold needs a loss_threshold".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Named flat views of the trainable tensors.
pub trait ParamSet: Clone + Send + Sync {
    type Scalar: Real;
    fn slices(&self) -> Vec<(&'static str, &[Self::Scalar])>;
    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [Self::Scalar])>;
}

impl<T: Real> ParamSet for ModelParams<T> {
    type Scalar = T;

    fn slices(&self) -> Vec<(&'static str, &[T])> {
        self.learnable()
            .into_iter()
            .map(|(n, t)| (n, &t.data[..]))
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        self.learnable_mut()
            .into_iter()
            .map(|(n, t)| (n, &mut t.data[..]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moments plus the number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamSet<Scalar = T>>(params: &P) -> Self {
        let zeros: Vec<Vec<T>> = params
            .slices()
            .iter()
            .map(|(_, s)| vec![T::zero(); s.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient entry
/// is non-finite.
pub fn adam_step<T: Real, P: ParamSet<Scalar = T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    adam: &Adam,
) -> Result<()> {
    let g = grads.slices();
    for (name, s) in &g {
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
    }
    let mut p = params.slices_mut();
    if p.len() != g.len()
        || p.len() != state.m.len()
        || p.iter()
            .zip(&g)
            .zip(&state.m)
            .any(|(((_, a), (_, b)), m)| a.len() != b.len() || a.len() != m.len())
    {
        return Err(Error::Shape("parameters, gradients and moments disagree".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(adam.beta1);
    let b2 = T::of(adam.beta2);
    let one = T::one();
    let c1 = T::of(1.0 - adam.beta1.powi(t));
    let c2 = T::of(1.0 - adam.beta2.powi(t));
    let lr = T::of(adam.learning_rate);
    let eps = T::of(adam.epsilon);
    for (i, (_, ps)) in p.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in ps.iter_mut().enumerate() {
            let gj = g[i].1[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Result of one mini-batch gradient evaluation.
pub struct Step<P, A> {
    pub loss: f64,
    pub grads: P,
    /// Extra state folded into the parameters when the step is applied.
    pub aux: A,
}

/// A differentiable training problem over a fixed set of examples.
pub trait Objective: Sync {
    type Params: ParamSet;
    type Aux: Send;

    fn num_examples(&self) -> usize;

    fn gradient(
        &self,
        params: &Self::Params,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Step<Self::Params, Self::Aux>>;

    fn absorb(&self, _params: &mut Self::Params, _aux: Self::Aux) {}

    /// Mean loss over all examples with the parameters frozen.
    fn loss(&self, params: &Self::Params) -> Result<f64>;
}

/// Classifier training over labelled subsequences (label = `raga`).
pub struct SequenceClassification<'a, T> {
    cfg: ModelConfig,
    data: &'a [TokenSequence],
    precision: PhantomData<fn() -> T>,
}

impl<'a, T: Real> SequenceClassification<'a, T> {
    pub fn new(cfg: &ModelConfig, data: &'a [TokenSequence]) -> Result<Self> {
        cfg.validate()?;
        if cfg.head != nnet::Head::Classifier {
            return Err(Error::Config("classification needs a softmax head".into()));
        }
        if let Some(s) = data.iter().find(|s| s.raga >= cfg.n_classes) {
            return Err(Error::Input(format!(
                "label {} of `{}` outside {} classes",
                s.raga, s.source_id, cfg.n_classes
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            data,
            precision: PhantomData,
        })
    }
}

/// Batch-norm statistics of a training batch: mean, variance, batch size.
pub type BatchStats<T> = Option<(Vec<T>, Vec<T>, usize)>;

impl<T: Real> Objective for SequenceClassification<'_, T> {
    type Params = ModelParams<T>;
    type Aux = BatchStats<T>;

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn gradient(
        &self,
        params: &ModelParams<T>,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Step<ModelParams<T>, BatchStats<T>>> {
        let tokens: Vec<&[u32]> = batch.iter().map(|&i| &self.data[i].ids[..]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.data[i].raga).collect();
        let trace = nnet::forward_batch(params, &self.cfg, &tokens, Mode::Train, rng)?;
        let spec = LossSpec::Cce { labels: &labels };
        let loss = nnet::batch_loss(&trace, &spec)?.as_f64();
        let grads = nnet::backward(params, &self.cfg, &trace, &spec)?;
        let aux = trace
            .batch_stats()
            .map(|(m, v)| (m.clone(), v.clone(), trace.len()));
        Ok(Step { loss, grads, aux })
    }

    fn absorb(&self, params: &mut ModelParams<T>, aux: BatchStats<T>) {
        if let Some((mean, var, n)) = aux {
            batchnorm::update_running(
                &mut params.bn_running_mean.data,
                &mut params.bn_running_var.data,
                &mean,
                &var,
                n,
            );
        }
    }

    fn loss(&self, params: &ModelParams<T>) -> Result<f64> {
        let losses = self
            .data
            .par_iter()
            .map(|s| {
                let p = nnet::forward_eval(params, &self.cfg, &s.ids)?;
                Ok(nnet::cce_loss(&p, s.raga)?.as_f64())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

/// Weights `[dims × classes]` and biases of a single dense softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ParamSet for LinearParams {
    type Scalar = f64;

    fn slices(&self) -> Vec<(&'static str, &[f64])> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![("w", &mut self.w), ("b", &mut self.b)]
    }
}

/// Multinomial logistic regression: a convex problem for exercising the
/// trainers.
pub struct SoftmaxRegression {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl SoftmaxRegression {
    pub fn dims(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn zero_params(&self) -> LinearParams {
        LinearParams {
            w: vec![0.0; self.dims() * self.n_classes],
            b: vec![0.0; self.n_classes],
        }
    }

    fn probs(&self, p: &LinearParams, x: &[f64]) -> Vec<f64> {
        let c = self.n_classes;
        let mut logits = p.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            nnet::axpy(xi, &p.w[i * c..(i + 1) * c], &mut logits);
        }
        nnet::softmax(&logits)
    }
}

impl Objective for SoftmaxRegression {
    type Params = LinearParams;
    type Aux = ();

    fn num_examples(&self) -> usize {
        self.labels.len()
    }

    fn gradient(
        &self,
        p: &LinearParams,
        batch: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Step<LinearParams, ()>> {
        let c = self.n_classes;
        let mut grads = LinearParams {
            w: vec![0.0; p.w.len()],
            b: vec![0.0; c],
        };
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &n in batch {
            let x = &self.features[n];
            let mut d = self.probs(p, x);
            loss += nnet::cce_loss(&d, self.labels[n])?;
            d[self.labels[n]] -= 1.0;
            for (i, &xi) in x.iter().enumerate() {
                nnet::axpy(xi * scale, &d, &mut grads.w[i * c..(i + 1) * c]);
            }
            nnet::axpy(scale, &d, &mut grads.b);
        }
        Ok(Step {
            loss: loss * scale,
            grads,
            aux: (),
        })
    }

    fn loss(&self, p: &LinearParams) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in self.features.iter().zip(&self.labels) {
            total += nnet::cce_loss(&self.probs(p, x), y)?;
        }
        Ok(total / self.labels.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch's applied updates.
    pub loss: f64,
    /// Seconds since the run started.
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub loss_threshold: Option<f64>,
    pub epochs_to_threshold: Option<usize>,
    pub batches_per_epoch: usize,
    pub submitted: u64,
    pub applied: u64,
    pub discarded: u64,
    /// Global batch indices in the order their updates were applied.
    pub applied_order: Vec<u64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.iter().min_by(|a, b| a.loss.total_cmp(&b.loss))
    }

    pub fn total_wall_s(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.wall_s)
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "wall_s"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                format!("{:.6}", e.wall_s),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(f)
    }

    fn push_epoch(&mut self, loss: f64, wall_s: f64) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "loss in epoch {}",
                self.epochs.len() + 1
            )));
        }
        let epoch = self.epochs.len() + 1;
        log::debug!("epoch {epoch}: loss {loss:.6} ({wall_s:.2}s)");
        self.epochs.push(EpochRecord { epoch, loss, wall_s });
        let reached = self.loss_threshold.is_some_and(|t| loss <= t);
        if reached && self.epochs_to_threshold.is_none() {
            self.epochs_to_threshold = Some(epoch);
        }
        Ok(reached)
    }
}

const SHUFFLE_DOMAIN: u64 = 0x5348_5546_464c_4531;
const BATCH_DOMAIN: u64 = 0x4241_5443_4852_4e47;

fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

/// Mini-batches of one epoch: a seeded shuffle cut into `batch_size` chunks.
/// A trailing chunk of one example joins the previous chunk so that batch
/// norm always sees at least two samples.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SHUFFLE_DOMAIN, epoch));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    Ok(batches)
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    match n % batch_size {
        0 => full,
        1 if full > 0 => full,
        _ => full + 1,
    }
}

/// Resolves global batch indices to example indices, caching one epoch.
struct Schedule {
    n: usize,
    batch_size: usize,
    seed: u64,
    per_epoch: usize,
    cached: Option<(u64, Vec<Vec<usize>>)>,
}

impl Schedule {
    fn new(n: usize, cfg: &TrainConfig) -> Result<Self> {
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        Ok(Self {
            n,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            per_epoch: batches_per_epoch(n, cfg.batch_size),
            cached: None,
        })
    }

    fn batch(&mut self, global: u64) -> Result<Vec<usize>> {
        let epoch = global / self.per_epoch as u64;
        let index = (global % self.per_epoch as u64) as usize;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached = Some((epoch, epoch_batches(self.n, self.batch_size, self.seed, epoch)?));
        }
        Ok(self.cached.as_ref().expect("just filled").1[index].clone())
    }
}

fn batch_rng(seed: u64, global: u64) -> ChaCha8Rng {
    stream_rng(seed, BATCH_DOMAIN, global)
}

/// Called after every completed epoch with the report so far and the
/// current parameters; an error aborts the run.
pub type EpochHook<'a, P> = &'a mut (dyn FnMut(&TrainReport, &P) -> Result<()> + Send);

/// Single-threaded training. Identical seeds give bit-identical results.
pub fn train_sequential<O: Objective>(
    objective: &O,
    init: O::Params,
    cfg: &TrainConfig,
    on_epoch: Option<EpochHook<'_, O::Params>>,
) -> Result<(O::Params, TrainReport)> {
    cfg.validate()?;
    let per_epoch = batches_per_epoch(objective.num_examples(), cfg.batch_size) as u64;
    let order: Vec<u64> = (0..per_epoch * cfg.max_epochs as u64).collect();
    replay(objective, init, cfg, &order, on_epoch)
}

/// Applies the batches named by `order` (global batch indices) one after
/// another. Each block of batches-per-epoch updates forms an epoch.
pub fn replay<O: Objective>(
    objective: &O,
    init: O::Params,
    cfg: &TrainConfig,
    order: &[u64],
    mut on_epoch: Option<EpochHook<'_, O::Params>>,
) -> Result<(O::Params, TrainReport)> {
    cfg.validate()?;
    let n = objective.num_examples();
    let mut schedule = Schedule::new(n, cfg)?;
    let per_epoch = schedule.per_epoch;
    let adam = cfg.adam();
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut report = TrainReport {
        loss_threshold: cfg.loss_threshold,
        batches_per_epoch: per_epoch,
        ..Default::default()
    };
    let start = Instant::now();
    let mut epoch_loss = 0.0;
    for (k, &global) in order.iter().enumerate() {
        let batch = schedule.batch(global)?;
        let step = objective.gradient(&params, &batch, &mut batch_rng(cfg.seed, global))?;
        report.submitted += 1;
        adam_step(&mut params, &step.grads, &mut state, &adam)?;
        objective.absorb(&mut params, step.aux);
        report.applied += 1;
        report.applied_order.push(global);
        epoch_loss += step.loss;
        if (k + 1) % per_epoch == 0 {
            let reached = report.push_epoch(epoch_loss / per_epoch as f64, start.elapsed().as_secs_f64())?;
            epoch_loss = 0.0;
            if let Some(hook) = on_epoch.as_mut() {
                hook(&report, &params)?;
            }
            if reached && cfg.stop_at_threshold {
                break;
            }
        }
    }
    Ok((params, report))
}

struct Store<P: ParamSet> {
    params: P,
    adam: AdamState<P::Scalar>,
    next_batch: u64,
    retry: BinaryHeap<Reverse<u64>>,
    epoch_loss: f64,
    report: TrainReport,
    done: bool,
    failure: Option<Error>,
}

/// Asynchronous training: workers snapshot the shared parameters, compute a
/// mini-batch gradient without holding any lock, then submit it. The store
/// applies submissions one at a time. A submission whose snapshot is
/// `staleness_bound` or more updates old is discarded and its batch is
/// queued again. The run ends after `max_epochs × batches_per_epoch` applied
/// updates.
pub fn train_async<O: Objective>(
    objective: &O,
    init: O::Params,
    cfg: &TrainConfig,
    mut on_epoch: Option<EpochHook<'_, O::Params>>,
) -> Result<(O::Params, TrainReport)> {
    cfg.validate()?;
    if cfg.workers < 2 {
        return Err(Error::Config(
            "asynchronous training needs at least 2 workers".into(),
        ));
    }
    let n = objective.num_examples();
    let per_epoch = Schedule::new(n, cfg)?.per_epoch;
    let budget = (per_epoch * cfg.max_epochs) as u64;
    let adam_cfg = cfg.adam();
    let store = Mutex::new(Store {
        adam: AdamState::new(&init),
        params: init,
        next_batch: 0,
        retry: BinaryHeap::new(),
        epoch_loss: 0.0,
        report: TrainReport {
            loss_threshold: cfg.loss_threshold,
            batches_per_epoch: per_epoch,
            ..Default::default()
        },
        done: budget == 0,
        failure: None,
    });
    let hook = Mutex::new(on_epoch.as_mut());
    let start = Instant::now();
    let lock = || store.lock().unwrap_or_else(|e| e.into_inner());

    let worker = |_id: usize| -> Result<()> {
        let mut schedule = Schedule::new(n, cfg)?;
        loop {
            let (global, snapshot, version) = {
                let mut s = lock();
                if s.done {
                    return Ok(());
                }
                let global = match s.retry.pop() {
                    Some(Reverse(g)) => g,
                    None => {
                        s.next_batch += 1;
                        s.next_batch - 1
                    }
                };
                (global, s.params.clone(), s.adam.t)
            };
            let batch = schedule.batch(global)?;
            let step = objective.gradient(&snapshot, &batch, &mut batch_rng(cfg.seed, global))?;
            drop(snapshot);

            let mut s = lock();
            s.report.submitted += 1;
            if s.done {
                s.report.discarded += 1;
                return Ok(());
            }
            if s.adam.t - version >= cfg.staleness_bound {
                s.report.discarded += 1;
                s.retry.push(Reverse(global));
                continue;
            }
            let st = &mut *s;
            adam_step(&mut st.params, &step.grads, &mut st.adam, &adam_cfg)?;
            objective.absorb(&mut st.params, step.aux);
            st.report.applied += 1;
            st.report.applied_order.push(global);
            st.epoch_loss += step.loss;
            if st.report.applied % per_epoch as u64 == 0 {
                let loss = st.epoch_loss / per_epoch as f64;
                st.epoch_loss = 0.0;
                let reached = st.report.push_epoch(loss, start.elapsed().as_secs_f64())?;
                if let Some(h) = hook.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
                    h(&st.report, &st.params)?;
                }
                if st.report.applied >= budget || (reached && cfg.stop_at_threshold) {
                    st.done = true;
                }
            }
        }
    };

    std::thread::scope(|scope| {
        for id in 0..cfg.workers {
            let worker = &worker;
            let store = &store;
            scope.spawn(move || {
                let outcome =
                    panic::catch_unwind(AssertUnwindSafe(|| worker(id))).unwrap_or_else(|payload| {
                        let msg = payload
                            .downcast_ref::<&str>()
                            .map(|m| m.to_string())
                            .or_else(|| payload.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "unknown panic".into());
                        Err(Error::Worker(format!("worker {id} panicked: {msg}")))
                    });
                if let Err(e) = outcome {
                    let mut s = store.lock().unwrap_or_else(|p| p.into_inner());
                    s.done = true;
                    s.failure.get_or_insert(e);
                }
            });
        }
    });

    let mut s = store.into_inner().unwrap_or_else(|e| e.into_inner());
    if let Some(e) = s.failure.take() {
        return Err(e);
    }
    Ok((s.params, s.report))
}

/// Dispatches on `cfg.workers`.
pub fn train<O: Objective>(
    objective: &O,
    init: O::Params,
    cfg: &TrainConfig,
    on_epoch: Option<EpochHook<'_, O::Params>>,
) -> Result<(O::Params, TrainReport)> {
    if cfg.workers > 1 {
        train_async(objective, init, cfg, on_epoch)
    } else {
        train_sequential(objective, init, cfg, on_epoch)
    }
}
