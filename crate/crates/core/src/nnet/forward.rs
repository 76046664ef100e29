use rand::Rng;
use rayon::prelude::*;

use super::batchnorm::{batchnorm_forward, update_running, BatchNormOutput};
use super::loss::softmax;
use super::params::ModelParams;
use super::tensor::{axpy, dot, sigmoid, Real};
use super::{Head, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::tokenize::PAD_ID;

/// Cached activations of the recurrent and attention layers for one input.
/// PAD positions are skipped entirely: the LSTM state carries over them and
/// attention never sees them.
#[derive(Debug, Clone)]
pub struct SequenceTrace<T> {
    /// Original positions of the unmasked tokens.
    pub positions: Vec<usize>,
    pub ids: Vec<u32>,
    /// Per step `[embedding; h_prev]`.
    pub(crate) xh: Vec<T>,
    /// Per step activated gates `[i, f, o, g]`.
    pub(crate) gates: Vec<T>,
    pub(crate) c: Vec<T>,
    pub(crate) tanh_c: Vec<T>,
    pub(crate) h: Vec<T>,
    /// Per step `tanh(W_a h_t)`.
    pub(crate) u: Vec<T>,
    /// Attention weights over unmasked steps.
    pub alpha: Vec<T>,
    pub context: Vec<T>,
}

impl<T: Real> SequenceTrace<T> {
    pub fn steps(&self) -> usize {
        self.ids.len()
    }
}

pub(crate) fn sequence_forward<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<SequenceTrace<T>> {
    let (e_dim, h_dim) = (cfg.embed_dim, cfg.lstm_hidden);
    let in_dim = cfg.lstm_input();
    let mut positions = Vec::with_capacity(tokens.len());
    let mut ids = Vec::with_capacity(tokens.len());
    for (pos, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        if id != PAD_ID {
            positions.push(pos);
            ids.push(id);
        }
    }
    let steps = ids.len();
    if steps == 0 {
        return Err(Error::NoUnmaskedStep);
    }

    let mut xh = vec![T::zero(); steps * in_dim];
    let mut gates = vec![T::zero(); steps * 4 * h_dim];
    let mut c = vec![T::zero(); steps * h_dim];
    let mut tanh_c = vec![T::zero(); steps * h_dim];
    let mut h = vec![T::zero(); steps * h_dim];
    let mut z = vec![T::zero(); 4 * h_dim];

    for (t, &id) in ids.iter().enumerate() {
        let x = &mut xh[t * in_dim..(t + 1) * in_dim];
        x[..e_dim].copy_from_slice(params.embedding.row(id as usize));
        if t > 0 {
            x[e_dim..].copy_from_slice(&h[(t - 1) * h_dim..t * h_dim]);
        }
        for (r, zr) in z.iter_mut().enumerate() {
            *zr = params.lstm_b.data[r] + dot(params.lstm_w.row(r), x);
        }
        let g_t = &mut gates[t * 4 * h_dim..(t + 1) * 4 * h_dim];
        for j in 0..h_dim {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[h_dim + j]);
            let o_g = sigmoid(z[2 * h_dim + j]);
            let cand = z[3 * h_dim + j].tanh();
            g_t[j] = i_g;
            g_t[h_dim + j] = f_g;
            g_t[2 * h_dim + j] = o_g;
            g_t[3 * h_dim + j] = cand;
            let c_prev = if t > 0 { c[(t - 1) * h_dim + j] } else { T::zero() };
            let c_new = f_g * c_prev + i_g * cand;
            let tc = c_new.tanh();
            c[t * h_dim + j] = c_new;
            tanh_c[t * h_dim + j] = tc;
            h[t * h_dim + j] = o_g * tc;
        }
    }

    // Soft alignment: e_t = v · tanh(W_a h_t), α = softmax(e), context = Σ α_t h_t.
    let mut u = vec![T::zero(); steps * h_dim];
    let mut scores = vec![T::zero(); steps];
    for t in 0..steps {
        let h_t = &h[t * h_dim..(t + 1) * h_dim];
        let u_t = &mut u[t * h_dim..(t + 1) * h_dim];
        for (a, ua) in u_t.iter_mut().enumerate() {
            *ua = dot(params.attn_w.row(a), h_t).tanh();
        }
        scores[t] = dot(&params.attn_v.data, u_t);
    }
    let alpha = softmax(&scores);
    let mut context = vec![T::zero(); h_dim];
    for (t, &a) in alpha.iter().enumerate() {
        axpy(a, &h[t * h_dim..(t + 1) * h_dim], &mut context);
    }

    Ok(SequenceTrace {
        positions,
        ids,
        xh,
        gates,
        c,
        tanh_c,
        h,
        u,
        alpha,
        context,
    })
}

/// Everything the backward pass needs for one batch.
#[derive(Debug, Clone)]
pub struct BatchTrace<T> {
    pub seqs: Vec<SequenceTrace<T>>,
    pub bn: BatchNormOutput<T>,
    /// Dense1 pre-activations.
    pub(crate) a1: Vec<Vec<T>>,
    /// Inverted-dropout scale per dense1 unit (train mode only).
    pub(crate) masks: Option<Vec<Vec<T>>>,
    /// Dense1 output after ReLU and dropout.
    pub(crate) dropped: Vec<Vec<T>>,
    /// Last dense layer outputs (logits or embeddings).
    pub outputs: Vec<Vec<T>>,
    /// Softmax of `outputs` for classifier heads.
    pub probs: Option<Vec<Vec<T>>>,
    pub mode: Mode,
}

impl<T: Real> BatchTrace<T> {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Batch mean and variance seen by batch norm (train mode only).
    pub fn batch_stats(&self) -> Option<&(Vec<T>, Vec<T>)> {
        self.bn.batch_stats.as_ref()
    }
}

fn dense<T: Real>(x: &[T], w: &super::Tensor<T>, b: &[T]) -> Vec<T> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, w.row(i), &mut out);
        }
    }
    out
}

pub(crate) fn check_model<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    params.check_shapes(cfg)
}

/// Runs a batch through the network. In train mode, dropout masks are drawn
/// from `rng` in sample order; batch-norm statistics are recorded in the
/// trace but not folded into `params` (see [`absorb_batch_stats`]).
pub fn forward_batch<T: Real, S: AsRef<[u32]> + Sync, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &[S],
    mode: Mode,
    rng: &mut R,
) -> Result<BatchTrace<T>> {
    check_model(params, cfg)?;
    if mode == Mode::Train && batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let seqs = batch
        .par_iter()
        .map(|tokens| sequence_forward(params, cfg, tokens.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let contexts: Vec<Vec<T>> = seqs.iter().map(|s| s.context.clone()).collect();
    let bn = batchnorm_forward(
        &contexts,
        &params.bn_gamma.data,
        &params.bn_beta.data,
        &params.bn_running_mean.data,
        &params.bn_running_var.data,
        mode,
    )?;

    let a1: Vec<Vec<T>> =
        bn.y.iter()
            .map(|y| dense(y, &params.dense1_w, &params.dense1_b.data))
            .collect();
    let relu = |v: &Vec<T>| -> Vec<T> { v.iter().map(|&x| x.max(T::zero())).collect() };

    let p = cfg.dropout_rate;
    let masks = (mode == Mode::Train && p > 0.0).then(|| {
        let keep_scale = T::of(1.0 / (1.0 - p));
        a1.iter()
            .map(|row| {
                row.iter()
                    .map(|_| {
                        if rng.gen::<f64>() < p {
                            T::zero()
                        } else {
                            keep_scale
                        }
                    })
                    .collect::<Vec<T>>()
            })
            .collect::<Vec<_>>()
    });
    let dropped: Vec<Vec<T>> = match &masks {
        Some(ms) => a1
            .iter()
            .zip(ms)
            .map(|(row, m)| relu(row).iter().zip(m).map(|(&x, &s)| x * s).collect())
            .collect(),
        None => a1.iter().map(relu).collect(),
    };
    let outputs: Vec<Vec<T>> = dropped
        .iter()
        .map(|d| dense(d, &params.dense2_w, &params.dense2_b.data))
        .collect();
    let probs = (cfg.head == Head::Classifier).then(|| outputs.iter().map(|o| softmax(o)).collect());

    Ok(BatchTrace {
        seqs,
        bn,
        a1,
        masks,
        dropped,
        outputs,
        probs,
        mode,
    })
}

/// Folds a train-mode trace's batch statistics into the running statistics.
pub fn absorb_batch_stats<T: Real>(params: &mut ModelParams<T>, trace: &BatchTrace<T>) {
    if let Some((mean, var)) = trace.batch_stats() {
        update_running(
            &mut params.bn_running_mean.data,
            &mut params.bn_running_var.data,
            mean,
            var,
            trace.len(),
        );
    }
}

/// Class probabilities for a single sequence. Train mode needs a batch for
/// batch norm and therefore fails here with [`Error::BatchTooSmall`].
pub fn forward_classifier<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<T>, BatchTrace<T>)> {
    if cfg.head != Head::Classifier {
        return Err(Error::Config("model has no softmax head".into()));
    }
    let trace = forward_batch(params, cfg, &[tokens], mode, rng)?;
    let probs = trace.probs.as_ref().expect("classifier head")[0].clone();
    Ok((probs, trace))
}

/// Eval-mode dense1 activations (after ReLU): the frozen trunk's output.
pub fn trunk_features<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, tokens: &[u32]) -> Result<Vec<T>> {
    check_model(params, cfg)?;
    let seq = sequence_forward(params, cfg, tokens)?;
    let h = cfg.lstm_hidden;
    let y: Vec<T> = (0..h)
        .map(|j| {
            let inv_std = T::one() / (params.bn_running_var.data[j] + T::of(super::batchnorm::BN_EPS)).sqrt();
            let xhat = (seq.context[j] - params.bn_running_mean.data[j]) * inv_std;
            params.bn_gamma.data[j] * xhat + params.bn_beta.data[j]
        })
        .collect();
    Ok(dense(&y, &params.dense1_w, &params.dense1_b.data)
        .into_iter()
        .map(|x| x.max(T::zero()))
        .collect())
}

/// Eval-mode output for one sequence: probabilities for classifier heads,
/// the raw embedding otherwise.
pub fn forward_eval<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, tokens: &[u32]) -> Result<Vec<T>> {
    let feats = trunk_features(params, cfg, tokens)?;
    let out = dense(&feats, &params.dense2_w, &params.dense2_b.data);
    Ok(match cfg.head {
        Head::Classifier => softmax(&out),
        Head::Embedding => out,
    })
}
