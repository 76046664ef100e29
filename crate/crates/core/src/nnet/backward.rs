use rayon::prelude::*;

use super::batchnorm::batchnorm_backward;
use super::forward::{BatchTrace, SequenceTrace};
use super::loss::{cce_loss, triplet_grad, triplet_loss, LOG_EPS};
use super::params::ModelParams;
use super::tensor::{axpy, dot, Real};
use super::ModelConfig;
use crate::error::{Error, Result};

/// Loss over a forward batch. Both kinds average over their items.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Categorical cross entropy against one label per batch row.
    Cce { labels: &'a [usize] },
    /// Hinge triplet loss over `(reference, positive, negative)` row indices.
    Triplet {
        margin: f64,
        triplets: &'a [(usize, usize, usize)],
    },
}

fn check_spec<T: Real>(trace: &BatchTrace<T>, spec: &LossSpec<'_>) -> Result<()> {
    match spec {
        LossSpec::Cce { labels } => {
            if trace.probs.is_none() {
                return Err(Error::Config("cross entropy needs a softmax head".into()));
            }
            if labels.len() != trace.len() {
                return Err(Error::Shape(format!(
                    "{} labels for a batch of {}",
                    labels.len(),
                    trace.len()
                )));
            }
        }
        LossSpec::Triplet { triplets, .. } => {
            if triplets.is_empty() {
                return Err(Error::Input("no triplets".into()));
            }
            let n = trace.len();
            if triplets.iter().any(|&(a, p, q)| a >= n || p >= n || q >= n) {
                return Err(Error::Shape("triplet index outside the batch".into()));
            }
        }
    }
    Ok(())
}

pub fn batch_loss<T: Real>(trace: &BatchTrace<T>, spec: &LossSpec<'_>) -> Result<T> {
    check_spec(trace, spec)?;
    match spec {
        LossSpec::Cce { labels } => {
            let probs = trace.probs.as_ref().expect("checked");
            let mut total = T::zero();
            for (p, &y) in probs.iter().zip(labels.iter()) {
                total += cce_loss(p, y)?;
            }
            Ok(total / T::of(labels.len() as f64))
        }
        LossSpec::Triplet { margin, triplets } => {
            let o = &trace.outputs;
            let mut total = T::zero();
            for &(a, p, n) in triplets.iter() {
                total += triplet_loss(&o[a], &o[p], &o[n], T::of(*margin))?;
            }
            Ok(total / T::of(triplets.len() as f64))
        }
    }
}

/// Gradient of the batch loss with respect to the last dense layer's outputs.
pub fn output_gradient<T: Real>(trace: &BatchTrace<T>, spec: &LossSpec<'_>) -> Result<Vec<Vec<T>>> {
    check_spec(trace, spec)?;
    match spec {
        LossSpec::Cce { labels } => {
            let probs = trace.probs.as_ref().expect("checked");
            let inv_n = T::one() / T::of(labels.len() as f64);
            Ok(probs
                .iter()
                .zip(labels.iter())
                .map(|(p, &y)| {
                    // d/dz of −log(p_y + ε) through softmax.
                    let scale = p[y] / (p[y] + T::of(LOG_EPS)) * inv_n;
                    p.iter()
                        .enumerate()
                        .map(|(j, &pj)| {
                            let target = if j == y { T::one() } else { T::zero() };
                            scale * (pj - target)
                        })
                        .collect()
                })
                .collect())
        }
        LossSpec::Triplet { margin, triplets } => {
            let o = &trace.outputs;
            let dim = o[0].len();
            let mut grads = vec![vec![T::zero(); dim]; o.len()];
            let inv_n = T::one() / T::of(triplets.len() as f64);
            for &(a, p, n) in triplets.iter() {
                let (ga, gp, gn) = triplet_grad(&o[a], &o[p], &o[n], T::of(*margin))?;
                axpy(inv_n, &ga, &mut grads[a]);
                axpy(inv_n, &gp, &mut grads[p]);
                axpy(inv_n, &gn, &mut grads[n]);
            }
            Ok(grads)
        }
    }
}

struct SequenceGrads<T> {
    embedding: Vec<(u32, Vec<T>)>,
    lstm_w: Vec<T>,
    lstm_b: Vec<T>,
    attn_w: Vec<T>,
    attn_v: Vec<T>,
}

fn sequence_backward<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tr: &SequenceTrace<T>,
    dcontext: &[T],
) -> SequenceGrads<T> {
    let (e_dim, h_dim) = (cfg.embed_dim, cfg.lstm_hidden);
    let in_dim = cfg.lstm_input();
    let steps = tr.steps();
    let mut attn_w = vec![T::zero(); h_dim * h_dim];
    let mut attn_v = vec![T::zero(); h_dim];

    // Attention.
    let mut dh_attn = vec![T::zero(); steps * h_dim];
    let dalpha: Vec<T> = (0..steps)
        .map(|t| dot(&tr.h[t * h_dim..(t + 1) * h_dim], dcontext))
        .collect();
    let weighted: T = tr.alpha.iter().zip(&dalpha).map(|(&a, &d)| a * d).sum();
    let mut dpre = vec![T::zero(); h_dim];
    for t in 0..steps {
        let dh = &mut dh_attn[t * h_dim..(t + 1) * h_dim];
        axpy(tr.alpha[t], dcontext, dh);
        let de = tr.alpha[t] * (dalpha[t] - weighted);
        let u_t = &tr.u[t * h_dim..(t + 1) * h_dim];
        axpy(de, u_t, &mut attn_v);
        for a in 0..h_dim {
            dpre[a] = de * params.attn_v.data[a] * (T::one() - u_t[a] * u_t[a]);
        }
        let h_t = &tr.h[t * h_dim..(t + 1) * h_dim];
        for a in 0..h_dim {
            if dpre[a] != T::zero() {
                axpy(dpre[a], h_t, &mut attn_w[a * h_dim..(a + 1) * h_dim]);
                axpy(dpre[a], params.attn_w.row(a), dh);
            }
        }
    }

    // LSTM, backwards through time.
    let mut lstm_w = vec![T::zero(); 4 * h_dim * in_dim];
    let mut lstm_b = vec![T::zero(); 4 * h_dim];
    let mut embedding = Vec::with_capacity(steps);
    let mut dh_next = vec![T::zero(); h_dim];
    let mut dc_next = vec![T::zero(); h_dim];
    let mut dz = vec![T::zero(); 4 * h_dim];
    let mut dxh = vec![T::zero(); in_dim];
    for t in (0..steps).rev() {
        let g = &tr.gates[t * 4 * h_dim..(t + 1) * 4 * h_dim];
        for j in 0..h_dim {
            let (ig, fg, og, cand) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
            let tc = tr.tanh_c[t * h_dim + j];
            let dh = dh_attn[t * h_dim + j] + dh_next[j];
            let dc = dc_next[j] + dh * og * (T::one() - tc * tc);
            let c_prev = if t > 0 {
                tr.c[(t - 1) * h_dim + j]
            } else {
                T::zero()
            };
            dz[j] = dc * cand * ig * (T::one() - ig);
            dz[h_dim + j] = dc * c_prev * fg * (T::one() - fg);
            dz[2 * h_dim + j] = dh * tc * og * (T::one() - og);
            dz[3 * h_dim + j] = dc * ig * (T::one() - cand * cand);
            dc_next[j] = dc * fg;
        }
        let x = &tr.xh[t * in_dim..(t + 1) * in_dim];
        dxh.iter_mut().for_each(|v| *v = T::zero());
        for (r, &d) in dz.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            lstm_b[r] += d;
            axpy(d, x, &mut lstm_w[r * in_dim..(r + 1) * in_dim]);
            axpy(d, params.lstm_w.row(r), &mut dxh);
        }
        embedding.push((tr.ids[t], dxh[..e_dim].to_vec()));
        dh_next.copy_from_slice(&dxh[e_dim..]);
    }

    SequenceGrads {
        embedding,
        lstm_w,
        lstm_b,
        attn_w,
        attn_v,
    }
}

/// Reverse-mode gradients of the batch loss for every learnable tensor.
/// The running-statistics entries of the result are zero.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    trace: &BatchTrace<T>,
    spec: &LossSpec<'_>,
) -> Result<ModelParams<T>> {
    let dout = output_gradient(trace, spec)?;
    backward_from_outputs(params, cfg, trace, &dout)
}

/// Propagates an arbitrary gradient on the last dense layer's outputs.
pub fn backward_from_outputs<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    trace: &BatchTrace<T>,
    dout: &[Vec<T>],
) -> Result<ModelParams<T>> {
    if dout.len() != trace.len() || dout.iter().any(|d| d.len() != cfg.n_classes) {
        return Err(Error::Shape("output gradient does not match the batch".into()));
    }
    let mut grads = ModelParams::zeros(cfg);
    grads.bn_running_var.data.fill(T::zero());
    let d1 = cfg.dense1_units;
    let h_dim = cfg.lstm_hidden;

    let mut dy = Vec::with_capacity(trace.len());
    for b in 0..trace.len() {
        let out_grad = &dout[b];
        axpy(T::one(), out_grad, &mut grads.dense2_b.data);
        let dropped = &trace.dropped[b];
        let mut da1 = vec![T::zero(); d1];
        for i in 0..d1 {
            if dropped[i] != T::zero() {
                axpy(dropped[i], out_grad, grads.dense2_w.row_mut(i));
            }
            let pre = trace.a1[b][i];
            if pre > T::zero() {
                let scale = trace.masks.as_ref().map_or(T::one(), |m| m[b][i]);
                da1[i] = dot(params.dense2_w.row(i), out_grad) * scale;
            }
        }
        axpy(T::one(), &da1, &mut grads.dense1_b.data);
        let y = &trace.bn.y[b];
        let mut dy_b = vec![T::zero(); h_dim];
        for i in 0..h_dim {
            axpy(y[i], &da1, grads.dense1_w.row_mut(i));
            dy_b[i] = dot(params.dense1_w.row(i), &da1);
        }
        dy.push(dy_b);
    }

    let (dcontext, dgamma, dbeta) = batchnorm_backward(&dy, &trace.bn, &params.bn_gamma.data);
    grads.bn_gamma.data.copy_from_slice(&dgamma);
    grads.bn_beta.data.copy_from_slice(&dbeta);

    let per_seq: Vec<SequenceGrads<T>> = trace
        .seqs
        .par_iter()
        .zip(dcontext.par_iter())
        .map(|(tr, dc)| sequence_backward(params, cfg, tr, dc))
        .collect();
    // Summed in batch order so results do not depend on scheduling.
    for sg in per_seq {
        for (id, d) in &sg.embedding {
            axpy(T::one(), d, grads.embedding.row_mut(*id as usize));
        }
        axpy(T::one(), &sg.lstm_w, &mut grads.lstm_w.data);
        axpy(T::one(), &sg.lstm_b, &mut grads.lstm_b.data);
        axpy(T::one(), &sg.attn_w, &mut grads.attn_w.data);
        axpy(T::one(), &sg.attn_v, &mut grads.attn_v.data);
    }
    Ok(grads)
}
