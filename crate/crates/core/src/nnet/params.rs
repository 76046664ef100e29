use rand::Rng;

use super::tensor::{Real, Tensor};
use super::ModelConfig;
use crate::error::{Error, Result};

/// All tensors of the network. LSTM gate rows are ordered input, forget,
/// output, candidate, each acting on `[embedding; previous hidden]`. Dense
/// weights are stored `[inputs × outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: Tensor<T>,
    pub lstm_w: Tensor<T>,
    pub lstm_b: Tensor<T>,
    pub attn_w: Tensor<T>,
    pub attn_v: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub bn_running_mean: Tensor<T>,
    pub bn_running_var: Tensor<T>,
    pub dense1_w: Tensor<T>,
    pub dense1_b: Tensor<T>,
    pub dense2_w: Tensor<T>,
    pub dense2_b: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// All learnable tensors zero; running variance one.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, e, h, d1, c) = (
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.lstm_hidden,
            cfg.dense1_units,
            cfg.n_classes,
        );
        Self {
            embedding: Tensor::zeros(&[v, e]),
            lstm_w: Tensor::zeros(&[4 * h, e + h]),
            lstm_b: Tensor::zeros(&[4 * h]),
            attn_w: Tensor::zeros(&[h, h]),
            attn_v: Tensor::zeros(&[h]),
            bn_gamma: Tensor::zeros(&[h]),
            bn_beta: Tensor::zeros(&[h]),
            bn_running_mean: Tensor::zeros(&[h]),
            bn_running_var: Tensor::filled(&[h], T::one()),
            dense1_w: Tensor::zeros(&[h, d1]),
            dense1_b: Tensor::zeros(&[d1]),
            dense2_w: Tensor::zeros(&[d1, c]),
            dense2_b: Tensor::zeros(&[c]),
        }
    }

    /// Uniform(−a, a) with `a = 1/sqrt(fan_in)` per tensor, forget-gate bias
    /// shifted by +1, batch-norm scale one and shift zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let h = cfg.lstm_hidden;
        let fill = |t: &mut Tensor<T>, fan_in: usize, rng: &mut R| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in &mut t.data {
                *x = T::of(rng.gen_range(-a..a));
            }
        };
        fill(&mut p.embedding, 1, rng);
        fill(&mut p.lstm_w, cfg.lstm_input(), rng);
        fill(&mut p.lstm_b, cfg.lstm_input(), rng);
        for b in &mut p.lstm_b.data[h..2 * h] {
            *b += T::one();
        }
        fill(&mut p.attn_w, h, rng);
        fill(&mut p.attn_v, h, rng);
        p.bn_gamma.data.fill(T::one());
        fill(&mut p.dense1_w, h, rng);
        fill(&mut p.dense1_b, h, rng);
        fill(&mut p.dense2_w, cfg.dense1_units, rng);
        fill(&mut p.dense2_b, cfg.dense1_units, rng);
        p
    }

    pub fn learnable(&self) -> [(&'static str, &Tensor<T>); 11] {
        [
            ("embedding", &self.embedding),
            ("lstm.w", &self.lstm_w),
            ("lstm.b", &self.lstm_b),
            ("attn.w", &self.attn_w),
            ("attn.v", &self.attn_v),
            ("bn.gamma", &self.bn_gamma),
            ("bn.beta", &self.bn_beta),
            ("dense1.w", &self.dense1_w),
            ("dense1.b", &self.dense1_b),
            ("dense2.w", &self.dense2_w),
            ("dense2.b", &self.dense2_b),
        ]
    }

    pub fn learnable_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 11] {
        [
            ("embedding", &mut self.embedding),
            ("lstm.w", &mut self.lstm_w),
            ("lstm.b", &mut self.lstm_b),
            ("attn.w", &mut self.attn_w),
            ("attn.v", &mut self.attn_v),
            ("bn.gamma", &mut self.bn_gamma),
            ("bn.beta", &mut self.bn_beta),
            ("dense1.w", &mut self.dense1_w),
            ("dense1.b", &mut self.dense1_b),
            ("dense2.w", &mut self.dense2_w),
            ("dense2.b", &mut self.dense2_b),
        ]
    }

    /// Every tensor, including batch-norm running statistics, in checkpoint order.
    pub fn all(&self) -> [(&'static str, &Tensor<T>); 13] {
        let [e, lw, lb, aw, av, g, b, d1w, d1b, d2w, d2b] = self.learnable();
        [
            e,
            lw,
            lb,
            aw,
            av,
            g,
            b,
            ("bn.running_mean", &self.bn_running_mean),
            ("bn.running_var", &self.bn_running_var),
            d1w,
            d1b,
            d2w,
            d2b,
        ]
    }

    pub fn all_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 13] {
        [
            ("embedding", &mut self.embedding),
            ("lstm.w", &mut self.lstm_w),
            ("lstm.b", &mut self.lstm_b),
            ("attn.w", &mut self.attn_w),
            ("attn.v", &mut self.attn_v),
            ("bn.gamma", &mut self.bn_gamma),
            ("bn.beta", &mut self.bn_beta),
            ("bn.running_mean", &mut self.bn_running_mean),
            ("bn.running_var", &mut self.bn_running_var),
            ("dense1.w", &mut self.dense1_w),
            ("dense1.b", &mut self.dense1_b),
            ("dense2.w", &mut self.dense2_w),
            ("dense2.b", &mut self.dense2_b),
        ]
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        for ((name, t), (_, e)) in self.all().iter().zip(expected.all().iter()) {
            if t.shape != e.shape || t.data.len() != e.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    t.shape, e.shape
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.all()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            embedding: self.embedding.cast(),
            lstm_w: self.lstm_w.cast(),
            lstm_b: self.lstm_b.cast(),
            attn_w: self.attn_w.cast(),
            attn_v: self.attn_v.cast(),
            bn_gamma: self.bn_gamma.cast(),
            bn_beta: self.bn_beta.cast(),
            bn_running_mean: self.bn_running_mean.cast(),
            bn_running_var: self.bn_running_var.cast(),
            dense1_w: self.dense1_w.cast(),
            dense1_b: self.dense1_b.cast(),
            dense2_w: self.dense2_w.cast(),
            dense2_b: self.dense2_b.cast(),
        }
    }

    /// Adds `other` into `self`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.all_mut().into_iter().zip(other.all()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.all_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}
