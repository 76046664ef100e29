//! Per-feature batch normalization over a batch of vectors.

use super::tensor::Real;
use super::Mode;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct BatchNormOutput<T> {
    pub y: Vec<Vec<T>>,
    pub xhat: Vec<Vec<T>>,
    pub inv_std: Vec<T>,
    /// Batch mean and (biased) variance; `None` in eval mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
    pub mode: Mode,
}

pub fn batchnorm_forward<T: Real>(
    x: &[Vec<T>],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
) -> Result<BatchNormOutput<T>> {
    let n = x.len();
    let dim = gamma.len();
    if x.iter().any(|row| row.len() != dim) {
        return Err(Error::Shape(
            "batch-norm input width differs from feature count".into(),
        ));
    }
    let eps = T::of(BN_EPS);
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::BatchTooSmall(n));
            }
            let nf = T::of(n as f64);
            let mut mean = vec![T::zero(); dim];
            for row in x {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            let mut var = vec![T::zero(); dim];
            for row in x {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s = *s / nf);
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        Mode::Eval => {
            if n == 0 {
                return Err(Error::BatchTooSmall(0));
            }
            (running_mean.to_vec(), running_var.to_vec(), None)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat: Vec<Vec<T>> = x
        .iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&inv_std)
                .map(|((&v, &m), &s)| (v - m) * s)
                .collect()
        })
        .collect();
    let y = xhat
        .iter()
        .map(|row| {
            row.iter()
                .zip(gamma)
                .zip(beta)
                .map(|((&v, &g), &b)| g * v + b)
                .collect()
        })
        .collect();
    Ok(BatchNormOutput {
        y,
        xhat,
        inv_std,
        batch_stats,
        mode,
    })
}

/// Folds batch statistics into the running ones. The running variance uses
/// the unbiased batch estimate.
pub fn update_running<T: Real>(
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_mean: &[T],
    batch_var: &[T],
    batch_size: usize,
) {
    let keep = T::of(BN_MOMENTUM);
    let take = T::one() - keep;
    let correction = if batch_size > 1 {
        T::of(batch_size as f64 / (batch_size - 1) as f64)
    } else {
        T::one()
    };
    for (r, &m) in running_mean.iter_mut().zip(batch_mean) {
        *r = keep * *r + take * m;
    }
    for (r, &v) in running_var.iter_mut().zip(batch_var) {
        *r = keep * *r + take * v * correction;
    }
}

/// Normalizes `x`; in train mode also updates the running statistics.
pub fn batchnorm_apply<T: Real>(
    x: &[Vec<T>],
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: Mode,
) -> Result<Vec<Vec<T>>> {
    let out = batchnorm_forward(x, gamma, beta, running_mean, running_var, mode)?;
    if let Some((m, v)) = &out.batch_stats {
        update_running(running_mean, running_var, m, v, x.len());
    }
    Ok(out.y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    dy: &[Vec<T>],
    out: &BatchNormOutput<T>,
    gamma: &[T],
) -> (Vec<Vec<T>>, Vec<T>, Vec<T>) {
    let dim = gamma.len();
    let n = dy.len();
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    for (row, xh) in dy.iter().zip(&out.xhat) {
        for j in 0..dim {
            dgamma[j] += row[j] * xh[j];
            dbeta[j] += row[j];
        }
    }
    let dx = match out.mode {
        Mode::Eval => dy
            .iter()
            .map(|row| (0..dim).map(|j| row[j] * gamma[j] * out.inv_std[j]).collect())
            .collect(),
        Mode::Train => {
            // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let nf = T::of(n as f64);
            let mut sum_dxhat = vec![T::zero(); dim];
            let mut sum_dxhat_xhat = vec![T::zero(); dim];
            for (row, xh) in dy.iter().zip(&out.xhat) {
                for j in 0..dim {
                    let d = row[j] * gamma[j];
                    sum_dxhat[j] += d;
                    sum_dxhat_xhat[j] += d * xh[j];
                }
            }
            dy.iter()
                .zip(&out.xhat)
                .map(|(row, xh)| {
                    (0..dim)
                        .map(|j| {
                            let d = row[j] * gamma[j];
                            out.inv_std[j] / nf * (nf * d - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j])
                        })
                        .collect()
                })
                .collect()
        }
    };
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Vec<Vec<f64>> {
        vec![
            vec![1.0, -2.0, 0.5],
            vec![3.0, 0.0, 0.5],
            vec![-1.0, 4.0, 2.0],
            vec![0.5, 1.0, -3.0],
        ]
    }

    #[test]
    fn standardized_batch_is_nearly_unchanged() {
        let x = vec![vec![1.0f64, -1.0], vec![-1.0, 1.0]];
        let (g, b) = ([1.0; 2], [0.0; 2]);
        let (mut rm, mut rv) = ([0.0; 2], [1.0; 2]);
        let y = batchnorm_apply(&x, &g, &b, &mut rm, &mut rv, Mode::Train).unwrap();
        for (yr, xr) in y.iter().zip(&x) {
            for (a, b) in yr.iter().zip(xr) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let x = batch();
        let out = batchnorm_forward(&x, &[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 3], Mode::Train).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = out.xhat.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let x = batch();
        let (mut rm, mut rv) = ([0.0; 3], [1.0; 3]);
        batchnorm_apply(&x, &[1.0; 3], &[0.0; 3], &mut rm, &mut rv, Mode::Train).unwrap();
        assert!((rm[0] - 0.1 * 0.875).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_frozen() {
        let x = batch();
        let (mut rm, mut rv) = ([0.3, -0.2, 0.1], [2.0, 0.5, 1.5]);
        let a = batchnorm_apply(&x, &[1.2; 3], &[0.1; 3], &mut rm, &mut rv, Mode::Eval).unwrap();
        let b = batchnorm_apply(&x, &[1.2; 3], &[0.1; 3], &mut rm, &mut rv, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(rm, [0.3, -0.2, 0.1]);
    }

    #[test]
    fn single_sample_train_batch_is_rejected() {
        let r = batchnorm_forward(&[vec![1.0]], &[1.0], &[0.0], &[0.0], &[1.0], Mode::Train);
        assert!(matches!(r, Err(Error::BatchTooSmall(1))));
    }
}
