use super::tensor::Real;
use crate::error::{Error, Result};

/// Floor added inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−log(probs[label] + ε)`
pub fn cce_loss<T: Real>(probs: &[T], label: usize) -> Result<T> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Input(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-(*p + T::of(LOG_EPS)).ln())
}

pub fn euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

fn check_dims<T>(a: &[T], p: &[T], n: &[T]) -> Result<()> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Shape(format!(
            "triplet embeddings have dims {}, {}, {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    Ok(())
}

/// Hinge triplet loss `max(D(pos, ref) − D(neg, ref) + margin, 0)` with
/// Euclidean `D`.
pub fn triplet_loss<T: Real>(e_ref: &[T], e_pos: &[T], e_neg: &[T], margin: T) -> Result<T> {
    check_dims(e_ref, e_pos, e_neg)?;
    let v = euclidean(e_pos, e_ref) - euclidean(e_neg, e_ref) + margin;
    Ok(v.max(T::zero()))
}

/// Gradient of [`triplet_loss`] with respect to `(ref, pos, neg)`; zero when
/// the hinge is inactive. Zero-length distance vectors contribute nothing.
pub fn triplet_grad<T: Real>(
    e_ref: &[T],
    e_pos: &[T],
    e_neg: &[T],
    margin: T,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    check_dims(e_ref, e_pos, e_neg)?;
    let dim = e_ref.len();
    let mut g = (vec![T::zero(); dim], vec![T::zero(); dim], vec![T::zero(); dim]);
    let d_pos = euclidean(e_pos, e_ref);
    let d_neg = euclidean(e_neg, e_ref);
    if d_pos - d_neg + margin <= T::zero() {
        return Ok(g);
    }
    for j in 0..dim {
        if d_pos > T::zero() {
            let u = (e_pos[j] - e_ref[j]) / d_pos;
            g.1[j] += u;
            g.0[j] -= u;
        }
        if d_neg > T::zero() {
            let u = (e_neg[j] - e_ref[j]) / d_neg;
            g.2[j] -= u;
            g.0[j] += u;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cce_examples() {
        assert!(cce_loss(&[0.0f64, 1.0, 0.0], 1).unwrap().abs() < 1e-11);
        let uniform = vec![1.0 / 40.0; 40];
        assert!((cce_loss(&uniform, 7).unwrap() - 40f64.ln()).abs() < 1e-9);
        assert!((cce_loss(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(cce_loss(&[0.0f64, 1.0], 0).unwrap().is_finite());
        assert!(cce_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn triplet_examples() {
        let o = [0.0, 0.0];
        assert_eq!(triplet_loss(&o, &o, &[2.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(triplet_loss(&o, &o, &o, 1.0).unwrap(), 1.0);
        assert_eq!(triplet_loss(&o, &[0.0, 3.0], &[3.0, 0.0], 1.0).unwrap(), 1.0);
        assert_eq!(triplet_loss(&o, &o, &o, 0.0).unwrap(), 0.0);
        assert!(triplet_loss(&o, &o, &[1.0], 1.0).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, -0.5]);
        let b = softmax(&[101.0, 102.0, 99.5]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_grad_matches_differences() {
        let (a, p, n) = ([0.1, -0.3], [0.5, 0.2], [0.0, 0.4]);
        let (ga, gp, gn) = triplet_grad(&a, &p, &n, 1.0).unwrap();
        let h = 1e-6;
        for (which, g) in [(0, &ga), (1, &gp), (2, &gn)] {
            for j in 0..2 {
                let eval = |delta: f64| {
                    let (mut a, mut p, mut n) = (a, p, n);
                    match which {
                        0 => a[j] += delta,
                        1 => p[j] += delta,
                        _ => n[j] += delta,
                    }
                    triplet_loss(&a, &p, &n, 1.0).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6);
            }
        }
    }
}
