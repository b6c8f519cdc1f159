use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Affine parameters and running statistics of one batch-normalization site.
///
/// In train mode the statistics come from the rows of the current call (one
/// time step of a batch); the running mean and variance follow an exponential
/// moving average with weight `momentum` on the newest batch. Eval mode reads
/// the running statistics and never mutates them.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Intermediates of one [`batch_norm`] call.
#[derive(Clone, Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mode: BnMode,
}

pub fn batch_norm(x: &Tensor, state: &mut BnState) -> Result<(Tensor, BnCache)> {
    let d = state.channels();
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::dim(
            "batch_norm",
            format!("[B, {d}]"),
            format!("{:?}", x.shape()),
        ));
    }
    let b = x.rows();
    let (mean, var) = match state.mode {
        BnMode::Train => {
            if b < 2 {
                return Err(Error::InsufficientBatch(b));
            }
            let mut mean = vec![0.0; d];
            for row in x.data().chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; d];
            for row in x.data().chunks(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= b as f64);

            let mom = state.momentum;
            let unbias = b as f64 / (b - 1) as f64;
            for (r, m) in state.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            for (r, v) in state.running_var.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - mom) * *r + mom * v * unbias;
            }
            (mean, var)
        }
        BnMode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();

    let mut x_hat = x.clone();
    let mut y = x.clone();
    for (xh_row, y_row) in x_hat.data_mut().chunks_mut(d).zip(y.data_mut().chunks_mut(d)) {
        for c in 0..d {
            let n = (xh_row[c] - mean[c]) * inv_std[c];
            xh_row[c] = n;
            y_row[c] = state.gamma.data()[c] * n + state.beta.data()[c];
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            mode: state.mode,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(
    grad: &Tensor,
    cache: &BnCache,
    state: &BnState,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = state.channels();
    if grad.shape() != cache.x_hat.shape() {
        return Err(Error::dim(
            "batch_norm_backward",
            format!("{:?}", cache.x_hat.shape()),
            format!("{:?}", grad.shape()),
        ));
    }
    let b = grad.rows() as f64;
    let mut d_gamma = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    for (g_row, xh_row) in grad.data().chunks(d).zip(cache.x_hat.data().chunks(d)) {
        for c in 0..d {
            d_beta[c] += g_row[c];
            d_gamma[c] += g_row[c] * xh_row[c];
        }
    }
    let mut dx = grad.clone();
    for (dx_row, xh_row) in dx.data_mut().chunks_mut(d).zip(cache.x_hat.data().chunks(d)) {
        for c in 0..d {
            let scale = state.gamma.data()[c] * cache.inv_std[c];
            dx_row[c] = match cache.mode {
                BnMode::Train => {
                    scale * (dx_row[c] - d_beta[c] / b - xh_row[c] * d_gamma[c] / b)
                }
                BnMode::Eval => scale * dx_row[c],
            };
        }
    }
    Ok((
        dx,
        Tensor::from_vec(&[d], d_gamma)?,
        Tensor::from_vec(&[d], d_beta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column_stats(y: &Tensor) -> Vec<(f64, f64)> {
        let d = y.cols();
        let b = y.rows() as f64;
        (0..d)
            .map(|c| {
                let col: Vec<f64> = y.data().chunks(d).map(|r| r[c]).collect();
                let m = col.iter().sum::<f64>() / b;
                let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / b;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[16, 4], 3.0, &mut rng).map(|v| 20.0 * v + 7.0);
        let mut st = BnState::new(4);
        let (y, _) = batch_norm(&x, &mut st).unwrap();
        for ((m, v), (_, var_x)) in column_stats(&y).into_iter().zip(column_stats(&x)) {
            assert!(m.abs() <= 1e-9);
            assert!((v - 1.0).abs() <= 1e-6, "variance {v}");
            // exactly var/(var + eps) for the biased batch variance
            assert!((v - var_x / (var_x + DEFAULT_EPSILON)).abs() <= 1e-12);
        }
        // running statistics moved toward the batch statistics
        assert!(st.running_mean.data().iter().all(|&m| m > 0.0));
    }

    #[test]
    fn eval_mode_with_default_stats_is_near_identity_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let mut st = BnState::new(5);
        st.mode = BnMode::Eval;
        let before = st.clone();
        let (y1, _) = batch_norm(&x, &mut st).unwrap();
        let (y2, _) = batch_norm(&x, &mut st).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(st, before);
        assert!(y1.sub(&x).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn eval_mode_allows_single_row() {
        let mut st = BnState::new(2);
        st.mode = BnMode::Eval;
        assert!(batch_norm(&Tensor::zeros(&[1, 2]), &mut st).is_ok());
    }

    #[test]
    fn train_mode_rejects_single_row() {
        let mut st = BnState::new(2);
        let err = batch_norm(&Tensor::zeros(&[1, 2]), &mut st).unwrap_err();
        assert!(matches!(err, Error::InsufficientBatch(1)));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut st = BnState::new(3);
        let err = batch_norm(&Tensor::zeros(&[4, 2]), &mut st).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    /// Central-difference oracle on L = Σ r ⊙ BN(x) for both modes.
    #[test]
    fn gradient_matches_finite_differences() {
        for mode in [BnMode::Train, BnMode::Eval] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = Tensor::uniform(&[8, 5], 1.5, &mut rng);
            let r = Tensor::uniform(&[8, 5], 1.0, &mut rng);
            let mut st = BnState::new(5);
            st.gamma = Tensor::uniform(&[5], 1.0, &mut rng).map(|v| v + 1.5);
            st.beta = Tensor::uniform(&[5], 1.0, &mut rng);
            st.running_mean = Tensor::uniform(&[5], 0.5, &mut rng);
            st.running_var = Tensor::uniform(&[5], 0.5, &mut rng).map(|v| v + 1.0);
            st.mode = mode;

            let loss = |x: &Tensor, st: &BnState| {
                let mut s = st.clone();
                let (y, _) = batch_norm(x, &mut s).unwrap();
                y.mul(&r).unwrap().sum()
            };
            let mut s = st.clone();
            let (_, cache) = batch_norm(&x, &mut s).unwrap();
            let (dx, dg, db) = batch_norm_backward(&r, &cache, &st).unwrap();

            let h = 1e-5;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            let mut worst: f64 = 0.0;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss(&xp, &st) - loss(&xm, &st)) / (2.0 * h);
                worst = worst.max(rel(dx.data()[i], fd));
            }
            for c in 0..5 {
                let mut sp = st.clone();
                sp.gamma.data_mut()[c] += h;
                let mut sm = st.clone();
                sm.gamma.data_mut()[c] -= h;
                let fd = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * h);
                worst = worst.max(rel(dg.data()[c], fd));
                let mut sp = st.clone();
                sp.beta.data_mut()[c] += h;
                let mut sm = st.clone();
                sm.beta.data_mut()[c] -= h;
                let fd = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * h);
                worst = worst.max(rel(db.data()[c], fd));
            }
            assert!(worst <= 1e-5, "{mode:?}: worst relative error {worst}");
        }
    }
}
