use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// SGD with classical momentum and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, clip: Option<f64>) -> Self {
        Sgd {
            learning_rate,
            momentum,
            clip,
            velocity: Vec::new(),
        }
    }

    /// Scale factor applied to the gradients by clipping.
    pub fn clip_scale(&self, grads: &[(String, Tensor)]) -> f64 {
        let norm = grads.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt();
        match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        }
    }

    /// `v ← μ v − η g`, `θ ← θ + v`. Parameter and gradient lists must be aligned.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[(String, Tensor)]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("Sgd::step", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|(_, g)| Tensor::zeros(g.shape())).collect();
        }
        let scale = self.clip_scale(grads);
        for (((name, p), (g_name, g)), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if name != *g_name || p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::dim("Sgd::step", name, g_name));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv - self.learning_rate * scale * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = vec![("p".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap())];
        let mut opt = Sgd::new(0.1, 0.9, None);
        opt.step(vec![("p".into(), &mut p)], &g).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        opt.step(vec![("p".into(), &mut p)], &g).unwrap();
        // v = 0.9 * -0.1 - 0.1 = -0.19
        assert!((p.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut p = Tensor::zeros(&[2]);
        let g = vec![("p".to_string(), Tensor::from_vec(&[2], vec![30.0, 40.0]).unwrap())];
        let mut opt = Sgd::new(1.0, 0.0, Some(5.0));
        assert!((opt.clip_scale(&g) - 0.1).abs() < 1e-15);
        opt.step(vec![("p".into(), &mut p)], &g).unwrap();
        assert!((p.data()[0] + 3.0).abs() < 1e-12 && (p.data()[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_lists_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = vec![("q".to_string(), Tensor::zeros(&[2]))];
        let mut opt = Sgd::new(1.0, 0.0, None);
        assert!(opt.step(vec![("p".into(), &mut p)], &g).is_err());
    }
}
