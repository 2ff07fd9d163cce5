use super::Array;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update `params` in place. Moment buffers are created on the first call
    /// and must keep the same layout afterwards.
    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Divergence("non-finite gradient".into()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Dimension("optimizer state layout changed".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Array::from_vec(vec![1.0, -2.0])];
        let g = vec![Array::zeros(&[2])];
        let mut opt = Adam::new(1e-4);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut p = vec![Array::scalar(0.0)];
        let g = vec![Array::scalar(1.0)];
        let mut opt = Adam::new(1e-4);
        opt.step(&mut p, &g).unwrap();
        // m_hat = v_hat = 1
        let expect = -1e-4 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn repeated_steps_move_against_gradient() {
        let mut p = vec![Array::scalar(0.5)];
        let g = vec![Array::scalar(-3.0)];
        let mut opt = Adam::new(1e-3);
        opt.step(&mut p, &g).unwrap();
        let w1 = p[0].data()[0];
        opt.step(&mut p, &g).unwrap();
        let w2 = p[0].data()[0];
        assert!(w1 > 0.5 && w2 > w1);
    }

    #[test]
    fn nonfinite_gradient_is_divergence() {
        let mut p = vec![Array::scalar(0.0)];
        let g = vec![Array::scalar(f64::NAN)];
        let err = Adam::new(1e-4).step(&mut p, &g).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }
}
