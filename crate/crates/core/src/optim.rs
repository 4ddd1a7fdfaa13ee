use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers of parameter `i`.
    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.first[i], &self.second[i])
    }

    /// One update of `params` from `grads`. Moment buffers are created on the
    /// first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            g.ensure_shape("adam_step", p.shape())?;
        }
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::invalid("adam: parameter set changed between steps"));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            for (mv, gv) in m.iter_mut().zip(g) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = self.second[i].data_mut();
            for (vv, gv) in v.iter_mut().zip(g) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let (m, v) = (self.first[i].data(), self.second[i].data());
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mv / c1;
                let vhat = vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.check_finite()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(vec![3]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after bias correction, so Δ = -lr / (1 + ε).
        let mut p = Tensor::zeros(vec![1]);
        let g = Tensor::ones(vec![1]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_differ_from_one_doubled_step() {
        // With a constant gradient both routes land on the same point, but
        // the accumulated moments differ, which shows on the next update.
        let g = Tensor::new(vec![1], vec![0.3]).unwrap();
        let zero = Tensor::zeros(vec![1]);

        let mut a = Tensor::zeros(vec![1]);
        let mut twice = Adam::new(0.01);
        twice.step(&mut [&mut a], &[&g]).unwrap();
        twice.step(&mut [&mut a], &[&g]).unwrap();

        let mut b = Tensor::zeros(vec![1]);
        let mut doubled = Adam::new(0.02);
        doubled.step(&mut [&mut b], &[&g]).unwrap();

        assert!((a.item() - b.item()).abs() < 1e-12);
        // m = 0.19·g after two steps versus 0.1·g after one.
        assert!((twice.moments(0).0.item() - 0.19 * 0.3).abs() < 1e-15);
        assert!((doubled.moments(0).0.item() - 0.1 * 0.3).abs() < 1e-15);

        twice.step(&mut [&mut a], &[&zero]).unwrap();
        doubled.step(&mut [&mut b], &[&zero]).unwrap();
        assert!((a.item() - b.item()).abs() > 1e-4);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        assert!(Adam::new(0.1).step(&mut [&mut p], &[&g]).is_err());
    }
}
