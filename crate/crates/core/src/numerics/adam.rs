use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub(crate) fn encode(&self, w: &mut crate::codec::Writer) {
        w.f64(self.beta1);
        w.f64(self.beta2);
        w.f64(self.eps);
        w.u64(self.step);
        w.u64(self.first.len() as u64);
        for (m, v) in self.first.iter().zip(&self.second) {
            w.f64s(m);
            w.f64s(v);
        }
    }

    pub(crate) fn decode(r: &mut crate::codec::Reader<'_>) -> Result<Self> {
        let (beta1, beta2, eps, step) = (r.f64()?, r.f64()?, r.f64()?, r.u64()?);
        let count = r.u64()? as usize;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for _ in 0..count {
            first.push(r.f64s()?);
            second.push(r.f64s()?);
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            step,
            first,
            second,
        })
    }

    /// Checks the moment buffers have the parameters' layout.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.first.len() == params.len()
            && params.iter().zip(&self.first).all(|((_, p), m)| p.tensor.len() == m.len())
    }

    /// Applies one update with learning rate `lr` using the grad slots.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Mismatch("optimizer state does not match parameters".into()));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| p.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.tensor.grad().expect("checked above").to_vec();
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        s.add("w", &[3, 2], Init::FanIn(3), &mut rng);
        s.add("b", &[2], Init::Zeros, &mut rng);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        s.zero_grads();
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 2e-5).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn first_unit_gradient_step_moves_by_lr() {
        let mut s = store();
        let before = s.clone();
        for p in s.iter_mut() {
            let n = p.tensor.len();
            p.tensor.accumulate_grad(&vec![1.0; n]).unwrap();
        }
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 2e-5).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y + 2e-5).abs() < 1e-9);
            }
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut s = store();
        let before = s.clone();
        for p in s.iter_mut() {
            let n = p.tensor.len();
            p.tensor.accumulate_grad(&vec![0.3; n]).unwrap();
        }
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 0.0).unwrap();
        assert_eq!(s.get(crate::numerics::ParamId(0)).data(), before.get(crate::numerics::ParamId(0)).data());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        assert!(matches!(adam.step(&mut s, 1e-3), Err(Error::MissingGrad(_))));
    }
}
