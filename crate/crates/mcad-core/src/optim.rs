//! AdamW with decoupled weight decay and the step learning-rate schedule.

use crate::nn::ParamStore;
use crate::tensor::{Gradients, Real, Tensor};

/// AdamW: decay is applied directly to the weights, the adaptive step uses
/// bias-corrected first/second moments. Parameters without a gradient in a
/// given step are left untouched (no decay either), matching the usual
/// "only listed grads update" semantics.
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(ps: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        let m = ps.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = ps.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from a backward pass.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for pid in ps.ids().collect::<Vec<_>>() {
            let Some(grad) = grads.param(pid) else { continue };
            let idx = pid.0 as usize;
            let p = ps.get(pid).data();
            let g = grad.data();
            let m_old = self.m[idx].data();
            let v_old = self.v[idx].data();
            let mut m_new = Vec::with_capacity(p.len());
            let mut v_new = Vec::with_capacity(p.len());
            let mut p_new = Vec::with_capacity(p.len());
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                let mi = self.beta1 * m_old[i].to_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v_old[i].to_f64() + (1.0 - self.beta2) * gi * gi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let decayed = p[i].to_f64() * (1.0 - self.lr * self.weight_decay);
                let updated = decayed - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                m_new.push(T::from_f64(mi));
                v_new.push(T::from_f64(vi));
                p_new.push(T::from_f64(updated));
            }
            let shape = ps.get(pid).shape().to_vec();
            self.m[idx] = Tensor::from_vec_unchecked(shape.clone(), m_new);
            self.v[idx] = Tensor::from_vec_unchecked(shape.clone(), v_new);
            ps.set(pid, Tensor::from_vec_unchecked(shape, p_new));
        }
    }

    /// Optimizer state for checkpointing: `(first moments, second moments)`
    /// aligned with the parameter store order.
    pub fn state(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state saved by [`AdamW::state`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment table size mismatch");
        assert_eq!(v.len(), self.v.len(), "moment table size mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Step schedule: the learning rate is multiplied by `decay_factor` from
/// `decay_epoch` (0-based) onward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub total_epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            base_lr * self.decay_factor
        } else {
            base_lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::Graph;

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let x = ps.alloc("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.1, 0.0);
        for _ in 0..200 {
            let mut g = Graph::new();
            let xn = ps.bind(&mut g, x);
            let sq = g.square(xn).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            opt.step(&mut ps, &grads);
        }
        let v = ps.get(x).data();
        assert!(v.iter().all(|&c| c.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut ps = ParamStore::<f64>::new();
        let x = ps.alloc("x", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.01, 0.1);
        let mut g = Graph::new();
        let xn = ps.bind(&mut g, x);
        let sq = g.square(xn).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut ps, &grads);
        // grad = 2; m_hat = 2; v_hat = 4; decay: 1 * (1 - 0.01*0.1).
        let want = 1.0 * (1.0 - 0.001) - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((ps.get(x).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn params_without_grads_stay_untouched() {
        let mut ps = ParamStore::<f64>::new();
        let mut s = RngStream::from_seed(1).split("p");
        let used = ps.alloc("used", Tensor::randn(&[2], 1.0, &mut s));
        let unused = ps.alloc("unused", Tensor::randn(&[2], 1.0, &mut s));
        let before = ps.get(unused).clone();
        let mut opt = AdamW::new(&ps, 0.05, 0.01);
        let mut g = Graph::new();
        let xn = ps.bind(&mut g, used);
        let sq = g.square(xn).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut ps, &grads);
        assert!(ps.get(unused).bit_eq(&before));
        assert!(!ps.get(used).bit_eq(&before));
    }

    #[test]
    fn schedule_decays_once() {
        let s = LrSchedule {
            total_epochs: 10,
            decay_epoch: 8,
            decay_factor: 0.1,
        };
        assert_eq!(s.lr_at(1e-4, 0), 1e-4);
        assert_eq!(s.lr_at(1e-4, 7), 1e-4);
        assert!((s.lr_at(1e-4, 8) - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(1e-4, 9) - 1e-5).abs() < 1e-20);
    }
}
