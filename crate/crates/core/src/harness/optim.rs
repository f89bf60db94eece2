use crate::cli::config::OptimConfig;
use crate::numcore::{ParamStore, Tensor};

/// Adam with bias correction. Moment buffers follow the store's parameter order.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Parameters without
    /// a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = store.grad(id).cloned() else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = store.value_mut(id).data_mut();
            for j in 0..g.numel() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                value[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tape;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
        let mut adam = Adam::new(OptimConfig::default(), &store);
        let tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = x.mul(x).unwrap().sum().unwrap();
        tape.backward(loss).unwrap().accumulate_into(&mut store);
        adam.step(&mut store);
        let v = store.value(id).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(3.0)).unwrap();
        let cfg = OptimConfig {
            lr: 0.1,
            ..OptimConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..500 {
            store.zero_grad();
            let tape = Tape::new();
            let x = tape.param(&store, id);
            let loss = x.add_scalar(-1.0).unwrap().powf(2.0).unwrap().sum().unwrap();
            tape.backward(loss).unwrap().accumulate_into(&mut store);
            adam.step(&mut store);
        }
        assert!((store.value(id).item() - 1.0).abs() < 1e-2);
    }
}
