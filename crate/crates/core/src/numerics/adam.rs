use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug)]
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
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| vec![0.0; params.value(id).len()])
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let (value, grad) = params.value_mut_and_grad(ParamId(k));
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as named tensors, for checkpointing next to the
    /// parameters they belong to.
    pub fn named_state(&self, params: &ParamSet, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}.step"),
            Tensor::from_vec(&[1], vec![self.step as f64]).expect("scalar"),
        )];
        for (k, id) in params.ids().enumerate() {
            let shape = params.tensor(id).shape();
            let name = params.name(id);
            out.push((
                format!("{prefix}.m.{name}"),
                Tensor::from_vec(shape, self.m[k].clone()).expect("shape"),
            ));
            out.push((
                format!("{prefix}.v.{name}"),
                Tensor::from_vec(shape, self.v[k].clone()).expect("shape"),
            ));
        }
        out
    }

    pub fn load_named_state(&mut self, params: &ParamSet, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing optimizer tensor `{name}`")))
        };
        self.step = find(&format!("{prefix}.step"))?.data()[0] as u64;
        for (k, id) in params.ids().enumerate() {
            let name = params.name(id);
            self.m[k] = find(&format!("{prefix}.m.{name}"))?.data().to_vec();
            self.v[k] = find(&format!("{prefix}.v.{name}"))?.data().to_vec();
            if self.m[k].len() != params.value(id).len() || self.v[k].len() != params.value(id).len() {
                return Err(Error::Shape(format!("optimizer state for `{name}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamSet::new(0);
        let id = params.add_uniform("x", &[3], 1);
        let mut opt = Adam::new(&params, 0.05);
        for _ in 0..2000 {
            params.zero_grad();
            let x = params.value(id).to_vec();
            params
                .grad_mut(id)
                .iter_mut()
                .zip(&x)
                .for_each(|(g, v)| *g = 2.0 * (v - 0.5));
            opt.step(&mut params);
        }
        assert!(params.value(id).iter().all(|v| (v - 0.5).abs() < 1e-3));
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_exact_no_op() {
        let mut params = ParamSet::new(4);
        params.add_uniform("w", &[5, 5], 5);
        let before = params.clone();
        let mut opt = Adam::new(&params, 0.1);
        for _ in 0..10 {
            params.zero_grad();
            opt.step(&mut params);
        }
        assert_eq!(params.checksum(), before.checksum());
    }
}
