use super::linalg::{accumulate_col_sums, add_row_bias, gemm, matmul, Mat};
use super::{ParamId, ParamSet};

/// Fully connected layer `y = x·W + b` over a batch of row vectors.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = params.add_uniform(&format!("{name}.weight"), &[inputs, outputs], inputs);
        let bias = params.add_uniform(&format!("{name}.bias"), &[outputs], inputs);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// `x` is row-major `batch × inputs`.
    pub fn forward(&self, params: &ParamSet, x: &[f64], batch: usize) -> Vec<f64> {
        let mut y = matmul(
            Mat::new(x, batch, self.inputs),
            Mat::new(params.value(self.weight), self.inputs, self.outputs),
        );
        add_row_bias(&mut y, params.value(self.bias));
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, params: &mut ParamSet, x: &[f64], dy: &[f64], batch: usize) -> Vec<f64> {
        self.backward_params(params, x, dy, batch);
        matmul(
            Mat::new(dy, batch, self.outputs),
            Mat::new(params.value(self.weight), self.inputs, self.outputs).t(),
        )
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&self, params: &mut ParamSet, x: &[f64], dy: &[f64], batch: usize) {
        gemm(
            Mat::new(x, batch, self.inputs).t(),
            Mat::new(dy, batch, self.outputs),
            params.grad_mut(self.weight),
            1.0,
        );
        accumulate_col_sums(dy, params.grad_mut(self.bias));
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the positive entries of the activation output.
pub fn relu_backward_in_place(activated: &[f64], grad: &mut [f64]) {
    grad.iter_mut().zip(activated).for_each(|(g, &a)| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut params = ParamSet::new(3);
        let layer = Linear::new(&mut params, "fc", 4, 3);
        let input = params.add_uniform("input", &[2, 4], 1);
        let report = grad_check(&mut params, 1e-5, |p| {
            let x = p.value(input).to_vec();
            let y = layer.forward(p, &x, 2);
            let loss: f64 = y.iter().map(|v| v * v).sum::<f64>() * 0.5;
            let dx = layer.backward(p, &x, &y, 2);
            p.grad_mut(input).iter_mut().zip(dx).for_each(|(g, d)| *g += d);
            loss
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
