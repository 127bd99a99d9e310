//! LSTM cell with explicit per-step caches for truncated backpropagation
//! through time. Gate order in the fused pre-activation is `i, f, g, o`.

use super::linalg::{accumulate_col_sums, add_row_bias, gemm, matmul, Mat};
use super::math::sigmoid;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Recurrent state for a batch of sequences, each row `hidden` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![0.0; batch * hidden],
            c: vec![0.0; batch * hidden],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

/// Activations of one step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-nonlinearity gates, `batch × 4H`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    batch: usize,
}

/// Gradients flowing into a step from its successor.
#[derive(Clone, Debug)]
pub struct LstmGrad {
    pub dh: Vec<f64>,
    pub dc: Vec<f64>,
}

impl LstmGrad {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            dh: vec![0.0; batch * hidden],
            dc: vec![0.0; batch * hidden],
        }
    }
}

impl LstmCell {
    pub fn new(params: &mut ParamSet, name: &str, inputs: usize, hidden: usize) -> Self {
        let fan_in = inputs + hidden;
        let w_input = params.add_uniform(&format!("{name}.w_input"), &[inputs, 4 * hidden], fan_in);
        let w_hidden = params.add_uniform(&format!("{name}.w_hidden"), &[hidden, 4 * hidden], fan_in);
        let bias = params.add_uniform(&format!("{name}.bias"), &[4 * hidden], fan_in);
        Self {
            w_input,
            w_hidden,
            bias,
            inputs,
            hidden,
        }
    }

    /// Advances a batch by one step; the new `h` doubles as the output.
    pub fn step(
        &self,
        params: &ParamSet,
        x: &[f64],
        state: &LstmState,
        batch: usize,
    ) -> Result<(LstmState, LstmStepCache)> {
        let hd = self.hidden;
        if x.len() != batch * self.inputs || state.h.len() != batch * hd || state.c.len() != batch * hd {
            return Err(Error::Shape(format!(
                "lstm step expects {batch}×{} input and {batch}×{hd} state",
                self.inputs
            )));
        }
        let mut gates = matmul(
            Mat::new(x, batch, self.inputs),
            Mat::new(params.value(self.w_input), self.inputs, 4 * hd),
        );
        gemm(
            Mat::new(&state.h, batch, hd),
            Mat::new(params.value(self.w_hidden), hd, 4 * hd),
            &mut gates,
            1.0,
        );
        add_row_bias(&mut gates, params.value(self.bias));

        let mut next = LstmState::zeros(batch, hd);
        let mut tanh_c = vec![0.0; batch * hd];
        for b in 0..batch {
            let row = &mut gates[b * 4 * hd..(b + 1) * 4 * hd];
            for j in 0..hd {
                let i = sigmoid(row[j]);
                let f = sigmoid(row[hd + j]);
                let g = row[2 * hd + j].tanh();
                let o = sigmoid(row[3 * hd + j]);
                row[j] = i;
                row[hd + j] = f;
                row[2 * hd + j] = g;
                row[3 * hd + j] = o;
                let c = f * state.c[b * hd + j] + i * g;
                let tc = c.tanh();
                next.c[b * hd + j] = c;
                next.h[b * hd + j] = o * tc;
                tanh_c[b * hd + j] = tc;
            }
        }
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gates,
            tanh_c,
            batch,
        };
        Ok((next, cache))
    }

    /// Backpropagates one step. `grad` holds dL/dh and dL/dc of this step's
    /// outputs (including contributions from later steps); returns the
    /// gradient with respect to the previous state and, optionally, the
    /// input.
    pub fn step_backward(
        &self,
        params: &mut ParamSet,
        cache: &LstmStepCache,
        grad: &LstmGrad,
        want_input_grad: bool,
    ) -> (LstmGrad, Option<Vec<f64>>) {
        let hd = self.hidden;
        let batch = cache.batch;
        let mut dpre = vec![0.0; batch * 4 * hd];
        let mut prev = LstmGrad::zeros(batch, hd);
        for b in 0..batch {
            let gates = &cache.gates[b * 4 * hd..(b + 1) * 4 * hd];
            let d = &mut dpre[b * 4 * hd..(b + 1) * 4 * hd];
            for j in 0..hd {
                let k = b * hd + j;
                let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
                let tc = cache.tanh_c[k];
                let dh = grad.dh[k];
                let dc = grad.dc[k] + dh * o * (1.0 - tc * tc);
                d[j] = dc * g * i * (1.0 - i);
                d[hd + j] = dc * cache.c_prev[k] * f * (1.0 - f);
                d[2 * hd + j] = dc * i * (1.0 - g * g);
                d[3 * hd + j] = dh * tc * o * (1.0 - o);
                prev.dc[k] = dc * f;
            }
        }
        gemm(
            Mat::new(&cache.x, batch, self.inputs).t(),
            Mat::new(&dpre, batch, 4 * hd),
            params.grad_mut(self.w_input),
            1.0,
        );
        gemm(
            Mat::new(&cache.h_prev, batch, hd).t(),
            Mat::new(&dpre, batch, 4 * hd),
            params.grad_mut(self.w_hidden),
            1.0,
        );
        accumulate_col_sums(&dpre, params.grad_mut(self.bias));
        prev.dh = matmul(
            Mat::new(&dpre, batch, 4 * hd),
            Mat::new(params.value(self.w_hidden), hd, 4 * hd).t(),
        );
        let dx = want_input_grad.then(|| {
            matmul(
                Mat::new(&dpre, batch, 4 * hd),
                Mat::new(params.value(self.w_input), self.inputs, 4 * hd).t(),
            )
        });
        (prev, dx)
    }
}

/// Single-sequence step on tensors: returns `(output, new state)`.
pub fn lstm_step(x: &Tensor, state: &LstmState, params: &ParamSet, cell: &LstmCell) -> Result<(Tensor, LstmState)> {
    let (next, _) = cell.step(params, x.data(), state, 1)?;
    let out = Tensor::from_vec(&[cell.hidden], next.h.clone())?;
    Ok((out, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn zero_params_give_zero_output_and_state() {
        let mut params = ParamSet::new(0);
        let cell = LstmCell::new(&mut params, "lstm", 3, 4);
        params.fill_values(0.0);
        let x = Tensor::from_vec(&[3], vec![0.7, -2.0, 5.0]).unwrap();
        let (out, state) = lstm_step(&x, &LstmState::zeros(1, 4), &params, &cell).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(state, LstmState::zeros(1, 4));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut params = ParamSet::new(0);
        let cell = LstmCell::new(&mut params, "lstm", 3, 4);
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            lstm_step(&x, &LstmState::zeros(1, 4), &params, &cell),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_step_gradient_of_output_sum() {
        for seed in 0..5 {
            let mut params = ParamSet::new(seed);
            let cell = LstmCell::new(&mut params, "lstm", 3, 4);
            let x = params.add_uniform("x", &[2, 3], 1);
            let h0 = params.add_uniform("h0", &[2, 4], 1);
            let c0 = params.add_uniform("c0", &[2, 4], 1);
            let report = grad_check(&mut params, 1e-5, |p| {
                let state = LstmState {
                    h: p.value(h0).to_vec(),
                    c: p.value(c0).to_vec(),
                };
                let xs = p.value(x).to_vec();
                let (next, cache) = cell.step(p, &xs, &state, 2).unwrap();
                let loss: f64 = next.h.iter().sum();
                let grad = LstmGrad {
                    dh: vec![1.0; 8],
                    dc: vec![0.0; 8],
                };
                let (prev, dx) = cell.step_backward(p, &cache, &grad, true);
                p.grad_mut(x).iter_mut().zip(dx.unwrap()).for_each(|(g, d)| *g += d);
                p.grad_mut(h0).iter_mut().zip(&prev.dh).for_each(|(g, d)| *g += d);
                p.grad_mut(c0).iter_mut().zip(&prev.dc).for_each(|(g, d)| *g += d);
                loss
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    /// Runs three chained steps and returns (loss, analytic dL/dx0).
    fn chain(p: &mut ParamSet, cell: &LstmCell, xs: [ParamId; 3]) -> f64 {
        let mut state = LstmState::zeros(1, cell.hidden);
        let mut caches = Vec::new();
        for &x in &xs {
            let input = p.value(x).to_vec();
            let (next, cache) = cell.step(p, &input, &state, 1).unwrap();
            caches.push(cache);
            state = next;
        }
        let loss: f64 = state.h.iter().sum();
        let mut grad = LstmGrad {
            dh: vec![1.0; cell.hidden],
            dc: vec![0.0; cell.hidden],
        };
        for (t, cache) in caches.iter().enumerate().rev() {
            let (prev, dx) = cell.step_backward(p, cache, &grad, true);
            p.grad_mut(xs[t]).iter_mut().zip(dx.unwrap()).for_each(|(g, d)| *g += d);
            grad = prev;
        }
        loss
    }

    #[test]
    fn three_step_chain_reaches_first_input() {
        let mut params = ParamSet::new(11);
        let cell = LstmCell::new(&mut params, "lstm", 2, 3);
        // Open the forget gate.
        let bias = params.value_mut(cell.bias);
        bias[3..6].iter_mut().for_each(|b| *b = 4.0);
        let xs = [
            params.add_uniform("x0", &[1, 2], 1),
            params.add_uniform("x1", &[1, 2], 1),
            params.add_uniform("x2", &[1, 2], 1),
        ];
        let report = grad_check(&mut params, 1e-5, |p| chain(p, &cell, xs)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        params.zero_grad();
        chain(&mut params, &cell, xs);
        let g0: f64 = params.grad(xs[0]).iter().map(|g| g.abs()).sum();
        assert!(g0 > 1e-6, "no gradient reached step 0: {g0}");
    }
}
