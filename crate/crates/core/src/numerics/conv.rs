//! Valid-padding 2-D convolution and its transpose over NHWC batches.

use super::linalg::{accumulate_col_sums, add_row_bias, gemm, matmul, Mat};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Output side length of a valid convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    if kernel > input {
        return Err(Error::Shape(format!("kernel {kernel} larger than input {input}")));
    }
    Ok((input - kernel) / stride + 1)
}

/// Patch layout shared by convolution and its transpose: a `grid_h × grid_w`
/// lattice of `kernel × kernel` windows, `stride` apart, over an
/// `img_h × img_w × channels` image.
#[derive(Clone, Copy, Debug)]
struct Patches {
    img_h: usize,
    img_w: usize,
    channels: usize,
    grid_h: usize,
    grid_w: usize,
    kernel: usize,
    stride: usize,
}

impl Patches {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn img_len(&self) -> usize {
        self.img_h * self.img_w * self.channels
    }

    /// Gathers patches into rows of a `(batch·grid) × patch_len` matrix.
    fn im2col(&self, img: &[f64], batch: usize) -> Vec<f64> {
        let (k, c) = (self.kernel, self.channels);
        let row_len = self.patch_len();
        let mut cols = Vec::with_capacity(batch * self.grid_h * self.grid_w * row_len);
        for b in 0..batch {
            let base = &img[b * self.img_len()..(b + 1) * self.img_len()];
            for gy in 0..self.grid_h {
                for gx in 0..self.grid_w {
                    for ky in 0..k {
                        let y = gy * self.stride + ky;
                        let src = (y * self.img_w + gx * self.stride) * c;
                        cols.extend_from_slice(&base[src..src + k * c]);
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds patch rows back into an image buffer.
    fn col2im(&self, cols: &[f64], batch: usize, img: &mut [f64]) {
        let (k, c) = (self.kernel, self.channels);
        let row_len = self.patch_len();
        let mut rows = cols.chunks_exact(row_len);
        for b in 0..batch {
            let base = &mut img[b * self.img_len()..(b + 1) * self.img_len()];
            for gy in 0..self.grid_h {
                for gx in 0..self.grid_w {
                    let row = rows.next().expect("row count");
                    for ky in 0..k {
                        let y = gy * self.stride + ky;
                        let dst = (y * self.img_w + gx * self.stride) * c;
                        base[dst..dst + k * c]
                            .iter_mut()
                            .zip(&row[ky * k * c..(ky + 1) * k * c])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

/// Strided valid convolution. Weight layout is `(ky, kx, c_in) × c_out`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Values a convolution keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    batch: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl ConvCache {
    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let weight = params.add_uniform(&format!("{name}.weight"), &[fan_in, out_channels], fan_in);
        let bias = params.add_uniform(&format!("{name}.bias"), &[out_channels], fan_in);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    fn patches(&self, in_hw: (usize, usize), out_hw: (usize, usize)) -> Patches {
        Patches {
            img_h: in_hw.0,
            img_w: in_hw.1,
            channels: self.in_channels,
            grid_h: out_hw.0,
            grid_w: out_hw.1,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    pub fn out_hw(&self, in_hw: (usize, usize)) -> Result<(usize, usize)> {
        Ok((
            conv_out_size(in_hw.0, self.kernel, self.stride)?,
            conv_out_size(in_hw.1, self.kernel, self.stride)?,
        ))
    }

    /// `input` is `batch × h × w × c_in`; returns `batch × h' × w' × c_out`.
    pub fn forward(
        &self,
        params: &ParamSet,
        input: &[f64],
        batch: usize,
        in_hw: (usize, usize),
    ) -> Result<(Vec<f64>, ConvCache)> {
        if input.len() != batch * in_hw.0 * in_hw.1 * self.in_channels {
            return Err(Error::Shape(format!(
                "conv input has {} values, expected {batch}×{}×{}×{}",
                input.len(),
                in_hw.0,
                in_hw.1,
                self.in_channels
            )));
        }
        let out_hw = self.out_hw(in_hw)?;
        let patches = self.patches(in_hw, out_hw);
        let cols = patches.im2col(input, batch);
        let rows = batch * out_hw.0 * out_hw.1;
        let mut out = matmul(
            Mat::new(&cols, rows, patches.patch_len()),
            Mat::new(params.value(self.weight), patches.patch_len(), self.out_channels),
        );
        add_row_bias(&mut out, params.value(self.bias));
        Ok((
            out,
            ConvCache {
                cols,
                batch,
                in_hw,
                out_hw,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `dL/dinput` when asked.
    pub fn backward(
        &self,
        params: &mut ParamSet,
        cache: &ConvCache,
        dout: &[f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let patches = self.patches(cache.in_hw, cache.out_hw);
        let rows = cache.batch * cache.out_hw.0 * cache.out_hw.1;
        let plen = patches.patch_len();
        gemm(
            Mat::new(&cache.cols, rows, plen).t(),
            Mat::new(dout, rows, self.out_channels),
            params.grad_mut(self.weight),
            1.0,
        );
        accumulate_col_sums(dout, params.grad_mut(self.bias));
        if !want_input_grad {
            return None;
        }
        let dcols = matmul(
            Mat::new(dout, rows, self.out_channels),
            Mat::new(params.value(self.weight), plen, self.out_channels).t(),
        );
        let mut dinput = vec![0.0; cache.batch * patches.img_len()];
        patches.col2im(&dcols, cache.batch, &mut dinput);
        Some(dinput)
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]'s input map), used by
/// the decoder. `out_hw` is chosen by the caller so the decoder reproduces
/// the encoder's spatial sizes exactly.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct ConvTransposeCache {
    input: Vec<f64>,
    batch: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl ConvTranspose2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel / (stride * stride).max(1);
        let weight = params.add_uniform(
            &format!("{name}.weight"),
            &[in_channels, kernel * kernel * out_channels],
            fan_in,
        );
        let bias = params.add_uniform(&format!("{name}.bias"), &[out_channels], fan_in);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    /// Checks that `out_hw` is reachable from `in_hw`: the smallest output is
    /// `(in - 1)·stride + kernel` and up to `stride - 1` extra rows/columns
    /// may be appended.
    pub fn check_sizes(&self, in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<()> {
        for (i, o) in [(in_hw.0, out_hw.0), (in_hw.1, out_hw.1)] {
            let min = (i.max(1) - 1) * self.stride + self.kernel;
            if i == 0 || o < min || o >= min + self.stride {
                return Err(Error::Shape(format!(
                    "transposed conv cannot map {i} to {o} (kernel {}, stride {})",
                    self.kernel, self.stride
                )));
            }
        }
        Ok(())
    }

    fn patches(&self, in_hw: (usize, usize), out_hw: (usize, usize)) -> Patches {
        Patches {
            img_h: out_hw.0,
            img_w: out_hw.1,
            channels: self.out_channels,
            grid_h: in_hw.0,
            grid_w: in_hw.1,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        input: &[f64],
        batch: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<(Vec<f64>, ConvTransposeCache)> {
        self.check_sizes(in_hw, out_hw)?;
        if input.len() != batch * in_hw.0 * in_hw.1 * self.in_channels {
            return Err(Error::Shape("transposed conv input size".into()));
        }
        let patches = self.patches(in_hw, out_hw);
        let rows = batch * in_hw.0 * in_hw.1;
        let cols = matmul(
            Mat::new(input, rows, self.in_channels),
            Mat::new(params.value(self.weight), self.in_channels, patches.patch_len()),
        );
        let mut out = vec![0.0; batch * patches.img_len()];
        patches.col2im(&cols, batch, &mut out);
        add_row_bias(&mut out, params.value(self.bias));
        Ok((
            out,
            ConvTransposeCache {
                input: input.to_vec(),
                batch,
                in_hw,
                out_hw,
            },
        ))
    }

    pub fn backward(
        &self,
        params: &mut ParamSet,
        cache: &ConvTransposeCache,
        dout: &[f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let patches = self.patches(cache.in_hw, cache.out_hw);
        let rows = cache.batch * cache.in_hw.0 * cache.in_hw.1;
        let plen = patches.patch_len();
        let dcols = patches.im2col(dout, cache.batch);
        gemm(
            Mat::new(&cache.input, rows, self.in_channels).t(),
            Mat::new(&dcols, rows, plen),
            params.grad_mut(self.weight),
            1.0,
        );
        accumulate_col_sums(dout, params.grad_mut(self.bias));
        if !want_input_grad {
            return None;
        }
        Some(matmul(
            Mat::new(&dcols, rows, plen),
            Mat::new(params.value(self.weight), self.in_channels, plen).t(),
        ))
    }
}

/// Single-image convenience wrapper: `input` is `h × w × c_in`.
pub fn conv2d_forward(input: &Tensor, params: &ParamSet, layer: &Conv2d) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 3 || shape[2] != layer.in_channels {
        return Err(Error::Shape(format!(
            "expected h×w×{} input, got {shape:?}",
            layer.in_channels
        )));
    }
    let (out, cache) = layer.forward(params, input.data(), 1, (shape[0], shape[1]))?;
    let (oh, ow) = cache.out_hw();
    Tensor::from_vec(&[oh, ow, layer.out_channels], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn identity_kernel_is_identity() {
        let mut params = ParamSet::new(0);
        let conv = Conv2d::new(&mut params, "c", 2, 2, 1, 1);
        let w = params.value_mut(conv.weight);
        w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params.value_mut(conv.bias).fill(0.0);
        let data: Vec<f64> = (0..5 * 4 * 2).map(|i| i as f64 * 0.1).collect();
        let input = Tensor::from_vec(&[5, 4, 2], data).unwrap();
        let out = conv2d_forward(&input, &params, &conv).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn output_shape_formula() {
        let mut params = ParamSet::new(0);
        let conv = Conv2d::new(&mut params, "c", 3, 2, 4, 2);
        let input = Tensor::zeros(&[64, 64, 3]);
        let out = conv2d_forward(&input, &params, &conv).unwrap();
        assert_eq!(out.shape(), &[31, 31, 2]);
    }

    #[test]
    fn kernel_larger_than_input_is_shape_error() {
        let mut params = ParamSet::new(0);
        let conv = Conv2d::new(&mut params, "c", 1, 1, 4, 2);
        let input = Tensor::zeros(&[3, 3, 1]);
        assert!(matches!(conv2d_forward(&input, &params, &conv), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut params = ParamSet::new(seed);
            let conv = Conv2d::new(&mut params, "c", 2, 3, 3, 2);
            let input = params.add_uniform("x", &[2, 6, 6, 2], 1);
            let report = grad_check(&mut params, 1e-5, |p| {
                let x = p.value(input).to_vec();
                let (y, cache) = conv.forward(p, &x, 2, (6, 6)).unwrap();
                let loss = y.iter().map(|v| v.sin()).sum::<f64>();
                let dy: Vec<f64> = y.iter().map(|v| v.cos()).collect();
                let dx = conv.backward(p, &cache, &dy, true).unwrap();
                p.grad_mut(input).iter_mut().zip(dx).for_each(|(g, d)| *g += d);
                loss
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn transpose_inverts_conv_shapes() {
        let mut params = ParamSet::new(0);
        let deconv = ConvTranspose2d::new(&mut params, "d", 3, 2, 4, 2);
        // 32 -> 15 -> 6 forward; the transpose must reach 15 and 32 back.
        assert!(deconv.check_sizes((6, 6), (15, 15)).is_ok());
        assert!(deconv.check_sizes((15, 15), (32, 32)).is_ok());
        assert!(deconv.check_sizes((6, 6), (17, 17)).is_err());
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut params = ParamSet::new(9);
        let deconv = ConvTranspose2d::new(&mut params, "d", 2, 3, 3, 2);
        let input = params.add_uniform("x", &[2, 3, 3, 2], 1);
        let report = grad_check(&mut params, 1e-5, |p| {
            let x = p.value(input).to_vec();
            let (y, cache) = deconv.forward(p, &x, 2, (3, 3), (8, 8)).unwrap();
            let loss = y.iter().map(|v| v.sin()).sum::<f64>();
            let dy: Vec<f64> = y.iter().map(|v| v.cos()).collect();
            let dx = deconv.backward(p, &cache, &dy, true).unwrap();
            p.grad_mut(input).iter_mut().zip(dx).for_each(|(g, d)| *g += d);
            loss
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
