//! Layer kernels with explicit backward passes over a flat parameter vector.

use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    /// Stride-1 convolution with symmetric zero padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping max pooling (stride = size, floor).
    MaxPool2d { size: usize },
    GlobalAvgPool,
    Flatten,
    Linear { inputs: usize, outputs: usize },
    /// Inverted dropout, active only in training mode.
    Dropout { rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub op: Op,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Weights followed by biases inside the flat parameter vector.
    pub params: Range<usize>,
}

pub(crate) enum Cache<T> {
    Input(Tensor<T>),
    Positive(Vec<bool>),
    ArgMax(Vec<u32>),
    Scale(Vec<T>),
    Nothing,
}

fn conv_out(size: usize, kernel: usize, padding: usize) -> usize {
    size + 2 * padding + 1 - kernel
}

impl Layer {
    /// Resolves output shape and parameter count for `op` applied to `in_shape`.
    pub(crate) fn new(op: Op, in_shape: &[usize], offset: usize) -> Layer {
        let (out_shape, count) = match &op {
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                assert_eq!(in_shape.len(), 3, "conv expects [C,H,W]");
                assert_eq!(in_shape[0], *in_channels, "conv channel mismatch");
                (
                    vec![
                        *out_channels,
                        conv_out(in_shape[1], *kernel, *padding),
                        conv_out(in_shape[2], *kernel, *padding),
                    ],
                    out_channels * in_channels * kernel * kernel + out_channels,
                )
            }
            Op::Relu | Op::Dropout { .. } => (in_shape.to_vec(), 0),
            Op::MaxPool2d { size } => (
                vec![in_shape[0], in_shape[1] / size, in_shape[2] / size],
                0,
            ),
            Op::GlobalAvgPool => (vec![in_shape[0]], 0),
            Op::Flatten => (vec![in_shape.iter().product()], 0),
            Op::Linear { inputs, outputs } => {
                assert_eq!(in_shape, [*inputs], "linear input mismatch");
                (vec![*outputs], inputs * outputs + outputs)
            }
        };
        Layer {
            op,
            in_shape: in_shape.to_vec(),
            out_shape,
            params: offset..offset + count,
        }
    }

    /// He-normal weights, zero biases.
    pub(crate) fn init<T: Scalar>(&self, params: &mut [T], rng: &mut Rng) {
        let (fan_in, weights) = match self.op {
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                in_channels * kernel * kernel,
                out_channels * in_channels * kernel * kernel,
            ),
            Op::Linear { inputs, outputs } => (inputs, inputs * outputs),
            _ => return,
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let slot = &mut params[self.params.clone()];
        for w in &mut slot[..weights] {
            *w = T::of(normal.sample(rng));
        }
        for b in &mut slot[weights..] {
            *b = T::zero();
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        params: &[T],
        x: Tensor<T>,
        dropout_rng: Option<&mut Rng>,
    ) -> (Tensor<T>, Cache<T>) {
        let batch = x.batch();
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&self.out_shape);
        match self.op {
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let p = &params[self.params.clone()];
                let (w, bias) = p.split_at(out_channels * in_channels * kernel * kernel);
                let geo = ConvGeometry::new(&self.in_shape, &self.out_shape, kernel, padding);
                let mut out = Tensor::zeros(&out_shape);
                let mut cols = vec![T::zero(); geo.col_rows() * geo.out_len()];
                let ohw = geo.out_len();
                for b in 0..batch {
                    geo.im2col(x.sample(b), &mut cols);
                    let y = out.sample_mut(b);
                    for (co, plane) in y.chunks_mut(ohw).enumerate() {
                        plane.fill(bias[co]);
                    }
                    T::gemm(
                        out_channels,
                        geo.col_rows(),
                        ohw,
                        T::one(),
                        w,
                        geo.col_rows(),
                        1,
                        &cols,
                        ohw,
                        1,
                        T::one(),
                        y,
                        ohw,
                        1,
                    );
                }
                (out, Cache::Input(x))
            }
            Op::Relu => {
                let mut out = x;
                let mut positive = Vec::with_capacity(out.data().len());
                for v in out.data_mut() {
                    let keep = *v > T::zero();
                    if !keep {
                        *v = T::zero();
                    }
                    positive.push(keep);
                }
                (out, Cache::Positive(positive))
            }
            Op::MaxPool2d { size } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let mut out = Tensor::zeros(&out_shape);
                let mut arg = Vec::with_capacity(out.data().len());
                for b in 0..batch {
                    let xs = x.sample(b);
                    let ys = out.sample_mut(b);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = T::neg_infinity();
                                let mut best_i = 0;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let i = (ch * h + oy * size + dy) * w + ox * size + dx;
                                        if xs[i] > best {
                                            best = xs[i];
                                            best_i = i;
                                        }
                                    }
                                }
                                ys[(ch * oh + oy) * ow + ox] = best;
                                arg.push(best_i as u32);
                            }
                        }
                    }
                }
                (out, Cache::ArgMax(arg))
            }
            Op::GlobalAvgPool => {
                let c = self.in_shape[0];
                let hw = self.in_shape[1] * self.in_shape[2];
                let scale = T::one() / T::of(hw as f64);
                let mut out = Tensor::zeros(&out_shape);
                for b in 0..batch {
                    let xs = x.sample(b);
                    let ys = out.sample_mut(b);
                    for ch in 0..c {
                        ys[ch] = xs[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * scale;
                    }
                }
                (out, Cache::Nothing)
            }
            Op::Flatten => (
                x.reshape(&out_shape).expect("flatten preserves length"),
                Cache::Nothing,
            ),
            Op::Linear { inputs, outputs } => {
                let p = &params[self.params.clone()];
                let (w, bias) = p.split_at(inputs * outputs);
                let mut out = Tensor::zeros(&out_shape);
                for row in out.data_mut().chunks_mut(outputs) {
                    row.copy_from_slice(bias);
                }
                // out[B,out] += x[B,in] · Wᵀ
                T::gemm(
                    batch,
                    inputs,
                    outputs,
                    T::one(),
                    x.data(),
                    inputs,
                    1,
                    w,
                    1,
                    inputs,
                    T::one(),
                    out.data_mut(),
                    outputs,
                    1,
                );
                (out, Cache::Input(x))
            }
            Op::Dropout { rate } => match dropout_rng {
                Some(rng) if rate > 0.0 => {
                    let keep = T::of(1.0 / (1.0 - rate));
                    let mut out = x;
                    let scale: Vec<T> = (0..out.data().len())
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    for (v, &s) in out.data_mut().iter_mut().zip(&scale) {
                        *v *= s;
                    }
                    (out, Cache::Scale(scale))
                }
                _ => (x, Cache::Nothing),
            },
        }
    }

    /// Backpropagates `grad` (w.r.t. this layer's output), accumulating parameter
    /// gradients into `pgrad`. Returns the input gradient when requested.
    pub(crate) fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &Cache<T>,
        grad: Tensor<T>,
        pgrad: &mut [T],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let batch = grad.batch();
        let mut in_shape = vec![batch];
        in_shape.extend_from_slice(&self.in_shape);
        match (&self.op, cache) {
            (
                &Op::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                },
                Cache::Input(x),
            ) => {
                let nw = out_channels * in_channels * kernel * kernel;
                let w = &params[self.params.start..self.params.start + nw];
                let (gw, gb) = pgrad[self.params.clone()].split_at_mut(nw);
                let geo = ConvGeometry::new(&self.in_shape, &self.out_shape, kernel, padding);
                let ohw = geo.out_len();
                let rows = geo.col_rows();
                let mut cols = vec![T::zero(); rows * ohw];
                let mut dcols = vec![T::zero(); rows * ohw];
                let mut dx = need_input.then(|| Tensor::zeros(&in_shape));
                for b in 0..batch {
                    let g = grad.sample(b);
                    for (co, plane) in g.chunks(ohw).enumerate() {
                        gb[co] += plane.iter().copied().sum::<T>();
                    }
                    geo.im2col(x.sample(b), &mut cols);
                    // gW[Cout, rows] += g[Cout, ohw] · colsᵀ
                    T::gemm(
                        out_channels,
                        ohw,
                        rows,
                        T::one(),
                        g,
                        ohw,
                        1,
                        &cols,
                        1,
                        ohw,
                        T::one(),
                        gw,
                        rows,
                        1,
                    );
                    if let Some(dx) = dx.as_mut() {
                        // dcols[rows, ohw] = Wᵀ · g
                        T::gemm(
                            rows,
                            out_channels,
                            ohw,
                            T::one(),
                            w,
                            1,
                            rows,
                            g,
                            ohw,
                            1,
                            T::zero(),
                            &mut dcols,
                            ohw,
                            1,
                        );
                        geo.col2im(&dcols, dx.sample_mut(b));
                    }
                }
                dx
            }
            (Op::Relu, Cache::Positive(positive)) => need_input.then(|| {
                let mut g = grad;
                for (v, &keep) in g.data_mut().iter_mut().zip(positive) {
                    if !keep {
                        *v = T::zero();
                    }
                }
                g
            }),
            (Op::MaxPool2d { .. }, Cache::ArgMax(arg)) => need_input.then(|| {
                let mut dx = Tensor::zeros(&in_shape);
                let per = grad.sample_len();
                for b in 0..batch {
                    let g = grad.sample(b);
                    let d = dx.sample_mut(b);
                    for (j, &gv) in g.iter().enumerate() {
                        d[arg[b * per + j] as usize] += gv;
                    }
                }
                dx
            }),
            (Op::GlobalAvgPool, _) => need_input.then(|| {
                let hw = self.in_shape[1] * self.in_shape[2];
                let scale = T::one() / T::of(hw as f64);
                let mut dx = Tensor::zeros(&in_shape);
                for b in 0..batch {
                    let g = grad.sample(b);
                    let d = dx.sample_mut(b);
                    for (ch, &gv) in g.iter().enumerate() {
                        d[ch * hw..(ch + 1) * hw].fill(gv * scale);
                    }
                }
                dx
            }),
            (Op::Flatten, _) => {
                need_input.then(|| grad.reshape(&in_shape).expect("flatten preserves length"))
            }
            (&Op::Linear { inputs, outputs }, Cache::Input(x)) => {
                let nw = inputs * outputs;
                let w = &params[self.params.start..self.params.start + nw];
                let (gw, gb) = pgrad[self.params.clone()].split_at_mut(nw);
                for row in grad.data().chunks(outputs) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                // gW[out,in] += gradᵀ[out,B] · x[B,in]
                T::gemm(
                    outputs,
                    batch,
                    inputs,
                    T::one(),
                    grad.data(),
                    1,
                    outputs,
                    x.data(),
                    inputs,
                    1,
                    T::one(),
                    gw,
                    inputs,
                    1,
                );
                need_input.then(|| {
                    let mut dx = Tensor::zeros(&in_shape);
                    T::gemm(
                        batch,
                        outputs,
                        inputs,
                        T::one(),
                        grad.data(),
                        outputs,
                        1,
                        w,
                        inputs,
                        1,
                        T::zero(),
                        dx.data_mut(),
                        inputs,
                        1,
                    );
                    dx
                })
            }
            (Op::Dropout { .. }, Cache::Scale(scale)) => need_input.then(|| {
                let mut g = grad;
                for (v, &s) in g.data_mut().iter_mut().zip(scale) {
                    *v *= s;
                }
                g
            }),
            (Op::Dropout { .. }, Cache::Nothing) => need_input.then_some(grad),
            (op, _) => unreachable!("cache does not match layer {op:?}"),
        }
    }
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(in_shape: &[usize], out_shape: &[usize], kernel: usize, padding: usize) -> Self {
        ConvGeometry {
            channels: in_shape[0],
            height: in_shape[1],
            width: in_shape[2],
            kernel,
            padding,
            out_h: out_shape[1],
            out_w: out_shape[2],
        }
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every (column row, output position, input index) triple that
    /// falls inside the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, p) = (self.kernel, self.padding as isize);
        let ohw = self.out_len();
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base_in = (c * self.height + iy as usize) * self.width;
                        let base_col = row * ohw + oy * self.out_w;
                        for ox in 0..self.out_w {
                            let ix = ox as isize + kx as isize - p;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(base_col + ox, base_in + ix as usize, row);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each_tap(|ci, xi, _| cols[ci] = x[xi]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        self.for_each_tap(|ci, xi, _| dx[xi] += cols[ci]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct (non-im2col) convolution used as an oracle.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, h: usize, k: usize, p: usize) -> Vec<f64> {
        let o = h + 2 * p + 1 - k;
        let mut y = vec![0.0; cout * o * o];
        for co in 0..cout {
            for oy in 0..o {
                for ox in 0..o {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - p as isize;
                                let ix = ox as isize + kx as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < h {
                                    s += w[((co * cin + ci) * k + ky) * k + kx]
                                        * x[(ci * h + iy as usize) * h + ix as usize];
                                }
                            }
                        }
                    }
                    y[(co * o + oy) * o + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        let op = Op::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            padding: 1,
        };
        let layer = Layer::new(op, &[2, 4, 4], 0);
        let n = layer.params.len();
        let params: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let x: Vec<f64> = (0..32).map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0).collect();
        let (y, _) = layer.forward(&params, Tensor::from_vec(&[1, 2, 4, 4], x.clone()).unwrap(), None);
        let expected = naive_conv(&x, &params[..54], &params[54..], 2, 3, 4, 3, 1);
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let layer = Layer::new(Op::MaxPool2d { size: 2 }, &[1, 2, 2], 0);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, cache) = layer.forward::<f64>(&[], x, None);
        assert_eq!(y.data(), &[4.0]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let dx = layer.backward(&[], &cache, g, &mut [], true).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }
}
