//! Forward and backward kernels for the individual layer kinds.
//!
//! Every function takes a whole batch (leading axis `N`) and works on
//! per-sample flat slices. Reductions over the batch run in sample order.

use rand::{Rng, RngCore};

use super::Activation;
use crate::tensor::{col2im_add, gemm, im2col_into, ConvGeometry, MatRef, Scalar, Tensor};

pub(super) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Tensor<T> {
    crate::tensor::conv2d(x, weight, bias, pad).expect("conv shapes validated at build time")
}

/// Accumulates weight and bias gradients; returns the input gradient when asked for.
pub(super) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
    weight_grad: &mut Tensor<T>,
    bias_grad: &mut Tensor<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let out_ch = weight.shape()[0];
    let g = ConvGeometry::new(c, h, w, 3, 1, pad).expect("validated geometry");
    let hw = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * hw];
    let mut dcols = vec![T::zero(); rows * hw];
    let mut grad_in = need_input_grad.then(|| x.zeros_like());

    for s in 0..n {
        let dy = grad_out.item(s);
        im2col_into(x.item(s), &g, &mut cols);
        // dW += dY · colsᵀ
        gemm(
            MatRef::new(dy, out_ch, hw),
            MatRef::new(&cols, rows, hw).t(),
            weight_grad.data_mut(),
            true,
        );
        for (b, row) in bias_grad.data_mut().iter_mut().zip(dy.chunks(hw)) {
            *b = *b + row.iter().copied().sum::<T>();
        }
        if let Some(gx) = grad_in.as_mut() {
            // dcols = Wᵀ · dY
            gemm(
                MatRef::new(weight.data(), out_ch, rows).t(),
                MatRef::new(dy, out_ch, hw),
                &mut dcols,
                false,
            );
            col2im_add(&dcols, &g, gx.item_mut(s));
        }
    }
    grad_in
}

/// 2×2 stride-2 max pooling. Odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output element, the flat input index
/// that won its window (first maximum in row-major scan order).
pub(super) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let candidates = [top, top + 1, top + w, top + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best as u32);
            }
        }
    }
    let pooled = Tensor::from_vec(&[n, c, oh, ow], out).expect("pool shape");
    (pooled, argmax)
}

pub(super) fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut grad_in = Tensor::zeros(input_shape).expect("pool input shape");
    let gx = grad_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx as usize] = gx[idx as usize] + g;
    }
    grad_in
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

pub(crate) fn activation_forward<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::LeakyRelu { alpha } => {
            let a = T::from_f64(alpha);
            x.map(|v| if v > T::zero() { v } else { a * v })
        }
        Activation::Sigmoid => x.map(sigmoid),
    }
}

pub(super) fn activation_backward<T: Scalar>(
    kind: Activation,
    x: &Tensor<T>,
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let zero = T::zero();
    let data: Vec<T> = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > zero { g } else { zero })
            .collect(),
        Activation::LeakyRelu { alpha } => {
            let a = T::from_f64(alpha);
            x.data()
                .iter()
                .zip(grad_out.data())
                .map(|(&v, &g)| if v > zero { g } else { a * g })
                .collect()
        }
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&p, &g)| g * p * (T::one() - p))
            .collect(),
    };
    Tensor::from_vec(x.shape(), data).expect("activation shape")
}

/// Inverted dropout mask: 0 for dropped elements, `1/(1-rate)` for survivors.
pub(super) fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<T> {
    if rate == 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub(super) fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let data = x.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
    Tensor::from_vec(x.shape(), data).expect("mask shape")
}

/// `y = x·Wᵀ + b` with `x: N×F`, `W: U×F`.
pub(super) fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let (units, features) = (weight.shape()[0], weight.shape()[1]);
    let mut out = Vec::with_capacity(n * units);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(
        MatRef::new(x.data(), n, features),
        MatRef::new(weight.data(), units, features).t(),
        &mut out,
        true,
    );
    Tensor::from_vec(&[n, units], out).expect("dense shape")
}

pub(super) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    weight_grad: &mut Tensor<T>,
    bias_grad: &mut Tensor<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let n = x.shape()[0];
    let (units, features) = (weight.shape()[0], weight.shape()[1]);
    // dW += dYᵀ · x
    gemm(
        MatRef::new(grad_out.data(), n, units).t(),
        MatRef::new(x.data(), n, features),
        weight_grad.data_mut(),
        true,
    );
    for row in grad_out.data().chunks(units) {
        for (b, &g) in bias_grad.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    need_input_grad.then(|| {
        let mut gx = vec![T::zero(); n * features];
        gemm(
            MatRef::new(grad_out.data(), n, units),
            MatRef::new(weight.data(), units, features),
            &mut gx,
            false,
        );
        Tensor::from_vec(x.shape(), gx).expect("dense input shape")
    })
}
