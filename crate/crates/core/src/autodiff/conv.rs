//! 3×3 same-size convolution lowered to GEMM through an im2col buffer.
//!
//! `cols` is a `(C·9) × (H·W)` row-major matrix with row `c·9 + ky·3 + kx` holding the input
//! plane `c` shifted by `(ky − 1, kx − 1)` and zero outside the image.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let n = h * w;
    let mut cols = vec![T::ZERO; c * 9 * n];
    for ch in 0..c {
        let plane = &x[ch * n..(ch + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * n..][..n];
                let (y_lo, y_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + ky - 1;
                    let src = &plane[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                    row[y * w + x_lo..y * w + x_hi].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

pub(super) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let n = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * n..(ch + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * n..][..n];
                let (y_lo, y_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + ky - 1;
                    let dst = &mut plane[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn check_shapes<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    match *weight.shape() {
        [o, wc, 3, 3] if wc == c => {
            if bias.shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv bias {:?} does not match {o} output channels",
                    bias.shape()
                )));
            }
            if h == 0 || w == 0 {
                return Err(Error::Shape("conv input has an empty dimension".into()));
            }
            Ok((o, c, h, w))
        }
        _ => Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        ))),
    }
}

pub(super) fn forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (o, c, h, w) = check_shapes(x, weight, bias)?;
    let n = h * w;
    let k = c * 9;
    let cols = im2col(x.data(), c, h, w);
    let mut out = Vec::with_capacity(o * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    // out (o×n) += W (o×k) · cols (k×n)
    unsafe {
        T::gemm(
            o,
            k,
            n,
            T::ONE,
            weight.data().as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            T::ONE,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok((Tensor::new(vec![o, h, w], out)?, cols))
}

/// `dW (o×k) += dY (o×n) · colsᵀ (n×k)`.
pub(super) fn grad_weight<T: Real>(dy: &[T], cols: &[T], o: usize, k: usize, n: usize, dw: &mut [T]) {
    unsafe {
        T::gemm(
            o,
            n,
            k,
            T::ONE,
            dy.as_ptr(),
            n as isize,
            1,
            cols.as_ptr(),
            1,
            n as isize,
            T::ONE,
            dw.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `dcols (k×n) = Wᵀ (k×o) · dY (o×n)`.
pub(super) fn grad_cols<T: Real>(dy: &[T], weight: &[T], o: usize, k: usize, n: usize) -> Vec<T> {
    let mut dcols = vec![T::ZERO; k * n];
    unsafe {
        T::gemm(
            k,
            o,
            n,
            T::ONE,
            weight.as_ptr(),
            1,
            k as isize,
            dy.as_ptr(),
            n as isize,
            1,
            T::ZERO,
            dcols.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    dcols
}

/// Non-recording convolution, for inference paths that do not need a graph.
pub fn conv2d_3x3<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    forward(x, weight, bias).map(|(out, _)| out)
}
