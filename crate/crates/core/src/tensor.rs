//! Dense row-major tensors and the numeric kernels the network is built on.
//!
//! Image batches use the `N×C×H×W` layout throughout. Single images are
//! `C×H×W`. Every kernel here is single-threaded with a fixed reduction
//! order, so identical inputs always produce bitwise-identical outputs.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the training precision, `f64`
/// is used for gradient verification.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = A·B` (or `C += A·B` when `accumulate`) for strided operands.
    ///
    /// # Safety
    /// Strides and extents must address elements inside `a`, `b` and `c`.
    /// Callers in this crate go through [`gemm`], which checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
        accumulate: bool,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        let beta = if accumulate { 1.0 } else { 0.0 };
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        let beta = if accumulate { 1.0 } else { 0.0 };
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A borrowed matrix operand: `rows×cols` elements addressed as
/// `data[r * row_stride + c * col_stride]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `out = a·b`, or `out += a·b` when `accumulate`. `out` is row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner extents differ");
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    assert_eq!(out.len(), a.rows * b.cols);
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        if !accumulate {
            out.fill(T::zero());
        }
        return;
    }
    // SAFETY: spans checked above; `out` is exactly rows×cols contiguous.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
            accumulate,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one extent"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!(
            "extent {pos} of shape {shape:?} is zero"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], fill: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zeros with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Element at a full multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Number of elements in one item along the leading axis.
    pub fn item_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Flat view of item `n` along the leading axis.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    item.shape, first.shape
                )));
            }
            data.extend_from_slice(&item.data);
        }
        Self::from_vec(&shape, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} × {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(&self.data, m, k),
            MatRef::new(&other.data, k, n),
            &mut out,
            false,
        );
        Tensor::from_vec(&[m, n], out)
    }
}

/// Output extent of a `kernel`-wide window sliding with `stride` over
/// `extent + 2·pad` cells, or `None` if the window does not fit.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Geometry of one image fed through im2col.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let out_h = conv_out_extent(height, kernel, stride, pad);
        let out_w = conv_out_extent(width, kernel, stride, pad);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
                channels,
                height,
                width,
                kernel,
                stride,
                pad,
                out_h,
                out_w,
            }),
            _ => Err(Error::shape(format!(
                "{height}×{width} input (pad {pad}) is smaller than the {kernel}×{kernel} kernel"
            ))),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by kernel tap `k` at output position `o`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (H'·W')` column matrix.
///
/// Row `c·k·k + kh·k + kw` holds tap `(kh, kw)` of channel `c`; column
/// `oh·W' + ow` is output pixel `(oh, ow)`. Padding cells read as zero.
pub(crate) fn im2col_into<T: Scalar>(src: &[T], g: &ConvGeometry, cols: &mut [T]) {
    debug_assert_eq!(src.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    let Some(ih) = g.source(oh, kh, g.height) else {
                        out_row.fill(T::zero());
                        continue;
                    };
                    let line = &plane[ih * g.width..(ih + 1) * g.width];
                    if g.stride == 1 && g.pad == 0 {
                        out_row.copy_from_slice(&line[kw..kw + g.out_w]);
                    } else {
                        for (ow, v) in out_row.iter_mut().enumerate() {
                            *v = g.source(ow, kw, g.width).map_or(T::zero(), |iw| line[iw]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters-adds columns back onto a `C×H×W` image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, dst: &mut [T]) {
    debug_assert_eq!(dst.len(), g.channels * g.height * g.width);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let Some(ih) = g.source(oh, kh, g.height) else {
                        continue;
                    };
                    let line = &mut plane[ih * g.width..(ih + 1) * g.width];
                    for ow in 0..g.out_w {
                        if let Some(iw) = g.source(ow, kw, g.width) {
                            line[iw] = line[iw] + src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Splits an image-like tensor into `(channels, height, width)`, accepting
/// `C×H×W` or a single-item `1×C×H×W` batch.
fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "expected a C×H×W image or 1×C×H×W batch, got {shape:?}"
        ))),
    }
}

/// Column matrix for one image (`C×H×W` or `1×C×H×W`), no padding.
pub fn im2col<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(input.shape())?;
    let g = ConvGeometry::new(c, h, w, kernel, stride, 0)?;
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    im2col_into(input.data(), &g, &mut cols);
    Tensor::from_vec(&[g.col_rows(), g.col_cols()], cols)
}

fn conv_operands<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<(usize, ConvGeometry, usize)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::shape(format!(
            "convolution input must be N×C×H×W, got {:?}",
            input.shape()
        )));
    };
    let &[o, wc, kh, kw] = weight.shape() else {
        return Err(Error::shape(format!(
            "convolution weight must be O×C×k×k, got {:?}",
            weight.shape()
        )));
    };
    if wc != c || kh != kw {
        return Err(Error::shape(format!(
            "weight {:?} does not fit input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(format!(
            "bias {:?} does not match {o} output channels",
            bias.shape()
        )));
    }
    Ok((n, ConvGeometry::new(c, h, w, kh, 1, pad)?, o))
}

/// Stride-1 convolution via im2col and a matrix product.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g, o) = conv_operands(input, weight, bias, pad)?;
    let hw = g.col_cols();
    let mut out = vec![T::zero(); n * o * hw];
    let mut cols = vec![T::zero(); g.col_rows() * hw];
    for s in 0..n {
        im2col_into(input.item(s), &g, &mut cols);
        let dst = &mut out[s * o * hw..(s + 1) * o * hw];
        for (ch, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[ch]);
        }
        gemm(
            MatRef::new(weight.data(), o, g.col_rows()),
            MatRef::new(&cols, g.col_rows(), hw),
            dst,
            true,
        );
    }
    Tensor::from_vec(&[n, o, g.out_h, g.out_w], out)
}

/// Nested-loop stride-1 convolution. Slow; kept as the reference the fast
/// path is checked against.
pub fn conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g, o) = conv_operands(input, weight, bias, pad)?;
    let k = g.kernel;
    let mut out = Tensor::zeros(&[n, o, g.out_h, g.out_w])?;
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias.data()[oc];
                    for ic in 0..g.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy + ky) as isize - pad as isize;
                                let x = (ox + kx) as isize - pad as isize;
                                if y < 0 || x < 0 || y >= g.height as isize || x >= g.width as isize {
                                    continue;
                                }
                                acc = acc
                                    + weight.at(&[oc, ic, ky, kx])
                                        * input.at(&[s, ic, y as usize, x as usize]);
                            }
                        }
                    }
                    let idx = ((s * o + oc) * g.out_h + oy) * g.out_w + ox;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Corner-aligned source coordinate for output index `i`.
fn aligned_source(i: usize, out: usize, src: usize) -> f64 {
    if out == 1 || src == 1 {
        0.0
    } else {
        (i * (src - 1)) as f64 / (out - 1) as f64
    }
}

/// Samples plane `plane` (`h×w`) at fractional `(y, x)`; coordinates are
/// clamped to the image, which makes out-of-range reads repeat the edge.
#[inline]
pub(crate) fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = T::from_f64(y - y0 as f64);
    let fx = T::from_f64(x - x0 as f64);
    let one = T::one();
    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
    top * (one - fy) + bottom * fy
}

/// Bilinear resize of a `C×H×W` image with corner-aligned sampling:
/// output corners coincide with input corners.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!(
            "resize expects a C×H×W image, got {:?}",
            image.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target extents must be positive"));
    }
    if out_h == h && out_w == w {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let y = aligned_source(i, out_h, h);
            for j in 0..out_w {
                let x = aligned_source(j, out_w, w);
                out.push(bilinear_sample(plane, h, w, y, x));
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn new_fills_and_rejects_zero_extents() {
        let t = Tensor::<f32>::new(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f32>::new(&[1], 7.5).unwrap();
        assert_eq!(t.data(), &[7.5]);
        let t = Tensor::<f32>::new(&[3, 150, 150], 1.0).unwrap();
        assert_eq!(t.len(), 67_500);
        assert!(t.data().iter().all(|&v| v == 1.0));

        assert!(matches!(Tensor::<f32>::new(&[2, 0], 1.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor::<f32>::new(&[], 1.0), Err(Error::Shape(_))));
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_hand_cases() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![0.0f64, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&[3, 3], &mut rng);
        let mut eye = Tensor::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        assert_eq!(eye.matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&eye).unwrap(), m);

        assert!(matches!(a.matmul(&a.clone().reshape(&[4, 1]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 4], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.at(&[i, k]) * b.at(&[k, j]);
                }
                let got = c.at(&[i, j]);
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_is_bitwise_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[64, 80], &mut rng).cast::<f32>();
        let b = random(&[80, 33], &mut rng).cast::<f32>();
        assert_eq!(a.matmul(&b).unwrap(), a.matmul(&b).unwrap());
    }

    #[test]
    fn im2col_shapes() {
        let x = Tensor::<f32>::new(&[1, 3, 150, 150], 0.5).unwrap();
        let cols = im2col(&x, 3, 1).unwrap();
        assert_eq!(cols.shape(), &[27, 148 * 148]);

        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let cols = im2col(&x, 3, 1).unwrap();
        assert_eq!(cols.shape(), &[9, 1]);
        assert_eq!(cols.data(), x.data());

        let small = Tensor::<f32>::new(&[1, 1, 2, 5], 0.0).unwrap();
        assert!(matches!(im2col(&small, 3, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn im2col_column_order_is_channel_then_row() {
        // 2 channels, 4×4: column 0 is the top-left window.
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|v| v as f64).collect()).unwrap();
        let cols = im2col(&x, 3, 1).unwrap();
        let col0: Vec<f64> = (0..18).map(|r| cols.at(&[r, 0])).collect();
        let expected = [
            0., 1., 2., 4., 5., 6., 8., 9., 10., 16., 17., 18., 20., 21., 22., 24., 25., 26.,
        ];
        assert_eq!(col0, expected);
        // Column 3 is output pixel (1, 1).
        assert_eq!(cols.at(&[0, 3]), 5.0);
    }

    #[test]
    fn im2col_overlap_average_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 6, 7], &mut rng);
        let g = ConvGeometry::new(2, 6, 7, 3, 1, 0).unwrap();
        let cols = im2col(&x, 3, 1).unwrap();
        let mut summed = vec![0.0; x.len()];
        col2im_add(cols.data(), &g, &mut summed);
        let ones = Tensor::<f64>::new(&[2, 6, 7], 1.0).unwrap();
        let count_cols = im2col(&ones, 3, 1).unwrap();
        let mut counts = vec![0.0; x.len()];
        col2im_add(count_cols.data(), &g, &mut counts);
        for (i, (&s, &n)) in summed.iter().zip(&counts).enumerate() {
            assert!(n >= 1.0, "element {i} never sampled");
            assert!((s / n - x.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_fast_path_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        for pad in [0, 1] {
            let fast = conv2d(&x, &w, &b, pad).unwrap();
            let slow = conv2d_reference(&x, &w, &b, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = Tensor::<f32>::new(&[3, 127, 129], 0.3).unwrap();
        let out = resize_bilinear(&img, 150, 150).unwrap();
        assert_eq!(out.shape(), &[3, 150, 150]);
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random(&[2, 9, 4], &mut rng);
        assert_eq!(resize_bilinear(&img, 9, 4).unwrap(), img);
    }

    #[test]
    fn resize_two_by_two_ramp() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = (0..4).map(|c| out.at(&[0, r, c])).collect();
            assert!(row.windows(2).all(|p| p[0] <= p[1]), "row {r}: {row:?}");
            // Corner alignment: x = j/3.
            for (c, v) in row.iter().enumerate() {
                assert!((v - c as f64 / 3.0).abs() < 1e-12);
            }
        }
    }
}
