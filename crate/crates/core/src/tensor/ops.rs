//! Forward and backward kernels. All loops have a fixed reduction order, so a
//! given input always produces bit-identical output.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output spatial extent of a convolution along one axis.
pub fn conv2d_output_dims(
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be NCHW, got {:?}", input.shape()),
            ));
        }
        if weight.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be OIHW, got {:?}", weight.shape()),
            ));
        }
        let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (o, i, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        if i != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels (dim 1) = {c} but weight expects {i}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let ho = conv2d_output_dims(h, kh, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "kernel height {kh} exceeds padded input height {}",
                    h + 2 * pad
                ),
            )
        })?;
        let wo = conv2d_output_dims(w, kw, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "kernel width {kw} exceeds padded input width {}",
                    w + 2 * pad
                ),
            )
        })?;
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unrolls one sample into a `patch × positions` matrix.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let seg = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in seg.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// 2-D cross-correlation over an NCHW batch with OIHW weights.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    if bias.numel() != g.o {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias has {} entries but weight has {} filters (dim 0)",
                bias.numel(),
                g.o
            ),
        ));
    }
    let (k, p) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.n * g.o * p];
    let w = weight.data();
    for s in 0..g.n {
        g.im2col(
            &input.data()[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w],
            &mut cols,
        );
        let dst = &mut out[s * g.o * p..(s + 1) * g.o * p];
        for oc in 0..g.o {
            let row = &mut dst[oc * p..(oc + 1) * p];
            row.fill(bias.data()[oc]);
            let wrow = &w[oc * k..(oc + 1) * k];
            for (ki, &wv) in wrow.iter().enumerate() {
                axpy(wv, &cols[ki * p..(ki + 1) * p], row);
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)
}

/// `(d_input, d_weight, d_bias)`.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`. `d_input` is only
/// computed when `need_input` is set.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    if grad_out.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} != {:?}",
                grad_out.shape(),
                [g.n, g.o, g.ho, g.wo]
            ),
        ));
    }
    let (k, p) = (g.patch(), g.positions());
    let w = weight.data();
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    let mut dw = vec![T::zero(); g.o * k];
    let mut db = vec![T::zero(); g.o];
    let mut dx = need_input.then(|| vec![T::zero(); input.numel()]);
    let sample = g.c * g.h * g.w;
    for s in 0..g.n {
        g.im2col(&input.data()[s * sample..(s + 1) * sample], &mut cols);
        let gout = &grad_out.data()[s * g.o * p..(s + 1) * g.o * p];
        for oc in 0..g.o {
            let grow = &gout[oc * p..(oc + 1) * p];
            db[oc] += grow.iter().copied().sum::<T>();
            let dwrow = &mut dw[oc * k..(oc + 1) * k];
            for (ki, d) in dwrow.iter_mut().enumerate() {
                *d += dot(grow, &cols[ki * p..(ki + 1) * p]);
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(T::zero());
            for oc in 0..g.o {
                let grow = &gout[oc * p..(oc + 1) * p];
                for ki in 0..k {
                    axpy(w[oc * k + ki], grow, &mut dcols[ki * p..(ki + 1) * p]);
                }
            }
            g.col2im(&dcols, &mut dx[s * sample..(s + 1) * sample]);
        }
    }
    let dx = dx
        .map(|d| Tensor::new(input.shape().to_vec(), d))
        .transpose()?;
    Ok((
        dx,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![g.o], db)?,
    ))
}

pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index of the winning element for every output cell.
    pub argmax: Vec<usize>,
}

/// Max pooling with a square window. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2d<T: Real>(input: &Tensor<T>, k: usize, stride: usize) -> Result<MaxPoolOutput<T>> {
    if input.rank() != 4 {
        return Err(Error::shape(
            "maxpool2d",
            format!("input must be NCHW, got {:?}", input.shape()),
        ));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if k == 0 || stride == 0 {
        return Err(Error::shape(
            "maxpool2d",
            "window and stride must be positive",
        ));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial dims {h}x{w} not divisible by stride {stride}"),
        ));
    }
    if k > h || k > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {k} exceeds input {h}x{w}"),
        ));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(vec![n, c, ho, wo], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

/// `input (N×D) · weight (D×M) + bias (M)`.
pub fn linear<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!(
                "expected N×D input and D×M weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    let (n, d, m) = (input.dim(0), input.dim(1), weight.dim(1));
    if weight.dim(0) != d {
        return Err(Error::shape(
            "linear",
            format!(
                "input features (dim 1) = {d} but weight rows (dim 0) = {}",
                weight.dim(0)
            ),
        ));
    }
    if bias.numel() != m {
        return Err(Error::shape(
            "linear",
            format!("bias has {} entries, expected {m}", bias.numel()),
        ));
    }
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![T::zero(); n * m];
    for r in 0..n {
        let row = &mut out[r * m..(r + 1) * m];
        row.copy_from_slice(bias.data());
        for (di, &xv) in x[r * d..(r + 1) * d].iter().enumerate() {
            axpy(xv, &w[di * m..(di + 1) * m], row);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Gradients of [`linear`]: `(d_input, d_weight, d_bias)`.
pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d, m) = (input.dim(0), input.dim(1), weight.dim(1));
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    let mut dx = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); d * m];
    let mut db = vec![T::zero(); m];
    for r in 0..n {
        let grow = &g[r * m..(r + 1) * m];
        for (b, &gv) in db.iter_mut().zip(grow) {
            *b += gv;
        }
        for di in 0..d {
            dx[r * d + di] = dot(grow, &w[di * m..(di + 1) * m]);
            axpy(x[r * d + di], grow, &mut dw[di * m..(di + 1) * m]);
        }
    }
    (
        Tensor {
            shape: vec![n, d],
            data: dx,
        },
        Tensor {
            shape: vec![d, m],
            data: dw,
        },
        Tensor {
            shape: vec![m],
            data: db,
        },
    )
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn rows<T: Real>(op: &'static str, input: &Tensor<T>) -> Result<(usize, usize)> {
    if input.rank() != 2 || input.dim(1) == 0 {
        return Err(Error::shape(
            op,
            format!("expected N×C with C ≥ 1, got {:?}", input.shape()),
        ));
    }
    Ok((input.dim(0), input.dim(1)))
}

pub fn log_softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = rows("log_softmax", input)?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = rows("softmax", input)?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

const KL_FLOOR: f64 = 1e-10;

/// `Σ pᵢ ln(pᵢ / qᵢ)` with q floored at 1e-10; zero-probability terms of `p`
/// contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape(
            "kl_divergence",
            format!("lengths {} and {}", p.len(), q.len()),
        ));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} has invalid entry {bad}"
            )));
        }
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "{name} sums to {total}, not 1"
            )));
        }
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0))
}
