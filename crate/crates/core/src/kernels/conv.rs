//! Direct 2-d convolution and its vector-Jacobian product.
//!
//! Each output element accumulates its taps in (c_in, k_h, k_w) order starting
//! from zero, then adds the bias. The loops below are arranged plane-wise for
//! speed but keep that order, so results match a naive six-loop convolution
//! bit for bit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// (c_out, c_in, k, k)
    pub weight: Tensor<T>,
    /// (c_out, 1, 1, 1) when present.
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    /// Always (c_out, 1, 1, 1); meaningful only when the conv has a bias.
    pub db: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(Error::shape("conv2d", "kernel width", ws.h, ws.w));
        }
        if stride == 0 {
            return Err(Error::InvalidSpec("conv stride must be at least 1".into()));
        }
        if let Some(b) = &bias {
            b.expect_shape(Shape::vector(ws.n), "conv2d bias")?;
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He (fan-in) initialised k x k conv with "same" padding and no bias.
    pub fn he<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        ConvParams {
            weight: Tensor::randn(Shape::new(c_out, c_in, k, k), std, rng),
            bias: None,
            stride,
            padding: k / 2,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(Shape::new(c_out, c_in, k, k)),
            bias: None,
            stride,
            padding: k / 2,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in() {
            return Err(Error::shape("conv2d", "input channels", self.c_in(), input.c));
        }
        let k = self.kernel();
        let (ph, pw) = (input.h + 2 * self.padding, input.w + 2 * self.padding);
        if ph < k {
            return Err(Error::shape("conv2d", "padded height", k, ph));
        }
        if pw < k {
            return Err(Error::shape("conv2d", "padded width", k, pw));
        }
        Ok(Shape::new(
            input.n,
            self.c_out(),
            (ph - k) / self.stride + 1,
            (pw - k) / self.stride + 1,
        ))
    }
}

/// Output indices `o` in `[lo, hi)` for which `o * stride + tap - pad` lands inside the input.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > tap {
        ((in_len - 1 + pad - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Taps per (c_out, c_in) pair per image that fall inside the input.
fn valid_taps(input: Shape, out: Shape, k: usize, stride: usize, pad: usize) -> u64 {
    let rows: usize = (0..k)
        .map(|t| {
            let (lo, hi) = valid_range(out.h, input.h, t, stride, pad);
            hi - lo
        })
        .sum();
    let cols: usize = (0..k)
        .map(|t| {
            let (lo, hi) = valid_range(out.w, input.w, t, stride, pad);
            hi - lo
        })
        .sum();
    (rows * cols) as u64
}

/// Multiply-adds executed by [`conv2d`] (one per in-bounds tap).
pub fn conv2d_madds<T: Scalar>(input: Shape, p: &ConvParams<T>) -> Result<u64> {
    let out = p.out_shape(input)?;
    let per = valid_taps(input, out, p.kernel(), p.stride, p.padding);
    Ok(per * (input.n * p.c_out() * p.c_in()) as u64)
}

/// Multiply-adds executed by [`conv2d_vjp`]: one pass for dx, one for dw.
pub fn conv2d_vjp_madds<T: Scalar>(input: Shape, p: &ConvParams<T>) -> Result<u64> {
    Ok(2 * conv2d_madds(input, p)?)
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let os = p.out_shape(xs)?;
    let (k, s, pad) = (p.kernel(), p.stride, p.padding);
    let mut out = Tensor::zeros(os);
    let w = p.weight.data();
    for n in 0..xs.n {
        for co in 0..os.c {
            let mut acc = vec![T::ZERO; os.plane()];
            for ci in 0..xs.c {
                let xp = x.plane(n, ci);
                for kh in 0..k {
                    let (oh0, oh1) = valid_range(os.h, xs.h, kh, s, pad);
                    for kw in 0..k {
                        let (ow0, ow1) = valid_range(os.w, xs.w, kw, s, pad);
                        let wv = w[((co * xs.c + ci) * k + kh) * k + kw];
                        for oh in oh0..oh1 {
                            let ih = oh * s + kh - pad;
                            let xrow = &xp[ih * xs.w..(ih + 1) * xs.w];
                            let arow = &mut acc[oh * os.w..(oh + 1) * os.w];
                            for ow in ow0..ow1 {
                                arow[ow] += wv * xrow[ow * s + kw - pad];
                            }
                        }
                    }
                }
            }
            if let Some(b) = &p.bias {
                let bv = b.data()[co];
                for a in &mut acc {
                    *a += bv;
                }
            }
            out.plane_mut(n, co).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

pub fn conv2d_vjp<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let os = p.out_shape(xs)?;
    dy.expect_shape(os, "conv2d_vjp")?;
    let (k, s, pad) = (p.kernel(), p.stride, p.padding);
    let w = p.weight.data();
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(p.weight.shape());
    let mut db = Tensor::zeros(Shape::vector(os.c));

    for n in 0..xs.n {
        for ci in 0..xs.c {
            let dxp = dx.plane_mut(n, ci);
            for co in 0..os.c {
                let dyp = dy.plane(n, co);
                for kh in 0..k {
                    let (oh0, oh1) = valid_range(os.h, xs.h, kh, s, pad);
                    for kw in 0..k {
                        let (ow0, ow1) = valid_range(os.w, xs.w, kw, s, pad);
                        let wv = w[((co * xs.c + ci) * k + kh) * k + kw];
                        for oh in oh0..oh1 {
                            let ih = oh * s + kh - pad;
                            let drow = &dyp[oh * os.w..(oh + 1) * os.w];
                            let xrow = &mut dxp[ih * xs.w..(ih + 1) * xs.w];
                            for ow in ow0..ow1 {
                                xrow[ow * s + kw - pad] += wv * drow[ow];
                            }
                        }
                    }
                }
            }
        }
    }

    let dwd = dw.data_mut();
    for co in 0..os.c {
        for ci in 0..xs.c {
            for kh in 0..k {
                let (oh0, oh1) = valid_range(os.h, xs.h, kh, s, pad);
                for kw in 0..k {
                    let (ow0, ow1) = valid_range(os.w, xs.w, kw, s, pad);
                    let mut acc = T::ZERO;
                    for n in 0..xs.n {
                        let xp = x.plane(n, ci);
                        let dyp = dy.plane(n, co);
                        for oh in oh0..oh1 {
                            let ih = oh * s + kh - pad;
                            for ow in ow0..ow1 {
                                acc += xp[ih * xs.w + ow * s + kw - pad] * dyp[oh * os.w + ow];
                            }
                        }
                    }
                    dwd[((co * xs.c + ci) * k + kh) * k + kw] = acc;
                }
            }
        }
    }

    let dbd = db.data_mut();
    for n in 0..os.n {
        for (co, slot) in dbd.iter_mut().enumerate() {
            for &v in dy.plane(n, co) {
                *slot += v;
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
