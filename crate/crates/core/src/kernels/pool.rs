//! Pooling and channel padding used by heads and downsampling shortcuts.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Mean over (h, w); output (n, c, 1, 1).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::ONE / T::from_usize(s.plane());
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let acc = x.plane(n, c).iter().fold(T::ZERO, |a, &v| a + v);
            out.data_mut()[n * s.c + c] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_vjp<T: Scalar>(x_shape: Shape, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape(Shape::new(x_shape.n, x_shape.c, 1, 1), "global_avg_pool_vjp")?;
    let inv = T::ONE / T::from_usize(x_shape.plane());
    let mut dx = Tensor::zeros(x_shape);
    for n in 0..x_shape.n {
        for c in 0..x_shape.c {
            let g = dy.data()[n * x_shape.c + c] * inv;
            dx.plane_mut(n, c).fill(g);
        }
    }
    Ok(dx)
}

/// Non-overlapping 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) {
        return Err(Error::shape("avg_pool2", "even height", s.h + 1, s.h));
    }
    if !s.w.is_multiple_of(2) {
        return Err(Error::shape("avg_pool2", "even width", s.w + 1, s.w));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let i = 2 * oh * s.w + 2 * ow;
                    dst[oh * os.w + ow] = (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_vjp<T: Scalar>(x_shape: Shape, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let os = Shape::new(x_shape.n, x_shape.c, x_shape.h / 2, x_shape.w / 2);
    dy.expect_shape(os, "avg_pool2_vjp")?;
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(x_shape);
    for n in 0..x_shape.n {
        for c in 0..x_shape.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let g = src[oh * os.w + ow] * quarter;
                    let i = 2 * oh * x_shape.w + 2 * ow;
                    dst[i] = g;
                    dst[i + 1] = g;
                    dst[i + x_shape.w] = g;
                    dst[i + x_shape.w + 1] = g;
                }
            }
        }
    }
    Ok(dx)
}

/// Appends zero channels up to `c_out`.
pub fn pad_channels<T: Scalar>(x: &Tensor<T>, c_out: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if c_out < s.c {
        return Err(Error::shape("pad_channels", "channels", s.c, c_out));
    }
    let mut out = Tensor::zeros(s.with_channels(c_out));
    for n in 0..s.n {
        for c in 0..s.c {
            out.plane_mut(n, c).copy_from_slice(x.plane(n, c));
        }
    }
    Ok(out)
}

/// Keeps the first `c_in` channels of `dy`.
pub fn pad_channels_vjp<T: Scalar>(dy: &Tensor<T>, c_in: usize) -> Result<Tensor<T>> {
    let s = dy.shape();
    if c_in > s.c {
        return Err(Error::shape("pad_channels_vjp", "channels", s.c, c_in));
    }
    let mut dx = Tensor::zeros(s.with_channels(c_in));
    for n in 0..s.n {
        for c in 0..c_in {
            dx.plane_mut(n, c).copy_from_slice(dy.plane(n, c));
        }
    }
    Ok(dx)
}
