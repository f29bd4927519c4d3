//! Fully connected layer and the pool-then-linear classifier head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::pool::{global_avg_pool, global_avg_pool_vjp};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    /// (c_out, c_in, 1, 1)
    pub weight: Tensor<T>,
    /// (c_out, 1, 1, 1)
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::shape("linear", "weight spatial", 1, ws.h * ws.w));
        }
        bias.expect_shape(Shape::vector(ws.n), "linear bias")?;
        Ok(LinearParams { weight, bias })
    }

    pub fn he<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        LinearParams {
            weight: Tensor::randn(Shape::new(c_out, c_in, 1, 1), (1.0 / c_in as f64).sqrt(), rng),
            bias: Tensor::zeros(Shape::vector(c_out)),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: Shape, op: &'static str) -> Result<()> {
        if x.c != self.c_in() {
            return Err(Error::shape(op, "input channels", self.c_in(), x.c));
        }
        if x.h != 1 || x.w != 1 {
            return Err(Error::shape(op, "input spatial", 1, x.h * x.w));
        }
        Ok(())
    }
}

pub fn linear_madds(batch: usize, c_in: usize, c_out: usize) -> u64 {
    (batch * c_in * c_out) as u64
}

/// x: (n, c_in, 1, 1) -> (n, c_out, 1, 1)
pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    p.check_input(s, "linear")?;
    let (ci, co) = (p.c_in(), p.c_out());
    let w = p.weight.data();
    let mut out = Tensor::zeros(Shape::new(s.n, co, 1, 1));
    for n in 0..s.n {
        let xr = &x.data()[n * ci..(n + 1) * ci];
        for o in 0..co {
            let wr = &w[o * ci..(o + 1) * ci];
            let acc = wr.iter().zip(xr).fold(T::ZERO, |a, (&wv, &xv)| a + wv * xv);
            out.data_mut()[n * co + o] = acc + p.bias.data()[o];
        }
    }
    Ok(out)
}

pub fn linear_vjp<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>, dy: &Tensor<T>) -> Result<LinearGrads<T>> {
    let s = x.shape();
    p.check_input(s, "linear_vjp")?;
    let (ci, co) = (p.c_in(), p.c_out());
    dy.expect_shape(Shape::new(s.n, co, 1, 1), "linear_vjp")?;
    let w = p.weight.data();
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(p.weight.shape());
    let mut db = Tensor::zeros(Shape::vector(co));
    for n in 0..s.n {
        let xr = &x.data()[n * ci..(n + 1) * ci];
        for o in 0..co {
            let g = dy.data()[n * co + o];
            db.data_mut()[o] += g;
            let dxr = &mut dx.data_mut()[n * ci..(n + 1) * ci];
            for (i, d) in dxr.iter_mut().enumerate() {
                *d += w[o * ci + i] * g;
            }
            let dwr = &mut dw.data_mut()[o * ci..(o + 1) * ci];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d += xv * g;
            }
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

/// Global average pool followed by a linear map to class logits `(n, classes, 1, 1)`.
pub fn pool_and_head<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    if x.shape().c != p.c_in() {
        return Err(Error::shape("pool_and_head", "input channels", p.c_in(), x.shape().c));
    }
    linear(&global_avg_pool(x), p)
}

pub fn pool_and_head_madds(x: Shape, classes: usize) -> u64 {
    (x.n * x.c) as u64 + linear_madds(x.n, x.c, classes)
}

pub fn pool_and_head_vjp<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>, dlogits: &Tensor<T>) -> Result<LinearGrads<T>> {
    if x.shape().c != p.c_in() {
        return Err(Error::shape("pool_and_head_vjp", "input channels", p.c_in(), x.shape().c));
    }
    let pooled = global_avg_pool(x);
    let g = linear_vjp(&pooled, p, dlogits)?;
    Ok(LinearGrads {
        dx: global_avg_pool_vjp(x.shape(), &g.dx)?,
        dw: g.dw,
        db: g.db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_head_returns_constant() {
        let x = Tensor::full(Shape::new(2, 3, 4, 4), 1.75f64);
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let p = LinearParams::new(w, Tensor::zeros(Shape::vector(3))).unwrap();
        let logits = pool_and_head(&x, &p).unwrap();
        assert_eq!(logits.shape(), Shape::new(2, 3, 1, 1));
        assert!(logits.data().iter().all(|&v| v == 1.75));
        let g = pool_and_head_vjp(&x, &p, &Tensor::zeros(logits.shape())).unwrap();
        assert_eq!(g.dx.max_abs() + g.dw.max_abs() + g.db.max_abs(), 0.0);
    }

    #[test]
    fn head_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2));
        let p = LinearParams::<f64>::new(Tensor::zeros(Shape::new(2, 3, 1, 1)), Tensor::zeros(Shape::vector(2))).unwrap();
        assert!(pool_and_head(&x, &p).is_err());
    }
}
