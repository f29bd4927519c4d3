//! Batch normalization over (n, h, w) per channel.
//!
//! Train mode computes the batch statistics and returns them; replay mode
//! normalizes with supplied statistics so that a recomputation sees exactly
//! the forward pass's normalization. The vjp always differentiates through
//! the statistics as functions of the input.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    /// (c, 1, 1, 1)
    pub gamma: Tensor<T>,
    /// (c, 1, 1, 1)
    pub beta: Tensor<T>,
}

impl<T: Scalar> BnParams<T> {
    pub fn identity(c: usize) -> Self {
        BnParams {
            gamma: Tensor::full(Shape::vector(c), T::ONE),
            beta: Tensor::zeros(Shape::vector(c)),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn check(&self, x: Shape, op: &'static str) -> Result<()> {
        if self.gamma.len() != x.c {
            return Err(Error::shape(op, "gamma channels", x.c, self.gamma.len()));
        }
        if self.beta.len() != x.c {
            return Err(Error::shape(op, "beta channels", x.c, self.beta.len()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance; never negative.
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchStats<T> {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn bytes(&self) -> usize {
        (self.mean.len() + self.var.len()) * T::BYTES
    }

    fn inv_std(&self, c: usize) -> T {
        T::ONE / (self.var[c] + self.eps).sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Replay(&'a BatchStats<T>),
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

/// Multiply-adds of [`batchnorm`]: variance accumulation (train only), then
/// normalization and affine per element.
pub fn batchnorm_madds(x: Shape, train: bool) -> u64 {
    let per = if train { 3 } else { 2 };
    per * x.numel() as u64
}

/// Multiply-adds of [`batchnorm_vjp`].
pub fn batchnorm_vjp_madds(x: Shape) -> u64 {
    5 * x.numel() as u64
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let s = x.shape();
    let m = T::from_usize(s.n * s.plane());
    let mut mean = vec![T::ZERO; s.c];
    let mut var = vec![T::ZERO; s.c];
    for c in 0..s.c {
        let mut acc = T::ZERO;
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                acc += v;
            }
        }
        let mu = acc / m;
        let mut sq = T::ZERO;
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    BatchStats {
        mean,
        var,
        eps: T::from_f64(BN_EPSILON),
    }
}

pub fn batchnorm<T: Scalar>(x: &Tensor<T>, p: &BnParams<T>, mode: BnMode<'_, T>) -> Result<(Tensor<T>, BatchStats<T>)> {
    let s = x.shape();
    p.check(s, "batchnorm")?;
    let stats = match mode {
        BnMode::Train => batch_stats(x),
        BnMode::Replay(st) => {
            if st.channels() != s.c {
                return Err(Error::shape("batchnorm replay", "stats channels", s.c, st.channels()));
            }
            st.clone()
        }
    };
    let mut out = Tensor::zeros(s);
    let (g, b) = (p.gamma.data(), p.beta.data());
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, rstd) = (stats.mean[c], stats.inv_std(c));
            let src = x.plane(n, c);
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(src) {
                *o = g[c] * ((v - mu) * rstd) + b[c];
            }
        }
    }
    Ok((out, stats))
}

#[allow(clippy::needless_range_loop)]
pub fn batchnorm_vjp<T: Scalar>(x: &Tensor<T>, p: &BnParams<T>, stats: &BatchStats<T>, dy: &Tensor<T>) -> Result<BnGrads<T>> {
    let s = x.shape();
    p.check(s, "batchnorm_vjp")?;
    dy.expect_shape(s, "batchnorm_vjp")?;
    if stats.channels() != s.c {
        return Err(Error::shape("batchnorm_vjp", "stats channels", s.c, stats.channels()));
    }
    let count = s.n * s.plane();
    let m = T::from_usize(count);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::vector(s.c));
    let mut dbeta = Tensor::zeros(Shape::vector(s.c));
    let g = p.gamma.data();
    let mut xhat = vec![T::ZERO; count];
    for c in 0..s.c {
        let (mu, rstd) = (stats.mean[c], stats.inv_std(c));
        let (mut sdy, mut sdyx) = (T::ZERO, T::ZERO);
        for n in 0..s.n {
            let base = n * s.plane();
            for (i, (&v, &d)) in x.plane(n, c).iter().zip(dy.plane(n, c)).enumerate() {
                let xh = (v - mu) * rstd;
                xhat[base + i] = xh;
                sdy += d;
                sdyx += d * xh;
            }
        }
        let k = g[c] * rstd / m;
        for n in 0..s.n {
            let base = n * s.plane();
            let dyp = dy.plane(n, c);
            for (i, o) in dx.plane_mut(n, c).iter_mut().enumerate() {
                *o = k * (m * dyp[i] - sdy - xhat[base + i] * sdyx);
            }
        }
        dgamma.data_mut()[c] = sdyx;
        dbeta.data_mut()[c] = sdy;
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}
