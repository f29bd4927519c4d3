//! Reversible blocks over a channel partition `(x1, x2)`.
//!
//! Additive coupling, forward and inverse:
//!
//! ```text
//! z1 = x1 + F(x2)        z1 = y1
//! y2 = x2 + G(z1)        x2 = y2 - G(z1)
//! y1 = z1                x1 = z1 - F(x2)
//! ```
//!
//! NICE and affine couplings are provided as invertibility variants; only the
//! additive block takes part in reconstruction-based backprop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::BatchStats;
use crate::metrics::Ctx;
use crate::residual::{BnSource, Init, ResidualFn, ACT};
use crate::tensor::{Scalar, Shape, Tensor};

/// Bound applied to the log-scale of the affine coupling before `exp`.
type StatsPair<'a, T> = (&'a [BatchStats<T>], &'a [BatchStats<T>]);

pub const AFFINE_LOG_SCALE_BOUND: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    Additive,
    /// `y1 = x1, y2 = x2 + F(x1)`; G is unused.
    Nice,
    /// `y1 = x1, y2 = x2 * exp(F(x1)) + G(x1)`
    Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedTensor<T> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
}

/// First half of the channels goes to `x1`, second half to `x2`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>) -> Result<PartitionedTensor<T>> {
    let s = x.shape();
    if !s.c.is_multiple_of(2) {
        return Err(Error::OddChannels { channels: s.c });
    }
    let half = s.c / 2;
    let hs = s.with_channels(half);
    let mut x1 = Tensor::zeros(hs);
    let mut x2 = Tensor::zeros(hs);
    for n in 0..s.n {
        for c in 0..half {
            x1.plane_mut(n, c).copy_from_slice(x.plane(n, c));
            x2.plane_mut(n, c).copy_from_slice(x.plane(n, half + c));
        }
    }
    Ok(PartitionedTensor { x1, x2 })
}

pub fn merge_channels<T: Scalar>(p: &PartitionedTensor<T>) -> Result<Tensor<T>> {
    merge_halves(&p.x1, &p.x2)
}

pub(crate) fn merge_halves<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x1.shape();
    x2.expect_shape(s, "merge_channels")?;
    let mut out = Tensor::zeros(s.with_channels(2 * s.c));
    for n in 0..s.n {
        for c in 0..s.c {
            out.plane_mut(n, c).copy_from_slice(x1.plane(n, c));
            out.plane_mut(n, s.c + c).copy_from_slice(x2.plane(n, c));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReversibleBlock<T> {
    pub f: ResidualFn<T>,
    pub g: ResidualFn<T>,
    pub coupling: Coupling,
    /// Reuse the forward pass's batch statistics when reconstructing.
    pub replay: bool,
}

impl<T: Scalar> ReversibleBlock<T> {
    pub fn new(f: ResidualFn<T>, g: ResidualFn<T>, coupling: Coupling) -> Result<Self> {
        for (name, r) in [("F", &f), ("G", &g)] {
            if r.c_in() != r.c_out() {
                return Err(Error::InvalidSpec(format!(
                    "{name} must preserve channels ({} -> {})",
                    r.c_in(),
                    r.c_out()
                )));
            }
            if r.stride() != 1 {
                return Err(Error::InvalidSpec(format!("{name} must have stride 1 in a reversible block")));
            }
        }
        if f.c_in() != g.c_in() {
            return Err(Error::shape("ReversibleBlock", "half channels", f.c_in(), g.c_in()));
        }
        Ok(ReversibleBlock {
            f,
            g,
            coupling,
            replay: true,
        })
    }

    /// Additive block with basic residual functions on `channels / 2` each.
    pub fn basic<R: Rng + ?Sized>(channels: usize, init: Init, rng: &mut R) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::OddChannels { channels });
        }
        let h = channels / 2;
        let f = ResidualFn::basic(h, h, 1, init, rng);
        let g = ResidualFn::basic(h, h, 1, init, rng);
        Self::new(f, g, Coupling::Additive)
    }

    /// Additive block with bottleneck residual functions of width `inner`.
    pub fn bottleneck<R: Rng + ?Sized>(channels: usize, inner: usize, init: Init, rng: &mut R) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::OddChannels { channels });
        }
        let h = channels / 2;
        let f = ResidualFn::bottleneck(h, inner, h, 1, init, rng);
        let g = ResidualFn::bottleneck(h, inner, h, 1, init, rng);
        Self::new(f, g, Coupling::Additive)
    }

    pub fn half_channels(&self) -> usize {
        self.f.c_in()
    }

    pub fn num_params(&self) -> usize {
        self.f.num_params() + self.g.num_params()
    }

    /// F parameters followed by G parameters.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.f.params();
        p.extend(self.g.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.f.params_mut();
        p.extend(self.g.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.f.param_names().into_iter().map(|n| format!("f.{n}")).collect();
        names.extend(self.g.param_names().into_iter().map(|n| format!("g.{n}")));
        names
    }

    /// Bytes a stored-activation engine keeps for this block.
    pub fn trace_bytes(&self, half: Shape) -> Result<usize> {
        Ok(self.f.trace_bytes(half)? + self.g.trace_bytes(half)?)
    }

    pub(crate) fn check_halves(&self, a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
        let s = a.shape();
        if s.c != self.half_channels() {
            return Err(Error::shape(op, "half channels", self.half_channels(), s.c));
        }
        b.expect_shape(s, op)
    }

    pub(crate) fn require_additive(&self, op: &'static str) -> Result<()> {
        if self.coupling != Coupling::Additive {
            return Err(Error::InvalidSpec(format!("{op} requires an additive coupling block")));
        }
        Ok(())
    }

    pub(crate) fn replay_stats(&self) -> Result<StatsPair<'_, T>> {
        let f = self.f.cached_stats.as_deref().ok_or(Error::MissingReplayStats { block: "F" })?;
        let g = self.g.cached_stats.as_deref().ok_or(Error::MissingReplayStats { block: "G" })?;
        Ok((f, g))
    }

    /// Forward coupling. Batch statistics used by F and G are cached on the
    /// block for a later exact reconstruction.
    pub fn forward(&mut self, x1: &Tensor<T>, x2: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_halves(x1, x2, "couple_forward")?;
        match self.coupling {
            Coupling::Additive => {
                let (f_out, f_stats) = self.f.eval(x2, BnSource::Train, ctx)?;
                let f_out = ctx.hold(ACT, f_out);
                let z1 = ctx.hold(ACT, x1.add(&f_out)?);
                ctx.discard(f_out)?;
                let (g_out, g_stats) = self.g.eval(&z1, BnSource::Train, ctx)?;
                let g_out = ctx.hold(ACT, g_out);
                let y2 = x2.add(&g_out)?;
                ctx.discard(g_out)?;
                self.f.cached_stats = Some(f_stats);
                self.g.cached_stats = Some(g_stats);
                Ok((ctx.release(z1)?, y2))
            }
            Coupling::Nice => nice_forward(&self.f, x1, x2, ctx),
            Coupling::Affine => affine_forward(&self.f, &self.g, x1, x2, ctx),
        }
    }

    /// Inverse coupling. With `replay` on, F and G normalise with the cached
    /// forward statistics; otherwise they recompute statistics from the
    /// reconstructed inputs.
    pub fn reverse(&self, y1: &Tensor<T>, y2: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_halves(y1, y2, "couple_reverse")?;
        match self.coupling {
            Coupling::Additive => {
                let (f_src, g_src) = if self.replay {
                    let (f, g) = self.replay_stats()?;
                    (BnSource::Replay(f), BnSource::Replay(g))
                } else {
                    (BnSource::Train, BnSource::Train)
                };
                let (g_out, _) = self.g.eval(y1, g_src, ctx)?;
                let g_out = ctx.hold(ACT, g_out);
                let x2 = ctx.hold(ACT, y2.sub(&g_out)?);
                ctx.discard(g_out)?;
                let (f_out, _) = self.f.eval(&x2, f_src, ctx)?;
                let f_out = ctx.hold(ACT, f_out);
                let x1 = y1.sub(&f_out)?;
                ctx.discard(f_out)?;
                Ok((x1, ctx.release(x2)?))
            }
            Coupling::Nice => nice_reverse(&self.f, y1, y2, ctx),
            Coupling::Affine => affine_reverse(&self.f, &self.g, y1, y2, ctx),
        }
    }
}

/// `y1 = x1, y2 = x2 + F(x1)`
pub fn nice_forward<T: Scalar>(f: &ResidualFn<T>, x1: &Tensor<T>, x2: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Tensor<T>)> {
    x2.expect_shape(x1.shape(), "nice_forward")?;
    let (shift, _) = f.eval(x1, BnSource::Train, ctx)?;
    Ok((x1.clone(), x2.add(&shift)?))
}

pub fn nice_reverse<T: Scalar>(f: &ResidualFn<T>, y1: &Tensor<T>, y2: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Tensor<T>)> {
    y2.expect_shape(y1.shape(), "nice_reverse")?;
    let (shift, _) = f.eval(y1, BnSource::Train, ctx)?;
    Ok((y1.clone(), y2.sub(&shift)?))
}

fn bounded_log_scale<T: Scalar>(f: &ResidualFn<T>, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
    let (s, _) = f.eval(x, BnSource::Train, ctx)?;
    let b = T::from_f64(AFFINE_LOG_SCALE_BOUND);
    Ok(s.map(|v| {
        if v > b {
            b
        } else if v < -b {
            -b
        } else {
            v
        }
    }))
}

/// `y1 = x1, y2 = x2 * exp(clamp(F(x1))) + G(x1)`
pub fn affine_forward<T: Scalar>(
    f: &ResidualFn<T>,
    g: &ResidualFn<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<(Tensor<T>, Tensor<T>)> {
    x2.expect_shape(x1.shape(), "affine_forward")?;
    let s = bounded_log_scale(f, x1, ctx)?;
    let (t, _) = g.eval(x1, BnSource::Train, ctx)?;
    let scaled = x2.zip_map(&s, "affine_forward", |a, l| a * l.exp())?;
    Ok((x1.clone(), scaled.add(&t)?))
}

/// `x1 = y1, x2 = (y2 - G(y1)) * exp(-clamp(F(y1)))`
pub fn affine_reverse<T: Scalar>(
    f: &ResidualFn<T>,
    g: &ResidualFn<T>,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<(Tensor<T>, Tensor<T>)> {
    y2.expect_shape(y1.shape(), "affine_reverse")?;
    let s = bounded_log_scale(f, y1, ctx)?;
    let (t, _) = g.eval(y1, BnSource::Train, ctx)?;
    let x2 = y2.sub(&t)?.zip_map(&s, "affine_reverse", |a, l| a * (-l).exp())?;
    Ok((y1.clone(), x2))
}
