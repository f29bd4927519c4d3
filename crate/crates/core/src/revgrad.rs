//! Backpropagation through stacks of additive reversible blocks.
//!
//! [`stack_backward`] keeps only the stack's output activations. Walking from
//! the last block to the first, each step reconstructs the block inputs and
//! computes every total derivative in one go:
//!
//! ```text
//! z1  <- y1
//! x2  <- y2 - G(z1)
//! x1  <- z1 - F(x2)
//! dz1 <- dy1 + (dG/dz1)^T dy2
//! dx2 <- dy2 + (dF/dx2)^T dz1
//! dx1 <- dz1
//! dwF <- (dF/dwF)^T dz1
//! dwG <- (dG/dwG)^T dy2
//! ```
//!
//! The evaluations of G(z1) and F(x2) used for reconstruction are traced, and
//! those traces feed the vjps directly, so each block costs one extra forward
//! evaluation over ordinary backprop. Traces are released as soon as their
//! vjp has run, which keeps the working set independent of stack depth.
//!
//! [`stored_forward`]/[`stored_backward`] are the conventional baseline that
//! retains every block's activations.

use crate::coupling::ReversibleBlock;
use crate::error::{Error, Result};
use crate::metrics::{Ctx, Held, Phase};
use crate::residual::{BnSource, FnTrace, TracePair, ACT, GRAD};
use crate::tensor::{Scalar, Tensor};

/// Meter tag for saved span boundaries and non-reversible inputs.
pub const CKPT: &str = "checkpoint";

/// Total derivatives produced by one reversible block step.
#[derive(Clone, Debug)]
pub struct GradBundle<T> {
    pub dx1: Tensor<T>,
    pub dx2: Tensor<T>,
    /// Matches `block.f.params()`.
    pub dwf: Vec<Tensor<T>>,
    /// Matches `block.g.params()`.
    pub dwg: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    pub dwf: Vec<Tensor<T>>,
    pub dwg: Vec<Tensor<T>>,
}

impl<T: Scalar> BlockGrads<T> {
    /// F grads followed by G grads, matching `ReversibleBlock::params`.
    pub fn flat(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.dwf.iter().chain(&self.dwg)
    }
}

/// Saved state of a reversible span: its output activations and the inputs of
/// any non-reversible layers attached to it.
#[derive(Debug)]
pub struct StackCheckpoint<T> {
    pub boundary_y1: Held<T>,
    pub boundary_y2: Held<T>,
    /// (layer index, saved input)
    pub nonreversible_saves: Vec<(usize, Held<T>)>,
}

impl<T: Scalar> StackCheckpoint<T> {
    pub fn bytes(&self) -> usize {
        self.boundary_y1.bytes() + self.boundary_y2.bytes() + self.nonreversible_saves.iter().map(|(_, t)| t.bytes()).sum::<usize>()
    }

    pub fn discard(self, ctx: &mut Ctx) -> Result<()> {
        ctx.discard(self.boundary_y1)?;
        ctx.discard(self.boundary_y2)?;
        for (_, t) in self.nonreversible_saves {
            ctx.discard(t)?;
        }
        Ok(())
    }
}

/// Result of backprop through a stack.
#[derive(Debug)]
pub struct StackGrads<T> {
    /// Stack inputs: reconstructed by the reversible engine, the originals for the stored one.
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub dx1: Tensor<T>,
    pub dx2: Tensor<T>,
    /// One entry per block, in stack order.
    pub blocks: Vec<BlockGrads<T>>,
}

impl<T: Scalar> StackGrads<T> {
    /// All weight gradients flattened in stack parameter order.
    pub fn weight_grads(&self) -> Vec<Tensor<T>> {
        self.blocks.iter().flat_map(|b| b.flat().cloned()).collect()
    }

    /// Sums per-block weight gradients into shared parameter slots.
    /// `f_slots[i]`/`g_slots[i]` name the slot holding block `i`'s F and G weights.
    pub fn accumulate_shared(&self, f_slots: &[usize], g_slots: &[usize], n_slots: usize) -> Result<Vec<Vec<Tensor<T>>>> {
        if f_slots.len() != self.blocks.len() || g_slots.len() != self.blocks.len() {
            return Err(Error::shape(
                "accumulate_shared",
                "slot map",
                self.blocks.len(),
                f_slots.len().min(g_slots.len()),
            ));
        }
        let mut slots: Vec<Option<Vec<Tensor<T>>>> = vec![None; n_slots];
        for (i, b) in self.blocks.iter().enumerate() {
            for (slot, grads) in [(f_slots[i], &b.dwf), (g_slots[i], &b.dwg)] {
                let entry = slots
                    .get_mut(slot)
                    .ok_or_else(|| Error::InvalidSpec(format!("slot {slot} out of range")))?;
                match entry {
                    None => *entry = Some(grads.clone()),
                    Some(acc) => {
                        if acc.len() != grads.len() {
                            return Err(Error::shape("accumulate_shared", "tensors per slot", acc.len(), grads.len()));
                        }
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
        }
        Ok(slots.into_iter().map(Option::unwrap_or_default).collect())
    }
}

pub(crate) struct StepOutput<T> {
    pub x1: Held<T>,
    pub x2: Held<T>,
    pub dx1: Held<T>,
    pub dx2: Held<T>,
    pub dwf: Vec<Tensor<T>>,
    pub dwg: Vec<Tensor<T>>,
}

/// One reconstruction-and-gradient step, consuming the block outputs and
/// their cotangents.
pub(crate) fn reverse_step<T: Scalar>(
    block: &ReversibleBlock<T>,
    y1: Held<T>,
    y2: Held<T>,
    dy1: Held<T>,
    dy2: Held<T>,
    ctx: &mut Ctx,
) -> Result<StepOutput<T>> {
    block.require_additive("block_reverse_backprop")?;
    block.check_halves(&y1, &y2, "block_reverse_backprop")?;
    block.check_halves(&dy1, &dy2, "block_reverse_backprop")?;
    let (f_src, g_src) = if block.replay {
        let (f, g) = block.replay_stats()?;
        (BnSource::Replay(f), BnSource::Replay(g))
    } else {
        (BnSource::Train, BnSource::Train)
    };

    let z1 = y1;
    let (g_out, g_trace) = block.g.forward(&z1, g_src, ctx)?;
    let g_out = ctx.hold(ACT, g_out);
    let x2 = ctx.hold(ACT, y2.sub(&g_out)?);
    ctx.discard(g_out)?;
    ctx.discard(y2)?;

    let (f_out, f_trace) = block.f.forward(&x2, f_src, ctx)?;
    let f_out = ctx.hold(ACT, f_out);
    let x1 = ctx.hold(ACT, z1.sub(&f_out)?);
    ctx.discard(f_out)?;
    ctx.discard(z1)?;

    let (g_dx, dwg) = block.g.vjp(g_trace, &dy2, ctx)?;
    let g_dx = ctx.hold(GRAD, g_dx);
    let dz1 = ctx.hold(GRAD, dy1.add(&g_dx)?);
    ctx.discard(g_dx)?;
    ctx.discard(dy1)?;

    let (f_dx, dwf) = block.f.vjp(f_trace, &dz1, ctx)?;
    let f_dx = ctx.hold(GRAD, f_dx);
    let dx2 = ctx.hold(GRAD, dy2.add(&f_dx)?);
    ctx.discard(f_dx)?;
    ctx.discard(dy2)?;

    Ok(StepOutput {
        x1,
        x2,
        dx1: dz1,
        dx2,
        dwf,
        dwg,
    })
}

/// Reconstructs a block's inputs from its outputs and returns all total
/// derivatives. Requires the block's replay statistics unless replay is off.
pub fn block_reverse_backprop<T: Scalar>(
    block: &ReversibleBlock<T>,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<(Tensor<T>, Tensor<T>, GradBundle<T>)> {
    let prev = ctx.set_phase(Phase::Backward);
    let y1 = ctx.hold(CKPT, y1.clone());
    let y2 = ctx.hold(CKPT, y2.clone());
    let dy1 = ctx.hold(GRAD, dy1.clone());
    let dy2 = ctx.hold(GRAD, dy2.clone());
    let out = reverse_step(block, y1, y2, dy1, dy2, ctx);
    ctx.set_phase(prev);
    let out = out?;
    let x1 = ctx.release(out.x1)?;
    let x2 = ctx.release(out.x2)?;
    let bundle = GradBundle {
        dx1: ctx.release(out.dx1)?,
        dx2: ctx.release(out.dx2)?,
        dwf: out.dwf,
        dwg: out.dwg,
    };
    Ok((x1, x2, bundle))
}

/// Forward through a stack keeping only the final outputs.
pub fn stack_forward<T: Scalar>(
    blocks: &mut [ReversibleBlock<T>],
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<StackCheckpoint<T>> {
    let mut a = ctx.hold(ACT, x1.clone());
    let mut b = ctx.hold(ACT, x2.clone());
    for block in blocks.iter_mut() {
        block.require_additive("stack_forward")?;
        let (y1, y2) = block.forward(&a, &b, ctx)?;
        ctx.discard(a)?;
        ctx.discard(b)?;
        a = ctx.hold(ACT, y1);
        b = ctx.hold(ACT, y2);
    }
    let y1 = ctx.release(a)?;
    let y2 = ctx.release(b)?;
    Ok(StackCheckpoint {
        boundary_y1: ctx.hold(CKPT, y1),
        boundary_y2: ctx.hold(CKPT, y2),
        nonreversible_saves: Vec::new(),
    })
}

/// Backprop through a stack from its checkpoint by applying the block step
/// from the last block to the first. Consumes the boundary activations;
/// any non-reversible saves are handed back untouched in `saves`.
pub fn stack_backward<T: Scalar>(
    blocks: &[ReversibleBlock<T>],
    checkpoint: StackCheckpoint<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<StackGrads<T>> {
    let dy1 = ctx.hold(GRAD, dy1.clone());
    let dy2 = ctx.hold(GRAD, dy2.clone());
    let (grads, saves) = stack_backward_held(blocks, checkpoint, dy1, dy2, ctx)?;
    for (_, s) in saves {
        ctx.discard(s)?;
    }
    Ok(StackGrads {
        x1: ctx.release(grads.x1)?,
        x2: ctx.release(grads.x2)?,
        dx1: ctx.release(grads.dx1)?,
        dx2: ctx.release(grads.dx2)?,
        blocks: grads.blocks,
    })
}

pub(crate) struct HeldStackGrads<T> {
    pub x1: Held<T>,
    pub x2: Held<T>,
    pub dx1: Held<T>,
    pub dx2: Held<T>,
    pub blocks: Vec<BlockGrads<T>>,
}

pub(crate) type Saves<T> = Vec<(usize, Held<T>)>;

pub(crate) fn stack_backward_held<T: Scalar>(
    blocks: &[ReversibleBlock<T>],
    checkpoint: StackCheckpoint<T>,
    dy1: Held<T>,
    dy2: Held<T>,
    ctx: &mut Ctx,
) -> Result<(HeldStackGrads<T>, Saves<T>)> {
    let prev = ctx.set_phase(Phase::Backward);
    let result = (|| {
        let StackCheckpoint {
            boundary_y1,
            boundary_y2,
            nonreversible_saves,
        } = checkpoint;
        let (mut y1, mut y2, mut d1, mut d2) = (boundary_y1, boundary_y2, dy1, dy2);
        let mut grads = Vec::with_capacity(blocks.len());
        for block in blocks.iter().rev() {
            let step = reverse_step(block, y1, y2, d1, d2, ctx)?;
            grads.push(BlockGrads {
                dwf: step.dwf,
                dwg: step.dwg,
            });
            (y1, y2, d1, d2) = (step.x1, step.x2, step.dx1, step.dx2);
        }
        grads.reverse();
        Ok((
            HeldStackGrads {
                x1: y1,
                x2: y2,
                dx1: d1,
                dx2: d2,
                blocks: grads,
            },
            nonreversible_saves,
        ))
    })();
    ctx.set_phase(prev);
    result
}

/// Activations retained by the stored-activation baseline.
#[derive(Debug)]
pub struct StoredTape<T> {
    traces: Vec<(FnTrace<T>, FnTrace<T>)>,
    pub y1: Held<T>,
    pub y2: Held<T>,
    x1: Tensor<T>,
    x2: Tensor<T>,
}

impl<T: Scalar> StoredTape<T> {
    pub fn trace_bytes(&self) -> usize {
        self.traces.iter().map(|(f, g)| f.bytes() + g.bytes()).sum()
    }

    pub fn tensor_count(&self) -> usize {
        self.traces.iter().map(|(f, g)| f.tensor_count() + g.tensor_count()).sum()
    }

    pub(crate) fn into_parts(self) -> (Held<T>, Held<T>, Vec<TracePair<T>>) {
        (self.y1, self.y2, self.traces)
    }
}

/// Forward through a stack retaining every block's activations.
pub fn stored_forward<T: Scalar>(
    blocks: &mut [ReversibleBlock<T>],
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<StoredTape<T>> {
    let mut a = ctx.hold(ACT, x1.clone());
    let mut b = ctx.hold(ACT, x2.clone());
    let mut traces = Vec::with_capacity(blocks.len());
    for block in blocks.iter_mut() {
        block.require_additive("stored_forward")?;
        block.check_halves(&a, &b, "stored_forward")?;
        let (f_out, f_trace) = block.f.forward(&b, BnSource::Train, ctx)?;
        let f_out = ctx.hold(ACT, f_out);
        let z1 = ctx.hold(ACT, a.add(&f_out)?);
        ctx.discard(f_out)?;
        let (g_out, g_trace) = block.g.forward(&z1, BnSource::Train, ctx)?;
        let g_out = ctx.hold(ACT, g_out);
        let y2 = ctx.hold(ACT, b.add(&g_out)?);
        ctx.discard(g_out)?;
        block.f.cached_stats = Some(f_trace.stats());
        block.g.cached_stats = Some(g_trace.stats());
        ctx.discard(a)?;
        ctx.discard(b)?;
        traces.push((f_trace, g_trace));
        a = z1;
        b = y2;
    }
    Ok(StoredTape {
        traces,
        y1: a,
        y2: b,
        x1: x1.clone(),
        x2: x2.clone(),
    })
}

/// Conventional backprop over the retained activations, in reverse block order.
pub fn stored_backward<T: Scalar>(
    blocks: &[ReversibleBlock<T>],
    tape: StoredTape<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<StackGrads<T>> {
    let d1 = ctx.hold(GRAD, dy1.clone());
    let d2 = ctx.hold(GRAD, dy2.clone());
    let (held, x1, x2) = stored_backward_held(blocks, tape, d1, d2, ctx)?;
    Ok(StackGrads {
        x1,
        x2,
        dx1: ctx.release(held.0)?,
        dx2: ctx.release(held.1)?,
        blocks: held.2,
    })
}

pub(crate) type HeldGrads<T> = (Held<T>, Held<T>, Vec<BlockGrads<T>>);

pub(crate) fn stored_backward_held<T: Scalar>(
    blocks: &[ReversibleBlock<T>],
    tape: StoredTape<T>,
    dy1: Held<T>,
    dy2: Held<T>,
    ctx: &mut Ctx,
) -> Result<(HeldGrads<T>, Tensor<T>, Tensor<T>)> {
    if tape.traces.len() != blocks.len() {
        return Err(Error::shape("stored_backward", "blocks", tape.traces.len(), blocks.len()));
    }
    let prev = ctx.set_phase(Phase::Backward);
    let result = (|| {
        let StoredTape { traces, y1, y2, x1, x2 } = tape;
        block_output_checks(blocks, &y1, &dy1, &dy2)?;
        ctx.discard(y1)?;
        ctx.discard(y2)?;
        let (mut d1, mut d2) = (dy1, dy2);
        let mut grads = Vec::with_capacity(blocks.len());
        for (block, (f_trace, g_trace)) in blocks.iter().zip(traces).rev() {
            let (g_dx, dwg) = block.g.vjp(g_trace, &d2, ctx)?;
            let g_dx = ctx.hold(GRAD, g_dx);
            let dz1 = ctx.hold(GRAD, d1.add(&g_dx)?);
            ctx.discard(g_dx)?;
            ctx.discard(d1)?;
            let (f_dx, dwf) = block.f.vjp(f_trace, &dz1, ctx)?;
            let f_dx = ctx.hold(GRAD, f_dx);
            let dx2 = ctx.hold(GRAD, d2.add(&f_dx)?);
            ctx.discard(f_dx)?;
            ctx.discard(d2)?;
            grads.push(BlockGrads { dwf, dwg });
            d1 = dz1;
            d2 = dx2;
        }
        grads.reverse();
        Ok(((d1, d2, grads), x1, x2))
    })();
    ctx.set_phase(prev);
    result
}

fn block_output_checks<T: Scalar>(blocks: &[ReversibleBlock<T>], y1: &Tensor<T>, dy1: &Tensor<T>, dy2: &Tensor<T>) -> Result<()> {
    if let Some(last) = blocks.last() {
        last.check_halves(dy1, dy2, "stored_backward")?;
    }
    dy1.expect_shape(y1.shape(), "stored_backward")
}

/// Stored-activation backprop for a cotangent fixed in advance.
pub fn stored_backprop<T: Scalar>(
    blocks: &mut [ReversibleBlock<T>],
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<StackGrads<T>> {
    let tape = stored_forward(blocks, x1, x2, ctx)?;
    stored_backward(blocks, tape, dy1, dy2, ctx)
}

/// Reversible-engine counterpart of [`stored_backprop`].
pub fn reversible_backprop<T: Scalar>(
    blocks: &mut [ReversibleBlock<T>],
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    ctx: &mut Ctx,
) -> Result<StackGrads<T>> {
    let ckpt = stack_forward(blocks, x1, x2, ctx)?;
    stack_backward(blocks, ckpt, dy1, dy2, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::Init;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(depth: usize, zero: bool, seed: u64) -> Vec<ReversibleBlock<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..depth)
            .map(|_| ReversibleBlock::basic(4, Init { zero_last: zero }, &mut r).unwrap())
            .collect()
    }

    #[test]
    fn identity_block_passes_gradients_through() {
        let mut blocks = stack(1, true, 1);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(2, 2, 4, 4);
        let (x1, x2) = (Tensor::randn(s, 1.0, &mut r), Tensor::randn(s, 1.0, &mut r));
        let (a, b) = (Tensor::randn(s, 1.0, &mut r), Tensor::randn(s, 1.0, &mut r));
        let mut ctx = Ctx::new();
        let (y1, y2) = blocks[0].forward(&x1, &x2, &mut ctx).unwrap();
        let (rx1, rx2, g) = block_reverse_backprop(&blocks[0], &y1, &y2, &a, &b, &mut ctx).unwrap();
        assert_eq!((&rx1, &rx2), (&x1, &x2));
        assert_eq!((&g.dx1, &g.dx2), (&a, &b));
        // Only the final (zero) conv sees a gradient; zero weights block everything upstream.
        let last = g.dwf.len() - 1;
        assert!(g.dwf[last].max_abs() > 0.0);
        for (i, gw) in g.dwf.iter().enumerate() {
            if i != last {
                assert_eq!(gw.max_abs(), 0.0, "dwf[{i}]");
            }
        }
        assert_eq!(ctx.mem.live_bytes(), 0);
    }

    #[test]
    fn identity_stacks_pass_gradients_for_any_depth() {
        for depth in [1, 3, 7] {
            let mut blocks = stack(depth, true, 3);
            let mut r = ChaCha8Rng::seed_from_u64(4);
            let s = Shape::new(1, 2, 3, 3);
            let (x1, x2) = (Tensor::randn(s, 1.0, &mut r), Tensor::randn(s, 1.0, &mut r));
            let (a, b) = (Tensor::randn(s, 1.0, &mut r), Tensor::randn(s, 1.0, &mut r));
            let mut ctx = Ctx::new();
            let rev = reversible_backprop(&mut blocks, &x1, &x2, &a, &b, &mut ctx).unwrap();
            assert_eq!((&rev.dx1, &rev.dx2), (&a, &b));
            let st = stored_backprop(&mut blocks, &x1, &x2, &a, &b, &mut ctx).unwrap();
            assert_eq!((&st.dx1, &st.dx2), (&a, &b));
            assert_eq!(ctx.mem.live_bytes(), 0);
        }
    }

    #[test]
    fn single_block_stack_matches_block_step() {
        let mut blocks = stack(1, false, 5);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let s = Shape::new(2, 2, 4, 4);
        let (x1, x2) = (Tensor::randn(s, 1.0, &mut r), Tensor::randn(s, 1.0, &mut r));
        let (a, b) = (Tensor::randn(s, 1.0, &mut r), Tensor::randn(s, 1.0, &mut r));
        let mut ctx = Ctx::new();
        let ck = stack_forward(&mut blocks, &x1, &x2, &mut ctx).unwrap();
        let (y1, y2) = ((*ck.boundary_y1).clone(), (*ck.boundary_y2).clone());
        let sg = stack_backward(&blocks, ck, &a, &b, &mut ctx).unwrap();
        let (bx1, bx2, bg) = block_reverse_backprop(&blocks[0], &y1, &y2, &a, &b, &mut ctx).unwrap();
        assert_eq!(sg.x1, bx1);
        assert_eq!(sg.x2, bx2);
        assert_eq!(sg.dx1, bg.dx1);
        assert_eq!(sg.dx2, bg.dx2);
        assert_eq!(sg.blocks[0].dwf, bg.dwf);
        assert_eq!(sg.blocks[0].dwg, bg.dwg);
    }

    #[test]
    fn missing_stats_is_an_error() {
        let blocks = stack(1, false, 7);
        let t = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let err = block_reverse_backprop(&blocks[0], &t, &t, &t, &t, &mut Ctx::new()).unwrap_err();
        assert!(matches!(err, Error::MissingReplayStats { .. }));
    }

    #[test]
    fn shared_slots_sum_gradients() {
        let mut blocks = stack(2, false, 8);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let s = Shape::new(1, 2, 3, 3);
        let (x1, x2) = (Tensor::randn(s, 1.0, &mut r), Tensor::randn(s, 1.0, &mut r));
        let grads = reversible_backprop(&mut blocks, &x1, &x2, &x1, &x2, &mut Ctx::new()).unwrap();
        let slots = grads.accumulate_shared(&[0, 0], &[1, 2], 3).unwrap();
        let mut expect = grads.blocks[0].dwf.clone();
        for (e, g) in expect.iter_mut().zip(&grads.blocks[1].dwf) {
            e.add_assign(g).unwrap();
        }
        assert_eq!(slots[0], expect);
        assert_eq!(slots[1], grads.blocks[0].dwg);
        assert_eq!(slots[2], grads.blocks[1].dwg);
    }
}
