//! Instrumentation: activation memory metering, multiply-add tallies and the
//! gradient-angle probe.
//!
//! Memory is metered by explicit registration of activation buffers rather
//! than by watching the process allocator, so numbers are exact and repeatable.
//! Every meter is owned by one run; there is no global state.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Multiply-add tallies split by pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub forward_madds: u64,
    pub backward_madds: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.forward_madds + self.backward_madds
    }

    /// backward / forward
    pub fn backward_ratio(&self) -> f64 {
        self.backward_madds as f64 / self.forward_madds as f64
    }

    /// (forward + backward) / forward
    pub fn total_ratio(&self) -> f64 {
        self.total() as f64 / self.forward_madds as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AllocId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemEventKind {
    Alloc,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemEvent {
    pub kind: MemEventKind,
    pub id: u64,
    pub bytes: u64,
    pub tag: &'static str,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TagUsage {
    pub live_bytes: u64,
    pub peak_bytes: u64,
    pub allocs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeReport {
    pub tag: String,
    /// Live bytes when the scope was entered.
    pub entry_bytes: u64,
    /// Highest live byte count observed while the scope was open.
    pub peak_bytes: u64,
}

impl ScopeReport {
    pub fn peak_above_entry(&self) -> u64 {
        self.peak_bytes - self.entry_bytes
    }
}

#[derive(Clone, Debug, Default)]
pub struct MemMeter {
    live: u64,
    peak: u64,
    next_id: u64,
    open: HashMap<u64, (&'static str, u64)>,
    tags: BTreeMap<&'static str, TagUsage>,
    log: Option<Vec<MemEvent>>,
    scopes: Vec<ScopeReport>,
    closed: Vec<ScopeReport>,
}

impl MemMeter {
    /// A meter that also keeps the full event log.
    pub fn new() -> Self {
        MemMeter {
            log: Some(Vec::new()),
            ..Default::default()
        }
    }

    /// A meter that tracks live/peak counts only.
    pub fn without_log() -> Self {
        MemMeter::default()
    }

    pub fn live_bytes(&self) -> u64 {
        self.live
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak
    }

    pub fn events(&self) -> &[MemEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn tags(&self) -> &BTreeMap<&'static str, TagUsage> {
        &self.tags
    }

    pub fn outstanding(&self) -> usize {
        self.open.len()
    }

    pub fn record_alloc(&mut self, tag: &'static str, bytes: usize) -> AllocId {
        let id = self.next_id;
        self.next_id += 1;
        let bytes = bytes as u64;
        self.open.insert(id, (tag, bytes));
        self.live += bytes;
        self.peak = self.peak.max(self.live);
        for s in &mut self.scopes {
            s.peak_bytes = s.peak_bytes.max(self.live);
        }
        let usage = self.tags.entry(tag).or_default();
        usage.live_bytes += bytes;
        usage.peak_bytes = usage.peak_bytes.max(usage.live_bytes);
        usage.allocs += 1;
        if let Some(log) = &mut self.log {
            log.push(MemEvent {
                kind: MemEventKind::Alloc,
                id,
                bytes,
                tag,
            });
        }
        AllocId(id)
    }

    pub fn record_free(&mut self, id: AllocId) -> Result<()> {
        let (tag, bytes) = self.open.remove(&id.0).ok_or(Error::DoubleFree { id: id.0 })?;
        self.live -= bytes;
        if let Some(usage) = self.tags.get_mut(tag) {
            usage.live_bytes -= bytes;
        }
        if let Some(log) = &mut self.log {
            log.push(MemEvent {
                kind: MemEventKind::Free,
                id: id.0,
                bytes,
                tag,
            });
        }
        Ok(())
    }

    /// Opens a named scope; its peak is tracked until the matching `end_scope`.
    pub fn meter_scope(&mut self, tag: &str) {
        self.scopes.push(ScopeReport {
            tag: tag.to_string(),
            entry_bytes: self.live,
            peak_bytes: self.live,
        });
    }

    pub fn end_scope(&mut self) -> Option<ScopeReport> {
        let report = self.scopes.pop()?;
        self.closed.push(report.clone());
        Some(report)
    }

    pub fn scope_reports(&self) -> &[ScopeReport] {
        &self.closed
    }

    /// Rebuilds a meter by replaying an event log.
    pub fn replay(events: &[MemEvent]) -> Result<MemMeter> {
        let mut m = MemMeter::new();
        let mut remap = HashMap::new();
        for ev in events {
            match ev.kind {
                MemEventKind::Alloc => {
                    let id = m.record_alloc(ev.tag, ev.bytes as usize);
                    remap.insert(ev.id, id);
                }
                MemEventKind::Free => {
                    let id = remap.remove(&ev.id).ok_or(Error::DoubleFree { id: ev.id })?;
                    m.record_free(id)?;
                }
            }
        }
        Ok(m)
    }

    /// Per-tag breakdown as CSV with header `tag,peak_bytes`.
    pub fn tag_csv(&self) -> String {
        let mut out = String::from("tag,peak_bytes\n");
        for (tag, usage) in &self.tags {
            let _ = writeln!(out, "{tag},{}", usage.peak_bytes);
        }
        out
    }
}

/// A tensor whose bytes are registered with a [`MemMeter`] until released.
#[derive(Debug)]
pub struct Held<T> {
    tensor: Tensor<T>,
    id: AllocId,
}

impl<T> Deref for Held<T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        &self.tensor
    }
}

/// Per-run execution context: madd counters, the memory meter, and an
/// optional fingerprint of every ReLU sign pattern seen during forward.
#[derive(Debug)]
pub struct Ctx {
    pub ops: OpCount,
    pub mem: MemMeter,
    phase: Phase,
    relu_sig: Option<u64>,
}

impl Default for Ctx {
    fn default() -> Self {
        Ctx::with_meter(MemMeter::without_log())
    }
}

impl Ctx {
    pub fn new() -> Self {
        Ctx::default()
    }

    pub fn with_meter(mem: MemMeter) -> Self {
        Ctx {
            ops: OpCount::default(),
            mem,
            phase: Phase::Forward,
            relu_sig: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Sets the phase that subsequent madds are charged to; returns the old one.
    pub fn set_phase(&mut self, phase: Phase) -> Phase {
        std::mem::replace(&mut self.phase, phase)
    }

    pub fn charge(&mut self, madds: u64) {
        match self.phase {
            Phase::Forward => self.ops.forward_madds += madds,
            Phase::Backward => self.ops.backward_madds += madds,
        }
    }

    pub fn hold<T: Scalar>(&mut self, tag: &'static str, tensor: Tensor<T>) -> Held<T> {
        let id = self.mem.record_alloc(tag, tensor.bytes());
        Held { tensor, id }
    }

    pub fn release<T>(&mut self, held: Held<T>) -> Result<Tensor<T>> {
        self.mem.record_free(held.id)?;
        Ok(held.tensor)
    }

    pub fn discard<T>(&mut self, held: Held<T>) -> Result<()> {
        self.mem.record_free(held.id)
    }

    pub fn track_relu_signature(&mut self) {
        self.relu_sig = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn relu_signature(&self) -> Option<u64> {
        self.relu_sig
    }

    /// Folds the sign pattern of a ReLU input into the running fingerprint.
    pub fn observe_relu<T: Scalar>(&mut self, pre: &Tensor<T>) {
        let Some(mut h) = self.relu_sig else { return };
        for chunk in pre.data().chunks(64) {
            let mut bits = 0u64;
            for (i, &v) in chunk.iter().enumerate() {
                if v > T::ZERO {
                    bits |= 1 << i;
                }
            }
            h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
        }
        self.relu_sig = Some(h);
    }
}

/// Angle between two gradient vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleReport {
    /// NaN when either input has zero norm.
    pub angle_degrees: f64,
    pub cosine: f64,
    pub a_norm: f64,
    pub b_norm: f64,
    pub defined: bool,
}

pub fn grad_angle(a: &[f64], b: &[f64]) -> Result<AngleReport> {
    if a.len() != b.len() {
        return Err(Error::shape("grad_angle", "length", a.len(), b.len()));
    }
    let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if a_norm == 0.0 || b_norm == 0.0 || !a_norm.is_finite() || !b_norm.is_finite() {
        return Ok(AngleReport {
            angle_degrees: f64::NAN,
            cosine: f64::NAN,
            a_norm,
            b_norm,
            defined: false,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cosine = (dot / (a_norm * b_norm)).clamp(-1.0, 1.0);
    // 2 atan2(|u - v|, |u + v|) on the unit vectors stays accurate near 0 and 180.
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / a_norm, y / b_norm);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
    Ok(AngleReport {
        angle_degrees: angle.to_degrees(),
        cosine,
        a_norm,
        b_norm,
        defined: true,
    })
}

/// Flattens a list of gradient tensors into one f64 vector.
pub fn flatten<T: Scalar>(grads: &[Tensor<T>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().map(|v| v.to_f64())).collect()
}

/// Least-squares slope of `ys` against `xs`.
pub fn linear_fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
