//! C ABI over `revnet-core`.
//!
//! Networks are opaque `RevnetNetwork` handles holding f64 parameters and an
//! SGD state. Every function returns a [`RevnetStatus`]; on failure the
//! message is available from [`revnet_last_error`] on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use revnet_core::arch::{input_batch_shape, BuildOptions, NetworkPlan};
use revnet_core::metrics::{flatten, grad_angle};
use revnet_core::train::{Checkpoint, Schedule, Sgd, TrainConfig};
use revnet_core::{Ctx, Error, Tensor};

pub const REVNET_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RevnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    NonFinite = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque network handle.
pub struct RevnetNetwork {
    cfg: TrainConfig,
    net: NetworkPlan<f64>,
    opt: Sgd<f64>,
    step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(RevnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::ShapeMismatch { .. } | Error::OddChannels { .. } | Error::LabelOutOfRange { .. } => RevnetStatus::Shape,
            Error::InvalidSpec(_) | Error::Config(_) => RevnetStatus::Config,
            Error::Io(_) | Error::Truncated { .. } | Error::Checkpoint(_) => RevnetStatus::Io,
            Error::NonFiniteLoss { .. } => RevnetStatus::NonFinite,
            _ => RevnetStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RevnetStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(RevnetStatus::InvalidArgument, msg)
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RevnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RevnetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            RevnetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn net_mut<'a>(p: *mut RevnetNetwork) -> Result<&'a mut RevnetNetwork, Failure> {
    p.as_mut().ok_or_else(|| null("network"))
}

unsafe fn batch_args(
    h: &RevnetNetwork,
    x: *const f64,
    x_len: usize,
    labels: *const u32,
    batch: usize,
) -> Result<(Tensor<f64>, Vec<usize>), Failure> {
    if x.is_null() {
        return Err(null("x"));
    }
    if labels.is_null() {
        return Err(null("labels"));
    }
    if batch == 0 {
        return Err(invalid("batch must be positive".into()));
    }
    let shape = input_batch_shape(&h.cfg.arch, batch);
    if x_len != shape.numel() {
        return Err(invalid(format!(
            "x has {x_len} values, a batch of shape {shape} needs {}",
            shape.numel()
        )));
    }
    let xs = Tensor::from_vec(shape, slice::from_raw_parts(x, x_len).to_vec())?;
    let ys = slice::from_raw_parts(labels, batch).iter().map(|&l| l as usize).collect();
    Ok((xs, ys))
}

#[no_mangle]
pub extern "C" fn revnet_abi_version() -> u32 {
    REVNET_ABI_VERSION
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn revnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a network from `key = value` config text. `config` may be empty for
/// the built-in toy network. The precision key is ignored; handles are f64.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn revnet_network_from_config(config: *const c_char, out: *mut *mut RevnetNetwork) -> RevnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = TrainConfig::parse(str_arg(config, "config")?, &[])?;
        cfg.validate()?;
        let net = NetworkPlan::build(
            &cfg.arch,
            BuildOptions {
                seed: cfg.seed,
                zero_init_residual: cfg.zero_init_residual,
            },
        )?;
        let opt = Sgd::new(
            Schedule {
                base_lr: cfg.lr,
                decay_steps: cfg.decay_steps.clone(),
                factor: cfg.decay_factor,
            },
            cfg.momentum,
            cfg.weight_decay,
        );
        *out = Box::into_raw(Box::new(RevnetNetwork { cfg, net, opt, step: 0 }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from [`revnet_network_from_config`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn revnet_network_free(net: *mut RevnetNetwork) {
    if !net.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(net))));
    }
}

/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn revnet_network_param_count(net: *const RevnetNetwork, out: *mut usize) -> RevnetStatus {
    guard(|| {
        let h = net.as_ref().ok_or_else(|| null("network"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = h.net.count_params();
        Ok(())
    })
}

/// Mean cross-entropy of one batch and, when `grad` is non-null, its gradient
/// flattened in parameter order into `grad[0..grad_len]`. `x` is NCHW with
/// `batch` samples; `grad_len` must equal the parameter count.
///
/// # Safety
/// Pointers must be valid for the stated lengths (`labels` for `batch` entries).
#[no_mangle]
pub unsafe extern "C" fn revnet_network_loss_and_grad(
    net: *mut RevnetNetwork,
    x: *const f64,
    x_len: usize,
    labels: *const u32,
    batch: usize,
    loss: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> RevnetStatus {
    guard(|| {
        let h = net_mut(net)?;
        if loss.is_null() {
            return Err(null("loss"));
        }
        let n = h.net.count_params();
        if !grad.is_null() && grad_len != n {
            return Err(invalid(format!("grad_len is {grad_len}, network has {n} parameters")));
        }
        let (xs, ys) = batch_args(h, x, x_len, labels, batch)?;
        let (l, _, g) = h.net.loss_and_grads(&xs, &ys, h.cfg.engine, &mut Ctx::default())?;
        *loss = l;
        if !grad.is_null() {
            slice::from_raw_parts_mut(grad, n).copy_from_slice(&flatten(&g));
        }
        Ok(())
    })
}

/// One SGD step on a batch with the configured engine and schedule.
/// Writes the pre-update loss to `loss` when non-null.
///
/// # Safety
/// Same as [`revnet_network_loss_and_grad`].
#[no_mangle]
pub unsafe extern "C" fn revnet_network_train_step(
    net: *mut RevnetNetwork,
    x: *const f64,
    x_len: usize,
    labels: *const u32,
    batch: usize,
    loss: *mut f64,
) -> RevnetStatus {
    guard(|| {
        let h = net_mut(net)?;
        let (xs, ys) = batch_args(h, x, x_len, labels, batch)?;
        let (l, _, g) = h.net.loss_and_grads(&xs, &ys, h.cfg.engine, &mut Ctx::default())?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { step: h.step }.into());
        }
        h.opt.step(h.net.params_mut(), &g, h.step)?;
        h.step += 1;
        if !loss.is_null() {
            *loss = l;
        }
        Ok(())
    })
}

/// Writes an f64 checkpoint of the current parameters.
///
/// # Safety
/// `net` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn revnet_network_save_checkpoint(net: *const RevnetNetwork, path: *const c_char) -> RevnetStatus {
    guard(|| {
        let h = net.as_ref().ok_or_else(|| null("network"))?;
        let path = str_arg(path, "path")?;
        Checkpoint {
            step: h.step,
            params: h.net.param_names().into_iter().zip(h.net.params().into_iter().cloned()).collect(),
        }
        .save(Path::new(path))?;
        Ok(())
    })
}

/// Angle in degrees between two vectors of length `len`.
///
/// # Safety
/// `a` and `b` must be valid for `len` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn revnet_grad_angle(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> RevnetStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let r = grad_angle(slice::from_raw_parts(a, len), slice::from_raw_parts(b, len))?;
        if !r.defined {
            return Err(invalid("angle undefined for a zero vector".into()));
        }
        *out = r.angle_degrees;
        Ok(())
    })
}
