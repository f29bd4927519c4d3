//! Central-difference gradient checking.
//!
//! Coordinates whose +h and -h evaluations cross a ReLU kink (the pattern of
//! active units differs) are skipped and counted rather than compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::NetworkPlan;
use crate::error::{Error, Result};
use crate::kernels::softmax_xent;
use crate::metrics::Ctx;
use crate::tensor::Tensor;

/// Something with f64 parameters and a scalar loss.
pub trait GradTarget {
    fn param_tensors(&mut self) -> Vec<&mut Tensor<f64>>;
    fn loss(&mut self, ctx: &mut Ctx) -> Result<f64>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step, within `[1e-7, 1e-3]`.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Check every coordinate up to this many, otherwise a seeded sample of this size.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
            max_coords: 400,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: Option<Coordinate>,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<G: GradTarget>(target: &mut G) -> Result<(f64, Option<u64>)> {
    let mut ctx = Ctx::default();
    ctx.track_relu_signature();
    let l = target.loss(&mut ctx)?;
    Ok((l, ctx.relu_signature()))
}

/// Compares `analytic` (one tensor per parameter, same order) against central differences.
pub fn grad_check<G: GradTarget>(target: &mut G, analytic: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&cfg.step) {
        return Err(Error::Config(format!("gradcheck step {} outside [1e-7, 1e-3]", cfg.step)));
    }
    if cfg.max_coords == 0 {
        return Err(Error::Config("gradcheck needs at least one coordinate".into()));
    }
    let sizes: Vec<usize> = target.param_tensors().iter().map(|t| t.len()).collect();
    if sizes.len() != analytic.len() {
        return Err(Error::shape("grad_check", "gradient tensors", sizes.len(), analytic.len()));
    }
    for (i, (&n, a)) in sizes.iter().zip(analytic).enumerate() {
        if n != a.len() {
            return Err(Error::InvalidSpec(format!(
                "gradient {i} has {} entries, parameter has {n}",
                a.len()
            )));
        }
    }
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = if total <= cfg.max_coords {
        (0..total).collect()
    } else {
        let mut v = sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed), total, cfg.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport::default();
    for flat in coords {
        let (mut param, mut index) = (0, flat);
        while index >= sizes[param] {
            index -= sizes[param];
            param += 1;
        }
        let orig = target.param_tensors()[param].data()[index];
        target.param_tensors()[param].data_mut()[index] = orig + cfg.step;
        let plus = eval(target);
        target.param_tensors()[param].data_mut()[index] = orig - cfg.step;
        let minus = eval(target);
        target.param_tensors()[param].data_mut()[index] = orig;
        let ((lp, sp), (lm, sm)) = (plus?, minus?);
        if sp != sm {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let a = analytic[param].data()[index];
        let rel = relative_error(a, numeric, cfg.floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(Coordinate {
                param,
                index,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}

/// Parameters plus a loss closure over them.
pub struct FnTarget<F> {
    pub params: Vec<Tensor<f64>>,
    pub f: F,
}

impl<F> GradTarget for FnTarget<F>
where
    F: FnMut(&[Tensor<f64>], &mut Ctx) -> Result<f64>,
{
    fn param_tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        self.params.iter_mut().collect()
    }

    fn loss(&mut self, ctx: &mut Ctx) -> Result<f64> {
        (self.f)(&self.params, ctx)
    }
}

/// Mean cross-entropy of a network on a fixed batch.
pub struct NetworkLoss<'a> {
    pub net: &'a mut NetworkPlan<f64>,
    pub x: &'a Tensor<f64>,
    pub labels: &'a [usize],
}

impl GradTarget for NetworkLoss<'_> {
    fn param_tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        self.net.params_mut()
    }

    fn loss(&mut self, ctx: &mut Ctx) -> Result<f64> {
        let logits = self.net.predict(self.x, ctx)?;
        Ok(softmax_xent(&logits, self.labels)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{conv2d, conv2d_vjp, ConvParams};
    use crate::tensor::Shape;

    #[test]
    fn no_parameters_gives_empty_report() {
        let mut t = FnTarget {
            params: vec![],
            f: |_: &[Tensor<f64>], _: &mut Ctx| Ok(1.0),
        };
        let r = grad_check(&mut t, &[], GradCheckConfig::default()).unwrap();
        assert_eq!(r, GradCheckReport::default());
    }

    #[test]
    fn single_pointwise_conv_is_exact() {
        let x = Tensor::from_f64_slice(Shape::new(1, 2, 2, 2), &[0.5, -1.0, 2.0, 0.25, 1.5, -0.75, 0.1, 3.0]).unwrap();
        let dy = Tensor::from_f64_slice(
            Shape::new(1, 3, 2, 2),
            &[1.0, -2.0, 0.5, 0.3, 0.7, 1.1, -0.4, 2.0, 0.9, -1.3, 0.6, 0.2],
        )
        .unwrap();
        let w = Tensor::from_f64_slice(Shape::new(3, 2, 1, 1), &[0.2, -0.4, 1.0, 0.3, -0.8, 0.6]).unwrap();
        let loss = |p: &[Tensor<f64>], _: &mut Ctx| {
            let conv = ConvParams::new(p[0].clone(), None, 1, 0)?;
            conv2d(&x, &conv)?.dot(&dy)
        };
        let g = conv2d_vjp(&x, &ConvParams::new(w.clone(), None, 1, 0).unwrap(), &dy).unwrap();
        let mut t = FnTarget { params: vec![w], f: loss };
        let r = grad_check(&mut t, &[g.dw], GradCheckConfig::default()).unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut t = FnTarget {
            params: vec![Tensor::from_f64_slice(Shape::vector(2), &[1.0, 2.0]).unwrap()],
            f: |p: &[Tensor<f64>], _: &mut Ctx| Ok(p[0].data().iter().map(|v| v * v).sum()),
        };
        let bad = Tensor::from_f64_slice(Shape::vector(2), &[2.0, 5.0]).unwrap();
        let r = grad_check(&mut t, &[bad], GradCheckConfig::default()).unwrap();
        let w = r.worst.unwrap();
        assert_eq!((w.param, w.index), (0, 1));
        assert!((r.max_rel_err - 0.2).abs() < 1e-6);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let mut t = FnTarget {
            params: vec![],
            f: |_: &[Tensor<f64>], _: &mut Ctx| Ok(0.0),
        };
        let cfg = GradCheckConfig {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&mut t, &[], cfg).is_err());
    }
}
