//! Central-difference validation of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Settings for [`grad_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f32,
    /// Upper bound on probed coordinates per parameter tensor; larger
    /// tensors are probed at evenly strided positions.
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-3,
            max_coords: usize::MAX,
        }
    }
}

/// Per-tensor outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub probed: usize,
    pub rel_error: f32,
    /// L2 norm of the analytic gradient over the probed coordinates.
    pub analytic_norm: f64,
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Eval(format!("function returned shape {:?}, expected a scalar", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Eval(format!("function value is not finite ({v})")));
    }
    Ok(v as f64)
}

/// Max over parameter tensors of `‖analytic − central‖ / (‖analytic‖ + ‖central‖ + 1e-8)`,
/// using the default settings.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let checks = grad_check_with(&f, params, GradCheck { eps, ..Default::default() })?;
    Ok(checks.iter().map(|c| c.rel_error).fold(0.0, f32::max))
}

pub fn grad_check_with<F>(f: &F, params: &[Tensor], cfg: GradCheck) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(f, params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    compare(&analytic, params, cfg, |pi, j| {
        let orig = params[pi].data()[j];
        work[pi].data_mut()[j] = orig + cfg.eps;
        let plus = eval_scalar(f, &work);
        work[pi].data_mut()[j] = orig - cfg.eps;
        let minus = eval_scalar(f, &work);
        work[pi].data_mut()[j] = orig;
        Ok((plus? - minus?) / (2.0 * cfg.eps as f64))
    })
}

/// Tape gradients of `f` checked against central differences of
/// `reference`, an independent f64 evaluation of the same function that
/// takes every parameter tensor as a flat vector.
///
/// In f32 a central difference cannot resolve derivatives much below
/// `ulp(output) / eps`; deep compositions hit that floor long before their
/// gradients are wrong. The f64 reference moves the floor out of the way
/// while the analytic side stays the f32 backward pass under test.
pub fn grad_check_against<F, R>(f: &F, reference: &R, params: &[Tensor], cfg: GradCheck) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let analytic = analytic_grads(f, params)?;
    let mut work: Vec<Vec<f64>> = params.iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect();
    let eps = cfg.eps as f64;
    compare(&analytic, params, cfg, |pi, j| {
        let orig = work[pi][j];
        work[pi][j] = orig + eps;
        let plus = reference(&work);
        work[pi][j] = orig - eps;
        let minus = reference(&work);
        work[pi][j] = orig;
        let central = (plus - minus) / (2.0 * eps);
        if central.is_finite() {
            Ok(central)
        } else {
            Err(Error::Eval(format!("reference value is not finite at ±eps ({plus}, {minus})")))
        }
    })
}

fn analytic_grads<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 || !value.item().is_finite() {
        return Err(Error::Eval(format!("function value {:?} is not a finite scalar", value.data())));
    }
    let grads = tape.backward(out)?;
    Ok(params
        .iter()
        .zip(&vars)
        .map(|(p, v)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

fn compare(
    analytic: &[Tensor],
    params: &[Tensor],
    cfg: GradCheck,
    mut central: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<Vec<ParamCheck>> {
    let mut checks = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = n.div_ceil(cfg.max_coords.max(1)).max(1);
        let (mut diff2, mut a2, mut c2) = (0.0f64, 0.0f64, 0.0f64);
        let mut probed = 0;
        for j in (0..n).step_by(stride) {
            let c = central(pi, j)?;
            let a = analytic[pi].data()[j] as f64;
            diff2 += (a - c).powi(2);
            a2 += a * a;
            c2 += c * c;
            probed += 1;
        }
        let rel = diff2.sqrt() / (a2.sqrt() + c2.sqrt() + 1e-8);
        checks.push(ParamCheck {
            index: pi,
            probed,
            rel_error: rel as f32,
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(checks)
}
