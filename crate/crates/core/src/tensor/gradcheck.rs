//! Central finite-difference gradient checking.

use super::{HasParams, Param, ParamAlloc, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            floor: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a ±h step crossed a ReLU kink.
    pub skipped: usize,
}

fn eval<M, F>(model: &mut M, f: &mut F) -> Result<(f64, Option<u64>)>
where
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_kinks();
    let loss = f(model, &mut tape)?;
    Ok((tape.value(loss).item()?, tape.kink_signature()))
}

/// Compares tape gradients of the scalar returned by `f` with central
/// differences over every parameter of `model`. `f` must be deterministic.
pub fn check_model<M, F>(model: &mut M, opts: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    M: HasParams,
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_kinks();
    let loss = f(model, &mut tape)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| grads.param(p.id).map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = model.params()[pi].value.data()[c];
            model.params_mut()[pi].value.data_mut()[c] = orig + opts.h;
            let (fp, sp) = eval(model, &mut f)?;
            model.params_mut()[pi].value.data_mut()[c] = orig - opts.h;
            let (fm, sm) = eval(model, &mut f)?;
            model.params_mut()[pi].value.data_mut()[c] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = grad[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((model.params()[pi].name.clone(), c));
                }
            }
        }
    }
    Ok(report)
}

/// Plain differentiable inputs wrapped as parameters.
pub struct Inputs(pub Vec<Param>);

impl Inputs {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        let mut alloc = ParamAlloc::new(u16::MAX);
        Inputs(
            tensors
                .into_iter()
                .enumerate()
                .map(|(i, t)| alloc.param(format!("input{i}"), t))
                .collect(),
        )
    }
}

impl HasParams for Inputs {
    fn params(&self) -> Vec<&Param> {
        self.0.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.iter_mut().collect()
    }
}

/// Gradient check of a function of plain tensors.
pub fn check_inputs<F>(inputs: Vec<Tensor>, opts: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut model = Inputs::new(inputs);
    check_model(&mut model, opts, |m, tape| {
        let vars: Vec<Var> = m.0.iter().map(|p| tape.param(p)).collect();
        f(tape, &vars)
    })
}
