//! Central finite-difference gradient verification.
//!
//! This is the test oracle for every differentiable operation and for the
//! full training loss: analytic gradients from the tape are compared
//! against (f(x+h) - f(x-h)) / 2h, parameter element by parameter element.

use super::{AdError, Binding, ParamSet, Tape, Var};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

/// Relative error with a floor so that zero/zero counts as agreement.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the analytic gradient of `f` against central differences over
/// every element of every parameter. `f` must build a scalar loss from
/// the bound parameters and be deterministic given them.
pub fn finite_difference_check<F>(
    params: &mut ParamSet,
    h: f64,
    f: &mut F,
) -> Result<FdReport, AdError>
where
    F: FnMut(&mut Tape, &Binding) -> Result<Var, AdError>,
{
    fd_check_with_fault(params, h, None, f)
}

/// Same as [`finite_difference_check`], but optionally flips the sign of
/// one analytic gradient entry (flat element index across the whole set).
/// Used to prove the harness actually catches wrong gradients.
pub fn fd_check_with_fault<F>(
    params: &mut ParamSet,
    h: f64,
    fault: Option<usize>,
    f: &mut F,
) -> Result<FdReport, AdError>
where
    F: FnMut(&mut Tape, &Binding) -> Result<Var, AdError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let loss = f(&mut tape, &binding)?;
    if tape.tensor(loss).len() != 1 {
        return Err(AdError::NonScalarLoss(tape.tensor(loss).shape.clone()));
    }
    if !tape.scalar_value(loss).is_finite() {
        return Err(AdError::Numeric {
            op: "finite_difference_check",
            detail: format!("objective is {}", tape.scalar_value(loss)),
        });
    }
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let g = tape
            .grad(binding.vars()[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
        analytic.push(g);
    }
    if let Some(flat) = fault {
        let mut remaining = flat;
        'outer: for g in analytic.iter_mut() {
            if remaining < g.len() {
                g[remaining] = -g[remaining] - 1.0;
                break 'outer;
            }
            remaining -= g.len();
        }
    }

    // Numeric pass, one perturbed evaluation pair per element.
    let mut eval = |params: &mut ParamSet| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let loss = f(&mut tape, &binding)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(AdError::Numeric {
                op: "finite_difference_check",
                detail: format!("perturbed objective is {v}"),
            });
        }
        Ok(v)
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        n_checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params.param(super::ParamId(pi)).tensor.len() {
            let orig = params.param(super::ParamId(pi)).tensor.data[ei];
            params.param_mut(super::ParamId(pi)).tensor.data[ei] = orig + h;
            let plus = eval(params)?;
            params.param_mut(super::ParamId(pi)).tensor.data[ei] = orig - h;
            let minus = eval(params)?;
            params.param_mut(super::ParamId(pi)).tensor.data[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[pi][ei], numeric);
            report.n_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = params.param(super::ParamId(pi)).name.clone();
                report.worst_index = ei;
            }
        }
    }
    Ok(report)
}
