use super::{DiffError, Tape, Tensor, Var};

/// Outcome of a passing [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input position, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, entry by entry.
///
/// `function` receives one tape variable per tensor in `inputs` and must
/// return a one-element result. The analytic pass records on a fresh tape;
/// every perturbed evaluation runs on a non-recording tape.
pub fn finite_difference_check<F>(
    function: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(step > 0.0) {
        return Err(DiffError::InvalidArgument("finite-difference step must be positive"));
    }
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input.{i}")).collect();

    let mut tape = Tape::new();
    let vars =
        names.iter().zip(inputs).map(|(n, t)| tape.param(n.clone(), t.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = function(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64, DiffError> {
        let mut t = Tape::without_recording();
        let vs = values.iter().map(|v| t.constant(v.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = function(&mut t, &vs)?;
        t.value(out).item().ok_or_else(|| DiffError::NonScalarLoss(t.value(out).shape().to_vec()))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), entries: 0 };
    let mut worst_pair = (0.0, 0.0);
    for (i, name) in names.iter().enumerate() {
        let analytic = grads.get(name).expect("every input is a parameter").clone();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.entries == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                worst_pair = (a, numeric);
            }
        }
    }
    if report.max_rel_error > tolerance {
        return Err(DiffError::GradCheck {
            input: report.worst.0,
            index: report.worst.1,
            analytic: worst_pair.0,
            numeric: worst_pair.1,
            rel_error: report.max_rel_error,
        });
    }
    Ok(report)
}
