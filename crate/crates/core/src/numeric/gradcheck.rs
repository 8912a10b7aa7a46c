use super::{NumericError, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst: usize,
    pub checked: usize,
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of step `step`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: f64) -> Result<GradCheckReport, NumericError>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, NumericError>,
{
    let shape = point.shape().to_vec();
    let eval = |values: &[T]| -> Result<(f64, Vec<f64>), NumericError> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(shape.clone(), values.to_vec())?);
        let y = f(&mut tape, x)?;
        if tape.value(y).len() != 1 {
            return Err(NumericError::Invalid(
                "grad_check needs a scalar function".into(),
            ));
        }
        let grads = tape.backward(y)?;
        Ok((tape.value(y).item(), grads.get_or_zeros(x, values.len())))
    };
    grad_check_flat(eval, point.data(), step, None)
}

/// Finite-difference check over a flat parameter vector.
///
/// `eval` returns the loss and its analytic gradient; `coords` restricts the
/// check to a subset of coordinates (all when `None`).
pub fn grad_check_flat<T, F>(
    eval: F,
    point: &[T],
    step: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport, NumericError>
where
    T: Real,
    F: Fn(&[T]) -> Result<(f64, Vec<f64>), NumericError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(NumericError::Invalid(format!(
            "step must be positive, got {}",
            step
        )));
    }
    let (_, analytic) = eval(point)?;
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(NumericError::NonFinite("grad_check"));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut work = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: 0,
        checked: 0,
    };
    for &i in coords {
        let x0 = point[i];
        let plus = T::from_f64(x0.to_f64() + step);
        let minus = T::from_f64(x0.to_f64() - step);
        work[i] = plus;
        let (fp, _) = eval(&work)?;
        work[i] = minus;
        let (fm, _) = eval(&work)?;
        work[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericError::NonFinite("grad_check"));
        }
        // the realised step differs from `2·step` after rounding to T
        let h = plus.to_f64() - minus.to_f64();
        let numeric = (fp - fm) / h;
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
