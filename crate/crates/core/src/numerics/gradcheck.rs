//! Finite-difference verification of reverse-mode gradients.

use super::{NumericsError, ParamStore, Tape, Tensor, Var};

/// Denominator floor used by [`relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`
/// Spacing of central differences of an objective near `value`: one unit in
/// the last place of `value`, divided by `2·step`. Entries whose true
/// derivative is below a few multiples of this cannot be resolved.
pub fn difference_resolution(value: f64, step: f64) -> f64 {
    let v = value.abs();
    let ulp = f64::from_bits(v.to_bits() + 1) - v;
    ulp / (2.0 * step)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose relative error reaches the tolerance.
    pub failing: usize,
    /// Largest `|analytic − numeric|` among the failing entries.
    pub failing_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    entries: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn failing(&self) -> usize {
        self.params.iter().map(|p| p.failing).sum()
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    /// Largest absolute error among entries over tolerance.
    pub fn failing_abs_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.failing_abs_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval<F, E>(f: &mut F, store: &ParamStore) -> Result<f64, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarLoss {
            shape: v.shape().to_vec(),
        }
        .into());
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "objective" }.into());
    }
    Ok(v)
}

/// Reverse-mode gradients of `f`, returned as a store whose `grad` fields
/// hold the result.
pub fn analytic_gradients<F, E>(mut f: F, store: &ParamStore) -> Result<ParamStore, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut out = store.clone();
    out.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if !tape.value(loss).is_finite() {
        return Err(NumericsError::NonFinite { op: "objective" }.into());
    }
    tape.backward_into(loss, &mut out)?;
    Ok(out)
}

/// Central differences `(f(θ + h) − f(θ − h)) / 2h` for every entry of every
/// parameter named by `only` (all parameters when `None`).
pub fn numerical_gradients<F, E>(
    mut f: F,
    store: &ParamStore,
    step: f64,
    only: Option<&[&str]>,
) -> Result<ParamStore, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidArgument {
            op: "grad_check",
            msg: format!("step {step} must be positive"),
        }
        .into());
    }
    let mut work = store.clone();
    let mut out = store.clone();
    out.zero_grad();
    let names: Vec<String> = store
        .names()
        .filter(|n| only.map_or(true, |o| o.contains(n)))
        .map(str::to_string)
        .collect();
    for name in names {
        let len = store.value(&name).map_or(0, Tensor::len);
        let mut grad = vec![0.0; len];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = store.value(&name).unwrap().data()[i];
            work.value_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = eval(&mut f, &work)?;
            work.value_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = eval(&mut f, &work)?;
            work.value_mut(&name).unwrap().data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * step);
        }
        let shape = store.value(&name).unwrap().shape().to_vec();
        *out.grad_mut(&name).unwrap() = Tensor::from_parts(shape, grad);
    }
    Ok(out)
}

/// Entrywise comparison of two gradient sets over the parameters of `numeric`.
pub fn compare(
    analytic: &ParamStore,
    numeric: &ParamStore,
    only: Option<&[&str]>,
    step: f64,
    tol: f64,
) -> GradCheckReport {
    let mut params = Vec::new();
    let mut entries = 0;
    for (name, p) in numeric.iter() {
        if only.is_some_and(|o| !o.contains(&name)) {
            continue;
        }
        let Some(a) = analytic.grad(name) else {
            continue;
        };
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            failing: 0,
            failing_abs_error: 0.0,
        };
        for (i, (&av, &nv)) in a.data().iter().zip(p.grad.data()).enumerate() {
            let err = relative_error(av, nv);
            entries += 1;
            if err >= tol {
                check.failing += 1;
                check.failing_abs_error = check.failing_abs_error.max((av - nv).abs());
            }
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err.max(check.max_rel_error);
                check.worst_index = i;
                check.analytic = av;
                check.numeric = nv;
            }
        }
        params.push(check);
    }
    GradCheckReport {
        step,
        tol,
        params,
        entries,
    }
}

/// Compares reverse-mode gradients of the scalar objective `f` against central
/// differences. `f` must be deterministic.
pub fn grad_check<F, E>(
    mut f: F,
    store: &ParamStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let analytic = analytic_gradients(&mut f, store)?;
    let numeric = numerical_gradients(&mut f, store, step, None)?;
    Ok(compare(&analytic, &numeric, None, step, tol))
}

/// As [`grad_check`], restricted to the named parameters.
pub fn grad_check_subset<F, E>(
    mut f: F,
    store: &ParamStore,
    names: &[&str],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let analytic = analytic_gradients(&mut f, store)?;
    let numeric = numerical_gradients(&mut f, store, step, Some(names))?;
    Ok(compare(&analytic, &numeric, Some(names), step, tol))
}
