use super::tape::{ParamGroup, ParamId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    /// max over checked coordinates of |analytic − central| / max(1, |analytic|)
    pub max_rel_error: T,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub excluded: Vec<usize>,
}

/// Compares `analytic` against central differences of `f` around `point`.
///
/// Coordinates for which `exclude` returns true are skipped; use it for
/// documented kinks such as ReLU inputs sitting exactly at zero.
pub fn finite_difference_check<T, F, E>(
    mut f: F,
    point: &Tensor<T>,
    analytic: &Tensor<T>,
    step: T,
    exclude: E,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
    E: Fn(usize) -> bool,
{
    if !(step > T::zero()) {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("{:?} vs {:?}", analytic.shape(), point.shape()),
        ));
    }
    let two = T::lit(2.0);
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst_index: None,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        if exclude(i) {
            report.excluded.push(i);
            continue;
        }
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (two * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / T::one().max(a.abs());
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check for a graph built from a single parameter tensor.
///
/// `build` records the scalar function on a fresh tape given the parameter
/// variable; the analytic gradient comes from [`Tape::backward`].
pub fn check_graph<T, B, E>(
    build: B,
    point: &Tensor<T>,
    step: T,
    exclude: E,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    B: Fn(&mut Tape<T>, Var) -> Result<Var>,
    E: Fn(usize) -> bool,
{
    let id = ParamId(0);
    let eval = |p: &Tensor<T>| -> Result<(Tape<T>, Var)> {
        let mut tape = Tape::new();
        let v = tape.param(id, ParamGroup::FeatureExtractor, p.clone());
        let root = build(&mut tape, v)?;
        Ok((tape, root))
    };
    let (tape, root) = eval(point)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get(id).expect("parameter registered").clone();
    finite_difference_check(
        |p| {
            let (tape, root) = eval(p)?;
            Ok(tape.value(root).item())
        },
        point,
        &analytic,
        step,
        exclude,
    )
}

/// Exclusion rule for coordinates sitting exactly on a ReLU kink.
pub fn zero_coordinates<T: Scalar>(point: &Tensor<T>) -> impl Fn(usize) -> bool + '_ {
    move |i| point.data()[i] == T::zero()
}
