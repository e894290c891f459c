//! Central-difference gradient verification (64-bit only).

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(input name, max relative error)` in input order.
    pub errors: Vec<(String, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.errors.iter().all(|(_, e)| *e <= self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// A named input to a checked function.
pub struct CheckInput {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl CheckInput {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Self {
        CheckInput {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        }
    }
}

/// Gradients of the scalar `f(inputs)` obtained by reverse-mode differentiation.
pub fn analytic_gradient<Fun>(f: &Fun, inputs: &[CheckInput]) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let graph = Graph::new();
    let leaves = inputs
        .iter()
        .map(|i| Tensor::param(&i.shape, i.values.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&graph, &leaves)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    graph.backward(&loss)?;
    leaves
        .iter()
        .zip(inputs)
        .map(|(t, i)| {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i.name.clone()));
            }
            Ok(g)
        })
        .collect()
}

/// Central differences `(f(x + h) − f(x − h)) / 2h`, one coordinate at a time.
pub fn numeric_gradient<Fun>(f: &Fun, inputs: &[CheckInput], step: f64) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let leaves = inputs
            .iter()
            .zip(values)
            .map(|(i, v)| Tensor::new(&i.shape, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&Graph::inference(), &leaves)?.item())
    };
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let mut grads = Vec::with_capacity(inputs.len());
    for (p, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.values.len()];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = values[p][j];
            values[p][j] = orig + step;
            let plus = eval(&values)?;
            values[p][j] = orig - step;
            let minus = eval(&values)?;
            values[p][j] = orig;
            let d = (plus - minus) / (2.0 * step);
            if !d.is_finite() {
                return Err(Error::NonFinite(input.name.clone()));
            }
            *slot = d;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Normalizer floor. Inputs whose true gradient vanishes (an attention key
/// bias, for one) are compared in absolute terms below it.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Max over coordinates of `|a − n|`, normalized by the largest gradient
/// magnitude of that input (at least [`SCALE_FLOOR`]).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(SCALE_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn compare(
    inputs: &[CheckInput],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    tol: f64,
) -> GradCheckReport {
    GradCheckReport {
        errors: inputs
            .iter()
            .zip(analytic.iter().zip(numeric))
            .map(|(i, (a, n))| (i.name.clone(), relative_error(a, n)))
            .collect(),
        tol,
    }
}

/// Compare reverse-mode gradients of `f` against central differences.
pub fn grad_check<Fun>(f: Fun, inputs: &[CheckInput], step: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, step)?;
    Ok(compare(inputs, &analytic, &numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let inputs = [CheckInput::new("x", &[1], vec![3.0])];
        let f = |g: &Graph<f64>, t: &[Tensor<f64>]| g.sum(&g.mul(&t[0], &t[0])?);
        let a = analytic_gradient(&f, &inputs).unwrap();
        let n = numeric_gradient(&f, &inputs, 1e-5).unwrap();
        assert_eq!(a[0][0], 6.0);
        assert!((a[0][0] - n[0][0]).abs() < 1e-10);
        assert!(grad_check(f, &inputs, 1e-5, 1e-10).unwrap().passed());
    }

    #[test]
    fn corrupted_gradient_is_rejected() {
        let inputs = [CheckInput::new("x", &[3], vec![0.3, -1.2, 2.0])];
        let f = |g: &Graph<f64>, t: &[Tensor<f64>]| {
            let y = g.gelu(&t[0])?;
            g.sum(&g.mul(&y, &y)?)
        };
        let mut a = analytic_gradient(&f, &inputs).unwrap();
        let n = numeric_gradient(&f, &inputs, 1e-5).unwrap();
        assert!(compare(&inputs, &a, &n, 1e-4).passed());
        a[0].iter_mut().for_each(|v| *v *= 1.01);
        let report = compare(&inputs, &a, &n, 1e-4);
        assert!(!report.passed());
        assert!(report.max_error() > 5e-3);
    }

    #[test]
    fn non_finite_names_the_input() {
        let inputs = [
            CheckInput::new("weights", &[1], vec![1.0]),
            CheckInput::new("bias", &[1], vec![2.0]),
        ];
        // Finite at the base point, infinite once `bias` is perturbed.
        let f = |g: &Graph<f64>, t: &[Tensor<f64>]| {
            let blowup = if t[1].data()[0] == 2.0 { 0.0 } else { f64::INFINITY };
            let c = Tensor::new(&[1], vec![blowup])?;
            g.sum(&g.add(&g.add(&t[0], &t[1])?, &c)?)
        };
        let err = grad_check(f, &inputs, 1e-5, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref name) if name == "bias"), "{err}");
    }
}
