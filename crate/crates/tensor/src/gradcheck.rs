//! Finite-difference verification of reverse-mode gradients, in `f64`.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a − b| / max(|a|, |b|, 1e-8)`.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    analytic.iter().zip(numeric).fold(
        GradCheckReport { max_relative_error: 0.0, max_absolute_error: 0.0 },
        |r, (&a, &b)| GradCheckReport {
            max_relative_error: r.max_relative_error.max(relative_error(a, b)),
            max_absolute_error: r.max_absolute_error.max((a - b).abs()),
        },
    )
}

fn check_step(h: f64) -> Result<()> {
    if (1e-4..=1e-2).contains(&h) {
        Ok(())
    } else {
        Err(TensorError::Config(format!("finite-difference step {h} outside [1e-4, 1e-2]")))
    }
}

/// Central differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h` at the given flat coordinates.
pub fn finite_difference(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    check_step(h)?;
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NumericDomain(format!("non-finite value probing coordinate {i}")));
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_step(h)?;
    let mut graph = Graph::new();
    let xv = graph.leaf(x.clone(), true);
    let y = f(&mut graph, xv)?;
    if !graph.value(y).all_finite() {
        return Err(TensorError::NumericDomain("grad_check: f(x) is not finite".into()));
    }
    graph.backward(y)?;
    let analytic = graph.grad(xv).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = finite_difference(eval, x, h, &coords)?;
    Ok(compare(&analytic, &numeric))
}
