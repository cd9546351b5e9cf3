//! Differentiation engine.
//!
//! [`Tape`] records array operations; the free functions here wrap the
//! common single-input cases where the input is one row vector.

mod tape;

pub use tape::{Gradients, NodeArrays, Tangents, Tape, Var};

use ndarray::Array2;

use crate::error::{check_dim, Error, Result};

fn row_seed(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn flatten(a: Array2<f64>) -> Vec<f64> {
    a.into_iter().collect()
}

/// Gradient of a scalar-valued function at `x`.
pub fn grad<F>(f: F, x: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let xv = tape.row(x);
    let out = f(&mut tape, xv);
    let g = tape.backward(out)?;
    Ok(flatten(g.get_or_zeros(xv, (1, x.len()))))
}

/// Jacobian-vector product `(∂F/∂x)·v`, flattened row-major.
pub fn jvp<F>(f: F, x: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    check_dim(x.len(), v.len())?;
    let mut tape = Tape::new();
    let xv = tape.row(x);
    let out = f(&mut tape, xv);
    let t = tape.tangents(&[(xv, row_seed(v))]);
    let shape = tape.value(out).dim();
    Ok(flatten(t.get_or_zeros(out, shape)))
}

/// Hessian-vector product `(∇²f)·v` by forward-over-reverse.
pub fn hvp<F>(f: F, x: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    check_dim(x.len(), v.len())?;
    let mut tape = Tape::new();
    let xv = tape.row(x);
    let out = f(&mut tape, xv);
    let t = tape.tangents(&[(xv, row_seed(v))]);
    let (_, gd) = tape.backward_with_tangents(out, &t)?;
    Ok(flatten(gd.get_or_zeros(xv, (1, x.len()))))
}

/// Central finite-difference gradient; used as an independent check.
pub fn finite_difference_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::out_of_range("finite-difference step", h, "(0, inf)"));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}
