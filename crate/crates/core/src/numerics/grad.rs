use alloc::format;
use alloc::vec::Vec;

use super::real::{math, Real};
use super::tape::{Tape, Var};
use crate::error::{invalid, Error, Result};

/// Flat parameter vector of one policy. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("parameter vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { what: "parameter" });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(alloc::vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self += scale * delta`; rejected (and `self` left untouched) if any
    /// updated entry would be non-finite.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.0.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries", self.0.len()),
                got: format!("{} entries", delta.len()),
            });
        }
        if self
            .0
            .iter()
            .zip(delta)
            .any(|(p, d)| !(p + scale * d).is_finite())
        {
            return Err(Error::NonFiniteValue {
                what: "parameter update",
            });
        }
        for (p, d) in self.0.iter_mut().zip(delta) {
            *p += scale * d;
        }
        Ok(())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.0.iter().map(|g| g * g).sum())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A scalar function of a flat parameter vector, written once over any
/// [`Real`] so it can be both taped and finite-differenced.
pub trait Differentiable {
    fn eval<S: Real>(&self, params: &[S]) -> Result<S>;
}

/// Like [`Differentiable`], also returning plain values computed in the same
/// forward pass (loss components, diagnostics).
pub trait DifferentiableWithAux {
    type Aux;
    fn eval_aux<S: Real>(&self, params: &[S]) -> Result<(S, Self::Aux)>;
}

struct NoAux<'a, F: ?Sized>(&'a F);

impl<F: Differentiable + ?Sized> DifferentiableWithAux for NoAux<'_, F> {
    type Aux = ();
    fn eval_aux<S: Real>(&self, params: &[S]) -> Result<(S, ())> {
        Ok((self.0.eval(params)?, ()))
    }
}

/// Exact reverse-mode gradient. Returns the loss value alongside.
pub fn grad<F: Differentiable + ?Sized>(loss_fn: &F, p: &ParamVector) -> Result<(f64, GradVector)> {
    let (v, g, ()) = grad_with_aux(&NoAux(loss_fn), p)?;
    Ok((v, g))
}

/// Exact reverse-mode gradient together with the auxiliary values.
pub fn grad_with_aux<F: DifferentiableWithAux + ?Sized>(
    loss_fn: &F,
    p: &ParamVector,
) -> Result<(f64, GradVector, F::Aux)> {
    let tape = Tape::new();
    let params: Vec<Var<'_>> = p.as_slice().iter().map(|&v| tape.var(v)).collect();
    let (out, aux) = loss_fn.eval_aux(&params)?;
    if !out.value().is_finite() {
        return Err(match tape.first_non_finite() {
            Some((node, op)) => Error::NonFinite { node, op },
            None => Error::NonFiniteValue { what: "loss" },
        });
    }
    let mut adj = tape.adjoints(out);
    adj.truncate(p.len());
    if adj.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteValue { what: "gradient" });
    }
    Ok((out.value(), GradVector(adj), aux))
}

/// Central-difference gradient estimate.
pub fn fd_grad<F>(loss_fn: F, p: &ParamVector, step: f64) -> Result<GradVector>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut x = p.as_slice().to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = loss_fn(&x)?;
        x[i] = orig - step;
        let minus = loss_fn(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteValue {
                what: "finite-difference evaluation",
            });
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(GradVector(out))
}

/// Five-point central-difference gradient estimate,
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. Its `O(h^4)` truncation
/// allows larger steps and so less cancellation than [`fd_grad`].
pub fn fd_grad5<F>(loss_fn: F, p: &ParamVector, step: f64) -> Result<GradVector>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut x = p.as_slice().to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let mut f = [0.0; 4];
        for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
            x[i] = orig + k * step;
            *slot = loss_fn(&x)?;
        }
        x[i] = orig;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                what: "finite-difference evaluation",
            });
        }
        out.push((-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * step));
    }
    Ok(GradVector(out))
}

pub fn fd_grad_of<F: Differentiable + ?Sized>(
    loss_fn: &F,
    p: &ParamVector,
    step: f64,
) -> Result<GradVector> {
    fd_grad(|x| loss_fn.eval::<f64>(x), p, step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    /// Largest `|a - b| / max(|a|, |b|, floor)` over coordinates.
    pub max_rel_err: f64,
    pub cosine: f64,
}

/// Compares two gradients coordinate-wise. `floor` keeps coordinates that
/// are zero in both from dominating the relative error.
pub fn compare_gradients(a: &GradVector, b: &GradVector, floor: f64) -> GradComparison {
    let mut max_rel_err: f64 = 0.0;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        let denom = x.abs().max(y.abs()).max(floor);
        max_rel_err = max_rel_err.max((x - y).abs() / denom);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let cosine = if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (math::sqrt(na) * math::sqrt(nb))
    };
    GradComparison {
        max_rel_err,
        cosine,
    }
}
