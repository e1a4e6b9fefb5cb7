//! Approximate solution of the trust-region subproblem
//!
//! ```text
//! min_p  gᵀp + ½ pᵀHp   s.t.  ‖p‖ ≤ Δ
//! ```
//!
//! by Steihaug's truncated conjugate gradient, and a diagonally
//! preconditioned variant that solves the same problem in the scaled
//! variable `p̂ = M^{1/2} p`.

use std::cell::RefCell;

use thiserror::Error;

/// A symmetric linear operator `v ↦ Hv`.
pub trait HessianOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

impl<T: HessianOperator + ?Sized> HessianOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        (**self).apply(v, out)
    }
}

/// Wraps a closure as a [`HessianOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> HessianOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        (self.f)(v, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative residual fell below the forcing tolerance.
    Residual,
    /// The step reached the trust-region boundary.
    Boundary,
    /// Nonpositive curvature along a search direction; the step was
    /// extended to the boundary along that direction.
    NegativeCurvature,
    MaxIterations,
}

impl Termination {
    pub fn hit_boundary(self) -> bool {
        matches!(self, Termination::Boundary | Termination::NegativeCurvature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrSubproblemResult {
    pub step: Vec<f64>,
    /// Operator applications performed.
    pub cg_iterations: usize,
    pub termination: Termination,
    /// `gᵀp + ½ pᵀHp` at the returned step.
    pub model_reduction: f64,
    /// Norm of the step in the norm the trust region is measured in
    /// (`‖M^{1/2} p‖` for the preconditioned solver).
    pub step_norm: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubproblemError {
    #[error("invalid argument: {0}")]
    Argument(String),
    /// `partial` holds the last finite iterate.
    #[error("non-finite value in CG iteration {iteration}")]
    NonFinite {
        iteration: usize,
        partial: Box<TrSubproblemResult>,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// The `τ > 0` with `‖p + τd‖ = Δ`, for `‖p‖ < Δ` and `d ≠ 0`.
pub fn boundary_tau(p: &[f64], d: &[f64], delta: f64) -> Result<f64, SubproblemError> {
    if p.len() != d.len() {
        return Err(SubproblemError::Argument("p and d differ in length".into()));
    }
    let pp = dot(p, p);
    let p_norm = pp.sqrt();
    if !(p_norm < delta) {
        return Err(SubproblemError::Argument(format!(
            "‖p‖ = {p_norm} is not inside the radius {delta}"
        )));
    }
    let dd = dot(d, d);
    if dd == 0.0 {
        return Err(SubproblemError::Argument("direction is zero".into()));
    }
    let pd = dot(p, d);
    let gap = (delta - p_norm) * (delta + p_norm);
    let rad = pd.mul_add(pd, dd * gap).sqrt();
    // pick the form that adds quantities of the same sign
    let tau = if pd >= 0.0 { gap / (pd + rad) } else { (rad - pd) / dd };
    Ok(tau)
}

fn check_args(dim: usize, g: &[f64], delta: f64, forcing: f64, max_iters: usize) -> Result<(), SubproblemError> {
    if g.len() != dim {
        return Err(SubproblemError::Argument(format!(
            "gradient has length {}, operator dimension is {dim}",
            g.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(SubproblemError::Argument(format!("radius {delta} must be > 0")));
    }
    if !(forcing > 0.0 && forcing < 1.0) {
        return Err(SubproblemError::Argument(format!("forcing {forcing} must lie in (0, 1)")));
    }
    if max_iters == 0 {
        return Err(SubproblemError::Argument("max_iters must be >= 1".into()));
    }
    if !g.iter().all(|x| x.is_finite()) {
        return Err(SubproblemError::NonFinite {
            iteration: 0,
            partial: Box::new(finish(vec![0.0; dim], &vec![0.0; dim], g, 0, Termination::Residual)),
        });
    }
    Ok(())
}

fn finish(p: Vec<f64>, r: &[f64], g: &[f64], iterations: usize, termination: Termination) -> TrSubproblemResult {
    // r = -g - Hp, so m(p) = gᵀp + ½pᵀHp = ½(gᵀp - pᵀr)
    let model_reduction = 0.5 * (dot(g, &p) - dot(&p, r));
    let step_norm = dot(&p, &p).sqrt();
    TrSubproblemResult {
        step: p,
        cg_iterations: iterations,
        termination,
        model_reduction,
        step_norm,
    }
}

/// Steihaug truncated CG. `delta` may be `f64::INFINITY` for an
/// unconstrained inexact Newton solve.
pub fn steihaug_cg<O: HessianOperator + ?Sized>(
    op: &O,
    g: &[f64],
    delta: f64,
    forcing: f64,
    max_iters: usize,
) -> Result<TrSubproblemResult, SubproblemError> {
    steihaug_cg_observed(op, g, delta, forcing, max_iters, |_| {})
}

/// [`steihaug_cg`] that reports every interior iterate `p_j` to `observe`.
pub fn steihaug_cg_observed<O: HessianOperator + ?Sized>(
    op: &O,
    g: &[f64],
    delta: f64,
    forcing: f64,
    max_iters: usize,
    mut observe: impl FnMut(&[f64]),
) -> Result<TrSubproblemResult, SubproblemError> {
    let n = op.dim();
    check_args(n, g, delta, forcing, max_iters)?;

    let mut p = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|x| -x).collect();
    let g_norm = dot(g, g).sqrt();
    if g_norm == 0.0 {
        return Ok(finish(p, &r, g, 0, Termination::Residual));
    }
    let tol = forcing * g_norm;
    let mut d = r.clone();
    let mut v = vec![0.0; n];
    let mut rr = dot(&r, &r);

    for j in 1..=max_iters {
        if rr.sqrt() < tol {
            return Ok(finish(p, &r, g, j - 1, Termination::Residual));
        }
        op.apply(&d, &mut v);
        let curvature = dot(&d, &v);
        if !curvature.is_finite() {
            return Err(SubproblemError::NonFinite {
                iteration: j,
                partial: Box::new(finish(p, &r, g, j - 1, Termination::MaxIterations)),
            });
        }
        if curvature <= 0.0 {
            if delta.is_finite() {
                let tau = boundary_tau(&p, &d, delta)?;
                axpy(tau, &d, &mut p);
                axpy(-tau, &v, &mut r);
            } else if j == 1 {
                // no radius to move to: fall back to the steepest-descent direction
                axpy(1.0, &d, &mut p);
                axpy(-1.0, &v, &mut r);
            }
            return Ok(finish(p, &r, g, j, Termination::NegativeCurvature));
        }
        let alpha = rr / curvature;
        if !alpha.is_finite() {
            return Err(SubproblemError::NonFinite {
                iteration: j,
                partial: Box::new(finish(p, &r, g, j - 1, Termination::MaxIterations)),
            });
        }
        let next_norm_sq: f64 = p.iter().zip(&d).map(|(pi, di)| (pi + alpha * di).powi(2)).sum();
        if next_norm_sq.sqrt() >= delta {
            let tau = boundary_tau(&p, &d, delta)?;
            axpy(tau, &d, &mut p);
            axpy(-tau, &v, &mut r);
            return Ok(finish(p, &r, g, j, Termination::Boundary));
        }
        axpy(alpha, &d, &mut p);
        axpy(-alpha, &v, &mut r);
        observe(&p);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        rr = rr_next;
    }
    let termination = if rr.sqrt() < tol {
        Termination::Residual
    } else {
        Termination::MaxIterations
    };
    Ok(finish(p, &r, g, max_iters, termination))
}

/// Diagonal preconditioner `M = α·diag(H) + (1 − α)·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    diagonal: Vec<f64>,
    alpha: f64,
}

/// Smallest diagonal entry kept, so that `M` stays positive definite.
pub const PRECONDITIONER_FLOOR: f64 = 1e-12;

impl Preconditioner {
    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

pub fn build_preconditioner(hdiag: &[f64], alpha: f64) -> Result<Preconditioner, SubproblemError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SubproblemError::Argument(format!("alpha {alpha} must lie in [0, 1]")));
    }
    if let Some(bad) = hdiag.iter().find(|h| !(**h >= 0.0) || !h.is_finite()) {
        return Err(SubproblemError::Argument(format!(
            "Hessian diagonal entry {bad} is not a finite nonnegative number"
        )));
    }
    let diagonal = hdiag
        .iter()
        .map(|h| (alpha * h + (1.0 - alpha)).max(PRECONDITIONER_FLOOR))
        .collect();
    Ok(Preconditioner { diagonal, alpha })
}

/// `L⁻¹ H L⁻ᵀ` for `L = diag(√M)`.
struct Scaled<'a, O: ?Sized> {
    inner: &'a O,
    inv_sqrt: &'a [f64],
    scratch: RefCell<Vec<f64>>,
}

impl<O: HessianOperator + ?Sized> HessianOperator for Scaled<'_, O> {
    fn dim(&self) -> usize {
        self.inv_sqrt.len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let mut tmp = self.scratch.borrow_mut();
        for ((t, vi), s) in tmp.iter_mut().zip(v).zip(self.inv_sqrt) {
            *t = vi * s;
        }
        self.inner.apply(&tmp, out);
        for (o, s) in out.iter_mut().zip(self.inv_sqrt) {
            *o *= s;
        }
    }
}

/// Preconditioned Steihaug CG. Runs [`steihaug_cg`] on the scaled problem
/// with gradient `L⁻¹g` and radius constraint `‖Lᵀp‖ ≤ Δ`, then maps the
/// step back. The residual test compares against `forcing·‖L⁻¹g‖`.
pub fn steihaug_pcg<O: HessianOperator + ?Sized>(
    op: &O,
    g: &[f64],
    delta: f64,
    forcing: f64,
    max_iters: usize,
    precond: &Preconditioner,
) -> Result<TrSubproblemResult, SubproblemError> {
    if precond.diagonal.len() != op.dim() {
        return Err(SubproblemError::Argument(format!(
            "preconditioner has dimension {}, operator {}",
            precond.diagonal.len(),
            op.dim()
        )));
    }
    let inv_sqrt: Vec<f64> = precond.diagonal.iter().map(|m| 1.0 / m.sqrt()).collect();
    let g_hat: Vec<f64> = g.iter().zip(&inv_sqrt).map(|(gi, s)| gi * s).collect();
    let scaled = Scaled {
        inner: op,
        inv_sqrt: &inv_sqrt,
        scratch: RefCell::new(vec![0.0; inv_sqrt.len()]),
    };
    let unscale = |mut res: TrSubproblemResult| {
        for (p, s) in res.step.iter_mut().zip(&inv_sqrt) {
            *p *= s;
        }
        res
    };
    match steihaug_cg(&scaled, &g_hat, delta, forcing, max_iters) {
        Ok(res) => Ok(unscale(res)),
        Err(SubproblemError::NonFinite { iteration, partial }) => Err(SubproblemError::NonFinite {
            iteration,
            partial: Box::new(unscale(*partial)),
        }),
        Err(e) => Err(e),
    }
}
