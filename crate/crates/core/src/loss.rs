//! l2-regularized logistic regression and squared-hinge SVM objectives.
//!
//! Every quantity is an average over an [`IndexSubset`] plus the full
//! regularizer `λ/2 ‖w‖²`. Hessians are never formed: [`SampledQuadratic`]
//! caches per-point curvature weights at `w` and applies `H v` in one pass
//! over the nonzeros of the subset.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dataio::{IndexSubset, SparseDataset};
use crate::subproblem::HessianOperator;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("subset is empty")]
    EmptySubset,
    #[error("vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("subset index {index} out of range for {n_points} points")]
    SubsetRange { index: usize, n_points: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("lambda must be finite and >= 0, got {0}")]
    Lambda(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Logistic,
    /// `max(0, 1 - y wᵀx)²`, the l2-SVM loss.
    SquaredHinge,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Logistic => "logistic",
            LossKind::SquaredHinge => "svm",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logistic" | "lr" => Ok(LossKind::Logistic),
            "svm" | "l2svm" | "squared-hinge" => Ok(LossKind::SquaredHinge),
            _ => Err(format!("unknown loss {s:?} (expected logistic or svm)")),
        }
    }
}

/// A second-order model of an objective at one iterate over one subset.
pub trait LocalModel: HessianOperator {
    /// `F_S(w)`
    fn value(&self) -> f64;
    /// `∇F_S(w)`
    fn gradient(&self) -> &[f64];
    /// Diagonal of the (generalized) Hessian used by `apply`.
    fn hess_diag(&self) -> Vec<f64>;
    /// `F_S(w + step) - F_S(w)` on the same subset, evaluated without
    /// cancellation between the two function values.
    fn reduction(&self, step: &[f64]) -> Result<f64, LossError>;
    /// Hessian-vector products applied so far.
    fn hv_products(&self) -> usize;
    /// Data rows visited by those products.
    fn rows_touched(&self) -> usize;
}

/// A finite-sum objective that can be evaluated on subsets of its points.
pub trait Objective: Sync {
    type Local<'a>: LocalModel
    where
        Self: 'a;

    fn n_points(&self) -> usize;
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64], subset: &IndexSubset) -> Result<f64, LossError>;
    fn gradient(&self, w: &[f64], subset: &IndexSubset) -> Result<Vec<f64>, LossError>;
    fn local_model<'a>(
        &'a self,
        w: &[f64],
        subset: &IndexSubset,
    ) -> Result<Self::Local<'a>, LossError>;
}

#[derive(Debug, Clone, Copy)]
pub struct LossModel<'d> {
    kind: LossKind,
    lambda: f64,
    data: &'d SparseDataset,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `1 / (1 + e^{-x})` without overflow.
#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'d> LossModel<'d> {
    pub fn new(kind: LossKind, lambda: f64, data: &'d SparseDataset) -> Result<Self, LossError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(LossError::Lambda(lambda));
        }
        Ok(Self { kind, lambda, data })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn data(&self) -> &'d SparseDataset {
        self.data
    }

    fn check(&self, w: &[f64], subset: &IndexSubset) -> Result<(), LossError> {
        if w.len() != self.data.n_features() {
            return Err(LossError::Dimension {
                expected: self.data.n_features(),
                got: w.len(),
            });
        }
        if subset.is_empty() {
            return Err(LossError::EmptySubset);
        }
        let n = self.data.n_points();
        match subset {
            IndexSubset::Full(m) if *m != n => Err(LossError::SubsetRange {
                index: *m - 1,
                n_points: n,
            }),
            IndexSubset::Explicit(v) => match v.iter().find(|&&i| i >= n) {
                Some(&index) => Err(LossError::SubsetRange { index, n_points: n }),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    #[inline]
    fn margin(&self, w: &[f64], i: usize) -> f64 {
        self.data.label(i) * self.data.row(i).dot(w)
    }

    #[inline]
    fn point_loss(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => softplus(-z),
            LossKind::SquaredHinge => {
                let u = 1.0 - z;
                if u > 0.0 {
                    u * u
                } else {
                    0.0
                }
            }
        }
    }

    /// d loss / d z at margin z.
    #[inline]
    fn point_slope(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => -sigmoid(-z),
            LossKind::SquaredHinge => {
                let u = 1.0 - z;
                if u > 0.0 {
                    -2.0 * u
                } else {
                    0.0
                }
            }
        }
    }

    /// Generalized second derivative in z; zero outside the strict SVM
    /// active set.
    #[inline]
    fn point_curvature(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => sigmoid(z) * sigmoid(-z),
            LossKind::SquaredHinge => {
                if 1.0 - z > 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `loss(z + delta) - loss(z)` computed without subtracting two
    /// nearly equal values.
    #[inline]
    fn point_reduction(&self, z: f64, delta: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => {
                let e = (-delta).exp_m1();
                if e.is_finite() {
                    (sigmoid(-z) * e).ln_1p()
                } else {
                    softplus(-z - delta) - softplus(-z)
                }
            }
            LossKind::SquaredHinge => {
                let u = 1.0 - z;
                let v = u - delta;
                match (u > 0.0, v > 0.0) {
                    (true, true) => delta * (delta - 2.0 * u),
                    (true, false) => -u * u,
                    (false, true) => v * v,
                    (false, false) => 0.0,
                }
            }
        }
    }

    fn regularizer(&self, w: &[f64]) -> f64 {
        0.5 * self.lambda * dot(w, w)
    }

    /// `F_S(w)`.
    pub fn value(&self, w: &[f64], subset: &IndexSubset) -> Result<f64, LossError> {
        self.check(w, subset)?;
        let sum: f64 = subset.iter().map(|i| self.point_loss(self.margin(w, i))).sum();
        let f = sum / subset.len() as f64 + self.regularizer(w);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(LossError::NonFinite("function value"))
        }
    }

    /// `∇F_S(w)`.
    pub fn gradient(&self, w: &[f64], subset: &IndexSubset) -> Result<Vec<f64>, LossError> {
        self.check(w, subset)?;
        let mut g = vec![0.0; w.len()];
        for i in subset.iter() {
            let s = self.point_slope(self.margin(w, i));
            if s != 0.0 {
                self.data.row(i).axpy(s * self.data.label(i), &mut g);
            }
        }
        finish_average(&mut g, subset.len(), self.lambda, w);
        if g.iter().all(|x| x.is_finite()) {
            Ok(g)
        } else {
            Err(LossError::NonFinite("gradient"))
        }
    }

    /// `∇²F_S(w) v`.
    pub fn hess_vec(&self, w: &[f64], subset: &IndexSubset, v: &[f64]) -> Result<Vec<f64>, LossError> {
        if v.len() != w.len() {
            return Err(LossError::Dimension {
                expected: w.len(),
                got: v.len(),
            });
        }
        let local = self.sample(w, subset)?;
        let mut out = vec![0.0; v.len()];
        local.apply(v, &mut out);
        if out.iter().all(|x| x.is_finite()) {
            Ok(out)
        } else {
            Err(LossError::NonFinite("Hessian-vector product"))
        }
    }

    /// Diagonal of `∇²F_S(w)`.
    pub fn hess_diag(&self, w: &[f64], subset: &IndexSubset) -> Result<Vec<f64>, LossError> {
        Ok(self.sample(w, subset)?.hess_diag())
    }

    /// Evaluates value, gradient and curvature weights at `w` in one pass.
    pub fn sample(&self, w: &[f64], subset: &IndexSubset) -> Result<SampledQuadratic<'_, 'd>, LossError> {
        self.check(w, subset)?;
        let len = subset.len();
        let mut margins = Vec::with_capacity(len);
        let mut curved = Vec::new();
        let mut g = vec![0.0; w.len()];
        let mut loss_sum = 0.0;
        for i in subset.iter() {
            let z = self.margin(w, i);
            loss_sum += self.point_loss(z);
            let s = self.point_slope(z);
            if s != 0.0 {
                self.data.row(i).axpy(s * self.data.label(i), &mut g);
            }
            let c = self.point_curvature(z);
            if c != 0.0 {
                curved.push((i, c));
            }
            margins.push(z);
        }
        finish_average(&mut g, len, self.lambda, w);
        let value = loss_sum / len as f64 + self.regularizer(w);
        if !value.is_finite() {
            return Err(LossError::NonFinite("function value"));
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(LossError::NonFinite("gradient"));
        }
        Ok(SampledQuadratic {
            model: self,
            subset: subset.clone(),
            w: w.to_vec(),
            margins,
            curved,
            value,
            gradient: g,
            hv_products: Cell::new(0),
            rows_touched: Cell::new(0),
        })
    }
}

/// `g ← g / len + λ w`
fn finish_average(g: &mut [f64], len: usize, lambda: f64, w: &[f64]) {
    let inv = 1.0 / len as f64;
    for (gj, wj) in g.iter_mut().zip(w) {
        *gj = *gj * inv + lambda * wj;
    }
}

impl Objective for LossModel<'_> {
    type Local<'a>
        = SampledQuadratic<'a, 'a>
    where
        Self: 'a;

    fn n_points(&self) -> usize {
        self.data.n_points()
    }

    fn dim(&self) -> usize {
        self.data.n_features()
    }

    fn value(&self, w: &[f64], subset: &IndexSubset) -> Result<f64, LossError> {
        LossModel::value(self, w, subset)
    }

    fn gradient(&self, w: &[f64], subset: &IndexSubset) -> Result<Vec<f64>, LossError> {
        LossModel::gradient(self, w, subset)
    }

    fn local_model<'a>(&'a self, w: &[f64], subset: &IndexSubset) -> Result<Self::Local<'a>, LossError> {
        self.sample(w, subset)
    }
}

/// Value, gradient and Hessian operator of a [`LossModel`] at a fixed `w`
/// over a fixed subset.
#[derive(Debug)]
pub struct SampledQuadratic<'m, 'd> {
    model: &'m LossModel<'d>,
    subset: IndexSubset,
    w: Vec<f64>,
    /// `y_i wᵀx_i` in subset order.
    margins: Vec<f64>,
    /// Points with nonzero curvature weight.
    curved: Vec<(usize, f64)>,
    value: f64,
    gradient: Vec<f64>,
    hv_products: Cell<usize>,
    rows_touched: Cell<usize>,
}

impl SampledQuadratic<'_, '_> {
    pub fn subset(&self) -> &IndexSubset {
        &self.subset
    }

    /// Row indices that `apply` visits.
    pub fn curved_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.curved.iter().map(|&(i, _)| i)
    }
}

impl HessianOperator for SampledQuadratic<'_, '_> {
    fn dim(&self) -> usize {
        self.w.len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let data = self.model.data;
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(i, c) in &self.curved {
            let row = data.row(i);
            let xv = row.dot(v);
            if xv != 0.0 {
                row.axpy(c * xv, out);
            }
        }
        let inv = 1.0 / self.subset.len() as f64;
        let lambda = self.model.lambda;
        for (o, vj) in out.iter_mut().zip(v) {
            *o = *o * inv + lambda * vj;
        }
        self.hv_products.set(self.hv_products.get() + 1);
        self.rows_touched.set(self.rows_touched.get() + self.curved.len());
    }
}

impl LocalModel for SampledQuadratic<'_, '_> {
    fn value(&self) -> f64 {
        self.value
    }

    fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    fn hess_diag(&self) -> Vec<f64> {
        let data = self.model.data;
        let mut d = vec![0.0; self.w.len()];
        for &(i, c) in &self.curved {
            let row = data.row(i);
            for (&j, &x) in row.indices.iter().zip(row.values) {
                d[j as usize] += c * x * x;
            }
        }
        let inv = 1.0 / self.subset.len() as f64;
        let lambda = self.model.lambda;
        d.iter_mut().for_each(|x| *x = *x * inv + lambda);
        d
    }

    fn reduction(&self, step: &[f64]) -> Result<f64, LossError> {
        if step.len() != self.w.len() {
            return Err(LossError::Dimension {
                expected: self.w.len(),
                got: step.len(),
            });
        }
        let model = self.model;
        let data = model.data;
        let sum: f64 = self
            .subset
            .iter()
            .zip(&self.margins)
            .map(|(i, &z)| {
                let delta = data.label(i) * data.row(i).dot(step);
                model.point_reduction(z, delta)
            })
            .sum();
        let reg = model.lambda * (dot(&self.w, step) + 0.5 * dot(step, step));
        let red = sum / self.subset.len() as f64 + reg;
        if red.is_finite() {
            Ok(red)
        } else {
            Err(LossError::NonFinite("function reduction"))
        }
    }

    fn hv_products(&self) -> usize {
        self.hv_products.get()
    }

    fn rows_touched(&self) -> usize {
        self.rows_touched.get()
    }
}
