#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use stron::dataio::{IndexSubset, SparseDataset};
use stron::loss::LossKind;

/// Small random problem with a dense copy of the data.
pub struct Instance {
    pub data: SparseDataset,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: Vec<f64>,
    pub lambda: f64,
}

pub fn random_instance<R: Rng>(rng: &mut R, max_points: usize, max_features: usize) -> Instance {
    let n = rng.random_range(2..=max_points);
    let d = rng.random_range(1..=max_features);
    let mut rows = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let mut row = Vec::new();
        for j in 0..d {
            if rng.random_bool(0.6) {
                let v = rng.random_range(-2.0..2.0);
                row.push((j as u32, v));
                x[(i, j)] = v;
            }
        }
        rows.push(row);
    }
    let mut labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    labels[0] = 1.0;
    labels[1] = -1.0;
    let y = DVector::from_column_slice(&labels);
    let data = SparseDataset::from_rows(rows, labels, d).unwrap();
    let w = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let lambda = 10f64.powf(rng.random_range(-4.0..0.0));
    Instance { data, x, y, w, lambda }
}

/// Smallest `|1 − y_i wᵀx_i|` over the points.
pub fn margin_gap(inst: &Instance, w: &[f64]) -> f64 {
    let z = &inst.x * DVector::from_column_slice(w);
    (0..inst.y.len())
        .map(|i| (1.0 - inst.y[i] * z[i]).abs())
        .fold(f64::INFINITY, f64::min)
}

fn rows_of(subset: &IndexSubset) -> Vec<usize> {
    subset.iter().collect()
}

/// Dense evaluation of `(1/|S|) Σ ℓ(y wᵀx) + λ/2 ‖w‖²`.
pub fn dense_value(kind: LossKind, inst: &Instance, w: &[f64], subset: &IndexSubset) -> f64 {
    let wv = DVector::from_column_slice(w);
    let rows = rows_of(subset);
    let sum: f64 = rows
        .iter()
        .map(|&i| {
            let z = inst.y[i] * inst.x.row(i).dot(&wv.transpose());
            match kind {
                LossKind::Logistic => (1.0 + (-z).exp()).ln(),
                LossKind::SquaredHinge => (1.0 - z).max(0.0).powi(2),
            }
        })
        .sum();
    sum / rows.len() as f64 + 0.5 * inst.lambda * wv.norm_squared()
}

pub fn dense_gradient(kind: LossKind, inst: &Instance, w: &[f64], subset: &IndexSubset) -> DVector<f64> {
    let wv = DVector::from_column_slice(w);
    let rows = rows_of(subset);
    let mut g = DVector::zeros(w.len());
    for &i in &rows {
        let xi = inst.x.row(i).transpose();
        let z = inst.y[i] * xi.dot(&wv);
        let slope = match kind {
            LossKind::Logistic => -1.0 / (1.0 + z.exp()),
            LossKind::SquaredHinge => -2.0 * (1.0 - z).max(0.0),
        };
        g += xi * (slope * inst.y[i]);
    }
    g / rows.len() as f64 + wv * inst.lambda
}

/// `(1/|S|) Xᵀ D X + λI` assembled densely.
pub fn dense_hessian(kind: LossKind, inst: &Instance, w: &[f64], subset: &IndexSubset) -> DMatrix<f64> {
    let wv = DVector::from_column_slice(w);
    let rows = rows_of(subset);
    let d = w.len();
    let mut h = DMatrix::zeros(d, d);
    for &i in &rows {
        let xi = inst.x.row(i).transpose();
        let z = inst.y[i] * xi.dot(&wv);
        let c = match kind {
            LossKind::Logistic => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            LossKind::SquaredHinge => {
                if 1.0 - z > 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
        };
        h += &xi * xi.transpose() * c;
    }
    h / rows.len() as f64 + DMatrix::identity(d, d) * inst.lambda
}

pub fn random_subset<R: Rng>(rng: &mut R, n: usize) -> IndexSubset {
    if rng.random_bool(0.3) {
        return IndexSubset::full(n);
    }
    let mut idx: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    if idx.is_empty() {
        idx.push(rng.random_range(0..n));
    }
    IndexSubset::explicit(idx, n).unwrap()
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Random SPD matrix `Q diag(eig) Qᵀ` with eigenvalues in `[lo, hi]`.
pub fn random_spd<R: Rng>(rng: &mut R, dim: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let eig = DVector::from_fn(dim, |_, _| rng.random_range(lo..hi));
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

pub fn random_vector<R: Rng>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

/// `m(p) = gᵀp + ½ pᵀAp`.
pub fn model_value(a: &DMatrix<f64>, g: &DVector<f64>, p: &DVector<f64>) -> f64 {
    g.dot(p) + 0.5 * p.dot(&(a * p))
}

/// Minimizer of the model along `−g` inside the ball.
pub fn cauchy_point(a: &DMatrix<f64>, g: &DVector<f64>, delta: f64) -> DVector<f64> {
    let gn = g.norm();
    let curv = g.dot(&(a * g));
    let tau = if curv <= 0.0 {
        1.0
    } else {
        (gn.powi(3) / (delta * curv)).min(1.0)
    };
    g * (-tau * delta / gn)
}

pub struct DerivativeErrors {
    /// Analytic gradient vs central differences of the value.
    pub gradient_fd: f64,
    /// Analytic gradient vs the dense oracle.
    pub gradient_dense: f64,
    /// `hess_vec` vs central differences of the gradient.
    pub hv_fd: f64,
    /// `hess_vec` vs the dense Hessian times `v`.
    pub hv_dense: f64,
}

/// Returns `None` for a squared-hinge instance too close to a kink.
pub fn derivative_errors<R: Rng>(rng: &mut R, kind: LossKind) -> Option<DerivativeErrors> {
    use stron::loss::LossModel;
    let inst = random_instance(rng, 20, 10);
    if kind == LossKind::SquaredHinge && margin_gap(&inst, &inst.w) <= 1e-3 {
        return None;
    }
    let subset = IndexSubset::full(inst.data.n_points());
    let model = LossModel::new(kind, inst.lambda, &inst.data).unwrap();
    let d = inst.w.len();
    let g = DVector::from_vec(model.gradient(&inst.w, &subset).unwrap());
    // step small enough that no squared-hinge point crosses its kink
    let h = 1e-6;
    let shifted = |dir: &[f64], t: f64| -> Vec<f64> { inst.w.iter().zip(dir).map(|(w, e)| w + t * e).collect() };
    let mut g_fd = DVector::zeros(d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let fp = model.value(&shifted(&e, h), &subset).unwrap();
        let fm = model.value(&shifted(&e, -h), &subset).unwrap();
        g_fd[j] = (fp - fm) / (2.0 * h);
    }
    let v = random_vector(rng, d);
    let hv = DVector::from_vec(model.hess_vec(&inst.w, &subset, v.as_slice()).unwrap());
    let gp = DVector::from_vec(model.gradient(&shifted(v.as_slice(), h), &subset).unwrap());
    let gm = DVector::from_vec(model.gradient(&shifted(v.as_slice(), -h), &subset).unwrap());
    let hv_fd = (gp - gm) / (2.0 * h);
    let dense_hv = dense_hessian(kind, &inst, &inst.w, &subset) * &v;
    Some(DerivativeErrors {
        gradient_fd: rel_err(&g, &g_fd),
        gradient_dense: rel_err(&g, &dense_gradient(kind, &inst, &inst.w, &subset)),
        hv_fd: rel_err(&hv, &hv_fd),
        hv_dense: rel_err(&hv, &dense_hv),
    })
}

pub struct SubproblemCase {
    pub a: DMatrix<f64>,
    pub g: DVector<f64>,
}

impl SubproblemCase {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let dim = rng.random_range(1..=50);
        let a = random_spd(rng, dim, 1.0, 10.0);
        let g = random_vector(rng, dim);
        Self { a, g }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn operator(&self) -> stron::subproblem::FnOperator<impl Fn(&[f64], &mut [f64]) + '_> {
        stron::subproblem::FnOperator::new(self.dim(), |v: &[f64], out: &mut [f64]| {
            let r = &self.a * DVector::from_column_slice(v);
            out.copy_from_slice(r.as_slice());
        })
    }

    pub fn newton_step(&self) -> DVector<f64> {
        -self.a.clone().cholesky().unwrap().solve(&self.g)
    }
}
