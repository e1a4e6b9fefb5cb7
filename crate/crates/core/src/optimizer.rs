//! Trust-region inexact Newton drivers.
//!
//! [`run_tron`] is the full-batch method. [`run_stron`] draws a growing
//! subsample each outer iteration and uses it for the gradient, the
//! Hessian-vector products and the reduction ratio. [`run_stron_svrg`]
//! replaces the subsampled gradient by an SVRG estimate anchored at a
//! periodically refreshed full gradient. [`run_newton_cg`] is a line-search
//! baseline sharing the same subsampling.
//!
//! All drivers record one [`TraceRow`] per outer iteration. The cost column
//! `effective_data_passes` counts points visited by function/gradient
//! evaluations (gradient, ratio or line-search evaluations, and SVRG
//! anchors) divided by the number of points. Monitoring (the full objective
//! and test accuracy in each row) is neither counted nor timed.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{draw_subsample, DataError, IndexSubset};
use crate::loss::{LocalModel, LossError, Objective};
use crate::subproblem::{build_preconditioner, steihaug_cg, steihaug_pcg, SubproblemError, TrSubproblemResult};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Loss {
        iteration: usize,
        #[source]
        source: LossError,
    },
    #[error("iteration {iteration}: {source}")]
    Subproblem {
        iteration: usize,
        #[source]
        source: SubproblemError,
    },
    #[error("iteration {iteration}: {source}")]
    Sampling {
        iteration: usize,
        #[source]
        source: DataError,
    },
}

fn at<E>(iteration: usize, wrap: impl FnOnce(usize, E) -> OptimError) -> impl FnOnce(E) -> OptimError {
    move |e| wrap(iteration, e)
}

fn loss_err(iteration: usize, source: LossError) -> OptimError {
    OptimError::Loss { iteration, source }
}

fn sub_err(iteration: usize, source: SubproblemError) -> OptimError {
    OptimError::Subproblem { iteration, source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionConfig {
    /// Acceptance threshold on the reduction ratio.
    pub eta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Initial radius; `None` uses the norm of the first gradient.
    pub delta0: Option<f64>,
    /// CG relative-residual tolerance.
    pub forcing: f64,
    pub max_cg: usize,
    /// Stop once `‖g_k‖ ≤ epsilon·‖g_0‖`.
    pub epsilon: f64,
    pub max_outer: usize,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            eta0: 1e-4,
            eta1: 0.25,
            eta2: 0.75,
            gamma1: 0.25,
            gamma2: 0.5,
            gamma3: 4.0,
            delta0: None,
            forcing: 0.1,
            max_cg: 25,
            epsilon: 1e-2,
            max_outer: 200,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(self.eta0 > 0.0) {
            return bad(format!("eta0 = {} must be > 0", self.eta0));
        }
        if !(0.0 < self.eta1 && self.eta1 < self.eta2 && self.eta2 <= 1.0) {
            return bad(format!(
                "need 0 < eta1 < eta2 <= 1, got eta1 = {}, eta2 = {}",
                self.eta1, self.eta2
            ));
        }
        if !(0.0 < self.gamma1 && self.gamma1 < self.gamma2 && self.gamma2 < 1.0 && 1.0 < self.gamma3) {
            return bad(format!(
                "need 0 < gamma1 < gamma2 < 1 < gamma3, got {}, {}, {}",
                self.gamma1, self.gamma2, self.gamma3
            ));
        }
        if let Some(d) = self.delta0 {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("delta0 = {d} must be finite and > 0"));
            }
        }
        if !(self.forcing > 0.0 && self.forcing < 1.0) {
            return bad(format!("forcing = {} must lie in (0, 1)", self.forcing));
        }
        if self.max_cg == 0 {
            return bad("max_cg must be >= 1".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon = {} must be >= 0", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    Linear,
    Exponential,
}

impl fmt::Display for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Growth::Linear => "linear",
            Growth::Exponential => "exp",
        })
    }
}

impl FromStr for Growth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Growth::Linear),
            "exp" | "exponential" => Ok(Growth::Exponential),
            other => Err(format!("unknown growth '{other}', expected linear or exp")),
        }
    }
}

/// Subsample sizes growing from `initial_fraction·n` to `n`.
///
/// `Linear` grows the size linearly in the data consumed so far, reaching
/// `n` once the schedule has consumed `epochs_to_full·n` points.
/// `Exponential` multiplies the size by `r = 1 + (1 − f₀)/epochs_to_full`
/// each iteration, the ratio for which the geometric series of sizes sums
/// to `epochs_to_full·n` when the size reaches `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsampleSchedule {
    pub initial_fraction: f64,
    pub growth: Growth,
    pub epochs_to_full: f64,
}

impl Default for SubsampleSchedule {
    fn default() -> Self {
        Self {
            initial_fraction: 0.01,
            growth: Growth::Linear,
            epochs_to_full: 5.0,
        }
    }
}

impl SubsampleSchedule {
    pub fn full() -> Self {
        Self {
            initial_fraction: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.initial_fraction > 0.0 && self.initial_fraction <= 1.0) {
            return Err(OptimError::Config(format!(
                "initial fraction {} must lie in (0, 1]",
                self.initial_fraction
            )));
        }
        if !(self.epochs_to_full > 0.0 && self.epochs_to_full.is_finite()) {
            return Err(OptimError::Config(format!(
                "epochs_to_full {} must be finite and > 0",
                self.epochs_to_full
            )));
        }
        Ok(())
    }

    /// Infinite iterator over the sizes for iterations `0, 1, 2, ...`.
    pub fn sizes(&self, n_points: usize) -> ScheduleSizes {
        ScheduleSizes {
            schedule: *self,
            n: n_points,
            consumed: 0.0,
            k: 0,
        }
    }
}

pub struct ScheduleSizes {
    schedule: SubsampleSchedule,
    n: usize,
    consumed: f64,
    k: i32,
}

/// `ceil` that ignores representation error like `100.00000000000001`.
fn ceil_tolerant(x: f64) -> f64 {
    (x - 1e-9 * x.abs().max(1.0)).ceil()
}

impl Iterator for ScheduleSizes {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let n = self.n as f64;
        let f0 = self.schedule.initial_fraction;
        let epochs = self.schedule.epochs_to_full;
        let raw = match self.schedule.growth {
            Growth::Linear => {
                let t = (self.consumed / (epochs * n)).clamp(0.0, 1.0);
                n * (f0 + (1.0 - f0) * t)
            }
            Growth::Exponential => {
                let r = 1.0 + (1.0 - f0) / epochs;
                n * f0 * r.powi(self.k)
            }
        };
        let size = if raw >= n {
            self.n
        } else {
            (ceil_tolerant(raw) as usize).clamp(1, self.n.max(1))
        };
        self.consumed += size as f64;
        self.k = self.k.saturating_add(1);
        Some(size)
    }
}

pub fn schedule_size(schedule: &SubsampleSchedule, k: usize, n_points: usize) -> usize {
    schedule.sizes(n_points).nth(k).expect("schedule is infinite")
}

/// Radius update choosing fixed points inside the classical intervals:
/// shrink to `γ₁·min(‖p‖, Δ)`, keep, or expand to `γ₃Δ` after a very
/// successful step that reached the boundary.
pub fn update_radius(cfg: &TrustRegionConfig, rho: f64, delta: f64, step_norm: f64, hit_boundary: bool) -> f64 {
    let rho = if rho.is_nan() { f64::NEG_INFINITY } else { rho };
    if rho <= cfg.eta1 {
        cfg.gamma1 * step_norm.min(delta)
    } else if rho < cfg.eta2 {
        delta
    } else if hit_boundary {
        cfg.gamma3 * delta
    } else {
        delta
    }
}

pub fn accept_step(cfg: &TrustRegionConfig, rho: f64, w: &[f64], p: &[f64]) -> Vec<f64> {
    if rho > cfg.eta0 {
        w.iter().zip(p).map(|(a, b)| a + b).collect()
    } else {
        w.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubproblemSolver {
    Cg,
    /// Preconditioned CG with `M = α·diag(H) + (1 − α)·I`.
    Pcg { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvrgConfig {
    /// Inner iterations per full-gradient anchor.
    pub inner_iterations: usize,
}

impl Default for SvrgConfig {
    fn default() -> Self {
        Self { inner_iterations: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub outer_iteration: usize,
    pub elapsed_seconds: f64,
    pub effective_data_passes: f64,
    pub subsample_size: usize,
    /// Full training objective at the iterate this row starts from.
    pub function_value: f64,
    /// Norm of the gradient estimate used by the stopping test.
    pub gradient_norm: f64,
    pub cg_iterations: usize,
    /// `None` on the final row and for line-search iterations.
    pub rho: Option<f64>,
    /// Radius used in this iteration; `None` for line-search iterations.
    pub delta: Option<f64>,
    pub accepted: bool,
    pub test_accuracy: Option<f64>,
    /// Hessian-vector products in this iteration.
    pub hv_products: usize,
    /// Data rows visited by those products.
    pub rows_touched: usize,
}

impl TraceRow {
    /// Equality ignoring wall-clock time.
    pub fn same_as(&self, other: &TraceRow) -> bool {
        let mut a = self.clone();
        a.elapsed_seconds = other.elapsed_seconds;
        a == *other
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    pub fn same_as(&self, other: &RunTrace) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_as(b))
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// The radius (or line-search step) shrank below machine precision
    /// relative to `w`; no further progress is representable.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent {
    LineSearchFailed { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub w: Vec<f64>,
    pub trace: RunTrace,
    pub stop: StopReason,
    pub initial_gradient_norm: f64,
    pub final_gradient_norm: f64,
    /// Radius the next iteration would use.
    pub final_delta: f64,
    pub events: Vec<RunEvent>,
}

impl RunOutput {
    pub fn gradient_ratio(&self) -> f64 {
        if self.initial_gradient_norm == 0.0 {
            0.0
        } else {
            self.final_gradient_norm / self.initial_gradient_norm
        }
    }
}

/// Starting point and per-row monitoring.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub w0: Option<Vec<f64>>,
    /// Evaluated on every row's iterate; excluded from timing.
    pub test_accuracy: Option<&'a (dyn Fn(&[f64]) -> f64 + Sync)>,
    /// Overrides `‖g_0‖` in the stopping test. Lets a run resume
    /// another run's state.
    pub initial_gradient_norm: Option<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Clock {
    start: Instant,
    paused: Duration,
}

impl Clock {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            paused: Duration::ZERO,
        }
    }

    fn untimed<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.paused += t.elapsed();
        out
    }

    fn seconds(&self) -> f64 {
        self.start.elapsed().saturating_sub(self.paused).as_secs_f64()
    }
}

/// Shared bookkeeping for every driver.
struct Recorder<'a, 'o, O: Objective> {
    obj: &'o O,
    opts: &'a RunOptions<'a>,
    clock: Clock,
    consumed: u128,
    rows: Vec<TraceRow>,
    g0: Option<f64>,
}

struct Snapshot {
    function_value: f64,
    test_accuracy: Option<f64>,
}

impl<'a, 'o, O: Objective> Recorder<'a, 'o, O> {
    fn new(obj: &'o O, opts: &'a RunOptions<'a>) -> Self {
        Self {
            obj,
            opts,
            clock: Clock::new(),
            consumed: 0,
            rows: Vec::new(),
            g0: opts.initial_gradient_norm,
        }
    }

    fn charge(&mut self, points: usize) {
        self.consumed += points as u128;
    }

    fn snapshot(&mut self, k: usize, w: &[f64]) -> Result<Snapshot, OptimError> {
        let obj = self.obj;
        let acc = self.opts.test_accuracy;
        self.clock.untimed(|| {
            let function_value = obj
                .value(w, &IndexSubset::full(obj.n_points()))
                .map_err(at(k, loss_err))?;
            Ok(Snapshot {
                function_value,
                test_accuracy: acc.map(|f| f(w)),
            })
        })
    }

    /// Records `‖g‖` as the reference norm on first use and reports
    /// whether the stopping test passes.
    fn converged(&mut self, g_norm: f64, epsilon: f64) -> bool {
        let g0 = *self.g0.get_or_insert(g_norm);
        g_norm <= epsilon * g0
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        k: usize,
        snap: Snapshot,
        subsample_size: usize,
        gradient_norm: f64,
        cg_iterations: usize,
        rho: Option<f64>,
        delta: Option<f64>,
        accepted: bool,
        hv_products: usize,
        rows_touched: usize,
    ) {
        let n = self.obj.n_points() as f64;
        self.rows.push(TraceRow {
            outer_iteration: k,
            elapsed_seconds: self.clock.seconds(),
            effective_data_passes: self.consumed as f64 / n,
            subsample_size,
            function_value: snap.function_value,
            gradient_norm,
            cg_iterations,
            rho,
            delta,
            accepted,
            test_accuracy: snap.test_accuracy,
            hv_products,
            rows_touched,
        });
    }
}

fn initial_point<O: Objective>(obj: &O, opts: &RunOptions<'_>) -> Result<Vec<f64>, OptimError> {
    match &opts.w0 {
        None => Ok(vec![0.0; obj.dim()]),
        Some(w) if w.len() == obj.dim() && w.iter().all(|x| x.is_finite()) => Ok(w.clone()),
        Some(w) => Err(OptimError::Config(format!(
            "initial point must be finite with length {}, got length {}",
            obj.dim(),
            w.len()
        ))),
    }
}

fn stalled(delta: f64, w: &[f64]) -> bool {
    !(delta > f64::EPSILON * (1.0 + norm(w)))
}

/// Outcome of one trust-region iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub subproblem: TrSubproblemResult,
    /// `F_S(w + p) − F_S(w)`.
    pub actual_reduction: f64,
    pub rho: f64,
    pub accepted: bool,
    pub new_delta: f64,
}

/// Solves the subproblem for `(local, g)` at radius `delta`, evaluates the
/// reduction ratio on the same subset, and updates `w` in place.
pub fn trust_region_step<L: LocalModel>(
    local: &L,
    g: &[f64],
    w: &mut [f64],
    delta: f64,
    cfg: &TrustRegionConfig,
    solver: SubproblemSolver,
    iteration: usize,
) -> Result<StepReport, OptimError> {
    let res = match solver {
        SubproblemSolver::Cg => steihaug_cg(local, g, delta, cfg.forcing, cfg.max_cg),
        SubproblemSolver::Pcg { alpha } => {
            let m = build_preconditioner(&local.hess_diag(), alpha).map_err(at(iteration, sub_err))?;
            steihaug_pcg(local, g, delta, cfg.forcing, cfg.max_cg, &m)
        }
    }
    .map_err(at(iteration, sub_err))?;
    let actual = local.reduction(&res.step).map_err(at(iteration, loss_err))?;
    let predicted = res.model_reduction;
    let rho = if predicted < 0.0 {
        actual / predicted
    } else {
        f64::NEG_INFINITY
    };
    let accepted = rho > cfg.eta0;
    if accepted {
        for (wi, pi) in w.iter_mut().zip(&res.step) {
            *wi += pi;
        }
    }
    let new_delta = update_radius(cfg, rho, delta, res.step_norm, res.termination.hit_boundary());
    Ok(StepReport {
        subproblem: res,
        actual_reduction: actual,
        rho,
        accepted,
        new_delta,
    })
}

/// Full-batch trust-region Newton. `pcg_alpha` selects the preconditioned
/// subproblem solver.
pub fn run_tron<O: Objective>(
    obj: &O,
    cfg: &TrustRegionConfig,
    pcg_alpha: Option<f64>,
    opts: &RunOptions<'_>,
) -> Result<RunOutput, OptimError> {
    let solver = pcg_alpha.map_or(SubproblemSolver::Cg, |alpha| SubproblemSolver::Pcg { alpha });
    // a full schedule never draws from the RNG
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    run_stron(obj, cfg, &SubsampleSchedule::full(), solver, &mut rng, opts)
}

/// Trust-region Newton with progressive subsampling, `S_k = X_k`.
pub fn run_stron<O: Objective, R: Rng + ?Sized>(
    obj: &O,
    cfg: &TrustRegionConfig,
    schedule: &SubsampleSchedule,
    solver: SubproblemSolver,
    rng: &mut R,
    opts: &RunOptions<'_>,
) -> Result<RunOutput, OptimError> {
    cfg.validate()?;
    schedule.validate()?;
    let n = obj.n_points();
    let mut w = initial_point(obj, opts)?;
    let mut rec = Recorder::new(obj, opts);
    let mut sizes = schedule.sizes(n);
    let mut delta = cfg.delta0;

    for k in 0..=cfg.max_outer {
        let size = sizes.next().expect("schedule is infinite");
        let subset = draw_subsample(n, size, rng).map_err(|source| OptimError::Sampling { iteration: k, source })?;
        let local = obj.local_model(&w, &subset).map_err(at(k, loss_err))?;
        rec.charge(size);
        let g = local.gradient();
        let g_norm = norm(g);
        let converged = rec.converged(g_norm, cfg.epsilon);
        let d = *delta.get_or_insert(if g_norm > 0.0 { g_norm } else { 1.0 });
        let snap = rec.snapshot(k, &w)?;
        if converged || k == cfg.max_outer {
            rec.push(k, snap, size, g_norm, 0, None, Some(d), false, 0, 0);
            let stop = if converged {
                StopReason::Converged
            } else {
                StopReason::MaxIterations
            };
            return Ok(finish(w, rec, stop, g_norm, d, Vec::new()));
        }
        let report = trust_region_step(&local, g, &mut w, d, cfg, solver, k)?;
        rec.charge(size);
        rec.push(
            k,
            snap,
            size,
            g_norm,
            report.subproblem.cg_iterations,
            Some(report.rho),
            Some(d),
            report.accepted,
            local.hv_products(),
            local.rows_touched(),
        );
        delta = Some(report.new_delta);
        if stalled(report.new_delta, &w) {
            return Ok(finish(w, rec, StopReason::Stalled, g_norm, report.new_delta, Vec::new()));
        }
    }
    unreachable!("loop returns at k == max_outer")
}

fn finish<O: Objective>(
    w: Vec<f64>,
    rec: Recorder<'_, '_, O>,
    stop: StopReason,
    final_gradient_norm: f64,
    final_delta: f64,
    events: Vec<RunEvent>,
) -> RunOutput {
    RunOutput {
        w,
        initial_gradient_norm: rec.g0.unwrap_or(final_gradient_norm),
        trace: RunTrace { rows: rec.rows },
        stop,
        final_gradient_norm,
        final_delta,
        events,
    }
}

/// `∇F_S(w) − ∇F_S(w̄) + ∇F(w̄)`.
pub fn svrg_gradient<O: Objective>(
    obj: &O,
    w: &[f64],
    w_bar: &[f64],
    anchor: &[f64],
    subset: &IndexSubset,
) -> Result<Vec<f64>, LossError> {
    let at_w = obj.gradient(w, subset)?;
    let at_bar = obj.gradient(w_bar, subset)?;
    Ok(combine_svrg(&at_w, &at_bar, anchor))
}

fn combine_svrg(at_w: &[f64], at_bar: &[f64], anchor: &[f64]) -> Vec<f64> {
    at_w.iter().zip(at_bar).zip(anchor).map(|((a, b), c)| a - b + c).collect()
}

/// Trust-region Newton with SVRG gradients and progressively batched
/// Hessians. The subset of inner iteration `k` (counted globally) has the
/// schedule's `k`-th size and serves both the gradient correction and the
/// Hessian.
pub fn run_stron_svrg<O: Objective, R: Rng + ?Sized>(
    obj: &O,
    cfg: &TrustRegionConfig,
    schedule: &SubsampleSchedule,
    svrg: &SvrgConfig,
    rng: &mut R,
    opts: &RunOptions<'_>,
) -> Result<RunOutput, OptimError> {
    cfg.validate()?;
    schedule.validate()?;
    if svrg.inner_iterations == 0 {
        return Err(OptimError::Config("SVRG inner iterations must be >= 1".into()));
    }
    let n = obj.n_points();
    let full = IndexSubset::full(n);
    let mut w = initial_point(obj, opts)?;
    let mut rec = Recorder::new(obj, opts);
    let mut sizes = schedule.sizes(n);
    let mut delta = cfg.delta0;
    let mut w_bar = w.clone();
    let mut anchor = Vec::new();

    for k in 0..=cfg.max_outer {
        if k % svrg.inner_iterations == 0 {
            w_bar.clone_from(&w);
            anchor = obj.gradient(&w_bar, &full).map_err(at(k, loss_err))?;
            rec.charge(n);
        }
        let size = sizes.next().expect("schedule is infinite");
        let subset = draw_subsample(n, size, rng).map_err(|source| OptimError::Sampling { iteration: k, source })?;
        let local = obj.local_model(&w, &subset).map_err(at(k, loss_err))?;
        rec.charge(size);
        let at_bar = if subset.is_full() {
            anchor.clone()
        } else {
            rec.charge(size);
            obj.gradient(&w_bar, &subset).map_err(at(k, loss_err))?
        };
        let g = combine_svrg(local.gradient(), &at_bar, &anchor);
        let g_norm = norm(&g);
        let converged = rec.converged(g_norm, cfg.epsilon);
        let d = *delta.get_or_insert(if g_norm > 0.0 { g_norm } else { 1.0 });
        let snap = rec.snapshot(k, &w)?;
        if converged || k == cfg.max_outer {
            rec.push(k, snap, size, g_norm, 0, None, Some(d), false, 0, 0);
            let stop = if converged {
                StopReason::Converged
            } else {
                StopReason::MaxIterations
            };
            return Ok(finish(w, rec, stop, g_norm, d, Vec::new()));
        }
        let report = trust_region_step(&local, &g, &mut w, d, cfg, SubproblemSolver::Cg, k)?;
        rec.charge(size);
        rec.push(
            k,
            snap,
            size,
            g_norm,
            report.subproblem.cg_iterations,
            Some(report.rho),
            Some(d),
            report.accepted,
            local.hv_products(),
            local.rows_touched(),
        );
        delta = Some(report.new_delta);
        if stalled(report.new_delta, &w) {
            return Ok(finish(w, rec, StopReason::Stalled, g_norm, report.new_delta, Vec::new()));
        }
    }
    unreachable!("loop returns at k == max_outer")
}

pub const ARMIJO_CONSTANT: f64 = 1e-4;
pub const MAX_BACKTRACKS: usize = 30;

/// Subsampled inexact Newton with CG directions (no radius) and a
/// backtracking Armijo line search on the subsampled objective.
pub fn run_newton_cg<O: Objective, R: Rng + ?Sized>(
    obj: &O,
    cfg: &TrustRegionConfig,
    schedule: &SubsampleSchedule,
    rng: &mut R,
    opts: &RunOptions<'_>,
) -> Result<RunOutput, OptimError> {
    cfg.validate()?;
    schedule.validate()?;
    let n = obj.n_points();
    let mut w = initial_point(obj, opts)?;
    let mut rec = Recorder::new(obj, opts);
    let mut sizes = schedule.sizes(n);
    let mut events = Vec::new();

    for k in 0..=cfg.max_outer {
        let size = sizes.next().expect("schedule is infinite");
        let subset = draw_subsample(n, size, rng).map_err(|source| OptimError::Sampling { iteration: k, source })?;
        let local = obj.local_model(&w, &subset).map_err(at(k, loss_err))?;
        rec.charge(size);
        let g = local.gradient();
        let g_norm = norm(g);
        let converged = rec.converged(g_norm, cfg.epsilon);
        let snap = rec.snapshot(k, &w)?;
        if converged || k == cfg.max_outer {
            rec.push(k, snap, size, g_norm, 0, None, None, false, 0, 0);
            let stop = if converged {
                StopReason::Converged
            } else {
                StopReason::MaxIterations
            };
            return Ok(finish(w, rec, stop, g_norm, f64::INFINITY, events));
        }
        let res = steihaug_cg(&local, g, f64::INFINITY, cfg.forcing, cfg.max_cg).map_err(at(k, sub_err))?;
        let mut step = res.step;
        let mut slope = dot(g, &step);
        if !(slope < 0.0) {
            // not a descent direction for this subsample
            step = g.iter().map(|x| -x).collect();
            slope = -g_norm * g_norm;
        }
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; step.len()];
        for _ in 0..=MAX_BACKTRACKS {
            for (tr, s) in trial.iter_mut().zip(&step) {
                *tr = t * s;
            }
            let red = local.reduction(&trial).map_err(at(k, loss_err))?;
            rec.charge(size);
            if red <= ARMIJO_CONSTANT * t * slope {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if accepted {
            for (wi, s) in w.iter_mut().zip(&trial) {
                *wi += s;
            }
        } else {
            events.push(RunEvent::LineSearchFailed { iteration: k });
        }
        rec.push(
            k,
            snap,
            size,
            g_norm,
            res.cg_iterations,
            None,
            None,
            accepted,
            local.hv_products(),
            local.rows_touched(),
        );
    }
    unreachable!("loop returns at k == max_outer")
}
