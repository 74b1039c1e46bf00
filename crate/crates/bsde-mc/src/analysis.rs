//! Error functionals and convergence-rate estimation.
//!
//! The strong error up to a stopping time `theta` is
//! `max_i E[ sup_{t in [t_i, t_{i+1}]} 1_{t<=theta} |Y_t - Ybar_{t_i}|^2 ]
//!  + E[ int_0^theta ||Z_t - Zbar_{phi(t)}||^2 dt ]`,
//! with the reference pair reconstructed along bridge-refined paths from a
//! closed-form solution: `Y_t = u(t ^ tau, X_{t ^ tau})` and
//! `Z_t = 1_{t < tau} Du(t, X_t) sigma(X_t)`, where `tau` is the fine-grid
//! exit oracle. Both `theta = T` and `theta = tau ^ taubar` variants come out
//! of a single streaming pass per path, so refined paths never need to be
//! materialized; once the reference and the tables are both frozen the
//! remaining contributions are closed-form and the walk stops early.
//!
//! Path-regularity functionals use the same pass: `R(Y)` is the worst
//! per-interval mean of `sup |Y_t - Y_{t_i}|^2`, and `R(Z)` compares `Z`
//! against its best per-interval constant predictor, estimated by regressing
//! interval quadratures of `Z` on the current state.

use rayon::prelude::*;
use thiserror::Error;

use crate::bsde::{BackwardTables, BsdeError, CondExpEngine, LayerCtx};
use crate::dynamics::{FineWalker, PathBatch, ProblemSpec};
use crate::geometry::Domain;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("missing closed-form reference (u, Du) on the problem spec")]
    MissingReference,
    #[error("slope fit needs at least {needed} positive points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("slope fit received only non-positive values")]
    NonPositiveValue,
    #[error(transparent)]
    Engine(#[from] BsdeError),
}

/// Which stopping time truncates the error functional.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaMode {
    /// `theta = T`: the usual strong error up to the horizon.
    Horizon,
    /// `theta = tau ^ taubar`: the weak-form error up to both exits.
    Stopped,
}

/// Point estimate with Monte Carlo standard error.
#[derive(Clone, Copy, Debug, Default)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Exit-time error statistics against the fine-grid oracle.
#[derive(Clone, Copy, Debug)]
pub struct ExitErrorStats {
    pub mean_abs: f64,
    pub stderr: f64,
    pub mean_signed: f64,
}

/// Everything measured for one `(benchmark, n, seed)` run.
#[derive(Clone, Debug)]
pub struct ErrorReport {
    pub n: usize,
    pub h: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub m_fine: usize,
    pub err2_horizon: Estimate,
    pub err2_stopped: Estimate,
    pub exit_error: ExitErrorStats,
    pub r_y: f64,
    pub r_z: f64,
    pub y0_mean: f64,
    pub y0_se: f64,
    /// `|Y_0 - u(0, x0)|` when the reference is available.
    pub y0_bias: f64,
    pub picard_max_residual: f64,
    pub picard_max_iterations: usize,
}

// ---------------------------------------------------------------------------
// streaming sweep
// ---------------------------------------------------------------------------

pub(crate) struct TableView<'a> {
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub exit_time: &'a [f64],
    pub freeze_index: &'a [u32],
}

impl BackwardTables {
    pub(crate) fn table_view(&self) -> TableView<'_> {
        TableView {
            y: &self.y,
            z: &self.z,
            exit_time: &self.exit_time,
            freeze_index: &self.freeze_index,
        }
    }
}

#[derive(Clone)]
struct ViewAcc {
    sup_sum_t: Vec<f64>,
    sup_sq_t: Vec<f64>,
    sup_sum_s: Vec<f64>,
    sup_sq_s: Vec<f64>,
    int_sum_t: f64,
    int_sq_t: f64,
    int_sum_s: f64,
    int_sq_s: f64,
}

impl ViewAcc {
    fn new(n: usize) -> Self {
        ViewAcc {
            sup_sum_t: vec![0.0; n],
            sup_sq_t: vec![0.0; n],
            sup_sum_s: vec![0.0; n],
            sup_sq_s: vec![0.0; n],
            int_sum_t: 0.0,
            int_sq_t: 0.0,
            int_sum_s: 0.0,
            int_sq_s: 0.0,
        }
    }

    fn merge(&mut self, other: &ViewAcc) {
        for i in 0..self.sup_sum_t.len() {
            self.sup_sum_t[i] += other.sup_sum_t[i];
            self.sup_sq_t[i] += other.sup_sq_t[i];
            self.sup_sum_s[i] += other.sup_sum_s[i];
            self.sup_sq_s[i] += other.sup_sq_s[i];
        }
        self.int_sum_t += other.int_sum_t;
        self.int_sq_t += other.int_sq_t;
        self.int_sum_s += other.int_sum_s;
        self.int_sq_s += other.int_sq_s;
    }
}

struct SweepOutput {
    tau_hat: Vec<f64>,
    views: Vec<ViewAcc>,
    /// Per-interval sums over paths of `sup |Y_t - Y_{t_i}|^2`.
    ry_sum: Vec<f64>,
    /// When requested: per path and interval, `int ||Z||^2 dt` (a) and
    /// `int Z dt` (v, d-vector).
    hatz_a: Option<Vec<f64>>,
    hatz_v: Option<Vec<f64>>,
}

/// Per-path scratch state for one sweep.
struct PathState<'v, 'a> {
    views: &'v [TableView<'a>],
    n: usize,
    m: usize,
    dim: usize,
    n_paths: usize,
    delta: f64,
    path: usize,
    view_freeze: Vec<usize>,
    exited: bool,
    tau: f64,
    tau_knot: usize,
    y_frozen: f64,
    y_left: f64,
    sup_ry: Vec<f64>,
    sup_t: Vec<Vec<f64>>,
    sup_s: Vec<Vec<f64>>,
    int_t: Vec<f64>,
    int_s: Vec<f64>,
    du: Vec<f64>,
    sg: Vec<f64>,
    zref: Vec<f64>,
    hatz_a: Option<*mut f64>,
    hatz_v: Option<*mut f64>,
}

impl<'v, 'a> PathState<'v, 'a> {
    /// Visits fine knot `j` at time `t` with state `x`. Only forward-in-time
    /// calls with consecutive `j` are valid.
    fn process(
        &mut self,
        j: usize,
        t: f64,
        x: &[f64],
        spec: &ProblemSpec,
        domain: &Domain,
        horizon: f64,
    ) {
        let d = self.dim;
        let n = self.n;
        let m = self.m;
        let p = self.path;
        let reference = spec.reference.as_ref().unwrap();
        if !self.exited && !domain.contains(x) {
            self.exited = true;
            self.tau = t;
            self.tau_knot = j;
            self.y_frozen = (reference.u)(t, x);
        }
        let yv = if self.exited && t >= self.tau {
            self.y_frozen
        } else {
            (reference.u)(t, x)
        };
        // Z at this knot: zero at and after the oracle exit.
        let z_alive = !self.exited || t < self.tau;
        if z_alive {
            (reference.du)(t, x, &mut self.du);
            (spec.sigma)(x, &mut self.sg);
            for c in 0..d {
                let mut v = 0.0;
                for r in 0..d {
                    v += self.du[r] * self.sg[c * d + r];
                }
                self.zref[c] = v;
            }
        } else {
            self.zref.fill(0.0);
        }
        // `t <= tau` holds as long as the path has not exited strictly
        // before t; at the exit knot itself it still holds.
        let t_le_tau = !self.exited || t <= self.tau;
        let t_lt_tau = !self.exited || t < self.tau;

        let at_knot = j % m == 0;
        let interval = j / m;

        // Sup contributions: knot j is a left endpoint of interval j/m and
        // the right endpoint of interval j/m - 1.
        for (vi, v) in self.views.iter().enumerate() {
            let in_theta = t_le_tau && t <= v.exit_time[p];
            let ybar_at = |i: usize| v.y[i * self.n_paths + p];
            if interval < n {
                let dev = yv - ybar_at(interval);
                let dev = dev * dev;
                if dev > self.sup_t[vi][interval] {
                    self.sup_t[vi][interval] = dev;
                }
                if in_theta && dev > self.sup_s[vi][interval] {
                    self.sup_s[vi][interval] = dev;
                }
            }
            if at_knot && j >= m {
                let prev = interval - 1;
                let dev = yv - ybar_at(prev);
                let dev = dev * dev;
                if dev > self.sup_t[vi][prev] {
                    self.sup_t[vi][prev] = dev;
                }
                if in_theta && dev > self.sup_s[vi][prev] {
                    self.sup_s[vi][prev] = dev;
                }
            }
        }

        // R(Y): close the previous interval at coarse knots, then restart.
        if at_knot && j >= m {
            let devy = (yv - self.y_left) * (yv - self.y_left);
            if devy > self.sup_ry[interval.min(n) - 1] {
                self.sup_ry[interval.min(n) - 1] = devy;
            }
        }
        if at_knot {
            self.y_left = yv;
        } else {
            let devy = (yv - self.y_left) * (yv - self.y_left);
            if devy > self.sup_ry[interval] {
                self.sup_ry[interval] = devy;
            }
        }

        // Integral contributions over [t_j, t_j + delta).
        if j < n * m {
            for (vi, v) in self.views.iter().enumerate() {
                let frozen_i = interval >= self.view_freeze[vi];
                let mut dev2 = 0.0;
                for c in 0..d {
                    let zb = if frozen_i {
                        0.0
                    } else {
                        v.z[(interval * self.n_paths + p) * d + c]
                    };
                    let dz = self.zref[c] - zb;
                    dev2 += dz * dz;
                }
                self.int_t[vi] += self.delta * dev2;
                if t_lt_tau && t < v.exit_time[p] {
                    self.int_s[vi] += self.delta * dev2;
                }
            }
            if let Some(aptr) = self.hatz_a {
                let mut z2 = 0.0;
                for c in 0..d {
                    z2 += self.zref[c] * self.zref[c];
                }
                // Safety: each path owns a disjoint slice; see sweep().
                unsafe {
                    *aptr.add(interval) += self.delta * z2;
                    let vptr = self.hatz_v.unwrap();
                    for c in 0..d {
                        *vptr.add(interval * d + c) += self.delta * self.zref[c];
                    }
                }
            }
        }
        let _ = horizon;
    }

    /// True once the reference and every view are frozen; the remaining
    /// contributions are closed-form.
    fn fully_frozen(&self, j: usize) -> bool {
        self.exited
            && j >= self.tau_knot
            && self.view_freeze.iter().all(|&f| j >= f * self.m)
    }

    /// Adds the closed-form tail beyond the last processed knot.
    fn close_tail(&mut self, last_knot: usize) {
        if !self.exited || last_knot >= self.n * self.m {
            return;
        }
        let from_interval = last_knot / self.m;
        for (vi, v) in self.views.iter().enumerate() {
            let ybar = v.y[self.n * self.n_paths + self.path];
            let dev = (self.y_frozen - ybar) * (self.y_frozen - ybar);
            for i in from_interval..self.n {
                if dev > self.sup_t[vi][i] {
                    self.sup_t[vi][i] = dev;
                }
            }
        }
        // Stopped-mode sups, integrals, R(Y) and the hatz quadratures all
        // vanish on the tail: theta has passed, Z and Zbar are both zero and
        // the reference is frozen.
    }
}

/// One parallel pass over all paths: streams each fine path (stored or
/// regenerated), finds the exit oracle and accumulates every requested
/// functional. Deterministic: per-path results merge in chunk order.
fn sweep(
    batch: &PathBatch,
    spec: &ProblemSpec,
    domain: &Domain,
    views: &[TableView<'_>],
    want_hatz: bool,
) -> Result<SweepOutput, AnalysisError> {
    let refn = batch.refinement.as_ref().expect("sweep requires a refined batch");
    assert!(refn.m_fine >= 16, "error estimation requires m_fine >= 16");
    if spec.reference.is_none() {
        return Err(AnalysisError::MissingReference);
    }
    let n = batch.grid.n;
    let m = refn.m_fine;
    let d = batch.dim;
    let h = batch.grid.h;
    let delta = h / m as f64;
    let n_paths = batch.n_paths;
    let horizon = batch.grid.horizon;

    let mut tau_hat = vec![0.0; n_paths];
    let mut hatz_a = if want_hatz { vec![0.0; n_paths * n] } else { Vec::new() };
    let mut hatz_v = if want_hatz { vec![0.0; n_paths * n * d] } else { Vec::new() };

    struct Shared {
        a: *mut f64,
        v: *mut f64,
    }
    unsafe impl Sync for Shared {}
    impl Shared {
        fn a(&self) -> *mut f64 {
            self.a
        }
        fn v(&self) -> *mut f64 {
            self.v
        }
    }
    let shared = Shared { a: hatz_a.as_mut_ptr(), v: hatz_v.as_mut_ptr() };
    let shared = &shared;

    const CHUNK: usize = 512;
    let n_chunks = n_paths.div_ceil(CHUNK);
    let results: Vec<(Vec<ViewAcc>, Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * CHUNK;
            let len = CHUNK.min(n_paths - start);
            let mut views_acc: Vec<ViewAcc> = views.iter().map(|_| ViewAcc::new(n)).collect();
            let mut ry = vec![0.0; n];
            let mut taus = vec![0.0; len];
            for local in 0..len {
                let p = start + local;
                let mut st = PathState {
                    views,
                    n,
                    m,
                    dim: d,
                    n_paths,
                    delta,
                    path: p,
                    view_freeze: views.iter().map(|v| v.freeze_index[p] as usize).collect(),
                    exited: false,
                    tau: horizon,
                    tau_knot: n * m,
                    y_frozen: 0.0,
                    y_left: 0.0,
                    sup_ry: vec![0.0; n],
                    sup_t: views.iter().map(|_| vec![0.0; n]).collect(),
                    sup_s: views.iter().map(|_| vec![0.0; n]).collect(),
                    int_t: vec![0.0; views.len()],
                    int_s: vec![0.0; views.len()],
                    du: vec![0.0; d],
                    sg: vec![0.0; d * d],
                    zref: vec![0.0; d],
                    // Safety: each path's quadrature block is disjoint.
                    hatz_a: want_hatz.then(|| unsafe { shared.a().add(p * n) }),
                    hatz_v: want_hatz.then(|| unsafe { shared.v().add(p * n * d) }),
                };
                let mut last_knot = 0usize;
                if let Some(fine) = &refn.stored {
                    let knots = n * m + 1;
                    let base = p * knots * d;
                    for j in 0..knots {
                        let t = if j == n * m {
                            horizon
                        } else {
                            (j / m) as f64 * h + (j % m) as f64 * delta
                        };
                        st.process(j, t, &fine.states[base + j * d..base + (j + 1) * d], spec, domain, horizon);
                        last_knot = j;
                        if st.fully_frozen(j) {
                            break;
                        }
                    }
                } else {
                    let mut w = FineWalker::new(batch, spec, p, m, refn.bridge_seed);
                    st.process(0, 0.0, w.state(), spec, domain, horizon);
                    while !st.fully_frozen(last_knot) && w.advance() {
                        last_knot = w.knot();
                        st.process(last_knot, w.time(), w.state(), spec, domain, horizon);
                    }
                }
                st.close_tail(last_knot);
                taus[local] = st.tau;
                for vi in 0..views.len() {
                    for i in 0..n {
                        views_acc[vi].sup_sum_t[i] += st.sup_t[vi][i];
                        views_acc[vi].sup_sq_t[i] += st.sup_t[vi][i] * st.sup_t[vi][i];
                        views_acc[vi].sup_sum_s[i] += st.sup_s[vi][i];
                        views_acc[vi].sup_sq_s[i] += st.sup_s[vi][i] * st.sup_s[vi][i];
                    }
                    views_acc[vi].int_sum_t += st.int_t[vi];
                    views_acc[vi].int_sq_t += st.int_t[vi] * st.int_t[vi];
                    views_acc[vi].int_sum_s += st.int_s[vi];
                    views_acc[vi].int_sq_s += st.int_s[vi] * st.int_s[vi];
                }
                for i in 0..n {
                    ry[i] += st.sup_ry[i];
                }
            }
            (views_acc, ry, taus)
        })
        .collect();

    let mut views_acc: Vec<ViewAcc> = views.iter().map(|_| ViewAcc::new(n)).collect();
    let mut ry_sum = vec![0.0; n];
    for (chunk, (vaccs, ry, taus)) in results.iter().enumerate() {
        for (vi, v) in vaccs.iter().enumerate() {
            views_acc[vi].merge(v);
        }
        for i in 0..n {
            ry_sum[i] += ry[i];
        }
        let start = chunk * CHUNK;
        tau_hat[start..start + taus.len()].copy_from_slice(taus);
    }

    Ok(SweepOutput {
        tau_hat,
        views: views_acc,
        ry_sum,
        hatz_a: want_hatz.then_some(hatz_a),
        hatz_v: want_hatz.then_some(hatz_v),
    })
}

fn view_estimate(acc: &ViewAcc, n_paths: usize, mode: ThetaMode) -> Estimate {
    let np = n_paths as f64;
    let (sup_sum, sup_sq, int_sum, int_sq) = match mode {
        ThetaMode::Horizon => (&acc.sup_sum_t, &acc.sup_sq_t, acc.int_sum_t, acc.int_sq_t),
        ThetaMode::Stopped => (&acc.sup_sum_s, &acc.sup_sq_s, acc.int_sum_s, acc.int_sq_s),
    };
    let mut best = 0.0;
    let mut best_se = 0.0;
    for i in 0..sup_sum.len() {
        let mean = sup_sum[i] / np;
        if mean >= best {
            best = mean;
            let var = (sup_sq[i] / np - mean * mean).max(0.0);
            best_se = (var / np).sqrt();
        }
    }
    let int_mean = int_sum / np;
    let int_var = (int_sq / np - int_mean * int_mean).max(0.0);
    let int_se = (int_var / np).sqrt();
    Estimate {
        value: best + int_mean,
        stderr: (best_se * best_se + int_se * int_se).sqrt(),
    }
}

/// Strong approximation error of the tables against the reconstructed
/// reference, for one `theta` mode. The batch must be refined (`m_fine >= 16`)
/// and the spec must carry a closed-form reference.
pub fn strong_error(
    batch: &PathBatch,
    tables: &BackwardTables,
    spec: &ProblemSpec,
    domain: &Domain,
    mode: ThetaMode,
) -> Result<Estimate, AnalysisError> {
    let views = [tables.table_view()];
    let out = sweep(batch, spec, domain, &views, false)?;
    Ok(view_estimate(&out.views[0], batch.n_paths, mode))
}

/// Oracle exit times per path (the same values the error sweep uses).
pub fn oracle_exit_times(
    batch: &PathBatch,
    spec: &ProblemSpec,
    domain: &Domain,
) -> Result<Vec<f64>, AnalysisError> {
    let out = sweep(batch, spec, domain, &[], false)?;
    Ok(out.tau_hat)
}

/// Exit-time error of the discrete exit against oracle times on the same
/// Brownian paths: `E|tau_hat - taubar|` with its standard error, plus the
/// signed mean.
pub fn exit_error(batch: &PathBatch, tau_hat: &[f64]) -> ExitErrorStats {
    let np = batch.n_paths as f64;
    let mut sum_abs = 0.0;
    let mut sumsq_abs = 0.0;
    let mut sum_signed = 0.0;
    for p in 0..batch.n_paths {
        let diff = tau_hat[p] - batch.exit_time(p);
        sum_abs += diff.abs();
        sumsq_abs += diff * diff;
        sum_signed += diff;
    }
    let mean_abs = sum_abs / np;
    let var = (sumsq_abs / np - mean_abs * mean_abs).max(0.0);
    ExitErrorStats {
        mean_abs,
        stderr: (var / np).sqrt(),
        mean_signed: sum_signed / np,
    }
}

/// Path-regularity functionals of the reference solution.
#[derive(Clone, Debug)]
pub struct RegularityReport {
    pub r_y: f64,
    pub r_z: f64,
    pub per_interval_ry: Vec<f64>,
    pub per_interval_rz: Vec<f64>,
}

/// Estimates `R(Y)` and `R(Z)` along refined paths. The best per-interval
/// constant predictor of `Z` is `h^{-1} E[int Z dt | X_{t_i}]`, estimated by
/// the engine's conditional-mean channel on the sub-population still alive at
/// `t_i` (per the oracle exit); dead paths predict zero.
pub fn regularity_diagnostics(
    batch: &PathBatch,
    spec: &ProblemSpec,
    domain: &Domain,
    engine: &CondExpEngine,
) -> Result<RegularityReport, AnalysisError> {
    let n = batch.grid.n;
    let d = batch.dim;
    let h = batch.grid.h;
    let n_paths = batch.n_paths;
    let out = sweep(batch, spec, domain, &[], true)?;
    let a = out.hatz_a.unwrap();
    let v = out.hatz_v.unwrap();

    // R(Z) contribution per path and interval expands around the predictor:
    // int ||Z - c||^2 dt = a - 2 <c, v> + h ||c||^2.
    let mut per_interval_rz = vec![0.0; n];
    let mut alive: Vec<usize> = Vec::new();
    let mut predictors: Vec<f64> = Vec::new();
    let mut resp: Vec<f64> = Vec::new();
    let mut zero_zw: Vec<f64> = Vec::new();
    for i in 0..n {
        let t_i = batch.grid.time(i);
        alive.clear();
        predictors.clear();
        for p in 0..n_paths {
            if out.tau_hat[p] > t_i {
                alive.push(p);
                predictors.extend_from_slice(batch.state(p, i));
            }
        }
        let mut hatz = vec![0.0; n_paths * d];
        if !alive.is_empty() {
            zero_zw.clear();
            zero_zw.resize(alive.len() * d, 0.0);
            for c in 0..d {
                resp.clear();
                for &p in &alive {
                    resp.push(v[(p * n + i) * d + c] / h);
                }
                let ctx = LayerCtx {
                    layer: i,
                    t: t_i,
                    h,
                    dim: d,
                    alive: &alive,
                    predictors: &predictors,
                    y_next: &resp,
                    y_dw: &zero_zw,
                };
                let mut e_y = vec![0.0; alive.len()];
                let mut e_z = vec![0.0; alive.len() * d];
                engine.conditional(&ctx, &mut e_y, &mut e_z)?;
                for (ai, &p) in alive.iter().enumerate() {
                    hatz[p * d + c] = e_y[ai];
                }
            }
        }
        let mut total = 0.0;
        for p in 0..n_paths {
            let mut term = a[p * n + i];
            for c in 0..d {
                let cpr = hatz[p * d + c];
                term += -2.0 * cpr * v[(p * n + i) * d + c] + h * cpr * cpr;
            }
            total += term;
        }
        per_interval_rz[i] = total / n_paths as f64;
    }

    let per_interval_ry: Vec<f64> = out.ry_sum.iter().map(|s| s / n_paths as f64).collect();
    let r_y = per_interval_ry.iter().cloned().fold(0.0, f64::max);
    let r_z: f64 = per_interval_rz.iter().sum();
    Ok(RegularityReport { r_y, r_z, per_interval_ry, per_interval_rz })
}

/// Full per-run report: both theta modes, exit error, `Y_0` statistics.
/// Returns the oracle exit times alongside so callers can reuse them.
pub fn error_report(
    batch: &PathBatch,
    tables: &BackwardTables,
    spec: &ProblemSpec,
    domain: &Domain,
    seed: u64,
) -> Result<(ErrorReport, Vec<f64>), AnalysisError> {
    let views = [tables.table_view()];
    let out = sweep(batch, spec, domain, &views, false)?;
    let err_t = view_estimate(&out.views[0], batch.n_paths, ThetaMode::Horizon);
    let err_s = view_estimate(&out.views[0], batch.n_paths, ThetaMode::Stopped);
    // The stopped functional is a pathwise restriction of the horizon one.
    assert!(
        err_s.value <= err_t.value + 3.0 * (err_s.stderr + err_t.stderr) + 1e-12,
        "stopped error exceeds horizon error: {} vs {}",
        err_s.value,
        err_t.value
    );
    let exit = exit_error(batch, &out.tau_hat);
    let reference = spec.reference.as_ref().ok_or(AnalysisError::MissingReference)?;
    let u0 = (reference.u)(0.0, &spec.x0);
    let y0 = tables.y0_mean();
    let report = ErrorReport {
        n: batch.grid.n,
        h: batch.grid.h,
        seed,
        n_paths: batch.n_paths,
        m_fine: batch.m_fine().unwrap_or(0),
        err2_horizon: err_t,
        err2_stopped: err_s,
        exit_error: exit,
        r_y: f64::NAN,
        r_z: f64::NAN,
        y0_mean: y0,
        y0_se: tables.y0_stderr(),
        y0_bias: (y0 - u0).abs(),
        picard_max_residual: tables.max_picard_residual(),
        picard_max_iterations: tables.max_picard_iterations(),
    };
    Ok((report, out.tau_hat))
}

// ---------------------------------------------------------------------------
// slope fitting
// ---------------------------------------------------------------------------

/// Least-squares fit of `log(value)` against `log(h)`.
#[derive(Clone, Debug)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_norm: f64,
    /// Two standard errors of the fitted slope.
    pub ci_half_width: f64,
    pub n_used: usize,
    pub dropped_largest_h: bool,
    pub excluded_nonpositive: usize,
}

/// Fits a power law through `(h, value)` points. Non-positive values are
/// excluded (and counted); at least three positive points are required.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit, AnalysisError> {
    let usable: Vec<(f64, f64)> =
        points.iter().copied().filter(|&(h, v)| h > 0.0 && v > 0.0).collect();
    let excluded = points.len() - usable.len();
    if usable.is_empty() {
        return Err(AnalysisError::NonPositiveValue);
    }
    if usable.len() < 3 {
        return Err(AnalysisError::InsufficientPoints { needed: 3, got: usable.len() });
    }
    let k = usable.len() as f64;
    let lx: Vec<f64> = usable.iter().map(|&(h, _)| h.ln()).collect();
    let ly: Vec<f64> = usable.iter().map(|&(_, v)| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let se_slope = (ss_res / (k - 2.0).max(1.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        residual_norm: ss_res.sqrt(),
        ci_half_width: 2.0 * se_slope,
        n_used: usable.len(),
        dropped_largest_h: false,
        excluded_nonpositive: excluded,
    })
}

/// As [`fit_slope`], with the pre-asymptotic guard: the largest-`h` point is
/// dropped when its value is within three combined standard errors of the
/// next point's value.
pub fn fit_slope_guarded(points: &[(f64, f64, f64)]) -> Result<SlopeFit, AnalysisError> {
    let mut sorted: Vec<(f64, f64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut dropped = false;
    if sorted.len() > 3 {
        let (_, v0, s0) = sorted[0];
        let (_, v1, s1) = sorted[1];
        if (v0 - v1).abs() <= 3.0 * (s0 + s1) {
            sorted.remove(0);
            dropped = true;
        }
    }
    let pts: Vec<(f64, f64)> = sorted.iter().map(|&(h, v, _)| (h, v)).collect();
    let mut fit = fit_slope(&pts)?;
    fit.dropped_largest_h = dropped;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{backward_solve, CondExpEngine, PicardParams, StoppedMartingaleOracle};
    use crate::dynamics::{simulate_euler, Grid, ProblemSpec, Reference};
    use crate::geometry::{identity_sigma, Domain, SmoothPiece};
    use std::sync::Arc;

    fn b1_spec() -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            x0: vec![0.0],
            drift: Arc::new(|_x, out| out.fill(0.0)),
            sigma: identity_sigma(1),
            driver: Arc::new(|_t, _x, _y, _z| 0.0),
            boundary: Arc::new(|_t, x| x[0]),
            reference: Some(Reference {
                u: Arc::new(|_t, x| x[0]),
                du: Arc::new(|_t, _x, out| out.fill(1.0)),
            }),
            lipschitz: 1.0,
        }
    }

    fn b1_domain() -> Domain {
        Domain::new(vec![SmoothPiece::Ball { center: vec![0.0], radius: 1.0 }], 1.0, 1.0)
    }

    #[test]
    fn fit_slope_exact_on_power_laws() {
        let hs = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let lin: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 3.0 * h)).collect();
        let fit = fit_slope(&lin).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3.0f64.ln()).abs() < 1e-12);
        let sqrt: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 0.7 * h.sqrt())).collect();
        let fit = fit_slope(&sqrt).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!(fit.ci_half_width < 1e-10);
    }

    #[test]
    fn fit_slope_errors() {
        assert!(matches!(
            fit_slope(&[(0.1, 1.0), (0.2, 2.0)]),
            Err(AnalysisError::InsufficientPoints { .. })
        ));
        assert!(matches!(
            fit_slope(&[(0.1, -1.0), (0.2, 0.0), (0.4, -3.0)]),
            Err(AnalysisError::NonPositiveValue)
        ));
        // Non-positive values are excluded, the rest fit.
        let fit = fit_slope(&[(0.1, 0.1), (0.2, 0.2), (0.4, 0.4), (0.8, -1.0)]).unwrap();
        assert_eq!(fit.excluded_nonpositive, 1);
        assert!((fit.slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guarded_fit_drops_saturated_head() {
        // Largest-h value statistically indistinguishable from the next.
        let pts = [
            (0.5, 1.00, 0.05),
            (0.25, 0.99, 0.05),
            (0.125, 0.60, 0.01),
            (0.0625, 0.40, 0.01),
            (0.03125, 0.28, 0.01),
        ];
        let fit = fit_slope_guarded(&pts).unwrap();
        assert!(fit.dropped_largest_h);
        assert_eq!(fit.n_used, 4);
    }

    #[test]
    fn report_sanity_on_stopped_martingale() {
        let spec = b1_spec();
        let dom = b1_domain();
        let mut batch = simulate_euler(&spec, &dom, Grid::new(1.0, 32), 4000, 5).unwrap();
        batch.mark_refined(16, 5);
        let engine = CondExpEngine::AnalyticOracle(Arc::new(StoppedMartingaleOracle));
        let tables = backward_solve(&batch, &spec, &engine, PicardParams::default()).unwrap();
        let (report, tau_hat) = error_report(&batch, &tables, &spec, &dom, 5).unwrap();
        assert!(report.err2_horizon.value.is_finite() && report.err2_horizon.value > 0.0);
        assert!(report.err2_stopped.value <= report.err2_horizon.value + 1e-12);
        assert!(report.exit_error.mean_abs >= 0.0);
        assert!(report.y0_bias < 0.05, "y0 bias {}", report.y0_bias);
        // Oracle exits never come after a detected discrete exit.
        for p in 0..4000 {
            if batch.exit_index[p] < 32 {
                assert!(tau_hat[p] <= batch.exit_time(p) + 1e-15);
            }
        }
    }

    #[test]
    fn estimators_invariant_under_path_reordering() {
        let spec = b1_spec();
        let dom = b1_domain();
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 8), 512, 9).unwrap();
        let refined = crate::dynamics::refine_bridge(&batch, &spec, 16, 9);
        let engine = CondExpEngine::AnalyticOracle(Arc::new(StoppedMartingaleOracle));
        let tables = backward_solve(&refined, &spec, &engine, PicardParams::default()).unwrap();
        let e1 = strong_error(&refined, &tables, &spec, &dom, ThetaMode::Horizon).unwrap();

        // Reverse the path order everywhere; with stored fine data the sweep
        // must reproduce the same estimator value.
        let n = batch.grid.n;
        let d = batch.dim;
        let np = batch.n_paths;
        let m = 16;
        let perm: Vec<usize> = (0..np).rev().collect();
        let mut rev = refined.clone();
        let fine = refined.refinement.as_ref().unwrap().stored.as_ref().unwrap();
        let knots = n * m + 1;
        let rev_ref = rev.refinement.as_mut().unwrap().stored.as_mut().unwrap();
        for (newp, &oldp) in perm.iter().enumerate() {
            for i in 0..=n {
                let src = (oldp * (n + 1) + i) * d;
                let dst = (newp * (n + 1) + i) * d;
                rev.states[dst..dst + d].copy_from_slice(&refined.states[src..src + d]);
            }
            for i in 0..n {
                let src = (oldp * n + i) * d;
                let dst = (newp * n + i) * d;
                rev.increments[dst..dst + d].copy_from_slice(&refined.increments[src..src + d]);
            }
            rev.exit_index[newp] = refined.exit_index[oldp];
            rev_ref.states[newp * knots * d..(newp + 1) * knots * d]
                .copy_from_slice(&fine.states[oldp * knots * d..(oldp + 1) * knots * d]);
            rev_ref.increments[newp * n * m * d..(newp + 1) * n * m * d]
                .copy_from_slice(&fine.increments[oldp * n * m * d..(oldp + 1) * n * m * d]);
        }
        let mut rev_tables = tables.clone();
        for (newp, &oldp) in perm.iter().enumerate() {
            for i in 0..=n {
                rev_tables.y[i * np + newp] = tables.y[i * np + oldp];
                for c in 0..d {
                    rev_tables.z[(i * np + newp) * d + c] = tables.z[(i * np + oldp) * d + c];
                }
            }
            rev_tables.freeze_index[newp] = tables.freeze_index[oldp];
            rev_tables.exit_time[newp] = tables.exit_time[oldp];
        }
        let e2 = strong_error(&rev, &rev_tables, &spec, &dom, ThetaMode::Horizon).unwrap();
        assert!(
            (e1.value - e2.value).abs() <= 1e-12 * e1.value.max(1.0),
            "{} vs {}",
            e1.value,
            e2.value
        );
    }

    #[test]
    fn virtual_and_stored_sweeps_agree() {
        let spec = b1_spec();
        let dom = b1_domain();
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 8), 256, 14).unwrap();
        let engine = CondExpEngine::AnalyticOracle(Arc::new(StoppedMartingaleOracle));
        let stored = crate::dynamics::refine_bridge(&batch, &spec, 16, 14);
        let mut virt = batch.clone();
        virt.mark_refined(16, 14);
        let t1 = backward_solve(&stored, &spec, &engine, PicardParams::default()).unwrap();
        let a = strong_error(&stored, &t1, &spec, &dom, ThetaMode::Horizon).unwrap();
        let b = strong_error(&virt, &t1, &spec, &dom, ThetaMode::Horizon).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn stderr_halves_when_paths_double() {
        let spec = b1_spec();
        let dom = b1_domain();
        let engine = CondExpEngine::AnalyticOracle(Arc::new(StoppedMartingaleOracle));
        let mut ratios = Vec::new();
        for rep in 0..10 {
            let seed = 100 + rep;
            let mut small = simulate_euler(&spec, &dom, Grid::new(1.0, 8), 2000, seed).unwrap();
            small.mark_refined(16, seed);
            let mut big = simulate_euler(&spec, &dom, Grid::new(1.0, 8), 4000, seed).unwrap();
            big.mark_refined(16, seed);
            let ts = backward_solve(&small, &spec, &engine, PicardParams::default()).unwrap();
            let tb = backward_solve(&big, &spec, &engine, PicardParams::default()).unwrap();
            let es = strong_error(&small, &ts, &spec, &dom, ThetaMode::Horizon).unwrap();
            let eb = strong_error(&big, &tb, &spec, &dom, ThetaMode::Horizon).unwrap();
            ratios.push(es.stderr * es.stderr / (eb.stderr * eb.stderr));
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (mean_ratio - 2.0).abs() <= 0.4,
            "stderr^2 ratio across doubling = {mean_ratio}"
        );
    }

    #[test]
    fn regularity_positive_and_scales_down_with_h() {
        let spec = b1_spec();
        let dom = b1_domain();
        let engine = CondExpEngine::Regression { basis: Some(crate::regression::BasisSpec::hypercube(8)) };
        let mut values = Vec::new();
        for n in [8usize, 32] {
            let mut batch = simulate_euler(&spec, &dom, Grid::new(1.0, n), 4000, 19).unwrap();
            batch.mark_refined(16, 19);
            let rep = regularity_diagnostics(&batch, &spec, &dom, &engine).unwrap();
            assert!(rep.r_y >= 0.0 && rep.r_z >= -1e-12, "r_y={} r_z={}", rep.r_y, rep.r_z);
            values.push(rep.r_y + rep.r_z);
        }
        assert!(values[1] < values[0], "regularity should shrink with h: {values:?}");
    }
}
