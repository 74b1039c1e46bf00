//! The backward scheme: terminal condition at the (discrete or exactly
//! sampled) exit, then for each grid layer the `Z` projection from increment
//! correlations and the implicit `Y` step solved by Picard iteration, with
//! values frozen at and after the exit.
//!
//! Conditional expectations given the current state are supplied by a
//! pluggable engine: least-squares regression on the alive sub-population, a
//! closed-form oracle, or an exact grouping tree for tiny test instances.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::dynamics::{ExactExit, PathBatch, ProblemSpec};
use crate::regression::{self, BasisSpec, RegressionError};

#[derive(Debug, Error)]
pub enum BsdeError {
    #[error("contraction violated: L*h = {lh} >= 1; refine the grid")]
    ContractionViolated { lh: f64 },
    #[error("Picard iteration diverged at layer {layer}, path {path} (residual {residual})")]
    PicardDiverged { layer: usize, path: usize, residual: f64 },
    #[error("missing closed-form reference on the problem spec")]
    MissingReference,
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

/// Parameters of the implicit-step fixed-point solve.
#[derive(Clone, Copy, Debug)]
pub struct PicardParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PicardParams {
    fn default() -> Self {
        PicardParams { max_iter: 20, tol: 1e-12 }
    }
}

/// Exit data driving the stopped-path conventions: where each path freezes
/// and the argument of the boundary condition.
#[derive(Clone, Debug)]
pub struct ExitData {
    pub exit_time: Vec<f64>,
    /// `n_paths * d`, path-major.
    pub exit_state: Vec<f64>,
    /// First grid index at or after the exit; the path is alive strictly
    /// before it.
    pub freeze_index: Vec<u32>,
}

impl ExitData {
    /// Discrete exit data read off the batch (`tau` on the grid).
    pub fn discrete(batch: &PathBatch) -> ExitData {
        let d = batch.dim;
        let mut exit_time = Vec::with_capacity(batch.n_paths);
        let mut exit_state = Vec::with_capacity(batch.n_paths * d);
        let mut freeze_index = Vec::with_capacity(batch.n_paths);
        for p in 0..batch.n_paths {
            exit_time.push(batch.exit_time(p));
            exit_state.extend_from_slice(batch.exit_state(p));
            freeze_index.push(batch.exit_index[p]);
        }
        ExitData { exit_time, exit_state, freeze_index }
    }

    /// Exit data from the exact within-step crossing sampler.
    pub fn from_exact(exits: &[ExactExit]) -> ExitData {
        let mut exit_time = Vec::with_capacity(exits.len());
        let mut exit_state = Vec::new();
        let mut freeze_index = Vec::with_capacity(exits.len());
        for e in exits {
            exit_time.push(e.tau);
            exit_state.extend_from_slice(&e.exit_state);
            freeze_index.push(e.freeze_index);
        }
        ExitData { exit_time, exit_state, freeze_index }
    }

    #[inline]
    pub fn state(&self, path: usize, d: usize) -> &[f64] {
        &self.exit_state[path * d..(path + 1) * d]
    }
}

/// Inputs visible to a conditional-expectation engine at one layer: the alive
/// sub-population with its predictors `X_{t_i}`, next-layer values, and the
/// per-component products `Y_{i+1} * dW_i` used for the `Z` projection.
pub struct LayerCtx<'a> {
    pub layer: usize,
    pub t: f64,
    pub h: f64,
    pub dim: usize,
    /// Path indices of the alive sub-population.
    pub alive: &'a [usize],
    /// `alive.len() * dim`, alive-ordered.
    pub predictors: &'a [f64],
    /// `alive.len()`, alive-ordered: next-layer `Y` values.
    pub y_next: &'a [f64],
    /// `alive.len() * dim`, alive-ordered: `Y_{i+1} * dW_i` per component.
    pub y_dw: &'a [f64],
}

/// Closed-form conditional expectations for benchmark problems: fills
/// `e_y[a] = E[Y_{i+1} | X_{t_i} = x_a]` and
/// `e_z[a*d + c] = h^{-1} E[Y_{i+1} dW_i^c | X_{t_i} = x_a]`.
pub trait LayerOracle: Send + Sync {
    fn conditional(&self, ctx: &LayerCtx<'_>, e_y: &mut [f64], e_z: &mut [f64]);
}

/// How conditional expectations are estimated.
#[derive(Clone)]
pub enum CondExpEngine {
    /// Least squares on the alive sub-population. `None` selects the default
    /// basis per layer (local-constant cells scaled to the alive count).
    Regression { basis: Option<BasisSpec> },
    /// Closed-form oracle (no sampling error).
    AnalyticOracle(Arc<dyn LayerOracle>),
    /// Exact grouping by bit-identical predictor; for tiny test instances.
    Tree,
}

impl CondExpEngine {
    pub fn regression_default() -> Self {
        CondExpEngine::Regression { basis: None }
    }

    pub(crate) fn conditional(
        &self,
        ctx: &LayerCtx<'_>,
        e_y: &mut [f64],
        e_z: &mut [f64],
    ) -> Result<(), BsdeError> {
        let na = ctx.alive.len();
        let d = ctx.dim;
        match self {
            CondExpEngine::AnalyticOracle(oracle) => {
                oracle.conditional(ctx, e_y, e_z);
                Ok(())
            }
            CondExpEngine::Tree => {
                let mut groups: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
                for a in 0..na {
                    let key: Vec<u64> =
                        ctx.predictors[a * d..(a + 1) * d].iter().map(|v| v.to_bits()).collect();
                    groups.entry(key).or_default().push(a);
                }
                for members in groups.values() {
                    let w = 1.0 / members.len() as f64;
                    let mean_y: f64 = members.iter().map(|&a| ctx.y_next[a]).sum::<f64>() * w;
                    for &a in members {
                        e_y[a] = mean_y;
                    }
                    for c in 0..d {
                        let mean_z: f64 =
                            members.iter().map(|&a| ctx.y_dw[a * d + c]).sum::<f64>() * w / ctx.h;
                        for &a in members {
                            e_z[a * d + c] = mean_z;
                        }
                    }
                }
                Ok(())
            }
            CondExpEngine::Regression { basis } => {
                // A deterministic starting point has a trivial sigma-field:
                // plain sample means (also covers any constant-predictor layer).
                let constant = ctx.layer == 0
                    || ctx.predictors.chunks(d).all(|x| x == &ctx.predictors[..d]);
                if constant {
                    let w = 1.0 / na as f64;
                    let mean_y: f64 = ctx.y_next.iter().sum::<f64>() * w;
                    e_y.fill(mean_y);
                    for c in 0..d {
                        let mean_z: f64 =
                            (0..na).map(|a| ctx.y_dw[a * d + c]).sum::<f64>() * w / ctx.h;
                        for a in 0..na {
                            e_z[a * d + c] = mean_z;
                        }
                    }
                    return Ok(());
                }
                let spec = basis.clone().unwrap_or_else(|| BasisSpec::default_for(na, d));
                let model = regression::fit(ctx.predictors, d, ctx.y_next, &spec)?;
                for a in 0..na {
                    e_y[a] = model.predict(&ctx.predictors[a * d..(a + 1) * d]);
                }
                let mut resp = vec![0.0; na];
                for c in 0..d {
                    for a in 0..na {
                        resp[a] = ctx.y_dw[a * d + c];
                    }
                    let zmodel = regression::fit(ctx.predictors, d, &resp, &spec)?;
                    for a in 0..na {
                        e_z[a * d + c] =
                            zmodel.predict(&ctx.predictors[a * d..(a + 1) * d]) / ctx.h;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Per-layer Picard diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerDiag {
    pub max_iterations: usize,
    pub max_residual: f64,
}

/// The discrete backward solution: `Y` and `Z` on every grid knot per path,
/// plus the freeze bookkeeping and Picard diagnostics.
#[derive(Clone, Debug)]
pub struct BackwardTables {
    pub n: usize,
    pub n_paths: usize,
    pub dim: usize,
    /// `(n+1) * n_paths`, layer-major.
    pub y: Vec<f64>,
    /// `(n+1) * n_paths * d`, layer-major.
    pub z: Vec<f64>,
    pub freeze_index: Vec<u32>,
    pub exit_time: Vec<f64>,
    pub diagnostics: Vec<LayerDiag>,
}

impl BackwardTables {
    #[inline]
    pub fn y(&self, path: usize, i: usize) -> f64 {
        self.y[i * self.n_paths + path]
    }

    #[inline]
    pub fn z(&self, path: usize, i: usize) -> &[f64] {
        let base = (i * self.n_paths + path) * self.dim;
        &self.z[base..base + self.dim]
    }

    /// Alive flag: `t_i` strictly before the exit.
    #[inline]
    pub fn alive(&self, path: usize, i: usize) -> bool {
        (i as u32) < self.freeze_index[path]
    }

    /// Mean of `Y_0` over paths: the scheme's estimate of `u(0, x0)`.
    pub fn y0_mean(&self) -> f64 {
        self.y[..self.n_paths].iter().sum::<f64>() / self.n_paths as f64
    }

    /// Standard error of the `Y_0` mean.
    pub fn y0_stderr(&self) -> f64 {
        let m = self.y0_mean();
        let var = self.y[..self.n_paths].iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            / (self.n_paths as f64 - 1.0).max(1.0);
        (var / self.n_paths as f64).sqrt()
    }

    /// Worst Picard residual across layers.
    pub fn max_picard_residual(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.max_residual).fold(0.0, f64::max)
    }

    /// Worst Picard iteration count across layers.
    pub fn max_picard_iterations(&self) -> usize {
        self.diagnostics.iter().map(|d| d.max_iterations).max().unwrap_or(0)
    }
}

/// Runs the backward sweep with the batch's discrete exit time.
pub fn backward_solve(
    batch: &PathBatch,
    spec: &ProblemSpec,
    engine: &CondExpEngine,
    picard: PicardParams,
) -> Result<BackwardTables, BsdeError> {
    let exit = ExitData::discrete(batch);
    backward_solve_with_exit(batch, spec, engine, picard, &exit)
}

/// Runs the backward sweep against externally supplied exit data (the exact
/// within-step sampler, or the discrete default).
pub fn backward_solve_with_exit(
    batch: &PathBatch,
    spec: &ProblemSpec,
    engine: &CondExpEngine,
    picard: PicardParams,
    exit: &ExitData,
) -> Result<BackwardTables, BsdeError> {
    let n = batch.grid.n;
    let d = batch.dim;
    let h = batch.grid.h;
    let n_paths = batch.n_paths;
    let lh = spec.lipschitz * h;
    if lh >= 1.0 {
        return Err(BsdeError::ContractionViolated { lh });
    }

    let mut y = vec![0.0; (n + 1) * n_paths];
    let mut z = vec![0.0; (n + 1) * n_paths * d];
    let mut diagnostics = vec![LayerDiag::default(); n];

    // Terminal layer: Y_T = g(tau, X_tau) per path (g(T, X_T) when no exit).
    let mut frozen = vec![0.0; n_paths];
    for p in 0..n_paths {
        let gval = (spec.boundary)(exit.exit_time[p], exit.state(p, d));
        frozen[p] = gval;
        y[n * n_paths + p] = gval;
    }

    let mut alive: Vec<usize> = Vec::with_capacity(n_paths);
    let mut predictors: Vec<f64> = Vec::new();
    let mut y_next: Vec<f64> = Vec::new();
    let mut y_dw: Vec<f64> = Vec::new();

    for i in (0..n).rev() {
        let t = batch.grid.time(i);
        alive.clear();
        for p in 0..n_paths {
            if (i as u32) < exit.freeze_index[p] {
                alive.push(p);
            } else {
                // Stopped conventions, exact by construction.
                y[i * n_paths + p] = frozen[p];
                // z stays zero.
            }
        }
        if alive.is_empty() {
            continue;
        }
        let na = alive.len();
        predictors.clear();
        y_next.clear();
        y_dw.clear();
        for &p in &alive {
            predictors.extend_from_slice(batch.state(p, i));
            let yv = y[(i + 1) * n_paths + p];
            y_next.push(yv);
            let dw = batch.increment(p, i);
            for c in 0..d {
                y_dw.push(yv * dw[c]);
            }
        }
        let ctx = LayerCtx {
            layer: i,
            t,
            h,
            dim: d,
            alive: &alive,
            predictors: &predictors,
            y_next: &y_next,
            y_dw: &y_dw,
        };
        let mut e_y = vec![0.0; na];
        let mut e_z = vec![0.0; na * d];
        engine.conditional(&ctx, &mut e_y, &mut e_z)?;

        let mut diag = LayerDiag::default();
        for (a, &p) in alive.iter().enumerate() {
            let zrow = &e_z[a * d..(a + 1) * d];
            z[(i * n_paths + p) * d..(i * n_paths + p + 1) * d].copy_from_slice(zrow);
            let x = &predictors[a * d..(a + 1) * d];
            // Implicit step by Picard iteration from the explicit predictor.
            let c = e_y[a];
            let mut yv = c;
            let mut first_delta = f64::INFINITY;
            let mut delta = f64::INFINITY;
            let mut iters = 0;
            for it in 0..picard.max_iter {
                let ynew = c + h * (spec.driver)(t, x, yv, zrow);
                delta = (ynew - yv).abs();
                yv = ynew;
                iters = it + 1;
                if it == 0 {
                    first_delta = delta;
                }
                if delta <= picard.tol {
                    break;
                }
            }
            if delta > picard.tol && delta >= first_delta {
                return Err(BsdeError::PicardDiverged { layer: i, path: p, residual: delta });
            }
            diag.max_iterations = diag.max_iterations.max(iters);
            diag.max_residual = diag.max_residual.max(delta);
            y[i * n_paths + p] = yv;
        }
        diagnostics[i] = diag;
    }

    Ok(BackwardTables {
        n,
        n_paths,
        dim: d,
        y,
        z,
        freeze_index: exit.freeze_index.clone(),
        exit_time: exit.exit_time.clone(),
        diagnostics,
    })
}

/// Oracle for stopped-martingale problems (`f = 0`, `g(t,x) = x^1`, `b = 0`,
/// first coordinate driven by the first Brownian component with unit
/// coefficient): the tower property gives `E[Y_{i+1} | F_i] = X^1_{t_i}` on
/// alive paths and the increment projection is the alive indicator.
pub struct StoppedMartingaleOracle;

impl LayerOracle for StoppedMartingaleOracle {
    fn conditional(&self, ctx: &LayerCtx<'_>, e_y: &mut [f64], e_z: &mut [f64]) {
        let d = ctx.dim;
        for a in 0..ctx.alive.len() {
            e_y[a] = ctx.predictors[a * d];
            for c in 0..d {
                e_z[a * d + c] = if c == 0 { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Oracle that treats the next-layer value as deterministic (valid when no
/// randomness enters `Y`: no exits and a state-free driver).
pub struct DeterministicOracle;

impl LayerOracle for DeterministicOracle {
    fn conditional(&self, ctx: &LayerCtx<'_>, e_y: &mut [f64], e_z: &mut [f64]) {
        for a in 0..ctx.alive.len() {
            e_y[a] = ctx.y_next[a];
        }
        e_z.fill(0.0);
    }
}

/// Path-regularity diagnostics of the reference solution along refined paths
/// (`R(Y)`, `R(Z)` and the per-interval hat-Z decomposition); see
/// [`crate::analysis::regularity_diagnostics`] for the definitions.
pub fn hatz_diagnostic(
    batch: &PathBatch,
    spec: &ProblemSpec,
    domain: &crate::geometry::Domain,
    engine: &CondExpEngine,
) -> Result<crate::analysis::RegularityReport, crate::analysis::AnalysisError> {
    crate::analysis::regularity_diagnostics(batch, spec, domain, engine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_euler, Grid, ProblemSpec};
    use crate::geometry::{identity_sigma, Domain, SmoothPiece};

    fn brownian_1d(x0: f64, g: crate::dynamics::ValueFn) -> ProblemSpec {
        ProblemSpec {
            dim: 1,
            x0: vec![x0],
            drift: Arc::new(|_x, out| out.fill(0.0)),
            sigma: identity_sigma(1),
            driver: Arc::new(|_t, _x, _y, _z| 0.0),
            boundary: g,
            reference: None,
            lipschitz: 1.0,
        }
    }

    fn interval(radius: f64, horizon: f64) -> Domain {
        Domain::new(vec![SmoothPiece::Ball { center: vec![0.0], radius }], 1.0, horizon)
    }

    #[test]
    fn constant_terminal_data_propagates_exactly() {
        // f = 0, g = c: Y = c everywhere, Z = 0, any engine.
        let spec = brownian_1d(0.0, Arc::new(|_t, _x| 4.25));
        let dom = interval(1.0, 1.0);
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 16), 256, 3).unwrap();
        for engine in [CondExpEngine::regression_default(), CondExpEngine::Tree] {
            let tables = backward_solve(&batch, &spec, &engine, PicardParams::default()).unwrap();
            for p in 0..256 {
                for i in 0..=16 {
                    assert_eq!(tables.y(p, i), 4.25);
                    assert!(tables.z(p, i).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn stopped_martingale_identity_holds_pathwise() {
        // f = 0, g = x: Y_{t_i} = X_{t_i ^ tau} and Z = alive indicator.
        let spec = brownian_1d(0.0, Arc::new(|_t, x| x[0]));
        let dom = interval(1.0, 1.0);
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 32), 512, 10).unwrap();
        let engine = CondExpEngine::AnalyticOracle(Arc::new(StoppedMartingaleOracle));
        let tables = backward_solve(&batch, &spec, &engine, PicardParams::default()).unwrap();
        for p in 0..512 {
            let k = batch.exit_index[p] as usize;
            for i in 0..=32 {
                let stopped = batch.state(p, i.min(k))[0];
                assert!(
                    (tables.y(p, i) - stopped).abs() <= 1e-12,
                    "path {p} layer {i}: {} vs {}",
                    tables.y(p, i),
                    stopped
                );
                let expect_z = if i < k && i < 32 { 1.0 } else { 0.0 };
                assert_eq!(tables.z(p, i)[0], expect_z);
            }
        }
    }

    #[test]
    fn stopped_freeze_invariant_exact() {
        let spec = brownian_1d(0.0, Arc::new(|t, x| x[0] + 0.5 * t));
        let dom = interval(0.5, 1.0);
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 24), 400, 6).unwrap();
        let tables = backward_solve(
            &batch,
            &spec,
            &CondExpEngine::regression_default(),
            PicardParams::default(),
        )
        .unwrap();
        for p in 0..400 {
            let k = batch.exit_index[p] as usize;
            let gval = (spec.boundary)(batch.exit_time(p), batch.exit_state(p));
            for i in k..=24 {
                assert_eq!(tables.y(p, i), gval, "frozen Y must equal g(tau, X_tau) exactly");
                assert!(tables.z(p, i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn linear_driver_matches_implicit_recursion() {
        // f = -y, no exits, deterministic: per-step fixed point
        // y = y_next + h*(-y), so Y_0 = (1+h)^{-n}.
        let n = 64;
        let spec = ProblemSpec {
            driver: Arc::new(|_t, _x, y, _z| -y),
            ..brownian_1d(0.0, Arc::new(|_t, _x| 1.0))
        };
        let dom = interval(1e9, 1.0);
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, n), 16, 4).unwrap();
        let engine = CondExpEngine::AnalyticOracle(Arc::new(DeterministicOracle));
        let tables = backward_solve(&batch, &spec, &engine, PicardParams::default()).unwrap();
        let h = 1.0 / n as f64;
        let expect = (1.0 + h).powi(-(n as i32));
        assert!(
            (tables.y0_mean() - expect).abs() <= 1e-10,
            "Y0 = {}, closed form = {expect}",
            tables.y0_mean()
        );
        assert!(tables.max_picard_residual() <= 1e-12);
    }

    #[test]
    fn contraction_violation_detected() {
        let spec = ProblemSpec { lipschitz: 8.0, ..brownian_1d(0.0, Arc::new(|_t, _x| 0.0)) };
        let dom = interval(1.0, 1.0);
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 4), 4, 1).unwrap();
        let err =
            backward_solve(&batch, &spec, &CondExpEngine::Tree, PicardParams::default()).unwrap_err();
        assert!(matches!(err, BsdeError::ContractionViolated { .. }));
    }

    #[test]
    fn tree_engine_matches_singleton_regression() {
        // n_paths <= 8 with singleton cells: regression reproduces the
        // grouping tree's conditional expectations exactly.
        let spec = brownian_1d(0.0, Arc::new(|_t, x| x[0] * x[0]));
        let dom = interval(2.0, 1.0);
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 8), 8, 21).unwrap();
        let tree =
            backward_solve(&batch, &spec, &CondExpEngine::Tree, PicardParams::default()).unwrap();
        let singleton = CondExpEngine::Regression { basis: Some(BasisSpec::hypercube(4096)) };
        let reg = backward_solve(&batch, &spec, &singleton, PicardParams::default()).unwrap();
        for p in 0..8 {
            for i in 0..=8 {
                assert!(
                    (tree.y(p, i) - reg.y(p, i)).abs() < 1e-12,
                    "path {p} layer {i}: tree {} vs regression {}",
                    tree.y(p, i),
                    reg.y(p, i)
                );
            }
        }
    }

    #[test]
    fn discrete_martingale_mean_constant_without_driver() {
        let spec = brownian_1d(0.1, Arc::new(|_t, x| (2.0 * x[0]).sin()));
        let dom = interval(1.0, 1.0);
        let n_paths = 4000;
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 16), n_paths, 42).unwrap();
        let engine = CondExpEngine::regression_default();
        let tables = backward_solve(&batch, &spec, &engine, PicardParams::default()).unwrap();
        // f = 0 with mean-preserving conditional estimators: the cross-path
        // mean of Y is constant across layers.
        let mean_at =
            |i: usize| (0..n_paths).map(|p| tables.y(p, i)).sum::<f64>() / n_paths as f64;
        let m_terminal = mean_at(16);
        for i in 0..16 {
            assert!(
                (mean_at(i) - m_terminal).abs() <= 1e-10,
                "layer {i}: {} vs {}",
                mean_at(i),
                m_terminal
            );
        }
    }

    #[test]
    fn scheme_is_linear_in_terminal_data_without_driver() {
        let g1: crate::dynamics::ValueFn = Arc::new(|_t, x| x[0].max(0.0));
        let g2: crate::dynamics::ValueFn = Arc::new(|t, x| (x[0] + t).cos());
        let g12: crate::dynamics::ValueFn = Arc::new(|t, x| x[0].max(0.0) + (x[0] + t).cos());
        let dom = interval(1.0, 1.0);
        let engine = CondExpEngine::regression_default();
        let mut tables = Vec::new();
        for g in [g1, g2, g12] {
            let spec = brownian_1d(0.0, g);
            let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 12), 600, 33).unwrap();
            tables.push(backward_solve(&batch, &spec, &engine, PicardParams::default()).unwrap());
        }
        for p in 0..600 {
            for i in 0..=12 {
                let lhs = tables[2].y(p, i);
                let rhs = tables[0].y(p, i) + tables[1].y(p, i);
                assert!((lhs - rhs).abs() <= 1e-10, "path {p} layer {i}");
            }
        }
    }

    #[test]
    fn exact_exit_data_freezes_midstep_crossings() {
        let spec = brownian_1d(0.1, Arc::new(|_t, x| x[0]));
        let dom = Domain::new(
            vec![SmoothPiece::HalfSpace { normal: vec![1.0], offset: 0.0 }],
            1.0,
            1.0,
        );
        let batch = simulate_euler(&spec, &dom, Grid::new(1.0, 16), 800, 77).unwrap();
        let exits = crate::dynamics::exact_exit_halfspace(&batch, &spec, &dom, 99).unwrap();
        let data = ExitData::from_exact(&exits);
        let engine = CondExpEngine::regression_default();
        let tables =
            backward_solve_with_exit(&batch, &spec, &engine, PicardParams::default(), &data)
                .unwrap();
        let mut saw_interior = false;
        for p in 0..800 {
            let f = data.freeze_index[p] as usize;
            let gval = (spec.boundary)(data.exit_time[p], data.state(p, 1));
            for i in f..=16 {
                assert_eq!(tables.y(p, i), gval);
            }
            if exits[p].interior_crossing {
                saw_interior = true;
                // Interior crossings land on the boundary at mid-step.
                assert!(data.state(p, 1)[0].abs() < 1e-12);
                assert!((data.exit_time[p] - (f as f64 - 0.5) / 16.0).abs() < 1e-12);
            }
        }
        assert!(saw_interior, "expected at least one sampled interior crossing");
    }
}
