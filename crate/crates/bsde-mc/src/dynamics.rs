//! Forward simulation: the Euler scheme on a uniform grid, its discrete exit
//! time, Brownian-bridge refinement of the within-step path, and exit-time
//! oracles.
//!
//! Within a coarse step the Euler scheme has frozen coefficients, so its
//! continuous-time version is an arithmetic Brownian motion between knots.
//! Refinement samples that continuous path at `m_fine` sub-knots per step by
//! conditioning bridge increments on the stored coarse increment: partial
//! sums of the fine increments reproduce each coarse increment exactly, and
//! the fine path agrees with the coarse path at every coarse knot exactly.
//! The refined path at high `m_fine` serves as the ground-truth stand-in for
//! the continuous dynamics when estimating exit-time and strong errors.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Domain, SigmaFn, SmoothPiece};
use crate::rng::{tag, Stream};

/// Drift field: writes `b(x)` (length `d`) into the output buffer.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Driver `f(t, x, y, z)` of the backward equation.
pub type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// Scalar field of `(t, x)`, e.g. the boundary condition `g` or a reference `u`.
pub type ValueFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// Spatial gradient field of `(t, x)`: writes a length-`d` row into the buffer.
pub type GradientFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite state at path {path}, step {step} (coefficient blow-up or bad spec)")]
    NonFiniteState { path: usize, step: usize },
    #[error("unsupported domain for exact exit sampling: {0}")]
    UnsupportedDomain(String),
}

/// Uniform time grid `t_i = i h`, `h = T / n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub h: f64,
    pub horizon: f64,
}

impl Grid {
    pub fn new(horizon: f64, n: usize) -> Self {
        assert!(n >= 1 && horizon > 0.0);
        Grid { n, h: horizon / n as f64, horizon }
    }

    /// `t_i`, with `t_n == horizon` exactly in the working precision.
    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n {
            self.horizon
        } else {
            i as f64 * self.h
        }
    }
}

/// Closed-form reference solution `u` and its spatial gradient, used to
/// reconstruct `(Y, Z)` along fine paths.
#[derive(Clone)]
pub struct Reference {
    pub u: ValueFn,
    pub du: GradientFn,
}

/// Coefficients of the forward-backward system plus the declared Lipschitz
/// constant.
#[derive(Clone)]
pub struct ProblemSpec {
    pub dim: usize,
    pub x0: Vec<f64>,
    pub drift: DriftFn,
    pub sigma: SigmaFn,
    pub driver: DriverFn,
    pub boundary: ValueFn,
    pub reference: Option<Reference>,
    pub lipschitz: f64,
}

/// Fine-grid data produced by [`refine_bridge`] when storage is requested.
#[derive(Clone, Debug)]
pub struct FineData {
    /// `n_paths * (n * m_fine + 1) * d`, path-major.
    pub states: Vec<f64>,
    /// `n_paths * n * m_fine * d`, path-major.
    pub increments: Vec<f64>,
}

/// Refinement marker. Fine paths are a deterministic function of
/// `(bridge_seed, path, coarse step)`, so they can either be stored or
/// regenerated on the fly; both views are bit-identical.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub m_fine: usize,
    pub bridge_seed: u64,
    pub stored: Option<FineData>,
}

/// A batch of Euler paths on the coarse grid with their Brownian increments
/// and discrete exit indices. Immutable after construction.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub grid: Grid,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// `n_paths * (n+1) * d`, path-major.
    pub states: Vec<f64>,
    /// `n_paths * n * d`, path-major.
    pub increments: Vec<f64>,
    /// First grid index `i` with `X_{t_i}` outside the domain, capped at `n`.
    pub exit_index: Vec<u32>,
    pub refinement: Option<Refinement>,
}

impl PathBatch {
    #[inline]
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let d = self.dim;
        let base = (path * (self.grid.n + 1) + i) * d;
        &self.states[base..base + d]
    }

    #[inline]
    pub fn increment(&self, path: usize, i: usize) -> &[f64] {
        let d = self.dim;
        let base = (path * self.grid.n + i) * d;
        &self.increments[base..base + d]
    }

    /// Discrete exit time `t_{k}` of the path.
    #[inline]
    pub fn exit_time(&self, path: usize) -> f64 {
        self.grid.time(self.exit_index[path] as usize)
    }

    /// State at the discrete exit index (the terminal state when no exit).
    #[inline]
    pub fn exit_state(&self, path: usize) -> &[f64] {
        self.state(path, self.exit_index[path] as usize)
    }

    pub fn m_fine(&self) -> Option<usize> {
        self.refinement.as_ref().map(|r| r.m_fine)
    }

    /// Marks the batch as refined with factor `m_fine` without storing fine
    /// states; downstream consumers regenerate fine paths deterministically.
    pub fn mark_refined(&mut self, m_fine: usize, bridge_seed: u64) {
        assert!(m_fine >= 2 && m_fine.is_power_of_two(), "m_fine must be a power of two >= 2");
        self.refinement = Some(Refinement { m_fine, bridge_seed, stored: None });
    }

    // -- binary dump --------------------------------------------------------
    //
    // Little-endian layout:
    //   magic  8 bytes  "BSDEPB01"
    //   u64    n, n_paths, d, seed
    //   f64    horizon
    //   per path:
    //     u64  exit_index
    //     f64  states      (n+1)*d values
    //     f64  increments  n*d values
    // Refinement markers and fine states are not serialized.

    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"BSDEPB01")?;
        for v in [self.grid.n as u64, self.n_paths as u64, self.dim as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.horizon.to_le_bytes())?;
        let n = self.grid.n;
        let d = self.dim;
        for p in 0..self.n_paths {
            w.write_all(&(self.exit_index[p] as u64).to_le_bytes())?;
            let sb = (p * (n + 1)) * d;
            for v in &self.states[sb..sb + (n + 1) * d] {
                w.write_all(&v.to_le_bytes())?;
            }
            let ib = (p * n) * d;
            for v in &self.increments[ib..ib + n * d] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> std::io::Result<PathBatch> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"BSDEPB01" {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad magic"));
        }
        let mut u64buf = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> std::io::Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n = next_u64(r)? as usize;
        let n_paths = next_u64(r)? as usize;
        let d = next_u64(r)? as usize;
        let seed = next_u64(r)?;
        let mut f64buf = [0u8; 8];
        r.read_exact(&mut f64buf)?;
        let horizon = f64::from_le_bytes(f64buf);
        let grid = Grid::new(horizon, n);
        let mut states = vec![0.0; n_paths * (n + 1) * d];
        let mut increments = vec![0.0; n_paths * n * d];
        let mut exit_index = vec![0u32; n_paths];
        for p in 0..n_paths {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            exit_index[p] = u64::from_le_bytes(b) as u32;
            let sb = (p * (n + 1)) * d;
            for k in 0..(n + 1) * d {
                r.read_exact(&mut b)?;
                states[sb + k] = f64::from_le_bytes(b);
            }
            let ib = (p * n) * d;
            for k in 0..n * d {
                r.read_exact(&mut b)?;
                increments[ib + k] = f64::from_le_bytes(b);
            }
        }
        Ok(PathBatch { grid, dim: d, n_paths, seed, states, increments, exit_index, refinement: None })
    }
}

/// Simulates `n_paths` Euler paths. Paths keep evolving after the discrete
/// exit up to the horizon (the backward scheme freezes values, not states).
/// Deterministic per path given `(seed, spec, grid)` regardless of scheduling.
pub fn simulate_euler(
    spec: &ProblemSpec,
    domain: &Domain,
    grid: Grid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch, DynamicsError> {
    assert!(n_paths >= 1);
    let d = spec.dim;
    let n = grid.n;
    let h = grid.h;
    let sqrt_h = h.sqrt();
    let mut states = vec![0.0; n_paths * (n + 1) * d];
    let mut increments = vec![0.0; n_paths * n * d];
    let mut exit_index = vec![u32::MAX; n_paths];

    states
        .par_chunks_mut((n + 1) * d)
        .zip(increments.par_chunks_mut(n * d))
        .zip(exit_index.par_iter_mut())
        .enumerate()
        .try_for_each(|(p, ((st, inc), exit))| {
            st[..d].copy_from_slice(&spec.x0);
            let mut b = vec![0.0; d];
            let mut sg = vec![0.0; d * d];
            let mut z = vec![0.0; d];
            let mut k_exit = u32::MAX;
            for i in 0..n {
                let (cur, next) = st.split_at_mut((i + 1) * d);
                let x = &cur[i * d..];
                if k_exit == u32::MAX && !domain.contains(x) {
                    k_exit = i as u32;
                }
                let mut stream = Stream::substream(seed, p as u64, i as u64, tag::GAUSS);
                stream.fill_gaussians(&mut z);
                let dw = &mut inc[i * d..(i + 1) * d];
                for k in 0..d {
                    dw[k] = sqrt_h * z[k];
                }
                (spec.drift)(x, &mut b);
                (spec.sigma)(x, &mut sg);
                let xn = &mut next[..d];
                for r in 0..d {
                    let mut v = x[r] + b[r] * h;
                    for c in 0..d {
                        v += sg[c * d + r] * dw[c];
                    }
                    xn[r] = v;
                    if !v.is_finite() {
                        return Err(DynamicsError::NonFiniteState { path: p, step: i });
                    }
                }
            }
            if k_exit == u32::MAX && !domain.contains(&st[n * d..]) {
                k_exit = n as u32;
            }
            *exit = if k_exit == u32::MAX { n as u32 } else { k_exit };
            Ok(())
        })?;

    Ok(PathBatch {
        grid,
        dim: d,
        n_paths,
        seed,
        states,
        increments,
        exit_index,
        refinement: None,
    })
}

// ---------------------------------------------------------------------------
// fine-path walker
// ---------------------------------------------------------------------------

/// Streams one path's fine-grid trajectory. Within each coarse interval the
/// coefficients are frozen at the left coarse knot (matching the continuous
/// Euler dynamics) and bridge increments are conditioned sequentially on the
/// stored coarse increment; the final sub-knot of every interval is
/// overwritten with the coarse state, so knot consistency is exact.
pub struct FineWalker<'a> {
    batch: &'a PathBatch,
    spec: &'a ProblemSpec,
    path: usize,
    m: usize,
    bridge_seed: u64,
    delta: f64,
    i: usize,
    jj: usize,
    x: Vec<f64>,
    b: Vec<f64>,
    sg: Vec<f64>,
    /// Sub-increments of the current interval, `m * d` values, step-major.
    subs: Vec<f64>,
    /// Increment consumed by the most recent `advance`.
    last: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> FineWalker<'a> {
    pub fn new(batch: &'a PathBatch, spec: &'a ProblemSpec, path: usize, m: usize, bridge_seed: u64) -> Self {
        assert!(m >= 2 && m.is_power_of_two(), "m_fine must be a power of two >= 2");
        let d = batch.dim;
        let mut w = FineWalker {
            batch,
            spec,
            path,
            m,
            bridge_seed,
            delta: batch.grid.h / m as f64,
            i: 0,
            jj: 0,
            x: batch.state(path, 0).to_vec(),
            b: vec![0.0; d],
            sg: vec![0.0; d * d],
            subs: vec![0.0; m * d],
            last: vec![0.0; d],
            z: vec![0.0; d],
        };
        if batch.grid.n > 0 {
            w.begin_interval(0);
        }
        w
    }

    fn begin_interval(&mut self, i: usize) {
        let d = self.batch.dim;
        let m = self.m;
        let xl = self.batch.state(self.path, i);
        (self.spec.drift)(xl, &mut self.b);
        (self.spec.sigma)(xl, &mut self.sg);
        let dw = self.batch.increment(self.path, i);
        let mut stream = Stream::substream(self.bridge_seed, self.path as u64, i as u64, tag::BRIDGE);
        // Sequential bridge conditioning: sub_j | remainder ~ N(rem/(m-j), ...).
        let mut rem: Vec<f64> = dw.to_vec();
        for j in 0..m - 1 {
            stream.fill_gaussians(&mut self.z);
            let remaining = (m - j) as f64;
            let sd = (self.delta * (remaining - 1.0) / remaining).sqrt();
            for k in 0..d {
                let sub = rem[k] / remaining + sd * self.z[k];
                self.subs[j * d + k] = sub;
                rem[k] -= sub;
            }
        }
        // The last sub-increment closes the bridge so that the left-to-right
        // partial sum reproduces the coarse increment bit-exactly.
        for k in 0..d {
            reconcile_partial_sum(&mut self.subs, d, k, m, dw[k]);
        }
    }

    /// Fine knot index `i * m + jj` of the current state.
    #[inline]
    pub fn knot(&self) -> usize {
        self.i * self.m + self.jj
    }

    #[inline]
    pub fn time(&self) -> f64 {
        if self.i == self.batch.grid.n {
            self.batch.grid.horizon
        } else {
            self.i as f64 * self.batch.grid.h + self.jj as f64 * self.delta
        }
    }

    #[inline]
    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Fine increment consumed by the last `advance` call.
    #[inline]
    pub fn last_increment(&self) -> &[f64] {
        &self.last
    }

    /// Moves to the next fine knot; `false` once the horizon is reached.
    pub fn advance(&mut self) -> bool {
        let n = self.batch.grid.n;
        if self.i >= n {
            return false;
        }
        let d = self.batch.dim;
        self.last.copy_from_slice(&self.subs[self.jj * d..(self.jj + 1) * d]);
        for r in 0..d {
            let mut v = self.x[r] + self.b[r] * self.delta;
            for c in 0..d {
                v += self.sg[c * d + r] * self.last[c];
            }
            self.x[r] = v;
        }
        self.jj += 1;
        if self.jj == self.m {
            // Exact knot consistency.
            self.x.copy_from_slice(self.batch.state(self.path, self.i + 1));
            self.i += 1;
            self.jj = 0;
            if self.i < n {
                self.begin_interval(self.i);
            }
        }
        true
    }
}

/// Adjusts the closing sub-increment (component `k`) so that the
/// left-to-right sum of the `m` sub-increments equals `target` bit-exactly.
/// Round-to-even can make the target unreachable by moving the last element
/// alone (the running sum lands on ties), so the penultimate element may be
/// perturbed by an ulp as well. The adjustments are far below the bridge
/// noise scale.
fn reconcile_partial_sum(subs: &mut [f64], d: usize, k: usize, m: usize, target: f64) {
    let last_idx = (m - 1) * d + k;
    let fl_prefix = |subs: &[f64]| -> f64 {
        let mut p = 0.0;
        for j in 0..m - 1 {
            p += subs[j * d + k];
        }
        p
    };
    // For a fixed prefix, walk the closing value by ulps towards the target.
    let walk = |prefix: f64| -> Option<f64> {
        let mut lastv = target - prefix;
        let mut s = prefix + lastv;
        for _ in 0..32 {
            if s == target {
                return Some(lastv);
            }
            lastv = if s < target { lastv.next_up() } else { lastv.next_down() };
            s = prefix + lastv;
        }
        if s == target {
            Some(lastv)
        } else {
            None
        }
    };

    let prefix0 = fl_prefix(subs);
    if let Some(lastv) = walk(prefix0) {
        subs[last_idx] = lastv;
        return;
    }
    // Round-to-even tie: every candidate sum lands halfway between two
    // representables. Shift the prefix off the tie class by stepping earlier
    // elements until the rounded prefix changes, then retry the walk.
    let depth = (m - 1).min(6);
    for back in 0..depth {
        let idx = (m - 2 - back) * d + k;
        let orig = subs[idx];
        for dir_up in [true, false] {
            let mut v = orig;
            let mut changes = 0;
            for _ in 0..64 {
                v = if dir_up { v.next_up() } else { v.next_down() };
                subs[idx] = v;
                let prefix = fl_prefix(subs);
                if prefix != prefix0 {
                    if let Some(lastv) = walk(prefix) {
                        subs[last_idx] = lastv;
                        return;
                    }
                    changes += 1;
                    if changes >= 4 {
                        break;
                    }
                }
            }
            subs[idx] = orig;
        }
    }
    // Genuinely unreachable: a partial sum's binade exceeds the target's, so
    // achievable sums live on a coarser lattice. Best effort within 1 ulp of
    // the largest partial.
    subs[last_idx] = target - fl_prefix(subs);
}

/// Visits every fine knot of one path: `visit(knot, time, state)`, starting
/// at knot 0. Reads stored fine data when present, otherwise regenerates it.
pub fn for_each_fine_knot<F: FnMut(usize, f64, &[f64])>(
    batch: &PathBatch,
    spec: &ProblemSpec,
    path: usize,
    mut visit: F,
) {
    let refn = batch.refinement.as_ref().expect("batch must be refined");
    let m = refn.m_fine;
    let n = batch.grid.n;
    let d = batch.dim;
    if let Some(fine) = &refn.stored {
        let knots = n * m + 1;
        let base = path * knots * d;
        let delta = batch.grid.h / m as f64;
        for j in 0..knots {
            let t = if j == n * m {
                batch.grid.horizon
            } else {
                (j / m) as f64 * batch.grid.h + (j % m) as f64 * delta
            };
            visit(j, t, &fine.states[base + j * d..base + (j + 1) * d]);
        }
        return;
    }
    let mut w = FineWalker::new(batch, spec, path, m, refn.bridge_seed);
    visit(0, 0.0, w.state());
    while w.advance() {
        visit(w.knot(), w.time(), w.state());
    }
}

/// Inserts `m_fine - 1` bridge points inside each coarse step and stores the
/// resulting fine path. Partial sums of fine increments reproduce the coarse
/// increments exactly, and the fine path restricted to coarse knots is the
/// coarse path.
pub fn refine_bridge(batch: &PathBatch, spec: &ProblemSpec, m_fine: usize, seed: u64) -> PathBatch {
    assert!(m_fine >= 2 && m_fine.is_power_of_two(), "m_fine must be a power of two >= 2");
    let d = batch.dim;
    let n = batch.grid.n;
    let knots = n * m_fine + 1;
    let mut fine_states = vec![0.0; batch.n_paths * knots * d];
    let mut fine_increments = vec![0.0; batch.n_paths * n * m_fine * d];

    fine_states
        .par_chunks_mut(knots * d)
        .zip(fine_increments.par_chunks_mut(n * m_fine * d))
        .enumerate()
        .for_each(|(p, (fs, fi))| {
            let mut w = FineWalker::new(batch, spec, p, m_fine, seed);
            fs[..d].copy_from_slice(w.state());
            let mut j = 0;
            while w.advance() {
                fi[j * d..(j + 1) * d].copy_from_slice(w.last_increment());
                j += 1;
                fs[j * d..(j + 1) * d].copy_from_slice(w.state());
            }
        });

    let mut out = batch.clone();
    out.refinement = Some(Refinement {
        m_fine,
        bridge_seed: seed,
        stored: Some(FineData { states: fine_states, increments: fine_increments }),
    });
    out
}

/// Exit time and state read off the fine grid, used as the ground-truth
/// stand-in for the continuous exit.
#[derive(Clone, Debug)]
pub struct ExitOracle {
    pub tau_hat: f64,
    pub exit_state: Vec<f64>,
    /// Fine knot index of the exit (`n * m_fine` when no exit).
    pub knot: usize,
}

/// First fine-grid exit per path, capped at the horizon.
pub fn exit_oracle(batch: &PathBatch, spec: &ProblemSpec, domain: &Domain) -> Vec<ExitOracle> {
    let refn = batch.refinement.as_ref().expect("exit_oracle needs a refined batch");
    assert!(refn.m_fine >= 16, "exit oracle requires m_fine >= 16");
    (0..batch.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut out: Option<ExitOracle> = None;
            // Early stop at the first exit: stream manually instead of
            // for_each_fine_knot so the remaining bridge work is skipped.
            if !domain.contains(batch.state(p, 0)) {
                return ExitOracle { tau_hat: 0.0, exit_state: batch.state(p, 0).to_vec(), knot: 0 };
            }
            if let Some(fine) = &refn.stored {
                let m = refn.m_fine;
                let n = batch.grid.n;
                let d = batch.dim;
                let knots = n * m + 1;
                let base = p * knots * d;
                let delta = batch.grid.h / m as f64;
                for j in 1..knots {
                    let x = &fine.states[base + j * d..base + (j + 1) * d];
                    if !domain.contains(x) {
                        let t = if j == n * m {
                            batch.grid.horizon
                        } else {
                            (j / m) as f64 * batch.grid.h + (j % m) as f64 * delta
                        };
                        out = Some(ExitOracle { tau_hat: t, exit_state: x.to_vec(), knot: j });
                        break;
                    }
                }
            } else {
                let mut w = FineWalker::new(batch, spec, p, refn.m_fine, refn.bridge_seed);
                while w.advance() {
                    if !domain.contains(w.state()) {
                        out = Some(ExitOracle {
                            tau_hat: w.time(),
                            exit_state: w.state().to_vec(),
                            knot: w.knot(),
                        });
                        break;
                    }
                }
            }
            out.unwrap_or_else(|| ExitOracle {
                tau_hat: batch.grid.horizon,
                exit_state: batch.state(p, batch.grid.n).to_vec(),
                knot: batch.grid.n * refn.m_fine,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// exact exit sampling for linear boundaries
// ---------------------------------------------------------------------------

/// Per-path result of the exact within-step exit sampler.
#[derive(Clone, Debug)]
pub struct ExactExit {
    pub tau: f64,
    pub exit_state: Vec<f64>,
    /// True when the exit came from a sampled interior crossing rather than a
    /// knot landing outside.
    pub interior_crossing: bool,
    /// First grid index `i` with `t_i >= tau` (freeze point of the backward
    /// scheme), capped at `n`.
    pub freeze_index: u32,
}

/// Probability that a Brownian bridge with endpoint clearances `delta0`,
/// `delta1` (both positive) and normal variance rate `s2` crosses the
/// boundary within a step of length `h`. Certain when an endpoint is outside.
#[inline]
pub fn bridge_crossing_probability(delta0: f64, delta1: f64, h: f64, s2: f64) -> f64 {
    if delta0 <= 0.0 || delta1 <= 0.0 {
        return 1.0;
    }
    if s2 <= 0.0 {
        return 0.0;
    }
    (-2.0 * delta0 * delta1 / (h * s2)).exp()
}

fn linear_pieces(domain: &Domain, dim: usize) -> Option<Vec<(Vec<f64>, f64)>> {
    let mut out = Vec::new();
    for p in &domain.pieces {
        match p {
            SmoothPiece::HalfSpace { normal, offset } => out.push((normal.clone(), *offset)),
            SmoothPiece::Ball { center, radius } if dim == 1 => {
                out.push((vec![1.0], center[0] - radius));
                out.push((vec![-1.0], -(center[0] + radius)));
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Samples the within-step boundary crossing of the continuous Euler scheme
/// for half-space (or 1D interval) domains. Interior crossings are placed at
/// mid-step with the state projected onto the crossed boundary; knot exits
/// are placed at the right knot. The crossing draws consume their own
/// substream, leaving the coarse path untouched.
pub fn exact_exit_halfspace(
    batch: &PathBatch,
    spec: &ProblemSpec,
    domain: &Domain,
    seed: u64,
) -> Result<Vec<ExactExit>, DynamicsError> {
    let d = batch.dim;
    let pieces = linear_pieces(domain, d).ok_or_else(|| {
        DynamicsError::UnsupportedDomain("exact exit needs half-space pieces or a 1D interval".into())
    })?;
    let n = batch.grid.n;
    let h = batch.grid.h;

    let out: Vec<ExactExit> = (0..batch.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut sg = vec![0.0; d * d];
            let mut deltas: Vec<f64> = pieces.iter().map(|(nv, off)| crate::geometry::dot(nv, batch.state(p, 0)) - off).collect();
            if deltas.iter().any(|&v| v <= 0.0) {
                return ExactExit {
                    tau: 0.0,
                    exit_state: batch.state(p, 0).to_vec(),
                    interior_crossing: false,
                    freeze_index: 0,
                };
            }
            for i in 0..n {
                let x = batch.state(p, i);
                let xn = batch.state(p, i + 1);
                (spec.sigma)(x, &mut sg);
                let mut knot_exit = false;
                let mut best_interior: Option<(f64, usize)> = None;
                for (l, (nv, off)) in pieces.iter().enumerate() {
                    let d0 = deltas[l];
                    let d1 = crate::geometry::dot(nv, xn) - off;
                    if d1 <= 0.0 {
                        knot_exit = true;
                        deltas[l] = d1;
                        continue;
                    }
                    // s^2 = n a n^T with sigma frozen at the left knot.
                    let mut s2 = 0.0;
                    for c in 0..d {
                        let mut col = 0.0;
                        for r in 0..d {
                            col += sg[c * d + r] * nv[r];
                        }
                        s2 += col * col;
                    }
                    let prob = bridge_crossing_probability(d0, d1, h, s2);
                    if prob > 0.0 {
                        let mut stream =
                            Stream::substream(seed, p as u64, i as u64, tag::CROSSING + l as u64);
                        if stream.next_f64() < prob
                            && best_interior.map_or(true, |(bp, _)| prob > bp)
                        {
                            best_interior = Some((prob, l));
                        }
                    }
                    deltas[l] = d1;
                }
                if let Some((_, l)) = best_interior {
                    let (nv, off) = &pieces[l];
                    let mut mid: Vec<f64> = (0..d).map(|k| 0.5 * (x[k] + xn[k])).collect();
                    let gap = crate::geometry::dot(nv, &mid) - off;
                    for k in 0..d {
                        mid[k] -= gap * nv[k];
                    }
                    return ExactExit {
                        tau: batch.grid.time(i) + 0.5 * h,
                        exit_state: mid,
                        interior_crossing: true,
                        freeze_index: (i + 1) as u32,
                    };
                }
                if knot_exit {
                    return ExactExit {
                        tau: batch.grid.time(i + 1),
                        exit_state: xn.to_vec(),
                        interior_crossing: false,
                        freeze_index: (i + 1) as u32,
                    };
                }
            }
            ExactExit {
                tau: batch.grid.horizon,
                exit_state: batch.state(p, n).to_vec(),
                interior_crossing: false,
                freeze_index: n as u32,
            }
        })
        .collect();
    Ok(out)
}
