//! Cylindrical domains `[0, T) x O` with `O` a finite intersection of smooth
//! pieces, plus numeric validators for the structural assumptions the solver
//! relies on (non-characteristic boundary, ellipticity near corners, barrier
//! functions, exterior spheres).
//!
//! Each piece carries a signed distance `d_l` (positive inside), its gradient
//! `n_l = D d_l` (the unit inward normal near the boundary) and its Hessian.
//! The domain distance is `d(x) = min_l d_l(x)`; it coincides with the
//! algebraic distance to the boundary inside a tube around it, which is the
//! only region where the simulator queries it quantitatively.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::rng::{tag, Stream};

/// Evaluator signature for custom pieces: signed distance at `x`.
pub type DistFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Gradient evaluator: writes `D d(x)` into `out` (length `d`).
pub type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Hessian evaluator: writes `D^2 d(x)` into `out` (length `d*d`, column-major).
pub type HessFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Matrix field `sigma(x)`: writes the `d x d` diffusion matrix column-major.
pub type SigmaFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// Two pieces attain the minimum distance within tolerance; the inward
    /// normal is not well defined (corner neighborhood).
    #[error("ambiguous inward normal at a corner-proximate point (pieces {0} and {1})")]
    AmbiguousNormal(usize, usize),
    /// Boundary projection failed to converge for more than 1% of samples.
    #[error("boundary sampler degenerate: {failed} of {attempted} projections failed to converge")]
    DegenerateSampler { failed: usize, attempted: usize },
}

/// One smooth constituent `O^l` of the domain, described through its signed
/// distance function (positive inside).
#[derive(Clone)]
pub enum SmoothPiece {
    /// `{ x : ||x - center|| < radius }`. In one dimension this is the open
    /// interval `(center - radius, center + radius)`.
    Ball { center: Vec<f64>, radius: f64 },
    /// `{ x : <normal, x> - offset > 0 }` with `normal` the unit inward normal.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// Axis-aligned ellipsoid `{ x : sum ((x_i - c_i)/a_i)^2 < 1 }`. Distances
    /// are exact (iterative nearest-point projection); the Hessian is a
    /// central finite difference of the exact gradient.
    Ellipsoid { center: Vec<f64>, semi_axes: Vec<f64> },
    /// User-supplied evaluators. All three must be provided; nothing is
    /// differentiated automatically.
    Custom {
        dist: DistFn,
        grad: GradFn,
        hess: HessFn,
    },
}

impl std::fmt::Debug for SmoothPiece {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SmoothPiece::Ball { center, radius } => {
                write!(f, "Ball{{center:{center:?}, radius:{radius}}}")
            }
            SmoothPiece::HalfSpace { normal, offset } => {
                write!(f, "HalfSpace{{normal:{normal:?}, offset:{offset}}}")
            }
            SmoothPiece::Ellipsoid { center, semi_axes } => {
                write!(f, "Ellipsoid{{center:{center:?}, semi_axes:{semi_axes:?}}}")
            }
            SmoothPiece::Custom { .. } => write!(f, "Custom{{..}}"),
        }
    }
}

impl SmoothPiece {
    /// Signed distance to the piece boundary, positive strictly inside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            SmoothPiece::Ball { center, radius } => radius - norm_diff(x, center),
            SmoothPiece::HalfSpace { normal, offset } => dot(normal, x) - offset,
            SmoothPiece::Ellipsoid { center, semi_axes } => {
                let (d, _) = ellipsoid_signed_distance(x, center, semi_axes);
                d
            }
            SmoothPiece::Custom { dist, .. } => dist(x),
        }
    }

    /// Writes the gradient of the signed distance into `out`. Near the
    /// boundary this is the unit inward normal.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SmoothPiece::Ball { center, .. } => {
                let rho = norm_diff(x, center);
                if rho < 1e-14 {
                    // Singularity at the center; any unit vector will do and
                    // the tube contract never reaches here.
                    out.fill(0.0);
                    out[0] = 1.0;
                } else {
                    for k in 0..out.len() {
                        out[k] = -(x[k] - center[k]) / rho;
                    }
                }
            }
            SmoothPiece::HalfSpace { normal, .. } => out.copy_from_slice(normal),
            SmoothPiece::Ellipsoid { center, semi_axes } => {
                ellipsoid_gradient(x, center, semi_axes, out);
            }
            SmoothPiece::Custom { grad, .. } => grad(x, out),
        }
    }

    /// Writes the Hessian of the signed distance into `out` (column-major).
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            SmoothPiece::Ball { center, .. } => {
                // Inside-positive orientation flips the sign of the familiar
                // I/rho - vv^T/rho^3 exterior form.
                let rho = norm_diff(x, center);
                if rho < 1e-14 {
                    out.fill(0.0);
                    return;
                }
                for j in 0..d {
                    for i in 0..d {
                        let vi = x[i] - center[i];
                        let vj = x[j] - center[j];
                        let id = if i == j { 1.0 } else { 0.0 };
                        out[j * d + i] = -(id / rho - vi * vj / (rho * rho * rho));
                    }
                }
            }
            SmoothPiece::HalfSpace { .. } => out.fill(0.0),
            SmoothPiece::Ellipsoid { center, semi_axes } => {
                // Central difference of the exact gradient; only the
                // validator consumes piece Hessians, so 1e-5 steps suffice.
                let step = 1e-5;
                let mut xp = x.to_vec();
                let mut gp = vec![0.0; d];
                let mut gm = vec![0.0; d];
                for j in 0..d {
                    xp[j] = x[j] + step;
                    ellipsoid_gradient(&xp, center, semi_axes, &mut gp);
                    xp[j] = x[j] - step;
                    ellipsoid_gradient(&xp, center, semi_axes, &mut gm);
                    xp[j] = x[j];
                    for i in 0..d {
                        out[j * d + i] = (gp[i] - gm[i]) / (2.0 * step);
                    }
                }
                // Symmetrize.
                for j in 0..d {
                    for i in 0..j {
                        let s = 0.5 * (out[j * d + i] + out[i * d + j]);
                        out[j * d + i] = s;
                        out[i * d + j] = s;
                    }
                }
            }
            SmoothPiece::Custom { hess, .. } => hess(x, out),
        }
    }

    /// Axis-aligned box containing the piece boundary, when the boundary is
    /// bounded. Used to build the validator's ambient sampling box.
    pub fn boundary_bbox(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            SmoothPiece::Ball { center, radius } => Some((
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            )),
            SmoothPiece::HalfSpace { .. } => None,
            SmoothPiece::Ellipsoid { center, semi_axes } => Some((
                center.iter().zip(semi_axes).map(|(c, a)| c - a).collect(),
                center.iter().zip(semi_axes).map(|(c, a)| c + a).collect(),
            )),
            SmoothPiece::Custom { .. } => None,
        }
    }

    /// Largest exterior-sphere radius supported at every boundary point, when
    /// known analytically. The shipped analytic kinds are all convex, so any
    /// radius works; custom pieces return `None` (check skipped).
    pub fn exterior_sphere_radius(&self) -> Option<f64> {
        match self {
            SmoothPiece::Ball { .. } | SmoothPiece::HalfSpace { .. } | SmoothPiece::Ellipsoid { .. } => {
                Some(f64::INFINITY)
            }
            SmoothPiece::Custom { .. } => None,
        }
    }
}

/// The spatial domain `O = intersection of pieces`, with the Lipschitz bound
/// `L` of the problem data and the time horizon of the cylinder.
#[derive(Clone, Debug)]
pub struct Domain {
    pub pieces: Vec<SmoothPiece>,
    /// The structural constant `L`; the corner neighborhood has radius `1/L`.
    pub lipschitz: f64,
    /// Horizon `T` of the cylinder `[0, T) x O`.
    pub horizon: f64,
}

/// Below this gap between the two smallest piece distances, the argmin piece
/// is treated as ambiguous and `inward_normal` refuses to answer.
const NORMAL_AMBIGUITY_TOL: f64 = 1e-9;

impl Domain {
    pub fn new(pieces: Vec<SmoothPiece>, lipschitz: f64, horizon: f64) -> Self {
        assert!(!pieces.is_empty(), "domain needs at least one piece");
        assert!(lipschitz > 0.0 && horizon > 0.0);
        Domain { pieces, lipschitz, horizon }
    }

    pub fn dim_hint(&self) -> Option<usize> {
        self.pieces.iter().find_map(|p| match p {
            SmoothPiece::Ball { center, .. } => Some(center.len()),
            SmoothPiece::HalfSpace { normal, .. } => Some(normal.len()),
            SmoothPiece::Ellipsoid { center, .. } => Some(center.len()),
            SmoothPiece::Custom { .. } => None,
        })
    }

    /// Radius of the declared corner neighborhood `B(C, 1/L)`.
    pub fn corner_radius(&self) -> f64 {
        1.0 / self.lipschitz
    }

    /// `min_l d_l(x)`; positive iff `x` lies in `O`.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        self.pieces
            .iter()
            .map(|p| p.signed_distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Membership in the open set `O`.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.pieces.iter().all(|p| p.signed_distance(x) > 0.0)
    }

    /// Indices of the two smallest piece distances together with their values.
    fn two_smallest(&self, x: &[f64]) -> (usize, f64, Option<(usize, f64)>) {
        let mut best = (0usize, f64::INFINITY);
        let mut second: Option<(usize, f64)> = None;
        for (l, p) in self.pieces.iter().enumerate() {
            let d = p.signed_distance(x);
            if d < best.1 {
                second = Some(best);
                best = (l, d);
            } else if second.map_or(true, |(_, s)| d < s) {
                second = Some((l, d));
            }
        }
        if self.pieces.len() == 1 {
            second = None;
        }
        (best.0, best.1, second)
    }

    /// Unit inward normal `n(x) = D d(x)` taken from the argmin piece.
    ///
    /// Contractually valid for `x` within `1/L` of the boundary and outside
    /// the corner neighborhood; fails with [`GeometryError::AmbiguousNormal`]
    /// when two pieces attain the minimum within tolerance.
    pub fn inward_normal(&self, x: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let (l, d, second) = self.two_smallest(x);
        if let Some((k, s)) = second {
            if (s - d).abs() < NORMAL_AMBIGUITY_TOL {
                return Err(GeometryError::AmbiguousNormal(l, k));
            }
        }
        let mut n = vec![0.0; x.len()];
        self.pieces[l].gradient(x, &mut n);
        Ok(n)
    }

    /// True when at least two pieces are within `1/L` of `x` in piece
    /// distance: the declared proxy for the corner neighborhood `B(C, 1/L)`.
    pub fn corner_proximate(&self, x: &[f64]) -> bool {
        if self.pieces.len() < 2 {
            return false;
        }
        let r = self.corner_radius();
        let mut close = 0;
        for p in &self.pieces {
            if p.signed_distance(x).abs() <= r {
                close += 1;
                if close >= 2 {
                    return true;
                }
            }
        }
        false
    }

    /// Ambient box the validator samples from: the union of piece boundary
    /// boxes inflated by the corner radius, or `[-L, L]^d` when a piece has an
    /// unbounded boundary (the standing assumptions bound boundary points by `L`).
    pub fn sampling_box(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut any_unbounded = false;
        for p in &self.pieces {
            match p.boundary_bbox() {
                Some((plo, phi)) => {
                    for k in 0..dim {
                        lo[k] = lo[k].min(plo[k]);
                        hi[k] = hi[k].max(phi[k]);
                    }
                }
                None => any_unbounded = true,
            }
        }
        if any_unbounded || lo.iter().any(|v| !v.is_finite()) {
            let l = self.lipschitz.max(1.0);
            return (vec![-l; dim], vec![l; dim]);
        }
        let pad = self.corner_radius();
        for k in 0..dim {
            lo[k] -= pad;
            hi[k] += pad;
        }
        (lo, hi)
    }
}

// ---------------------------------------------------------------------------
// small vector helpers
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// ellipsoid nearest-point projection
// ---------------------------------------------------------------------------

/// Exact signed distance to an axis-aligned ellipsoid and the nearest
/// boundary point. Solves `sum (a_i y_i / (a_i^2 + t))^2 = 1` for the unique
/// root `t > -min a_i^2` by bisection; `p_i = a_i^2 y_i / (a_i^2 + t)`.
fn ellipsoid_signed_distance(x: &[f64], center: &[f64], axes: &[f64]) -> (f64, Vec<f64>) {
    let d = x.len();
    let y: Vec<f64> = (0..d).map(|k| x[k] - center[k]).collect();
    let level: f64 = (0..d).map(|k| (y[k] / axes[k]).powi(2)).sum();
    let inside = level < 1.0;

    if y.iter().all(|v| v.abs() < 1e-15) {
        // Deepest point: nearest boundary point lies along the shortest axis.
        let (kmin, amin) = axes
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(ki, ai), (k, &a)| if a < ai { (k, a) } else { (ki, ai) });
        let mut p = center.to_vec();
        p[kmin] += amin;
        return (amin, p);
    }

    let f = |t: f64| -> f64 {
        (0..d)
            .map(|k| {
                let s = axes[k] * y[k] / (axes[k] * axes[k] + t);
                s * s
            })
            .sum::<f64>()
            - 1.0
    };

    let amin2 = axes.iter().map(|a| a * a).fold(f64::INFINITY, f64::min);
    // f is strictly decreasing on (-amin2, inf); bracket the root.
    let mut looff = 1e-12 * amin2.max(1.0);
    let mut lo = -amin2 + looff;
    while !(f(lo) > 0.0) {
        // Root lies left of lo (can happen when y is tiny along the short axis).
        looff *= 0.5;
        lo = -amin2 + looff;
        if looff < 1e-300 {
            break;
        }
    }
    let mut hi = lo.abs().max(1.0);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * (1.0 + hi.abs()) {
            break;
        }
    }
    let t = 0.5 * (lo + hi);
    let p: Vec<f64> = (0..d)
        .map(|k| center[k] + axes[k] * axes[k] * y[k] / (axes[k] * axes[k] + t))
        .collect();
    let dist = norm_diff(x, &p);
    (if inside { dist } else { -dist }, p)
}

fn ellipsoid_gradient(x: &[f64], center: &[f64], axes: &[f64], out: &mut [f64]) {
    let (_, p) = ellipsoid_signed_distance(x, center, axes);
    let dist = norm_diff(x, &p);
    let level: f64 = (0..x.len()).map(|k| ((x[k] - center[k]) / axes[k]).powi(2)).sum();
    if dist < 1e-12 {
        // On the boundary the inward normal is the normalized negative level
        // gradient.
        for k in 0..x.len() {
            out[k] = -2.0 * (x[k] - center[k]) / (axes[k] * axes[k]);
        }
        let nn = norm(out);
        for v in out.iter_mut() {
            *v /= nn;
        }
        return;
    }
    let sign = if level < 1.0 { 1.0 } else { -1.0 };
    for k in 0..x.len() {
        out[k] = sign * (x[k] - p[k]) / dist;
    }
}

// ---------------------------------------------------------------------------
// assumption validators
// ---------------------------------------------------------------------------

/// Outcome of the barrier-function search for one piece: the dyadic scale
/// `gamma` and tube radius for which `L F_l >= 1` held over the tube sample,
/// with `F_l = d_l^2 / gamma`.
#[derive(Clone, Debug)]
pub struct BarrierCheck {
    pub piece: usize,
    pub gamma: f64,
    pub tube_radius: f64,
    /// Minimum of the generator applied to `F_l` over the tube sample.
    pub min_generator: f64,
    pub passed: bool,
}

/// Report produced by [`validate_assumptions`].
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub n_boundary_samples: usize,
    pub n_corner_samples: usize,
    /// (i) min over non-corner boundary samples of `n a n^T`, and the bound `1/L`.
    pub min_normal_diffusion: f64,
    pub non_characteristic_ok: bool,
    /// (ii) min eigenvalue of `a` over corner-neighborhood samples (None when
    /// no such sample exists, e.g. a single-piece domain).
    pub min_corner_eigenvalue: Option<f64>,
    pub corner_ellipticity_ok: bool,
    /// (iii) barrier search per piece.
    pub barriers: Vec<BarrierCheck>,
    pub barriers_ok: bool,
    /// (iv) exterior-sphere radius per analytic piece (None = unknown kind,
    /// check skipped for that piece).
    pub exterior_sphere_ok: Vec<Option<bool>>,
    pub passed: bool,
}

/// Projects `x` onto the domain boundary by damped Newton steps on the argmin
/// piece distance. Returns `None` when 50 iterations do not reach `1e-10`.
fn project_to_boundary(domain: &Domain, mut x: Vec<f64>) -> Option<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut prev = f64::INFINITY;
    let mut damp = 1.0;
    for _ in 0..50 {
        let (l, d, _) = domain.two_smallest(&x);
        if d.abs() <= 1e-10 {
            return Some(x);
        }
        if d.abs() >= prev {
            damp *= 0.5;
        }
        prev = d.abs();
        domain.pieces[l].gradient(&x, &mut grad);
        for k in 0..x.len() {
            x[k] -= damp * d * grad[k];
        }
    }
    None
}

/// Projects onto one piece's boundary (used for tube sampling).
fn project_to_piece(piece: &SmoothPiece, mut x: Vec<f64>, dim: usize) -> Option<Vec<f64>> {
    let mut grad = vec![0.0; dim];
    let mut prev = f64::INFINITY;
    let mut damp = 1.0;
    for _ in 0..50 {
        let d = piece.signed_distance(&x);
        if d.abs() <= 1e-10 {
            return Some(x);
        }
        if d.abs() >= prev {
            damp *= 0.5;
        }
        prev = d.abs();
        piece.gradient(&x, &mut grad);
        for k in 0..dim {
            x[k] -= damp * d * grad[k];
        }
    }
    None
}

fn sigma_to_a(sigma: &SigmaFn, x: &[f64], buf: &mut [f64], a: &mut [f64]) {
    let d = x.len();
    sigma(x, buf);
    // a = sigma sigma^T, column-major.
    for j in 0..d {
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += buf[k * d + i] * buf[k * d + j];
            }
            a[j * d + i] = s;
        }
    }
}

/// Samples boundary points and checks the structural assumptions numerically:
/// non-characteristic boundary, corner ellipticity, per-piece barrier
/// functions, and exterior spheres for analytic pieces.
pub fn validate_assumptions(
    domain: &Domain,
    sigma: &SigmaFn,
    lipschitz: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ValidationReport, GeometryError> {
    assert!(n_samples >= 1);
    let dim = domain.dim_hint().expect("validator needs an analytic piece to infer dimension");
    let inv_l = 1.0 / lipschitz;
    let (lo, hi) = domain.sampling_box(dim);
    let mut stream = Stream::substream(seed, 0, 0, tag::SAMPLER);
    let draw = |s: &mut Stream| -> Vec<f64> {
        (0..dim).map(|k| s.next_range(lo[k], hi[k])).collect()
    };

    // --- boundary samples -------------------------------------------------
    let mut boundary: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    let mut attempted = 0usize;
    let mut failed = 0usize;
    let max_attempts = 50 * n_samples.max(100);
    while boundary.len() < n_samples && attempted < max_attempts {
        attempted += 1;
        let x0 = draw(&mut stream);
        match project_to_boundary(domain, x0) {
            Some(x) => {
                // Keep only points on the boundary of the intersection: the
                // projection must not violate any other piece.
                if domain.pieces.iter().all(|p| p.signed_distance(&x) >= -1e-8) {
                    boundary.push(x);
                }
            }
            None => failed += 1,
        }
    }
    if failed * 100 > attempted {
        return Err(GeometryError::DegenerateSampler { failed, attempted });
    }

    let mut sig_buf = vec![0.0; dim * dim];
    let mut a_buf = vec![0.0; dim * dim];
    let mut nvec = vec![0.0; dim];

    // --- (i) non-characteristic boundary ----------------------------------
    let mut min_nan = f64::INFINITY;
    for x in boundary.iter().filter(|x| !domain.corner_proximate(x)) {
        let (l, _, _) = domain.two_smallest(x);
        domain.pieces[l].gradient(x, &mut nvec);
        sigma_to_a(sigma, x, &mut sig_buf, &mut a_buf);
        let mut nan = 0.0;
        for j in 0..dim {
            for i in 0..dim {
                nan += nvec[i] * a_buf[j * dim + i] * nvec[j];
            }
        }
        min_nan = min_nan.min(nan);
    }
    let non_characteristic_ok = min_nan >= inv_l;

    // --- (ii) ellipticity near corners -------------------------------------
    let mut corner_pts: Vec<Vec<f64>> = Vec::new();
    if domain.pieces.len() >= 2 {
        let mut tries = 0;
        while corner_pts.len() < n_samples && tries < max_attempts {
            tries += 1;
            let x = draw(&mut stream);
            let in_closure = domain.pieces.iter().all(|p| p.signed_distance(&x) >= -1e-12);
            if in_closure && domain.corner_proximate(&x) {
                corner_pts.push(x);
            }
        }
    }
    let mut min_eig: Option<f64> = None;
    for x in &corner_pts {
        sigma_to_a(sigma, x, &mut sig_buf, &mut a_buf);
        let m = DMatrix::from_column_slice(dim, dim, &a_buf);
        let eig = SymmetricEigen::new(m);
        let lam = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        min_eig = Some(min_eig.map_or(lam, |m: f64| m.min(lam)));
    }
    let corner_ellipticity_ok = min_eig.map_or(true, |m| m >= inv_l);

    // --- (iii) barrier functions F_l = d_l^2 / gamma ------------------------
    // The generator applied to F_l equals
    //   (1/gamma) [ tr(a D^2 d_l) d_l + n_l a n_l^T ],
    // whose tube minimum is bounded below by nan_min - curv_max * r with
    // nan_min = min n a n^T and curv_max = max |tr(a D^2 d_l)| over the tube.
    // The tube radius descends dyadically until curv_max * r <= nan_min / 2,
    // then gamma is the largest dyadic scale below the certified bound.
    let mut barriers = Vec::with_capacity(domain.pieces.len());
    let mut hess = vec![0.0; dim * dim];
    for (l, piece) in domain.pieces.iter().enumerate() {
        let mut found = None;
        'radius: for j in 0..8 {
            let r_tube = inv_l * 0.5f64.powi(j);
            // Tube sample: project ambient points onto the piece boundary,
            // then offset along the normal by a uniform amount in [-r, r].
            let mut nan_min = f64::INFINITY;
            let mut curv_max: f64 = 0.0;
            let mut count = 0;
            let mut tries = 0;
            while count < n_samples && tries < max_attempts {
                tries += 1;
                let x0 = draw(&mut stream);
                let Some(xb) = project_to_piece(piece, x0, dim) else { continue };
                piece.gradient(&xb, &mut nvec);
                let off = stream.next_range(-r_tube, r_tube);
                let x: Vec<f64> = (0..dim).map(|k| xb[k] + off * nvec[k]).collect();
                if piece.signed_distance(&x).abs() > r_tube {
                    continue;
                }
                piece.gradient(&x, &mut nvec);
                piece.hessian(&x, &mut hess);
                sigma_to_a(sigma, &x, &mut sig_buf, &mut a_buf);
                let mut tr = 0.0;
                for jj in 0..dim {
                    for ii in 0..dim {
                        tr += a_buf[jj * dim + ii] * hess[jj * dim + ii];
                    }
                }
                let mut nan = 0.0;
                for jj in 0..dim {
                    for ii in 0..dim {
                        nan += nvec[ii] * a_buf[jj * dim + ii] * nvec[jj];
                    }
                }
                nan_min = nan_min.min(nan);
                curv_max = curv_max.max(tr.abs());
                count += 1;
            }
            if count == 0 || nan_min <= 0.0 || curv_max * r_tube > 0.5 * nan_min {
                continue;
            }
            let bound = nan_min - curv_max * r_tube;
            // Largest dyadic gamma = L^{-1} 2^{-k} with gamma <= bound.
            for k in 0..60 {
                let gamma = inv_l * 0.5f64.powi(k);
                if gamma <= bound {
                    found = Some(BarrierCheck {
                        piece: l,
                        gamma,
                        tube_radius: r_tube,
                        min_generator: bound / gamma,
                        passed: true,
                    });
                    break 'radius;
                }
            }
        }
        barriers.push(found.unwrap_or(BarrierCheck {
            piece: l,
            gamma: f64::NAN,
            tube_radius: f64::NAN,
            min_generator: f64::NEG_INFINITY,
            passed: false,
        }));
    }
    let barriers_ok = barriers.iter().all(|b| b.passed);

    // --- (iv) exterior spheres ---------------------------------------------
    let exterior_sphere_ok: Vec<Option<bool>> = domain
        .pieces
        .iter()
        .map(|p| {
            p.exterior_sphere_radius()
                .map(|rmax| rmax.min(lipschitz) >= inv_l)
        })
        .collect();
    let ext_ok = exterior_sphere_ok.iter().all(|c| c.unwrap_or(true));

    let passed = non_characteristic_ok && corner_ellipticity_ok && barriers_ok && ext_ok;
    Ok(ValidationReport {
        n_boundary_samples: boundary.len(),
        n_corner_samples: corner_pts.len(),
        min_normal_diffusion: min_nan,
        non_characteristic_ok,
        min_corner_eigenvalue: min_eig,
        corner_ellipticity_ok,
        barriers,
        barriers_ok,
        exterior_sphere_ok,
        passed,
    })
}

/// Identity diffusion field of dimension `d`.
pub fn identity_sigma(d: usize) -> SigmaFn {
    Arc::new(move |_x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for k in 0..d {
            out[k * d + k] = 1.0;
        }
    })
}

/// Diagonal diffusion field.
pub fn diagonal_sigma(diag: Vec<f64>) -> SigmaFn {
    Arc::new(move |_x: &[f64], out: &mut [f64]| {
        let d = diag.len();
        out.fill(0.0);
        for k in 0..d {
            out[k * d + k] = diag[k];
        }
    })
}
