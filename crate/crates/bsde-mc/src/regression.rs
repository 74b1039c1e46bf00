//! Least-squares estimation of conditional expectations on a finite basis.
//!
//! Two basis families are provided: local-constant indicators on a hypercube
//! partition (the workhorse for the backward scheme) and global polynomials
//! of bounded total degree. Models are immutable after fitting and `predict`
//! is total: hypercube queries clamp to the nearest cell and empty cells fall
//! back to the global response mean.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("empty sample")]
    EmptySample,
    #[error("predictor/response length mismatch: {predictors} points vs {responses} responses")]
    LengthMismatch { predictors: usize, responses: usize },
}

/// Basis family for one regression.
#[derive(Clone, Debug, PartialEq)]
pub enum BasisKind {
    /// Indicator functions of the cells of an axis-aligned partition.
    HypercubeLocalConstant {
        cells_per_axis: usize,
        /// Bounding box; `None` derives it from the sample min/max per axis.
        bbox: Option<(Vec<f64>, Vec<f64>)>,
    },
    /// Monomials of total degree at most `degree`.
    GlobalPolynomial { degree: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub ridge: f64,
}

impl BasisSpec {
    /// Desk-scale default: local-constant cells with
    /// `cells_per_axis = ceil(n^(1/(d+2)))` and a data-driven bounding box.
    pub fn default_for(n_samples: usize, dim: usize) -> BasisSpec {
        let cells = (n_samples as f64).powf(1.0 / (dim as f64 + 2.0)).ceil() as usize;
        BasisSpec {
            kind: BasisKind::HypercubeLocalConstant { cells_per_axis: cells.max(1), bbox: None },
            ridge: 0.0,
        }
    }

    pub fn hypercube(cells_per_axis: usize) -> BasisSpec {
        BasisSpec {
            kind: BasisKind::HypercubeLocalConstant { cells_per_axis, bbox: None },
            ridge: 0.0,
        }
    }

    pub fn polynomial(degree: usize) -> BasisSpec {
        BasisSpec { kind: BasisKind::GlobalPolynomial { degree }, ridge: 0.0 }
    }
}

/// A fitted conditional-expectation estimate.
#[derive(Clone, Debug)]
pub enum RegressionModel {
    LocalConstant {
        dim: usize,
        cells_per_axis: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
        coeffs: Vec<f64>,
        occupied: Vec<bool>,
        fallback: f64,
    },
    Polynomial {
        dim: usize,
        exponents: Vec<Vec<u32>>,
        coeffs: Vec<f64>,
    },
}

impl RegressionModel {
    /// Basis expansion at `x`. Total on all of space.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            RegressionModel::LocalConstant { dim, cells_per_axis, lo, hi, coeffs, occupied, fallback } => {
                let idx = cell_index(x, *dim, *cells_per_axis, lo, hi);
                if occupied[idx] {
                    coeffs[idx]
                } else {
                    *fallback
                }
            }
            RegressionModel::Polynomial { dim, exponents, coeffs } => {
                let mut acc = 0.0;
                for (e, c) in exponents.iter().zip(coeffs) {
                    acc += c * monomial(x, *dim, e);
                }
                acc
            }
        }
    }
}

#[inline]
fn cell_index(x: &[f64], dim: usize, cells: usize, lo: &[f64], hi: &[f64]) -> usize {
    let mut idx = 0usize;
    for k in 0..dim {
        let w = hi[k] - lo[k];
        let j = if w <= 0.0 {
            0
        } else {
            let f = ((x[k] - lo[k]) / w * cells as f64).floor();
            (f.max(0.0) as usize).min(cells - 1)
        };
        idx = idx * cells + j;
    }
    idx
}

#[inline]
fn monomial(x: &[f64], dim: usize, exps: &[u32]) -> f64 {
    let mut v = 1.0;
    for k in 0..dim {
        v *= x[k].powi(exps[k] as i32);
    }
    v
}

fn exponent_tuples(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; dim];
    fn rec(k: usize, left: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if k == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[k] = e as u32;
            rec(k + 1, left - e, cur, out);
        }
        cur[k] = 0;
    }
    rec(0, degree, &mut cur, &mut out);
    out
}

/// Fits `responses ~ model(predictors)` by (ridge-penalized) least squares.
///
/// `predictors` is a flat `len * dim` array, point-major. For the
/// local-constant basis with zero ridge, each nonempty cell's coefficient is
/// the cell sample mean. A rank-deficient polynomial system with zero ridge
/// resolves to the minimum-norm solution rather than an error.
pub fn fit(
    predictors: &[f64],
    dim: usize,
    responses: &[f64],
    basis: &BasisSpec,
) -> Result<RegressionModel, RegressionError> {
    let n = responses.len();
    if n == 0 {
        return Err(RegressionError::EmptySample);
    }
    if predictors.len() != n * dim {
        return Err(RegressionError::LengthMismatch {
            predictors: predictors.len() / dim.max(1),
            responses: n,
        });
    }
    let mean_y: f64 = responses.iter().sum::<f64>() / n as f64;
    match &basis.kind {
        BasisKind::HypercubeLocalConstant { cells_per_axis, bbox } => {
            let cells = (*cells_per_axis).max(1);
            let (lo, hi) = match bbox {
                Some((lo, hi)) => (lo.clone(), hi.clone()),
                None => {
                    let mut lo = vec![f64::INFINITY; dim];
                    let mut hi = vec![f64::NEG_INFINITY; dim];
                    for p in 0..n {
                        for k in 0..dim {
                            let v = predictors[p * dim + k];
                            lo[k] = lo[k].min(v);
                            hi[k] = hi[k].max(v);
                        }
                    }
                    (lo, hi)
                }
            };
            let n_cells = cells.pow(dim as u32);
            assert!(n_cells <= 1 << 24, "hypercube basis too large: {n_cells} cells");
            let mut sums = vec![0.0; n_cells];
            let mut counts = vec![0.0; n_cells];
            for p in 0..n {
                let idx = cell_index(&predictors[p * dim..(p + 1) * dim], dim, cells, &lo, &hi);
                sums[idx] += responses[p];
                counts[idx] += 1.0;
            }
            let mut coeffs = vec![0.0; n_cells];
            let mut occupied = vec![false; n_cells];
            for c in 0..n_cells {
                if counts[c] > 0.0 {
                    occupied[c] = true;
                    coeffs[c] = sums[c] / (counts[c] + basis.ridge);
                }
            }
            Ok(RegressionModel::LocalConstant {
                dim,
                cells_per_axis: cells,
                lo,
                hi,
                coeffs,
                occupied,
                fallback: mean_y,
            })
        }
        BasisKind::GlobalPolynomial { degree } => {
            let exponents = exponent_tuples(dim, *degree);
            let m = exponents.len();
            let mut design = DMatrix::zeros(n, m);
            for p in 0..n {
                let x = &predictors[p * dim..(p + 1) * dim];
                for (j, e) in exponents.iter().enumerate() {
                    design[(p, j)] = monomial(x, dim, e);
                }
            }
            let y = DVector::from_column_slice(responses);
            let coeffs = if basis.ridge > 0.0 {
                let ata = design.transpose() * &design + DMatrix::identity(m, m) * basis.ridge;
                let aty = design.transpose() * &y;
                match ata.cholesky() {
                    Some(ch) => ch.solve(&aty),
                    None => design.svd(true, true).solve(&y, 1e-12).unwrap(),
                }
            } else {
                // SVD pseudo-inverse: minimum-norm solution when rank-deficient.
                design.svd(true, true).solve(&y, 1e-12).unwrap()
            };
            Ok(RegressionModel::Polynomial {
                dim,
                exponents,
                coeffs: coeffs.iter().cloned().collect(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn points_1d(xs: &[f64]) -> Vec<f64> {
        xs.to_vec()
    }

    #[test]
    fn constant_responses_predict_constant() {
        let x = points_1d(&[0.1, 0.4, 0.9, -2.0]);
        let y = vec![3.5; 4];
        for basis in [BasisSpec::hypercube(3), BasisSpec::polynomial(2)] {
            let model = fit(&x, 1, &y, &basis).unwrap();
            for q in [-5.0, 0.0, 0.33, 10.0] {
                assert!((model.predict(&[q]) - 3.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linear_function_exactly_interpolated() {
        let x = points_1d(&[-1.0, 0.0, 0.5, 2.0]);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let model = fit(&x, 1, &y, &BasisSpec::polynomial(1)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((model.predict(&[*xi]) - yi).abs() < 1e-10);
        }
        // Extrapolation of the fitted line: 2*3 + 1 = 7.
        assert!((model.predict(&[3.0]) - 7.0).abs() < 1e-9);
    }

    #[test]
    fn single_cell_is_global_mean() {
        let x = points_1d(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let y = vec![1.0, 2.0, 3.0, 4.0, 10.0];
        let model = fit(&x, 1, &y, &BasisSpec::hypercube(1)).unwrap();
        let brute = y.iter().sum::<f64>() / y.len() as f64;
        assert!((model.predict(&[1.7]) - brute).abs() < 1e-12);
    }

    #[test]
    fn empty_cell_falls_back_and_singleton_reproduces_sample() {
        // Points in cells 0 and 2 of a 3-cell partition over [0, 3].
        let basis = BasisSpec {
            kind: BasisKind::HypercubeLocalConstant {
                cells_per_axis: 3,
                bbox: Some((vec![0.0], vec![3.0])),
            },
            ridge: 0.0,
        };
        let x = points_1d(&[0.5, 2.5]);
        let y = vec![1.0, 5.0];
        let model = fit(&x, 1, &y, &basis).unwrap();
        assert!((model.predict(&[0.6]) - 1.0).abs() < 1e-12, "singleton cell");
        assert!((model.predict(&[2.4]) - 5.0).abs() < 1e-12);
        assert!((model.predict(&[1.5]) - 3.0).abs() < 1e-12, "empty cell -> global mean");
        // Clamping outside the box lands in the nearest cell.
        assert!((model.predict(&[-7.0]) - 1.0).abs() < 1e-12);
        assert!((model.predict(&[9.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn projection_orthogonality_zero_ridge() {
        let n = 64;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut s = crate::rng::Stream::substream(5, 0, 0, 0);
        for _ in 0..n {
            let xi = s.next_range(-1.0, 1.0);
            x.push(xi);
            y.push(xi.sin() + 0.1 * s.next_gaussian_pair().0);
        }
        let basis = BasisSpec::polynomial(3);
        let model = fit(&x, 1, &y, &basis).unwrap();
        let resid: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| yi - model.predict(&[*xi])).collect();
        let rn = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
        for e in 0..=3u32 {
            let col: Vec<f64> = x.iter().map(|xi| xi.powi(e as i32)).collect();
            let cn = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ip: f64 = resid.iter().zip(&col).map(|(a, b)| a * b).sum();
            assert!(ip.abs() <= 1e-8 * rn * cn, "degree {e}: <r,phi> = {ip}");
        }
    }

    #[test]
    fn local_constant_means_match_brute_force_grouping() {
        let mut s = crate::rng::Stream::substream(8, 0, 0, 0);
        let n = 500;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            x.push(s.next_range(0.0, 1.0));
            y.push(s.next_gaussian_pair().0);
        }
        let cells = 7;
        let basis = BasisSpec {
            kind: BasisKind::HypercubeLocalConstant {
                cells_per_axis: cells,
                bbox: Some((vec![0.0], vec![1.0])),
            },
            ridge: 0.0,
        };
        let model = fit(&x, 1, &y, &basis).unwrap();
        // Brute-force per-cell means.
        let mut sums = vec![0.0; cells];
        let mut cnt = vec![0usize; cells];
        for (xi, yi) in x.iter().zip(&y) {
            let j = ((xi * cells as f64).floor() as usize).min(cells - 1);
            sums[j] += yi;
            cnt[j] += 1;
        }
        for j in 0..cells {
            if cnt[j] > 0 {
                let center = (j as f64 + 0.5) / cells as f64;
                let expect = sums[j] / cnt[j] as f64;
                assert!((model.predict(&[center]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubling_cells_never_hurts_in_sample_mse() {
        let mut s = crate::rng::Stream::substream(12, 0, 0, 0);
        let n = 400;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let xi = s.next_range(0.0, 1.0);
            x.push(xi);
            y.push((6.0 * xi).cos() + 0.3 * s.next_gaussian_pair().0);
        }
        let mse = |cells: usize| -> f64 {
            let basis = BasisSpec {
                kind: BasisKind::HypercubeLocalConstant {
                    cells_per_axis: cells,
                    bbox: Some((vec![0.0], vec![1.0])),
                },
                ridge: 0.0,
            };
            let model = fit(&x, 1, &y, &basis).unwrap();
            x.iter().zip(&y).map(|(xi, yi)| (yi - model.predict(&[*xi])).powi(2)).sum::<f64>()
                / n as f64
        };
        let mut prev = mse(1);
        for cells in [2, 4, 8, 16] {
            let cur = mse(cells);
            assert!(cur <= prev + 1e-12, "cells {cells}: {cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn empty_sample_is_an_error() {
        assert!(matches!(
            fit(&[], 1, &[], &BasisSpec::hypercube(2)),
            Err(RegressionError::EmptySample)
        ));
    }

    proptest! {
        #[test]
        fn variance_reduction(values in proptest::collection::vec((-5.0f64..5.0, -10.0f64..10.0), 2..200)) {
            let x: Vec<f64> = values.iter().map(|(a, _)| *a).collect();
            let y: Vec<f64> = values.iter().map(|(_, b)| *b).collect();
            let n = y.len() as f64;
            for basis in [BasisSpec::hypercube(4), BasisSpec::polynomial(1)] {
                let model = fit(&x, 1, &y, &basis).unwrap();
                let preds: Vec<f64> = x.iter().map(|xi| model.predict(&[*xi])).collect();
                let var = |v: &[f64]| {
                    let m = v.iter().sum::<f64>() / n;
                    v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n
                };
                prop_assert!(var(&preds) <= var(&y) + 1e-12);
            }
        }
    }
}
