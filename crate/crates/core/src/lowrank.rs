//! Singular value utilities: SVD, nuclear norm, ℓ1-ball and nuclear-ball projections,
//! and spectral-norm estimation of matrix-free operators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Economic SVD `A = U diag(σ) Vᵀ` with singular values sorted nonincreasing.
#[derive(Clone, Debug)]
pub struct SvdTriple {
    /// `p x r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// `r` nonnegative values, nonincreasing.
    pub singular_values: DVector<f64>,
    /// `q x r`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdTriple {
    /// `U diag(s) Vᵀ` for replacement singular values `s`.
    pub fn recompose_with(&self, s: &[f64]) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= s[k];
        }
        us * self.v.transpose()
    }
}

fn check_finite(matrix: &DMatrix<f64>) -> Result<()> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    Ok(())
}

fn to_faer(matrix: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(matrix.nrows(), matrix.ncols(), |i, j| matrix[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Economic SVD of `matrix`.
///
/// Computed with faer: the nalgebra SVD returns inaccurate factors for some
/// rank-deficient inputs, and centered matrices are always rank-deficient.
pub fn svd(matrix: &DMatrix<f64>) -> Result<SvdTriple> {
    check_finite(matrix)?;
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Ok(SvdTriple {
            u: DMatrix::zeros(rows, 0),
            singular_values: DVector::zeros(0),
            v: DMatrix::zeros(cols, 0),
        });
    }
    let decomposition = to_faer(matrix)
        .thin_svd()
        .map_err(|_| Error::SvdFailed { rows, cols })?;
    let s = decomposition.S().column_vector();
    Ok(SvdTriple {
        u: from_faer(decomposition.U()),
        singular_values: DVector::from_fn(s.nrows(), |i, _| s[i]),
        v: from_faer(decomposition.V()),
    })
}

/// Singular values, sorted nonincreasing.
pub fn singular_values(matrix: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_finite(matrix)?;
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    to_faer(matrix)
        .singular_values()
        .map_err(|_| Error::SvdFailed { rows, cols })
}

/// Sum of singular values.
///
/// Panics if the matrix has non-finite entries.
pub fn nuclear_norm(matrix: &DMatrix<f64>) -> f64 {
    singular_values(matrix)
        .expect("nuclear norm of a finite matrix")
        .iter()
        .sum()
}

/// `M - M̄`, where every column of `M̄` is the mean of the columns of `M`.
pub fn subtract_column_mean(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = matrix.column_mean();
    let mut out = matrix.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// Euclidean projection of `v` onto `{x : ‖x‖₁ ≤ radius}` by sorting.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Result<Vec<f64>> {
    if !(radius >= 0.0) {
        return Err(Error::invalid(format!(
            "l1-ball radius must be nonnegative, got {radius}"
        )));
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return Ok(v.to_vec());
    }
    if radius == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cumulative += m;
        let candidate = (cumulative - radius) / (k + 1) as f64;
        if m > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    Ok(v.iter().map(|&x| x.signum() * (x.abs() - theta).max(0.0)).collect())
}

/// Euclidean projection onto the nuclear-norm ball `{X : ‖X‖_* ≤ radius}`.
pub fn project_nuclear_ball(matrix: &DMatrix<f64>, radius: f64) -> Result<DMatrix<f64>> {
    if !(radius >= 0.0) {
        return Err(Error::invalid(format!(
            "nuclear-ball radius must be nonnegative, got {radius}"
        )));
    }
    let triple = svd(matrix)?;
    let sigma: Vec<f64> = triple.singular_values.iter().copied().collect();
    if sigma.iter().sum::<f64>() <= radius {
        return Ok(matrix.clone());
    }
    let projected = project_l1_ball(&sigma, radius)?;
    Ok(triple.recompose_with(&projected))
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Seeds for the two restarts tried when the deterministic start does not converge.
const RESTART_SEEDS: [u64; 2] = [0x5eed_0001, 0x5eed_0002];

/// Estimates `‖A‖_σ` by power iteration on `AᵀA`.
///
/// Starts from the normalized all-ones vector. Stops when the estimate changes by less
/// than `tol` (relative) between iterations. If that does not happen within `max_it`
/// iterations, two restarts from fixed pseudo-random vectors are run and the largest
/// estimate is returned. A zero operator yields 0.
pub fn power_iteration<F, G>(apply: F, adjoint: G, dim: usize, tol: f64, max_it: usize) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return 0.0;
    }
    let run = |mut x: Vec<f64>| -> (f64, bool) {
        let n = norm2(&x);
        if n == 0.0 {
            return (0.0, false);
        }
        x.iter_mut().for_each(|v| *v /= n);
        let mut previous = f64::NAN;
        let mut estimate = 0.0;
        for _ in 0..max_it.max(1) {
            let ax = apply(&x);
            estimate = norm2(&ax);
            let z = adjoint(&ax);
            let nz = norm2(&z);
            if nz == 0.0 {
                // The iterate fell into the null space; only a zero estimate is reliable.
                return (estimate, false);
            }
            if (estimate - previous).abs() <= tol * estimate {
                return (estimate, true);
            }
            previous = estimate;
            x = z;
            x.iter_mut().for_each(|v| *v /= nz);
        }
        (estimate, false)
    };

    let (estimate, converged) = run(vec![1.0; dim]);
    if converged {
        return estimate;
    }
    let mut best = estimate;
    for seed in RESTART_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        best = best.max(run(start).0);
    }
    best
}
