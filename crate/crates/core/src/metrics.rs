//! Group dissimilarity measures and landmark accuracy.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{Image, LandmarkSet};
use crate::lowrank::{nuclear_norm, project_l1_ball, singular_values, subtract_column_mean, svd};
use crate::operators::{CenteringOperator, IdentityOperator};
use crate::prox::prox_f2_star;
use crate::solver::{pdhg_solve, PdhgSettings, ProxBundle, SolveReport};

/// Inner-solver limits used when a dissimilarity is evaluated on its own.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            tolerance: 1e-6,
            max_iterations: 5000,
        }
    }
}

/// Low-rank plus sparse split `M = L + E` returned by the decomposition measures.
#[derive(Clone, Debug)]
pub struct DecompositionResult {
    pub value: f64,
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    /// Singular values of `L − L̄`, nonincreasing.
    pub centered_singular_values: Vec<f64>,
    pub report: SolveReport,
}

fn check_group(images: &[Image]) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image group"))?;
    let (rows, cols) = (first.rows(), first.cols());
    if let Some(k) = images.iter().position(|im| !im.same_grid(rows, cols)) {
        return Err(Error::dims(format!(
            "image {k} is {}x{}, expected {rows}x{cols}",
            images[k].rows(),
            images[k].cols()
        )));
    }
    Ok((rows, cols))
}

/// `mn x N` matrix whose column `k` is the column-major vectorization of image `k`.
pub fn casorati(images: &[Image]) -> Result<DMatrix<f64>> {
    let (rows, cols) = check_group(images)?;
    let mut data = Vec::with_capacity(rows * cols * images.len());
    for im in images {
        data.extend(im.vectorize_column_major());
    }
    Ok(DMatrix::from_vec(rows * cols, images.len(), data))
}

/// `½ Σ_k ‖T_k − T̄‖²` with `T̄` the pixelwise mean.
pub fn d_var(images: &[Image]) -> Result<f64> {
    let m = casorati(images)?;
    Ok(0.5 * subtract_column_mean(&m).norm_squared())
}

/// Weighted eigenvalue sum `Σ_i i λ_i` of the correlation matrix of the group divided by
/// `N − 1`, eigenvalues sorted nonincreasing.
///
/// Each image is centered by its own mean intensity and scaled to unit norm, so the
/// matrix is the Pearson correlation matrix over `N − 1`.
pub fn d_pca2(images: &[Image]) -> Result<f64> {
    let m = casorati(images)?;
    let n = m.ncols();
    if n < 2 {
        return Err(Error::invalid("correlation needs at least two images"));
    }
    let mut z = m;
    for (k, mut col) in z.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if !(norm > 0.0) {
            return Err(Error::invalid(format!("image {k} has zero intensity variance")));
        }
        col /= norm;
    }
    let corr = (z.transpose() * &z) / (n - 1) as f64;
    let mut eig: Vec<f64> = SymmetricEigen::new(corr)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig.iter().enumerate().map(|(i, l)| (i + 1) as f64 * l).sum())
}

fn soft_shift(v: &mut [f64], center: &[f64], threshold: f64) {
    for (x, c) in v.iter_mut().zip(center) {
        let d = *x - c;
        *x = c + d.signum() * (d.abs() - threshold).max(0.0);
    }
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

struct PcpProx<'a> {
    data: &'a DMatrix<f64>,
    mu: f64,
}

impl ProxBundle for PcpProx<'_> {
    /// Projection onto the spectral-norm unit ball.
    fn prox_dual(&self, y: &mut [f64], _eta: f64) -> Result<()> {
        let mat = DMatrix::from_column_slice(self.data.nrows(), self.data.ncols(), y);
        let triple = svd(&mat)?;
        if triple.singular_values[0] <= 1.0 {
            return Ok(());
        }
        let clipped: Vec<f64> = triple.singular_values.iter().map(|s| s.min(1.0)).collect();
        y.copy_from_slice(triple.recompose_with(&clipped).as_slice());
        Ok(())
    }

    fn prox_primal(&self, x: &mut [f64], tau: f64) -> Result<()> {
        soft_shift(x, self.data.as_slice(), tau * self.mu);
        Ok(())
    }
}

struct DeltaRpcaProx<'a> {
    data: &'a DMatrix<f64>,
    nu: f64,
}

impl ProxBundle for DeltaRpcaProx<'_> {
    fn prox_dual(&self, y: &mut [f64], eta: f64) -> Result<()> {
        prox_f2_star(y, self.data.nrows(), self.nu, eta)
    }

    fn prox_primal(&self, x: &mut [f64], tau: f64) -> Result<()> {
        soft_shift(x, self.data.as_slice(), tau);
        Ok(())
    }
}

fn finish(data: &DMatrix<f64>, low_rank: DMatrix<f64>, value: f64, report: SolveReport) -> Result<DecompositionResult> {
    let sparse = data - &low_rank;
    let centered_singular_values = singular_values(&subtract_column_mean(&low_rank))?;
    Ok(DecompositionResult {
        value,
        low_rank,
        sparse,
        centered_singular_values,
        report,
    })
}

/// `min_L ‖L‖_* + μ‖M − L‖₁` for a data matrix `M`.
pub fn pcp_decompose(data: &DMatrix<f64>, mu: f64, settings: &MetricSettings) -> Result<DecompositionResult> {
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("mu must be positive, got {mu}")));
    }
    let len = data.len();
    let op = IdentityOperator(len);
    let pdhg = PdhgSettings::from_norm(1.0, settings.max_iterations, settings.tolerance)?;
    let prox = PcpProx { data, mu };
    let (x, _, report) = pdhg_solve(&op, &prox, data.as_slice().to_vec(), vec![0.0; len], &pdhg)
        .map_err(|e| e.context("PCP decomposition"))?;
    let low_rank = DMatrix::from_vec(data.nrows(), data.ncols(), x);
    let value = nuclear_norm(&low_rank) + mu * l1_distance(data.as_slice(), low_rank.as_slice());
    finish(data, low_rank, value, report)
}

/// Nearest point of `{L : ‖L − L̄‖_* ≤ ν}`: the mean column is kept and the centered
/// part is projected onto the nuclear-norm ball.
pub fn project_centered_feasible(low_rank: &DMatrix<f64>, nu: f64) -> Result<DMatrix<f64>> {
    let centered = subtract_column_mean(low_rank);
    let mean_part = low_rank - &centered;
    let triple = svd(&centered)?;
    let sigma: Vec<f64> = triple.singular_values.iter().copied().collect();
    if sigma.iter().sum::<f64>() <= nu {
        return Ok(low_rank.clone());
    }
    let projected = project_l1_ball(&sigma, nu)?;
    Ok(mean_part + triple.recompose_with(&projected))
}

/// `min_L ‖M − L‖₁` subject to `‖L − L̄‖_* ≤ ν` for a data matrix `M`.
///
/// The solver output is projected onto the feasible set before the value is computed, so
/// the returned value is attained by a feasible point.
pub fn delta_rpca_decompose(data: &DMatrix<f64>, nu: f64, settings: &MetricSettings) -> Result<DecompositionResult> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::invalid(format!("nu must be nonnegative, got {nu}")));
    }
    let (rows, cols) = data.shape();
    if cols < 2 {
        let value = 0.0;
        return finish(
            data,
            data.clone(),
            value,
            SolveReport {
                iterations: 0,
                residual: 0.0,
                converged: true,
                energy_trace: Vec::new(),
            },
        );
    }
    let op = CenteringOperator::new(cols, rows);
    let pdhg = PdhgSettings::from_norm(1.0, settings.max_iterations, settings.tolerance)?;
    let prox = DeltaRpcaProx { data, nu };
    let (x, _, report) = pdhg_solve(&op, &prox, data.as_slice().to_vec(), vec![0.0; data.len()], &pdhg)
        .map_err(|e| e.context("delta-RPCA decomposition"))?;
    let low_rank = project_centered_feasible(&DMatrix::from_vec(rows, cols, x), nu)?;
    let value = l1_distance(data.as_slice(), low_rank.as_slice());
    finish(data, low_rank, value, report)
}

/// PCP dissimilarity of an image group.
pub fn d_pcp(images: &[Image], mu: f64, settings: &MetricSettings) -> Result<DecompositionResult> {
    pcp_decompose(&casorati(images)?, mu, settings)
}

/// δ-RPCA dissimilarity of an image group.
pub fn d_delta_rpca(images: &[Image], nu: f64, settings: &MetricSettings) -> Result<DecompositionResult> {
    delta_rpca_decompose(&casorati(images)?, nu, settings)
}

/// `‖M − M̄‖_*` of an image group.
pub fn centered_nuclear_norm(images: &[Image]) -> Result<f64> {
    Ok(singular_values(&subtract_column_mean(&casorati(images)?))?.iter().sum())
}

/// Per landmark: mean distance of its position in each frame to its mean position.
pub fn landmark_accuracy(frames: &[LandmarkSet]) -> Result<Vec<f64>> {
    let first = frames.first().ok_or_else(|| Error::invalid("no landmark frames"))?;
    let count = first.len();
    if let Some(k) = frames.iter().position(|f| f.len() != count) {
        return Err(Error::dims(format!(
            "frame {k} has {} landmarks, expected {count}",
            frames[k].len()
        )));
    }
    let n = frames.len() as f64;
    Ok((0..count)
        .map(|i| {
            // Offsets from the first frame keep identical positions exactly at zero error.
            let origin = first.positions()[i];
            let offset = frames.iter().fold([0.0, 0.0], |acc, f| {
                let p = f.positions()[i];
                [acc[0] + (p[0] - origin[0]), acc[1] + (p[1] - origin[1])]
            });
            let mean = [origin[0] + offset[0] / n, origin[1] + offset[1] / n];
            frames
                .iter()
                .map(|f| {
                    let p = f.positions()[i];
                    ((p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sqrt()
                })
                .sum::<f64>()
                / n
        })
        .collect())
}
