//! Coarse-to-fine groupwise registration.
//!
//! Every level re-linearizes the warped images around the current displacements a few
//! times, tightening the nuclear-norm budget `ν` by the factor `α` before each convex
//! subproblem. Primal and dual states are carried over between subproblems as warm
//! starts and replicated onto the finer grid between levels.

use log::{debug, info};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{downsample, prolongate_blocks, warp, warp_with_gradient, DisplacementField, Image, Spacing};
use crate::lowrank::{singular_values, subtract_column_mean};
use crate::metrics::{casorati, project_centered_feasible};
use crate::operators::{CompositeOperator, DualState, LinearOperator, PrimalState, StateLayout, TvOperator};
use crate::prox::{ConstraintMode, ProxContext};
use crate::solver::{pdhg_solve, PdhgSettings, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE};

/// Parameters of a registration run. Field names double as configuration-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    /// Weight of the total variation of the displacements.
    pub mu: f64,
    /// Per-step decay of the nuclear-norm budget, in `(0, 1)`.
    pub alpha: f64,
    /// Number of pyramid levels.
    pub levels: usize,
    /// Linearization steps per level, coarsest first.
    pub iterations: Vec<usize>,
    /// Fixed-point tolerance of each subproblem solve.
    pub tolerance: f64,
    /// Iteration cap of each subproblem solve.
    pub max_iterations: usize,
    /// Relative tolerance of the operator-norm power iteration.
    pub norm_tolerance: f64,
    pub norm_max_iterations: usize,
    /// Index of a frame whose displacement is pinned to zero; without it the mean
    /// displacement is zero.
    pub reference: Option<usize>,
    /// Record the subproblem energy every few solver iterations (debug logging).
    pub trace_energy: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            mu: 0.2,
            alpha: 0.9,
            levels: 3,
            iterations: vec![16, 2, 2],
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            norm_tolerance: 1e-6,
            norm_max_iterations: 1000,
            reference: None,
            trace_energy: false,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.levels == 0 {
            return Err(Error::invalid("at least one level is required"));
        }
        if self.iterations.len() != self.levels {
            return Err(Error::invalid(format!(
                "iterations lists {} levels, expected {}",
                self.iterations.len(),
                self.levels
            )));
        }
        if self.iterations.contains(&0) {
            return Err(Error::invalid("every level needs at least one linearization step"));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::invalid("solver tolerance and iteration cap must be positive"));
        }
        if !(self.norm_tolerance > 0.0) || self.norm_max_iterations == 0 {
            return Err(Error::invalid("norm tolerance and iteration cap must be positive"));
        }
        Ok(())
    }

    pub fn mode(&self) -> ConstraintMode {
        match self.reference {
            Some(r) => ConstraintMode::FixedReference(r),
            None => ConstraintMode::MeanZero,
        }
    }

    /// Final budget relative to `‖M − M̄‖_*`: `α` to the total number of steps.
    pub fn final_ratio(&self) -> f64 {
        self.alpha.powi(self.iterations.iter().sum::<usize>() as i32)
    }
}

/// Record of one linearization step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    /// 1-based, coarsest level first.
    pub level: usize,
    /// 1-based within the level.
    pub step: usize,
    pub nu: f64,
    pub norm_estimate: f64,
    pub solver_iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// `h₁h₂ ‖M(u) − L‖₁` with the images warped by the new displacements.
    pub data_energy: f64,
    /// `μ h₁h₂ Σ_k ‖G u^k‖₂,₁`.
    pub tv_energy: f64,
    /// Singular values of `L − L̄`, nonincreasing.
    pub singular_values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Full-resolution displacements in pixel units.
    pub fields: Vec<DisplacementField>,
    /// `T_k(u^k)`.
    pub warped: Vec<Image>,
    /// Columns of the low-rank component as images.
    pub low_rank: Vec<Image>,
    /// `T_k(u^k) − l_k`.
    pub sparse: Vec<Image>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// `‖M − M̄‖_*` of the full-resolution input.
    pub initial_nuclear_norm: f64,
    pub final_nu: f64,
}

/// Image pyramid, coarsest level first; level `j` (1-based) has spacing `2^{levels − j}`.
pub fn build_pyramid(images: &[Image], levels: usize) -> Result<Vec<Vec<Image>>> {
    if levels == 0 {
        return Err(Error::invalid("at least one level is required"));
    }
    let first = images.first().ok_or_else(|| Error::invalid("empty image group"))?;
    let (rows, cols) = (first.rows(), first.cols());
    if let Some(k) = images.iter().position(|im| !im.same_grid(rows, cols)) {
        return Err(Error::dims(format!(
            "image {k} is {}x{}, expected {rows}x{cols}",
            images[k].rows(),
            images[k].cols()
        )));
    }
    let factor = 1usize << (levels - 1);
    if rows % factor != 0 || cols % factor != 0 || rows / factor < 2 || cols / factor < 2 {
        return Err(Error::invalid(format!(
            "{rows}x{cols} images cannot be halved {} times",
            levels - 1
        )));
    }
    let mut pyramid = vec![images
        .iter()
        .map(|im| im.clone().with_spacing(Spacing::UNIT))
        .collect::<Result<Vec<_>>>()?];
    for _ in 1..levels {
        let coarser = pyramid
            .last()
            .expect("pyramid is nonempty")
            .iter()
            .map(downsample)
            .collect::<Result<Vec<_>>>()?;
        pyramid.push(coarser);
    }
    pyramid.reverse();
    Ok(pyramid)
}

/// Budgets used by every step, in order, replaying the scalar updates of [`register`].
pub fn threshold_schedule(initial_nuclear_norm: f64, config: &RegistrationConfig) -> Vec<f64> {
    let mut nu = initial_nuclear_norm * 0.5f64.powi(config.levels as i32);
    let mut out = Vec::new();
    for &steps in &config.iterations {
        nu *= 2.0;
        for _ in 0..steps {
            nu *= config.alpha;
            out.push(nu);
        }
    }
    out
}

/// Warped images, their gradients and the linearization offsets at the current fields.
fn linearize(images: &[Image], x: &PrimalState, spacing: Spacing) -> Result<(Vec<Image>, Vec<f64>, Vec<f64>)> {
    let layout = x.layout();
    let mn = layout.pixels();
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(k, im)| {
            let field = x.displacement_field(k, spacing)?;
            let (warped, grad) = warp_with_gradient(im, &field)?;
            let u = x.field(k);
            let offset: Vec<f64> = (0..mn)
                .map(|p| warped.values()[p] - grad[p] * u[p] - grad[mn + p] * u[mn + p])
                .collect();
            Ok((warped, grad, offset))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut warped = Vec::with_capacity(images.len());
    let mut grads = Vec::with_capacity(2 * mn * images.len());
    let mut offsets = Vec::with_capacity(mn * images.len());
    for (w, g, b) in per_image {
        warped.push(w);
        grads.extend(g);
        offsets.extend(b);
    }
    Ok((warped, grads, offsets))
}

/// Replaces the low-rank block by its nearest point with `‖L − L̄‖_* ≤ ν` and returns the
/// singular values of the centered result.
fn enforce_budget(x: &mut PrimalState, nu: f64) -> Result<Vec<f64>> {
    let layout = x.layout();
    let l = DMatrix::from_column_slice(layout.pixels(), layout.images, x.low_rank());
    let projected = project_centered_feasible(&l, nu)?;
    x.low_rank_mut().copy_from_slice(projected.as_slice());
    singular_values(&subtract_column_mean(&projected))
}

/// Registers `images` groupwise.
pub fn register(images: &[Image], config: &RegistrationConfig) -> Result<RegistrationResult> {
    config.validate()?;
    let n = images.len();
    if let ConstraintMode::FixedReference(r) = config.mode() {
        if r >= n {
            return Err(Error::invalid(format!(
                "reference frame {r} out of range for {n} images"
            )));
        }
    }
    let pyramid = build_pyramid(images, config.levels)?;
    let initial_nuclear_norm: f64 = singular_values(&subtract_column_mean(&casorati(&pyramid[config.levels - 1])?))?
        .iter()
        .sum();
    let coarse = &pyramid[0][0];
    let mut layout = StateLayout::new(n, coarse.rows(), coarse.cols());
    let mut x = PrimalState::zeros(layout);
    let mut y = DualState::zeros(layout);
    let mut nu = initial_nuclear_norm * 0.5f64.powi(config.levels as i32);
    let mut diagnostics = Vec::new();
    let mode = config.mode();

    for (j, level_images) in pyramid.iter().enumerate() {
        let spacing = level_images[0].spacing();
        let cell = spacing.cell_area();
        let tv = TvOperator::new(layout.rows, layout.cols, spacing);
        nu *= 2.0;
        for step in 0..config.iterations[j] {
            nu *= config.alpha;
            let where_ = format!("level {} step {}", j + 1, step + 1);
            let (_, grads, offsets) = linearize(level_images, &x, spacing).map_err(|e| e.context(where_.clone()))?;
            let op = CompositeOperator::new(layout, spacing, grads)?;
            let norm = op.norm_estimate(config.norm_tolerance, config.norm_max_iterations);
            let settings = PdhgSettings::from_norm(norm, config.max_iterations, config.tolerance)
                .map_err(|e| e.context(where_.clone()))?
                .with_energy_trace(config.trace_energy);
            let ctx = ProxContext::new(layout, offsets, cell, config.mu * cell, nu, mode)?;
            let (xs, ys, report) = pdhg_solve(&op, &ctx, x.clone().into_vec(), y.clone().into_vec(), &settings)
                .map_err(|e| e.context(where_.clone()))?;
            for (it, energy) in &report.energy_trace {
                debug!("{where_}: iteration {it}, energy {energy:.6e}");
            }
            x = PrimalState::from_vec(layout, xs)?;
            y = DualState::from_vec(layout, ys)?;
            let sigma = enforce_budget(&mut x, nu).map_err(|e| e.context(where_.clone()))?;

            let mn = layout.pixels();
            let mut data_energy = 0.0;
            let mut tv_energy = 0.0;
            let mut grad = vec![0.0; 4 * mn];
            for (k, im) in level_images.iter().enumerate() {
                let warped = warp(im, &x.displacement_field(k, spacing)?)?;
                data_energy += warped
                    .values()
                    .iter()
                    .zip(x.low_rank_column(k))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
                tv.apply(x.field(k), &mut grad);
                tv_energy += tv.group_norm(&grad);
            }
            let record = StepDiagnostics {
                level: j + 1,
                step: step + 1,
                nu,
                norm_estimate: norm,
                solver_iterations: report.iterations,
                residual: report.residual,
                converged: report.converged,
                data_energy: cell * data_energy,
                tv_energy: config.mu * cell * tv_energy,
                singular_values: sigma,
            };
            info!(
                "{where_}: nu {:.4e}, |A| {:.4e}, {} iterations, residual {:.2e}, data {:.4e}, tv {:.4e}",
                record.nu,
                record.norm_estimate,
                record.solver_iterations,
                record.residual,
                record.data_energy,
                record.tv_energy
            );
            diagnostics.push(record);
        }
        if j + 1 < config.levels {
            let fine = layout.refined();
            x = PrimalState::from_vec(fine, prolongate_blocks(x.as_slice(), layout.rows, layout.cols))?;
            y = DualState::from_vec(fine, prolongate_blocks(y.as_slice(), layout.rows, layout.cols))?;
            layout = fine;
        }
    }

    let full = &pyramid[config.levels - 1];
    let mut fields = Vec::with_capacity(n);
    let mut warped = Vec::with_capacity(n);
    let mut low_rank = Vec::with_capacity(n);
    let mut sparse = Vec::with_capacity(n);
    for (k, im) in full.iter().enumerate() {
        let field = x.displacement_field(k, Spacing::UNIT)?;
        let w = warp(im, &field)?;
        let l = x.low_rank_column(k).to_vec();
        let e: Vec<f64> = w.values().iter().zip(&l).map(|(a, b)| a - b).collect();
        low_rank.push(Image::new(layout.rows, layout.cols, l)?);
        sparse.push(Image::new(layout.rows, layout.cols, e)?);
        warped.push(w);
        fields.push(field);
    }
    Ok(RegistrationResult {
        fields,
        warped,
        low_rank,
        sparse,
        diagnostics,
        initial_nuclear_norm,
        final_nu: nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{map_landmarks, LandmarkSet};
    use crate::synth::{generate_ellipse_sequence, EllipseSceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        RegistrationConfig::default().validate().unwrap();
        let bad = [
            RegistrationConfig {
                mu: 0.0,
                ..Default::default()
            },
            RegistrationConfig {
                alpha: 1.0,
                ..Default::default()
            },
            RegistrationConfig {
                levels: 2,
                ..Default::default()
            },
            RegistrationConfig {
                iterations: vec![16, 0, 2],
                ..Default::default()
            },
            RegistrationConfig {
                tolerance: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let beta = RegistrationConfig::default().final_ratio();
        assert!((beta - 0.9f64.powi(20)).abs() < 1e-15);
    }

    #[test]
    fn pyramid_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let im = Image::from_fn(8, 12, |_, _| rng.random::<f64>()).unwrap();
        let one = build_pyramid(std::slice::from_ref(&im), 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0][0], im);

        let three = build_pyramid(&[im.clone(), im.clone()], 3).unwrap();
        let dims: Vec<(usize, usize, f64)> = three
            .iter()
            .map(|l| (l[0].rows(), l[0].cols(), l[0].spacing().h1))
            .collect();
        assert_eq!(dims, vec![(2, 3, 4.0), (4, 6, 2.0), (8, 12, 1.0)]);

        let flat = Image::constant(8, 8, 0.25).unwrap();
        for level in build_pyramid(&[flat], 3).unwrap() {
            assert!(level[0].values().iter().all(|&v| v == 0.25));
        }
        let odd = Image::constant(10, 8, 0.0).unwrap();
        assert!(build_pyramid(&[odd], 3).is_err());
    }

    #[test]
    fn schedule_bookkeeping() {
        let config = RegistrationConfig::default();
        let schedule = threshold_schedule(3.7, &config);
        assert_eq!(schedule.len(), 20);
        let last = *schedule.last().unwrap();
        assert!((last - config.final_ratio() * 3.7).abs() < 1e-12);
    }

    #[test]
    fn identical_images_stay_put() {
        let seq = generate_ellipse_sequence(&EllipseSceneConfig::scaled(32, 32, 1)).unwrap();
        let group = vec![seq.images[0].clone(); 3];
        let config = RegistrationConfig {
            levels: 1,
            iterations: vec![4],
            ..Default::default()
        };
        let result = register(&group, &config).unwrap();
        for f in &result.fields {
            assert!(f.max_abs() < 0.1, "{}", f.max_abs());
        }
        let recorded: Vec<f64> = result.diagnostics.iter().map(|d| d.nu).collect();
        assert_eq!(recorded, threshold_schedule(result.initial_nuclear_norm, &config));
    }

    #[test]
    fn fixed_reference_recovers_translation() {
        let config_scene = EllipseSceneConfig::scaled(64, 64, 1);
        let base = generate_ellipse_sequence(&config_scene).unwrap();
        let shift = DisplacementField::constant(64, 64, Spacing::UNIT, [-2.0, 0.0]).unwrap();
        // Content of the second frame sits 2 pixels further along axis 1.
        let moved = warp(&base.images[0], &shift).unwrap();
        let config = RegistrationConfig {
            levels: 2,
            iterations: vec![8, 4],
            reference: Some(0),
            ..Default::default()
        };
        let result = register(&[base.images[0].clone(), moved], &config).unwrap();
        assert_eq!(result.fields[0].max_abs(), 0.0);
        let lm = base.landmarks[0].clone();
        let shifted = LandmarkSet::new(lm.positions().iter().map(|p| [p[0] + 2.0, p[1]]).collect()).unwrap();
        let mapped = map_landmarks(&shifted, &result.fields[1]).unwrap().landmarks;
        let err: f64 = mapped
            .positions()
            .iter()
            .zip(lm.positions())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / lm.len() as f64;
        assert!(err < 0.5, "mean landmark error {err}");
    }
}
