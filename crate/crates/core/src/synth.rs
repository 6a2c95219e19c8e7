//! Synthetic benchmark data: a striped ellipse moving along a semicircle next to
//! stationary structures, and affine deformation families for energy landscapes.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{warp, DisplacementField, Image, LandmarkSet, Spacing};
use crate::lowrank::nuclear_norm;
use crate::metrics::{casorati, centered_nuclear_norm, d_delta_rpca, d_pca2, d_pcp, d_var, MetricSettings};

/// Resolution the default geometry is specified at.
pub const REFERENCE_SIZE: f64 = 200.0;
/// Sub-samples per pixel and axis used for anti-aliased rendering.
const SUPERSAMPLING: usize = 4;

/// Number of landmarks per frame.
pub const LANDMARK_COUNT: usize = 17;
/// Indices of the landmarks that move with the ellipse.
pub const ELLIPSE_LANDMARKS: std::ops::Range<usize> = 4..9;

/// Indices of the landmarks on the stationary rectangle and frame.
pub fn stationary_landmarks() -> impl Iterator<Item = usize> {
    (0..ELLIPSE_LANDMARKS.start).chain(ELLIPSE_LANDMARKS.end..LANDMARK_COUNT)
}

/// Geometry of the ellipse scene, all lengths in pixels.
///
/// Coordinates are `(axis 1, axis 2)` = `(row, column)` direction in physical units with
/// pixel `(i, j)` centered at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EllipseSceneConfig {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    /// Semi-axes along axis 1 and axis 2.
    pub semi_axes: [f64; 2],
    /// Center of the semicircle traced by the ellipse center.
    pub path_center: [f64; 2],
    pub path_radius: f64,
    pub stripe_period: f64,
    /// Intensities of the bright and dark stripes.
    pub stripe_levels: [f64; 2],
    /// Top-left and bottom-right corners of the stationary rectangle.
    pub rectangle: [[f64; 2]; 2],
    /// Distance of the frame's outer edge from the image border.
    pub frame_inset: f64,
    pub frame_thickness: f64,
}

impl Default for EllipseSceneConfig {
    fn default() -> Self {
        EllipseSceneConfig {
            rows: 200,
            cols: 200,
            frames: 10,
            semi_axes: [35.0, 30.0],
            path_center: [70.0, 100.0],
            path_radius: 50.0,
            stripe_period: 8.0,
            stripe_levels: [1.0, 0.35],
            rectangle: [[18.0, 70.0], [30.0, 130.0]],
            frame_inset: 8.0,
            frame_thickness: 6.0,
        }
    }
}

impl EllipseSceneConfig {
    /// The default scene rescaled to `rows x cols` pixels with `frames` frames; every
    /// length scales with the resolution.
    pub fn scaled(rows: usize, cols: usize, frames: usize) -> Self {
        let s1 = rows as f64 / REFERENCE_SIZE;
        let s2 = cols as f64 / REFERENCE_SIZE;
        let s = s1.min(s2);
        let d = EllipseSceneConfig::default();
        EllipseSceneConfig {
            rows,
            cols,
            frames,
            semi_axes: [d.semi_axes[0] * s1, d.semi_axes[1] * s2],
            path_center: [d.path_center[0] * s1, d.path_center[1] * s2],
            path_radius: d.path_radius * s,
            stripe_period: d.stripe_period * s,
            stripe_levels: d.stripe_levels,
            rectangle: [
                [d.rectangle[0][0] * s1, d.rectangle[0][1] * s2],
                [d.rectangle[1][0] * s1, d.rectangle[1][1] * s2],
            ],
            frame_inset: d.frame_inset * s,
            frame_thickness: d.frame_thickness * s,
        }
    }

    /// Ellipse center in frame `k`: the semicircle is traversed from angle 0 to π.
    pub fn ellipse_center(&self, k: usize) -> [f64; 2] {
        let theta = if self.frames > 1 {
            PI * k as f64 / (self.frames - 1) as f64
        } else {
            0.0
        };
        [
            self.path_center[0] + self.path_radius * theta.sin(),
            self.path_center[1] - self.path_radius * theta.cos(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.rows as f64, self.cols as f64);
        if self.rows < 2 || self.cols < 2 || self.frames == 0 {
            return Err(Error::invalid("scene needs at least 2x2 pixels and one frame"));
        }
        let positive = [
            self.semi_axes[0],
            self.semi_axes[1],
            self.stripe_period,
            self.frame_thickness,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.path_radius >= 0.0) || !(self.frame_inset >= 0.0) {
            return Err(Error::invalid("scene lengths must be positive"));
        }
        if 2.0 * (self.frame_inset + self.frame_thickness) >= m.min(n) {
            return Err(Error::invalid("frame does not fit into the domain"));
        }
        let [[r0, c0], [r1, c1]] = self.rectangle;
        if !(0.0 <= r0 && r0 < r1 && r1 <= m && 0.0 <= c0 && c0 < c1 && c1 <= n) {
            return Err(Error::invalid("rectangle exceeds the domain"));
        }
        for k in 0..self.frames {
            let c = self.ellipse_center(k);
            if c[0] - self.semi_axes[0] < 0.0
                || c[0] + self.semi_axes[0] > m
                || c[1] - self.semi_axes[1] < 0.0
                || c[1] + self.semi_axes[1] > n
            {
                return Err(Error::invalid(format!("ellipse leaves the domain in frame {k}")));
            }
        }
        Ok(())
    }

    /// Frames with 1-based odd index (0, 2, 4, … here) carry stripes varying along axis 2.
    fn vertical_stripes(k: usize) -> bool {
        k.is_multiple_of(2)
    }

    fn intensity(&self, k: usize, x: [f64; 2], center: [f64; 2]) -> f64 {
        let (m, n) = (self.rows as f64, self.cols as f64);
        let d1 = (x[0] - center[0]) / self.semi_axes[0];
        let d2 = (x[1] - center[1]) / self.semi_axes[1];
        if d1 * d1 + d2 * d2 <= 1.0 {
            let offset = if Self::vertical_stripes(k) {
                x[1] - center[1]
            } else {
                x[0] - center[0]
            };
            let phase = (offset / self.stripe_period).rem_euclid(1.0);
            return if phase < 0.5 {
                self.stripe_levels[0]
            } else {
                self.stripe_levels[1]
            };
        }
        let [[r0, c0], [r1, c1]] = self.rectangle;
        if x[0] >= r0 && x[0] < r1 && x[1] >= c0 && x[1] < c1 {
            return 1.0;
        }
        let outer = self.frame_inset;
        let inner = self.frame_inset + self.frame_thickness;
        let in_outer = x[0] >= outer && x[0] < m - outer && x[1] >= outer && x[1] < n - outer;
        let in_inner = x[0] >= inner && x[0] < m - inner && x[1] >= inner && x[1] < n - inner;
        if in_outer && !in_inner {
            1.0
        } else {
            0.0
        }
    }

    fn render(&self, k: usize) -> Result<Image> {
        let center = self.ellipse_center(k);
        let s = SUPERSAMPLING as f64;
        Image::from_fn(self.rows, self.cols, |i, j| {
            let mut acc = 0.0;
            for a in 0..SUPERSAMPLING {
                for b in 0..SUPERSAMPLING {
                    let x = [i as f64 + (a as f64 + 0.5) / s, j as f64 + (b as f64 + 0.5) / s];
                    acc += self.intensity(k, x, center);
                }
            }
            acc / (s * s)
        })
    }

    /// Landmarks of frame `k`: rectangle corners (0–3), ellipse center and axis endpoints
    /// (4–8), frame corners and edge midpoints along the middle of the frame band (9–16).
    pub fn landmarks(&self, k: usize) -> Result<LandmarkSet> {
        let [[r0, c0], [r1, c1]] = self.rectangle;
        let c = self.ellipse_center(k);
        let [a1, a2] = self.semi_axes;
        let mid = self.frame_inset + 0.5 * self.frame_thickness;
        let (m, n) = (self.rows as f64, self.cols as f64);
        let (fr0, fr1, fc0, fc1) = (mid, m - mid, mid, n - mid);
        let positions = vec![
            [r0, c0],
            [r0, c1],
            [r1, c0],
            [r1, c1],
            c,
            [c[0] - a1, c[1]],
            [c[0] + a1, c[1]],
            [c[0], c[1] - a2],
            [c[0], c[1] + a2],
            [fr0, fc0],
            [fr0, fc1],
            [fr1, fc0],
            [fr1, fc1],
            [fr0, 0.5 * n],
            [fr1, 0.5 * n],
            [0.5 * m, fc0],
            [0.5 * m, fc1],
        ];
        LandmarkSet::new(positions)
    }
}

/// Frames and landmarks of the ellipse scene.
#[derive(Clone, Debug)]
pub struct EllipseSequence {
    pub images: Vec<Image>,
    pub landmarks: Vec<LandmarkSet>,
}

/// Renders every frame of the scene. Deterministic.
pub fn generate_ellipse_sequence(config: &EllipseSceneConfig) -> Result<EllipseSequence> {
    config.validate()?;
    let images = (0..config.frames)
        .into_par_iter()
        .map(|k| config.render(k))
        .collect::<Result<Vec<_>>>()?;
    let landmarks = (0..config.frames)
        .map(|k| config.landmarks(k))
        .collect::<Result<Vec<_>>>()?;
    Ok(EllipseSequence { images, landmarks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformationKind {
    Translation,
    Rotation,
    Scaling,
    Shearing,
}

impl DeformationKind {
    pub const ALL: [DeformationKind; 4] = [
        DeformationKind::Translation,
        DeformationKind::Rotation,
        DeformationKind::Scaling,
        DeformationKind::Shearing,
    ];
}

impl fmt::Display for DeformationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeformationKind::Translation => "translation",
            DeformationKind::Rotation => "rotation",
            DeformationKind::Scaling => "scaling",
            DeformationKind::Shearing => "shearing",
        })
    }
}

impl FromStr for DeformationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(DeformationKind::Translation),
            "rotation" => Ok(DeformationKind::Rotation),
            "scaling" => Ok(DeformationKind::Scaling),
            "shearing" | "shear" => Ok(DeformationKind::Shearing),
            other => Err(Error::invalid(format!(
                "unknown deformation kind {other:?} (expected translation, rotation, scaling or shearing)"
            ))),
        }
    }
}

/// Per-step magnitudes of the affine families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationSchedule {
    /// Translation per step in pixels, `(axis 1, axis 2)`.
    pub translation_step: [f64; 2],
    pub rotation_step_degrees: f64,
    /// Relative scale change per step.
    pub scaling_step: f64,
    /// Shear factor per step.
    pub shear_step: f64,
}

impl Default for DeformationSchedule {
    fn default() -> Self {
        DeformationSchedule {
            translation_step: [1.0, 0.0],
            rotation_step_degrees: 2.0,
            scaling_step: 0.02,
            shear_step: 0.02,
        }
    }
}

/// Default number of steps on each side of the identity.
pub const DEFAULT_STEPS: usize = 15;

/// Displacement of the affine map of step `j` about the domain center, sampled at cell
/// centers of a `rows x cols` grid with the given spacing: `u(x) = (A_j − I)(x − c) + t_j`.
pub fn prescribed_field(
    kind: DeformationKind,
    j: i64,
    rows: usize,
    cols: usize,
    spacing: Spacing,
    schedule: &DeformationSchedule,
) -> Result<DisplacementField> {
    let c = [0.5 * rows as f64 * spacing.h1, 0.5 * cols as f64 * spacing.h2];
    let jf = j as f64;
    let (a, t): ([[f64; 2]; 2], [f64; 2]) = match kind {
        DeformationKind::Translation => (
            [[1.0, 0.0], [0.0, 1.0]],
            [jf * schedule.translation_step[0], jf * schedule.translation_step[1]],
        ),
        DeformationKind::Rotation => {
            let phi = (jf * schedule.rotation_step_degrees).to_radians();
            ([[phi.cos(), -phi.sin()], [phi.sin(), phi.cos()]], [0.0, 0.0])
        }
        DeformationKind::Scaling => {
            let s = 1.0 + jf * schedule.scaling_step;
            ([[s, 0.0], [0.0, s]], [0.0, 0.0])
        }
        DeformationKind::Shearing => ([[1.0, jf * schedule.shear_step], [0.0, 1.0]], [0.0, 0.0]),
    };
    if j == 0 {
        return Ok(DisplacementField::zeros(rows, cols, spacing));
    }
    DisplacementField::from_fn(rows, cols, spacing, |x| {
        let d = [x[0] - c[0], x[1] - c[1]];
        [
            (a[0][0] - 1.0) * d[0] + a[0][1] * d[1] + t[0],
            a[1][0] * d[0] + (a[1][1] - 1.0) * d[1] + t[1],
        ]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandscapeMetric {
    Pcp,
    Drpca,
    Var,
    Pca2,
}

impl fmt::Display for LandscapeMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LandscapeMetric::Pcp => "pcp",
            LandscapeMetric::Drpca => "drpca",
            LandscapeMetric::Var => "var",
            LandscapeMetric::Pca2 => "pca2",
        })
    }
}

impl FromStr for LandscapeMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcp" => Ok(LandscapeMetric::Pcp),
            "drpca" | "delta-rpca" => Ok(LandscapeMetric::Drpca),
            "var" => Ok(LandscapeMetric::Var),
            "pca2" => Ok(LandscapeMetric::Pca2),
            other => Err(Error::invalid(format!(
                "unknown metric {other:?} (expected pcp, drpca, var or pca2)"
            ))),
        }
    }
}

/// One sample of an energy landscape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapeRow {
    pub step: i64,
    pub total: f64,
    /// `‖L‖_*` for PCP, `‖M − L‖₁` for δ-RPCA.
    pub term1: Option<f64>,
    /// `μ‖M − L‖₁` for PCP, `ν − ‖K L‖_*` for δ-RPCA.
    pub term2: Option<f64>,
}

/// Evaluates `metric` on `(T_1, T_2(u^j), …, T_N(u^j))` for `j = −k..=k`; the first image
/// stays fixed. Decomposition budgets are recomputed per sample: `ν = 0.9‖M − M̄‖_*` and
/// `μ = (mn)^{-1/2}`.
pub fn landscape(
    images: &[Image],
    metric: LandscapeMetric,
    kind: DeformationKind,
    k: usize,
    schedule: &DeformationSchedule,
    settings: &MetricSettings,
) -> Result<Vec<LandscapeRow>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image group"))?;
    let (rows, cols) = (first.rows(), first.cols());
    let k = k as i64;
    (-k..=k)
        .into_par_iter()
        .map(|j| {
            let field = prescribed_field(kind, j, rows, cols, first.spacing(), schedule)?;
            let mut group = Vec::with_capacity(images.len());
            group.push(first.clone());
            for im in &images[1..] {
                group.push(warp(im, &field)?);
            }
            let row = match metric {
                LandscapeMetric::Var => LandscapeRow {
                    step: j,
                    total: d_var(&group)?,
                    term1: None,
                    term2: None,
                },
                LandscapeMetric::Pca2 => LandscapeRow {
                    step: j,
                    total: d_pca2(&group)?,
                    term1: None,
                    term2: None,
                },
                LandscapeMetric::Pcp => {
                    let mu = 1.0 / ((rows * cols) as f64).sqrt();
                    let r = d_pcp(&group, mu, settings)?;
                    let nuc = nuclear_norm(&r.low_rank);
                    LandscapeRow {
                        step: j,
                        total: r.value,
                        term1: Some(nuc),
                        term2: Some(r.value - nuc),
                    }
                }
                LandscapeMetric::Drpca => {
                    let nu = 0.9 * centered_nuclear_norm(&group)?;
                    let r = d_delta_rpca(&group, nu, settings)?;
                    let used: f64 = r.centered_singular_values.iter().sum();
                    LandscapeRow {
                        step: j,
                        total: r.value,
                        term1: Some(r.value),
                        term2: Some(nu - used),
                    }
                }
            };
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e: Error| e.context(format!("{metric} landscape over {kind}")))
}

/// Casorati matrix of the scene, handy for tests and diagnostics.
pub fn scene_matrix(sequence: &EllipseSequence) -> Result<nalgebra::DMatrix<f64>> {
    casorati(&sequence.images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::landmark_accuracy;

    #[test]
    fn default_scene_is_valid() {
        let seq = generate_ellipse_sequence(&EllipseSceneConfig::default()).unwrap();
        assert_eq!(seq.images.len(), 10);
        assert_eq!(seq.landmarks.len(), 10);
        assert!(seq.landmarks.iter().all(|l| l.len() == LANDMARK_COUNT));
        assert!(seq.images.iter().all(|im| im.rows() == 200 && im.cols() == 200));
        EllipseSceneConfig::scaled(64, 64, 5).validate().unwrap();
    }

    #[test]
    fn stationary_landmarks_do_not_move() {
        let config = EllipseSceneConfig::scaled(64, 64, 5);
        let seq = generate_ellipse_sequence(&config).unwrap();
        let acc = landmark_accuracy(&seq.landmarks).unwrap();
        for i in stationary_landmarks() {
            assert_eq!(acc[i], 0.0);
        }
        for i in ELLIPSE_LANDMARKS {
            assert!(acc[i] > 1.0);
        }
    }

    #[test]
    fn ellipse_center_on_semicircle() {
        let config = EllipseSceneConfig::default();
        for k in 0..config.frames {
            let c = config.landmarks(k).unwrap().positions()[4];
            let r = ((c[0] - config.path_center[0]).powi(2) + (c[1] - config.path_center[1]).powi(2)).sqrt();
            assert!((r - config.path_radius).abs() < 1e-12);
            assert!(c[0] >= config.path_center[0] - 1e-12);
        }
    }

    #[test]
    fn frames_differ_only_inside_ellipse() {
        let config = EllipseSceneConfig::scaled(64, 64, 4);
        let seq = generate_ellipse_sequence(&config).unwrap();
        let (a, b) = (&seq.images[0], &seq.images[1]);
        let margin = 1.5;
        for i in 0..64 {
            for j in 0..64 {
                let x = [i as f64 + 0.5, j as f64 + 0.5];
                let near = (0..2).any(|k| {
                    let c = config.ellipse_center(k);
                    let d1 = (x[0] - c[0]).abs() / (config.semi_axes[0] + margin);
                    let d2 = (x[1] - c[1]).abs() / (config.semi_axes[1] + margin);
                    d1 * d1 + d2 * d2 <= 1.0
                });
                if !near {
                    assert_eq!(a.get(i, j).to_bits(), b.get(i, j).to_bits(), "pixel ({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = EllipseSceneConfig::scaled(32, 32, 3);
        let a = generate_ellipse_sequence(&config).unwrap();
        let b = generate_ellipse_sequence(&config).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let config = EllipseSceneConfig {
            path_radius: 90.0,
            ..Default::default()
        };
        assert!(generate_ellipse_sequence(&config).is_err());
        let config = EllipseSceneConfig {
            rectangle: [[10.0, 10.0], [5.0, 20.0]],
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn prescribed_field_examples() {
        let sched = DeformationSchedule::default();
        for kind in DeformationKind::ALL {
            let f = prescribed_field(kind, 0, 8, 8, Spacing::UNIT, &sched).unwrap();
            assert_eq!(f.max_abs(), 0.0);
        }
        let f = prescribed_field(DeformationKind::Translation, 1, 6, 5, Spacing::UNIT, &sched).unwrap();
        assert!(f.component(0).iter().all(|&v| v == 1.0));
        assert!(f.component(1).iter().all(|&v| v == 0.0));

        let f = prescribed_field(DeformationKind::Rotation, 3, 9, 9, Spacing::UNIT, &sched).unwrap();
        assert!(f.at(4, 4)[0].abs() < 1e-12 && f.at(4, 4)[1].abs() < 1e-12);
        let mag = |i: usize, j: usize| {
            let u = f.at(i, j);
            (u[0] * u[0] + u[1] * u[1]).sqrt()
        };
        let chord = 2.0 * (6.0f64.to_radians() / 2.0).sin();
        assert!((mag(4, 6) - 2.0 * chord).abs() < 1e-12);
        assert!((mag(4, 8) - 4.0 * chord).abs() < 1e-12);
    }

    #[test]
    fn translation_round_trip() {
        let config = EllipseSceneConfig::scaled(48, 48, 2);
        let seq = generate_ellipse_sequence(&config).unwrap();
        let sched = DeformationSchedule::default();
        let img = &seq.images[0];
        for j in [-3i64, 2, 5] {
            let fwd = prescribed_field(DeformationKind::Translation, j, 48, 48, Spacing::UNIT, &sched).unwrap();
            let back = prescribed_field(DeformationKind::Translation, -j, 48, 48, Spacing::UNIT, &sched).unwrap();
            let round = warp(&warp(img, &fwd).unwrap(), &back).unwrap();
            let band = 2 * j.unsigned_abs() as usize;
            for i in band..48 - band {
                for c in 0..48 {
                    assert!((round.get(i, c) - img.get(i, c)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn kinds_and_metrics_parse() {
        for kind in DeformationKind::ALL {
            assert_eq!(kind.to_string().parse::<DeformationKind>().unwrap(), kind);
        }
        assert!("twist".parse::<DeformationKind>().is_err());
        for m in [
            LandscapeMetric::Pcp,
            LandscapeMetric::Drpca,
            LandscapeMetric::Var,
            LandscapeMetric::Pca2,
        ] {
            assert_eq!(m.to_string().parse::<LandscapeMetric>().unwrap(), m);
        }
        assert!("mi".parse::<LandscapeMetric>().is_err());
    }

    #[test]
    fn var_landscape_of_identical_images() {
        let img = generate_ellipse_sequence(&EllipseSceneConfig::scaled(32, 32, 1))
            .unwrap()
            .images
            .remove(0);
        let group = vec![img; 3];
        let rows = landscape(
            &group,
            LandscapeMetric::Var,
            DeformationKind::Rotation,
            3,
            &DeformationSchedule::default(),
            &MetricSettings::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[3].step, 0);
        assert!(rows[3].total < 1e-20);
        assert!(rows.iter().all(|r| r.total.is_finite() && r.term1.is_none()));
    }
}
