//! Images, displacement fields and everything that moves values around a grid.
//!
//! Grids are cell-centered: pixel `(i, j)` (0-based, `i` along axis 1 / rows, `j` along
//! axis 2 / columns) has its center at `((i + 0.5) h1, (j + 0.5) h2)` in physical
//! coordinates, and the image domain is `[0, m h1] x [0, n h2]`. Image values are stored
//! row-major. Displacement fields are stored component-major: all axis-1 components
//! first, then all axis-2 components, each block row-major. Displacements are in
//! physical units and follow pull-back semantics: the warped image at `x` is `T(x + u(x))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid spacing `(h1, h2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub h1: f64,
    pub h2: f64,
}

impl Spacing {
    pub const UNIT: Spacing = Spacing { h1: 1.0, h2: 1.0 };

    pub fn uniform(h: f64) -> Self {
        Spacing { h1: h, h2: h }
    }

    /// Area of one cell, `h1 * h2`.
    pub fn cell_area(&self) -> f64 {
        self.h1 * self.h2
    }

    fn validate(&self) -> Result<()> {
        if !(self.h1 > 0.0 && self.h2 > 0.0 && self.h1.is_finite() && self.h2.is_finite()) {
            return Err(Error::invalid(format!("grid spacing must be positive, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::UNIT
    }
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows < 2 || cols < 2 {
        return Err(Error::invalid(format!("grid must be at least 2x2, got {rows}x{cols}")));
    }
    Ok(())
}

/// A scalar image on a cell-centered `rows x cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    rows: usize,
    cols: usize,
    spacing: Spacing,
    values: Vec<f64>,
}

impl Image {
    /// Builds an image from row-major values with unit spacing.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(rows, cols)?;
        if values.len() != rows * cols {
            return Err(Error::dims(format!(
                "image {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite image value at index {pos}")));
        }
        Ok(Image {
            rows,
            cols,
            spacing: Spacing::UNIT,
            values,
        })
    }

    /// Like [`Image::new`] but clamps intensities to `[0, 1]`; used for data entering the
    /// toolkit from files or generators.
    pub fn ingest(rows: usize, cols: usize, mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            if v.is_finite() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Image::new(rows, cols, values)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Image::new(rows, cols, values)
    }

    pub fn constant(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Image::new(rows, cols, vec![value; rows * cols])
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Column-major vectorization, the order used for Casorati columns.
    pub fn vectorize_column_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.values[i * self.cols + j]);
            }
        }
        out
    }

    pub fn same_grid(&self, rows: usize, cols: usize) -> bool {
        self.rows == rows && self.cols == cols
    }
}

/// A per-pixel 2-vector displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    rows: usize,
    cols: usize,
    spacing: Spacing,
    values: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(rows: usize, cols: usize, spacing: Spacing) -> Self {
        DisplacementField {
            rows,
            cols,
            spacing,
            values: vec![0.0; 2 * rows * cols],
        }
    }

    /// Builds a field from component-major values (axis-1 block, then axis-2 block).
    pub fn from_values(rows: usize, cols: usize, spacing: Spacing, values: Vec<f64>) -> Result<Self> {
        spacing.validate()?;
        if values.len() != 2 * rows * cols {
            return Err(Error::dims(format!(
                "field {rows}x{cols} needs {} values, got {}",
                2 * rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite displacement component"));
        }
        Ok(DisplacementField {
            rows,
            cols,
            spacing,
            values,
        })
    }

    /// Samples `f(x)` at every cell center, where `x` is the physical center coordinate.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        spacing: Spacing,
        mut f: impl FnMut([f64; 2]) -> [f64; 2],
    ) -> Result<Self> {
        let mn = rows * cols;
        let mut values = vec![0.0; 2 * mn];
        for i in 0..rows {
            for j in 0..cols {
                let u = f(cell_center(i, j, spacing));
                values[i * cols + j] = u[0];
                values[mn + i * cols + j] = u[1];
            }
        }
        DisplacementField::from_values(rows, cols, spacing, values)
    }

    pub fn constant(rows: usize, cols: usize, spacing: Spacing, t: [f64; 2]) -> Result<Self> {
        DisplacementField::from_fn(rows, cols, spacing, |_| t)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// All components, component-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Component `c` (0 = axis 1, 1 = axis 2), row-major.
    pub fn component(&self, c: usize) -> &[f64] {
        let mn = self.rows * self.cols;
        &self.values[c * mn..(c + 1) * mn]
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        let mn = self.rows * self.cols;
        let p = i * self.cols + j;
        [self.values[p], self.values[mn + p]]
    }

    /// Largest absolute component value.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Bilinear evaluation at a physical point; outside the hull of cell centers the
    /// nearest edge values are used.
    pub fn evaluate(&self, point: [f64; 2]) -> [f64; 2] {
        let s1 = (point[0] / self.spacing.h1 - 0.5).clamp(0.0, (self.rows - 1) as f64);
        let s2 = (point[1] / self.spacing.h2 - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let i0 = (s1.floor() as usize).min(self.rows - 2);
        let j0 = (s2.floor() as usize).min(self.cols - 2);
        let f1 = s1 - i0 as f64;
        let f2 = s2 - j0 as f64;
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let comp = self.component(c);
            let at = |i: usize, j: usize| comp[i * self.cols + j];
            *o = (1.0 - f1) * (1.0 - f2) * at(i0, j0)
                + f1 * (1.0 - f2) * at(i0 + 1, j0)
                + (1.0 - f1) * f2 * at(i0, j0 + 1)
                + f1 * f2 * at(i0 + 1, j0 + 1);
        }
        out
    }

    fn check_matches(&self, image: &Image) -> Result<()> {
        if self.rows != image.rows || self.cols != image.cols {
            return Err(Error::dims(format!(
                "field is {}x{} but image is {}x{}",
                self.rows, self.cols, image.rows, image.cols
            )));
        }
        Ok(())
    }
}

/// Physical center of pixel `(i, j)`.
pub fn cell_center(i: usize, j: usize, spacing: Spacing) -> [f64; 2] {
    [(i as f64 + 0.5) * spacing.h1, (j as f64 + 0.5) * spacing.h2]
}

/// Landmark positions for one frame, in physical (pixel-unit) coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    positions: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("landmark set must not be empty"));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite landmark position"));
        }
        Ok(LandmarkSet { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }
}

/// Value and index-space partial derivatives of the zero-extended bilinear interpolant
/// at continuous index `(s1, s2)`. Cell boundaries belong to the lower cell.
#[inline]
fn sample_zero_extended(values: &[f64], rows: usize, cols: usize, s1: f64, s2: f64) -> (f64, f64, f64) {
    if !(s1 > -1.0 && s1 < rows as f64 && s2 > -1.0 && s2 < cols as f64) {
        return (0.0, 0.0, 0.0);
    }
    let i0f = s1.floor();
    let j0f = s2.floor();
    let f1 = s1 - i0f;
    let f2 = s2 - j0f;
    let i0 = i0f as isize;
    let j0 = j0f as isize;
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= rows as isize || j >= cols as isize {
            0.0
        } else {
            values[i as usize * cols + j as usize]
        }
    };
    let v00 = at(i0, j0);
    let v10 = at(i0 + 1, j0);
    let v01 = at(i0, j0 + 1);
    let v11 = at(i0 + 1, j0 + 1);
    let value = (1.0 - f1) * (1.0 - f2) * v00 + f1 * (1.0 - f2) * v10 + (1.0 - f1) * f2 * v01 + f1 * f2 * v11;
    let d1 = (1.0 - f2) * (v10 - v00) + f2 * (v11 - v01);
    let d2 = (1.0 - f1) * (v01 - v00) + f1 * (v11 - v10);
    (value, d1, d2)
}

/// Warps `image` by `field` and returns the warped image together with the gradient of
/// the interpolant at the sample points (component-major, `2 * m * n` values, derivatives
/// with respect to physical displacement).
pub fn warp_with_gradient(image: &Image, field: &DisplacementField) -> Result<(Image, Vec<f64>)> {
    field.check_matches(image)?;
    let (rows, cols) = (image.rows, image.cols);
    let mn = rows * cols;
    let h = image.spacing;
    let mut warped = vec![0.0; mn];
    let mut grad = vec![0.0; 2 * mn];
    let u1 = field.component(0);
    let u2 = field.component(1);
    for i in 0..rows {
        for j in 0..cols {
            let p = i * cols + j;
            let s1 = i as f64 + u1[p] / h.h1;
            let s2 = j as f64 + u2[p] / h.h2;
            let (v, d1, d2) = sample_zero_extended(&image.values, rows, cols, s1, s2);
            warped[p] = v;
            grad[p] = d1 / h.h1;
            grad[mn + p] = d2 / h.h2;
        }
    }
    let out = Image {
        rows,
        cols,
        spacing: image.spacing,
        values: warped,
    };
    Ok((out, grad))
}

/// `T(x + u(x))` by bilinear interpolation; samples outside the zero-extended support
/// evaluate to 0.
pub fn warp(image: &Image, field: &DisplacementField) -> Result<Image> {
    warp_with_gradient(image, field).map(|(w, _)| w)
}

/// Gradient of the bilinear interpolant of `image` at the warped sample points,
/// component-major (`2 * m * n` values).
pub fn image_gradient(image: &Image, field: &DisplacementField) -> Result<Vec<f64>> {
    warp_with_gradient(image, field).map(|(_, g)| g)
}

/// 2x2 block means of a row-major `rows x cols` grid.
pub fn block_mean(values: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if !rows.is_multiple_of(2) || !cols.is_multiple_of(2) || rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("cannot halve a {rows}x{cols} grid")));
    }
    if values.len() != rows * cols {
        return Err(Error::dims(format!(
            "expected {} values, got {}",
            rows * cols,
            values.len()
        )));
    }
    let (r2, c2) = (rows / 2, cols / 2);
    let mut out = Vec::with_capacity(r2 * c2);
    for i in 0..r2 {
        for j in 0..c2 {
            let a = values[(2 * i) * cols + 2 * j];
            let b = values[(2 * i) * cols + 2 * j + 1];
            let c = values[(2 * i + 1) * cols + 2 * j];
            let d = values[(2 * i + 1) * cols + 2 * j + 1];
            out.push(0.25 * (a + b + c + d));
        }
    }
    Ok(out)
}

/// Halves the resolution by 2x2 block means and doubles the spacing.
pub fn downsample(image: &Image) -> Result<Image> {
    let values = block_mean(&image.values, image.rows, image.cols)?;
    Image::new(image.rows / 2, image.cols / 2, values)?.with_spacing(Spacing {
        h1: 2.0 * image.spacing.h1,
        h2: 2.0 * image.spacing.h2,
    })
}

/// Replicates every value of a row-major `rows x cols` grid into a 2x2 block of the
/// `2 rows x 2 cols` grid.
pub fn prolongate(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(values.len(), rows * cols);
    let c2 = 2 * cols;
    let mut out = vec![0.0; 4 * rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = values[i * cols + j];
            out[(2 * i) * c2 + 2 * j] = v;
            out[(2 * i) * c2 + 2 * j + 1] = v;
            out[(2 * i + 1) * c2 + 2 * j] = v;
            out[(2 * i + 1) * c2 + 2 * j + 1] = v;
        }
    }
    out
}

/// Prolongates a vector made of consecutive per-pixel blocks of length `rows * cols`.
pub fn prolongate_blocks(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mn = rows * cols;
    debug_assert_eq!(values.len() % mn, 0);
    values
        .chunks_exact(mn)
        .flat_map(|block| prolongate(block, rows, cols))
        .collect()
}

/// Prolongates a displacement field; values are physical displacements and are copied
/// unchanged, the spacing halves.
pub fn prolongate_field(field: &DisplacementField) -> DisplacementField {
    DisplacementField {
        rows: 2 * field.rows,
        cols: 2 * field.cols,
        spacing: Spacing {
            h1: field.spacing.h1 / 2.0,
            h2: field.spacing.h2 / 2.0,
        },
        values: prolongate_blocks(&field.values, field.rows, field.cols),
    }
}

/// Result of transporting landmarks through a pull-back field.
#[derive(Clone, Debug)]
pub struct LandmarkMapping {
    pub landmarks: LandmarkSet,
    /// Indices of landmarks whose fixed-point iteration did not converge.
    pub unconverged: Vec<usize>,
}

const LANDMARK_TOL: f64 = 1e-6;
const LANDMARK_MAX_ITER: usize = 50;

/// Finds, for every landmark `p`, the point `q` with `q + u(q) = p`: where the feature
/// at `p` in the input image appears in the warped image.
pub fn map_landmarks(landmarks: &LandmarkSet, field: &DisplacementField) -> Result<LandmarkMapping> {
    let extent = [
        field.rows as f64 * field.spacing.h1,
        field.cols as f64 * field.spacing.h2,
    ];
    let mut out = Vec::with_capacity(landmarks.len());
    let mut unconverged = Vec::new();
    for (idx, p) in landmarks.positions.iter().enumerate() {
        if p[0] < 0.0 || p[1] < 0.0 || p[0] > extent[0] || p[1] > extent[1] {
            return Err(Error::invalid(format!(
                "landmark {idx} at {p:?} lies outside the domain"
            )));
        }
        let mut q = *p;
        let mut converged = false;
        let mut escaped = false;
        for _ in 0..LANDMARK_MAX_ITER {
            let u = field.evaluate(q);
            let residual = ((q[0] + u[0] - p[0]).powi(2) + (q[1] + u[1] - p[1]).powi(2)).sqrt();
            if residual < LANDMARK_TOL {
                converged = true;
                break;
            }
            q = [p[0] - u[0], p[1] - u[1]];
            if q[0] < 0.0 || q[1] < 0.0 || q[0] > extent[0] || q[1] > extent[1] {
                escaped = true;
                break;
            }
        }
        if escaped {
            unconverged.push(idx);
        } else if !converged {
            let u = field.evaluate(q);
            let residual = ((q[0] + u[0] - p[0]).powi(2) + (q[1] + u[1] - p[1]).powi(2)).sqrt();
            if residual >= LANDMARK_TOL {
                unconverged.push(idx);
            }
        }
        out.push(q);
    }
    Ok(LandmarkMapping {
        landmarks: LandmarkSet { positions: out },
        unconverged,
    })
}
