//! Matrix-free linear operators of the linearized registration subproblem.
//!
//! The primal vector stacks `N` displacement fields (`2mn` values each, component-major)
//! followed by `N` low-rank columns (`mn` values each). The dual vector stacks the three
//! blocks of the composite operator: the linearized data residuals (`Nmn`), the
//! centered low-rank matrix (`Nmn`) and the finite differences of every field (`4Nmn`).

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, Spacing};
use crate::lowrank::power_iteration;

/// A linear map `ℝ^dim_in → ℝ^dim_out` given by its action and the action of its adjoint.
pub trait LinearOperator {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    /// `out = A x`; `out` has length `dim_out`.
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = Aᵀ y`; `out` has length `dim_in`.
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);

    /// Power-iteration estimate of the spectral norm.
    fn norm_estimate(&self, tol: f64, max_it: usize) -> f64
    where
        Self: Sized,
    {
        power_iteration(
            |x| {
                let mut out = vec![0.0; self.dim_out()];
                self.apply(x, &mut out);
                out
            },
            |y| {
                let mut out = vec![0.0; self.dim_in()];
                self.apply_adjoint(y, &mut out);
                out
            },
            self.dim_in(),
            tol,
            max_it,
        )
    }
}

/// Identity on `ℝ^dim`.
#[derive(Clone, Copy, Debug)]
pub struct IdentityOperator(pub usize);

impl LinearOperator for IdentityOperator {
    fn dim_in(&self) -> usize {
        self.0
    }
    fn dim_out(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

/// Forward differences with Neumann boundary (last difference is zero) applied to both
/// components of a displacement field.
///
/// Output layout per field: `[∂₁u₁, ∂₂u₁, ∂₁u₂, ∂₂u₂]`, each block `mn` long, so entries
/// `(p, p + mn, p + 2mn, p + 3mn)` form the gradient group of pixel `p`. Differences
/// are divided by the grid spacing of their axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvOperator {
    rows: usize,
    cols: usize,
    spacing: Spacing,
}

impl TvOperator {
    pub fn new(rows: usize, cols: usize, spacing: Spacing) -> Self {
        TvOperator { rows, cols, spacing }
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

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Differences of one scalar grid along axis 1 and axis 2, written to `d1`, `d2`.
    fn diff(&self, v: &[f64], d1: &mut [f64], d2: &mut [f64]) {
        let (m, n) = (self.rows, self.cols);
        let (s1, s2) = (1.0 / self.spacing.h1, 1.0 / self.spacing.h2);
        for i in 0..m {
            for j in 0..n {
                let p = i * n + j;
                d1[p] = if i + 1 < m { (v[p + n] - v[p]) * s1 } else { 0.0 };
                d2[p] = if j + 1 < n { (v[p + 1] - v[p]) * s2 } else { 0.0 };
            }
        }
    }

    /// `out = D1ᵀ d1 + D2ᵀ d2`.
    fn diff_adjoint(&self, d1: &[f64], d2: &[f64], out: &mut [f64]) {
        let (m, n) = (self.rows, self.cols);
        let (s1, s2) = (1.0 / self.spacing.h1, 1.0 / self.spacing.h2);
        for i in 0..m {
            for j in 0..n {
                let p = i * n + j;
                let mut a1 = 0.0;
                let mut a2 = 0.0;
                if i + 1 < m {
                    a1 -= d1[p];
                }
                if i > 0 {
                    a1 += d1[p - n];
                }
                if j + 1 < n {
                    a2 -= d2[p];
                }
                if j > 0 {
                    a2 += d2[p - 1];
                }
                out[p] = a1 * s1 + a2 * s2;
            }
        }
    }

    /// `G u` for one field given as a `2mn` slice; writes `4mn` values.
    pub fn apply_slice(&self, u: &[f64], out: &mut [f64]) {
        let mn = self.pixels();
        let (u1, u2) = u.split_at(mn);
        let (a, rest) = out.split_at_mut(mn);
        let (b, rest) = rest.split_at_mut(mn);
        let (c, d) = rest.split_at_mut(mn);
        self.diff(u1, a, b);
        self.diff(u2, c, d);
    }

    /// `Gᵀ w` for one `4mn` slice; writes `2mn` values.
    pub fn adjoint_slice(&self, w: &[f64], out: &mut [f64]) {
        let mn = self.pixels();
        let (o1, o2) = out.split_at_mut(mn);
        self.diff_adjoint(&w[..mn], &w[mn..2 * mn], o1);
        self.diff_adjoint(&w[2 * mn..3 * mn], &w[3 * mn..], o2);
    }

    /// `G vec(u)`.
    pub fn apply_g(&self, field: &DisplacementField) -> Result<Vec<f64>> {
        if field.rows() != self.rows || field.cols() != self.cols {
            return Err(Error::dims(format!(
                "TV operator is {}x{}, field is {}x{}",
                self.rows,
                self.cols,
                field.rows(),
                field.cols()
            )));
        }
        let mut out = vec![0.0; 4 * self.pixels()];
        self.apply_slice(field.values(), &mut out);
        Ok(out)
    }

    /// `Σ_p ‖(v_p, v_{p+mn}, v_{p+2mn}, v_{p+3mn})‖₂` of a `4mn` slice.
    pub fn group_norm(&self, v: &[f64]) -> f64 {
        let mn = self.pixels();
        (0..mn)
            .map(|p| (v[p].powi(2) + v[p + mn].powi(2) + v[p + 2 * mn].powi(2) + v[p + 3 * mn].powi(2)).sqrt())
            .sum()
    }
}

impl LinearOperator for TvOperator {
    fn dim_in(&self) -> usize {
        2 * self.pixels()
    }
    fn dim_out(&self) -> usize {
        4 * self.pixels()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_slice(x, out);
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.adjoint_slice(y, out);
    }
}

/// `K = (I_N − 1_{N×N}/N) ⊗ I_mn`: subtracts the mean column from every column of an
/// `mn x N` matrix stored column after column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenteringOperator {
    images: usize,
    pixels: usize,
}

impl CenteringOperator {
    pub fn new(images: usize, pixels: usize) -> Self {
        CenteringOperator { images, pixels }
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    /// `K L` for `L` given as `N` stacked columns.
    pub fn apply_k(&self, l: &[f64]) -> Result<Vec<f64>> {
        if l.len() != self.images * self.pixels {
            return Err(Error::dims(format!(
                "centering expects {} values, got {}",
                self.images * self.pixels,
                l.len()
            )));
        }
        let mut out = vec![0.0; l.len()];
        self.apply(l, &mut out);
        Ok(out)
    }
}

impl LinearOperator for CenteringOperator {
    fn dim_in(&self) -> usize {
        self.images * self.pixels
    }
    fn dim_out(&self) -> usize {
        self.images * self.pixels
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (n, mn) = (self.images, self.pixels);
        let inv = 1.0 / n as f64;
        for p in 0..mn {
            let mean = (0..n).map(|k| x[k * mn + p]).sum::<f64>() * inv;
            for k in 0..n {
                out[k * mn + p] = x[k * mn + p] - mean;
            }
        }
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.apply(y, out);
    }
}

/// Sizes shared by primal and dual states of the registration subproblem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub images: usize,
    pub rows: usize,
    pub cols: usize,
}

impl StateLayout {
    pub fn new(images: usize, rows: usize, cols: usize) -> Self {
        StateLayout { images, rows, cols }
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// `3 N m n`.
    pub fn primal_len(&self) -> usize {
        3 * self.images * self.pixels()
    }

    /// `6 N m n`.
    pub fn dual_len(&self) -> usize {
        6 * self.images * self.pixels()
    }

    /// Offset of the low-rank block in the primal vector.
    pub fn low_rank_offset(&self) -> usize {
        2 * self.images * self.pixels()
    }

    /// Layout at twice the resolution.
    pub fn refined(&self) -> Self {
        StateLayout::new(self.images, 2 * self.rows, 2 * self.cols)
    }
}

/// Primal variables `x = (u¹, …, u^N, l₁, …, l_N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalState {
    layout: StateLayout,
    data: Vec<f64>,
}

impl PrimalState {
    pub fn zeros(layout: StateLayout) -> Self {
        PrimalState {
            layout,
            data: vec![0.0; layout.primal_len()],
        }
    }

    pub fn from_vec(layout: StateLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.primal_len() {
            return Err(Error::dims(format!(
                "primal state needs {} values, got {}",
                layout.primal_len(),
                data.len()
            )));
        }
        Ok(PrimalState { layout, data })
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// All displacement fields, `2Nmn` values.
    pub fn fields(&self) -> &[f64] {
        &self.data[..self.layout.low_rank_offset()]
    }

    pub fn fields_mut(&mut self) -> &mut [f64] {
        let off = self.layout.low_rank_offset();
        &mut self.data[..off]
    }

    /// Field of image `k`, component-major.
    pub fn field(&self, k: usize) -> &[f64] {
        let s = 2 * self.layout.pixels();
        &self.data[k * s..(k + 1) * s]
    }

    pub fn field_mut(&mut self, k: usize) -> &mut [f64] {
        let s = 2 * self.layout.pixels();
        &mut self.data[k * s..(k + 1) * s]
    }

    /// All low-rank columns, `Nmn` values.
    pub fn low_rank(&self) -> &[f64] {
        &self.data[self.layout.low_rank_offset()..]
    }

    pub fn low_rank_mut(&mut self) -> &mut [f64] {
        let off = self.layout.low_rank_offset();
        &mut self.data[off..]
    }

    pub fn low_rank_column(&self, k: usize) -> &[f64] {
        let mn = self.layout.pixels();
        &self.low_rank()[k * mn..(k + 1) * mn]
    }

    pub fn displacement_field(&self, k: usize, spacing: Spacing) -> Result<DisplacementField> {
        DisplacementField::from_values(self.layout.rows, self.layout.cols, spacing, self.field(k).to_vec())
    }
}

/// Dual variables `y = (y¹, y², y³)` matching the three blocks of the composite operator.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    layout: StateLayout,
    data: Vec<f64>,
}

impl DualState {
    pub fn zeros(layout: StateLayout) -> Self {
        DualState {
            layout,
            data: vec![0.0; layout.dual_len()],
        }
    }

    pub fn from_vec(layout: StateLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.dual_len() {
            return Err(Error::dims(format!(
                "dual state needs {} values, got {}",
                layout.dual_len(),
                data.len()
            )));
        }
        Ok(DualState { layout, data })
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Data block, `Nmn`.
    pub fn data_block(&self) -> &[f64] {
        &self.data[..self.layout.images * self.layout.pixels()]
    }

    /// Centering block, `Nmn`.
    pub fn centering_block(&self) -> &[f64] {
        let s = self.layout.images * self.layout.pixels();
        &self.data[s..2 * s]
    }

    /// Finite-difference block, `4Nmn`.
    pub fn tv_block(&self) -> &[f64] {
        let s = self.layout.images * self.layout.pixels();
        &self.data[2 * s..]
    }
}

/// The block operator
///
/// ```text
///     [ diag(∇T_k(ũ^k)ᵀ)   −I ]
/// A = [ 0                   K  ]
///     [ diag(G)             0  ]
/// ```
///
/// with per-image linearization gradients `∇T_k(ũ^k)`.
#[derive(Clone, Debug)]
pub struct CompositeOperator {
    layout: StateLayout,
    gradients: Vec<f64>,
    tv: TvOperator,
    centering: CenteringOperator,
}

impl CompositeOperator {
    /// `gradients` holds `N` blocks of `2mn` values (component-major per image).
    pub fn new(layout: StateLayout, spacing: Spacing, gradients: Vec<f64>) -> Result<Self> {
        let expected = 2 * layout.images * layout.pixels();
        if gradients.len() != expected {
            return Err(Error::dims(format!(
                "composite operator needs {expected} gradient values, got {}",
                gradients.len()
            )));
        }
        Ok(CompositeOperator {
            layout,
            gradients,
            tv: TvOperator::new(layout.rows, layout.cols, spacing),
            centering: CenteringOperator::new(layout.images, layout.pixels()),
        })
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn tv(&self) -> &TvOperator {
        &self.tv
    }

    pub fn centering(&self) -> &CenteringOperator {
        &self.centering
    }

    pub fn gradients(&self) -> &[f64] {
        &self.gradients
    }

    pub fn apply_a(&self, x: &PrimalState) -> Result<DualState> {
        if x.layout != self.layout {
            return Err(Error::dims(format!(
                "primal layout {:?} vs operator {:?}",
                x.layout, self.layout
            )));
        }
        let mut y = DualState::zeros(self.layout);
        self.apply(&x.data, &mut y.data);
        Ok(y)
    }

    pub fn apply_a_adjoint(&self, y: &DualState) -> Result<PrimalState> {
        if y.layout != self.layout {
            return Err(Error::dims(format!(
                "dual layout {:?} vs operator {:?}",
                y.layout, self.layout
            )));
        }
        let mut x = PrimalState::zeros(self.layout);
        self.apply_adjoint(&y.data, &mut x.data);
        Ok(x)
    }
}

impl LinearOperator for CompositeOperator {
    fn dim_in(&self) -> usize {
        self.layout.primal_len()
    }

    fn dim_out(&self) -> usize {
        self.layout.dual_len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.layout.images;
        let mn = self.layout.pixels();
        let (fields, lows) = x.split_at(2 * n * mn);
        let (y1, rest) = out.split_at_mut(n * mn);
        let (y2, y3) = rest.split_at_mut(n * mn);
        for k in 0..n {
            let u = &fields[2 * k * mn..2 * (k + 1) * mn];
            let g = &self.gradients[2 * k * mn..2 * (k + 1) * mn];
            let l = &lows[k * mn..(k + 1) * mn];
            let y1k = &mut y1[k * mn..(k + 1) * mn];
            for p in 0..mn {
                y1k[p] = g[p] * u[p] + g[mn + p] * u[mn + p] - l[p];
            }
            self.tv.apply_slice(u, &mut y3[4 * k * mn..4 * (k + 1) * mn]);
        }
        self.centering.apply(lows, y2);
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        let n = self.layout.images;
        let mn = self.layout.pixels();
        let (y1, rest) = y.split_at(n * mn);
        let (y2, y3) = rest.split_at(n * mn);
        let (fields, lows) = out.split_at_mut(2 * n * mn);
        for k in 0..n {
            let u = &mut fields[2 * k * mn..2 * (k + 1) * mn];
            self.tv.adjoint_slice(&y3[4 * k * mn..4 * (k + 1) * mn], u);
            let g = &self.gradients[2 * k * mn..2 * (k + 1) * mn];
            let y1k = &y1[k * mn..(k + 1) * mn];
            for p in 0..mn {
                u[p] += g[p] * y1k[p];
                u[mn + p] += g[mn + p] * y1k[p];
            }
        }
        self.centering.apply(y2, lows);
        for (l, v) in lows.iter_mut().zip(y1) {
            *l -= v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Dense matrix of any operator, column by column.
    fn dense(op: &impl LinearOperator) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(op.dim_out(), op.dim_in());
        let mut e = vec![0.0; op.dim_in()];
        let mut col = vec![0.0; op.dim_out()];
        for j in 0..op.dim_in() {
            e[j] = 1.0;
            op.apply(&e, &mut col);
            m.set_column(j, &DVector::from_column_slice(&col));
            e[j] = 0.0;
        }
        m
    }

    /// Dense assembly of the block operator straight from its definition, independent of
    /// the matrix-free code paths.
    fn assemble(layout: StateLayout, spacing: Spacing, grads: &[f64]) -> DMatrix<f64> {
        let (n, m, c) = (layout.images, layout.rows, layout.cols);
        let mn = m * c;
        let mut a = DMatrix::zeros(6 * n * mn, 3 * n * mn);
        // Forward difference matrices with Neumann boundary.
        let mut d1 = DMatrix::zeros(mn, mn);
        let mut d2 = DMatrix::zeros(mn, mn);
        for i in 0..m {
            for j in 0..c {
                let p = i * c + j;
                if i + 1 < m {
                    d1[(p, p)] = -1.0 / spacing.h1;
                    d1[(p, p + c)] = 1.0 / spacing.h1;
                }
                if j + 1 < c {
                    d2[(p, p)] = -1.0 / spacing.h2;
                    d2[(p, p + 1)] = 1.0 / spacing.h2;
                }
            }
        }
        for k in 0..n {
            for p in 0..mn {
                a[(k * mn + p, 2 * k * mn + p)] = grads[2 * k * mn + p];
                a[(k * mn + p, 2 * k * mn + mn + p)] = grads[2 * k * mn + mn + p];
                a[(k * mn + p, 2 * n * mn + k * mn + p)] = -1.0;
            }
            for kk in 0..n {
                let w = if k == kk { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
                for p in 0..mn {
                    a[(n * mn + k * mn + p, 2 * n * mn + kk * mn + p)] = w;
                }
            }
            let r0 = 2 * n * mn + 4 * k * mn;
            let c0 = 2 * k * mn;
            a.view_mut((r0, c0), (mn, mn)).copy_from(&d1);
            a.view_mut((r0 + mn, c0), (mn, mn)).copy_from(&d2);
            a.view_mut((r0 + 2 * mn, c0 + mn), (mn, mn)).copy_from(&d1);
            a.view_mut((r0 + 3 * mn, c0 + mn), (mn, mn)).copy_from(&d2);
        }
        a
    }

    #[test]
    fn g_annihilates_constants() {
        let tv = TvOperator::new(5, 4, Spacing::UNIT);
        let f = DisplacementField::constant(5, 4, Spacing::UNIT, [1.5, -2.0]).unwrap();
        assert!(tv.apply_g(&f).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn g_of_linear_ramp() {
        let h = Spacing::uniform(2.0);
        let (m, n) = (4, 3);
        let tv = TvOperator::new(m, n, h);
        let f = DisplacementField::from_fn(m, n, h, |x| [x[0], 0.0]).unwrap();
        let out = tv.apply_g(&f).unwrap();
        let mn = m * n;
        for i in 0..m {
            for j in 0..n {
                let expect = if i + 1 < m { 1.0 } else { 0.0 };
                assert!((out[i * n + j] - expect).abs() < 1e-12);
            }
        }
        assert!(out[mn..].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn g_single_pixel_footprint() {
        let (m, n) = (5, 5);
        let tv = TvOperator::new(m, n, Spacing::UNIT);
        let mut u = vec![0.0; 2 * m * n];
        u[2 * n + 2] = 1.0; // component 1 at (2, 2)
        let mut out = vec![0.0; 4 * m * n];
        tv.apply_slice(&u, &mut out);
        let nonzero: Vec<usize> = (0..out.len()).filter(|&i| out[i] != 0.0).collect();
        // ∂₁ at (1,2) and (2,2); ∂₂ at (2,1) and (2,2).
        let mn = m * n;
        assert_eq!(nonzero, vec![n + 2, 2 * n + 2, mn + 2 * n + 1, mn + 2 * n + 2]);
    }

    #[test]
    fn centering_examples() {
        let k = CenteringOperator::new(3, 4);
        let same: Vec<f64> = [1.0, 2.0, 3.0, 4.0].repeat(3);
        assert!(k.apply_k(&same).unwrap().iter().all(|v| v.abs() < 1e-15));

        let k2 = CenteringOperator::new(2, 2);
        let out = k2.apply_k(&[1.0, 4.0, 3.0, 0.0]).unwrap();
        assert_eq!(out, vec![-1.0, 2.0, 1.0, -2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_vec(&mut rng, 12);
        let once = k.apply_k(&l).unwrap();
        let twice = k.apply_k(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(dot(&once, &once) <= dot(&l, &l));
        assert!(k.apply_k(&l[..5]).is_err());
    }

    #[test]
    fn composite_zero_and_block_structure() {
        let layout = StateLayout::new(2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = CompositeOperator::new(layout, Spacing::UNIT, random_vec(&mut rng, 2 * 2 * 12)).unwrap();
        let y = op.apply_a(&PrimalState::zeros(layout)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));

        let flat = CompositeOperator::new(layout, Spacing::UNIT, vec![0.0; 48]).unwrap();
        let mut x = PrimalState::zeros(layout);
        let fields = random_vec(&mut rng, 48);
        x.fields_mut().copy_from_slice(&fields);
        let y = flat.apply_a(&x).unwrap();
        assert!(y.data_block().iter().all(|&v| v == 0.0));
        assert!(y.centering_block().iter().all(|&v| v == 0.0));
        for k in 0..2 {
            let mut g = vec![0.0; 48];
            flat.tv().apply_slice(x.field(k), &mut g);
            assert_eq!(&y.tv_block()[48 * k..48 * (k + 1)], &g[..]);
        }
    }

    #[test]
    fn composite_matches_dense_assembly() {
        let layout = StateLayout::new(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grads = random_vec(&mut rng, 2 * 2 * 9);
        let spacing = Spacing { h1: 2.0, h2: 0.5 };
        let op = CompositeOperator::new(layout, spacing, grads.clone()).unwrap();
        let a = assemble(layout, spacing, &grads);
        assert!((dense(&op) - &a).amax() < 1e-12);

        let x = random_vec(&mut rng, layout.primal_len());
        let y = random_vec(&mut rng, layout.dual_len());
        let ax = op.apply_a(&PrimalState::from_vec(layout, x.clone()).unwrap()).unwrap();
        let ax_dense = &a * DVector::from_vec(x);
        for (p, q) in ax.as_slice().iter().zip(ax_dense.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        let aty = op
            .apply_a_adjoint(&DualState::from_vec(layout, y.clone()).unwrap())
            .unwrap();
        let aty_dense = a.transpose() * DVector::from_vec(y);
        for (p, q) in aty.as_slice().iter().zip(aty_dense.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_adjoint_identity() {
        let layout = StateLayout::new(3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = CompositeOperator::new(layout, Spacing::UNIT, random_vec(&mut rng, 2 * 3 * 20)).unwrap();
        for _ in 0..100 {
            let x = random_vec(&mut rng, layout.primal_len());
            let y = random_vec(&mut rng, layout.dual_len());
            let mut ax = vec![0.0; layout.dual_len()];
            let mut aty = vec![0.0; layout.primal_len()];
            op.apply(&x, &mut ax);
            op.apply_adjoint(&y, &mut aty);
            let (l, r) = (dot(&ax, &y), dot(&x, &aty));
            assert!((l - r).abs() <= 1e-8 * l.abs().max(r.abs()).max(1.0));
        }
    }

    #[test]
    fn composite_norm_estimate_matches_dense() {
        let layout = StateLayout::new(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grads = random_vec(&mut rng, 36);
        let op = CompositeOperator::new(layout, Spacing::UNIT, grads.clone()).unwrap();
        let exact = crate::lowrank::singular_values(&assemble(layout, Spacing::UNIT, &grads)).unwrap()[0];
        let est = op.norm_estimate(1e-12, 100_000);
        assert!((est - exact).abs() < 1e-4 * exact, "{est} vs {exact}");
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let op = CompositeOperator::new(StateLayout::new(2, 3, 3), Spacing::UNIT, vec![0.0; 36]).unwrap();
        assert!(op.apply_a(&PrimalState::zeros(StateLayout::new(2, 3, 4))).is_err());
        assert!(op
            .apply_a_adjoint(&DualState::zeros(StateLayout::new(3, 3, 3)))
            .is_err());
        assert!(CompositeOperator::new(StateLayout::new(2, 3, 3), Spacing::UNIT, vec![0.0; 35]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn g_is_translation_invariant(seed in any::<u64>(), t1 in -5.0f64..5.0, t2 in -5.0f64..5.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tv = TvOperator::new(4, 6, Spacing::UNIT);
                let u = random_vec(&mut rng, 48);
                let mut shifted = u.clone();
                shifted[..24].iter_mut().for_each(|v| *v += t1);
                shifted[24..].iter_mut().for_each(|v| *v += t2);
                let (mut a, mut b) = (vec![0.0; 96], vec![0.0; 96]);
                tv.apply_slice(&u, &mut a);
                tv.apply_slice(&shifted, &mut b);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn centering_is_contractive(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = CenteringOperator::new(4, 7);
                let l = random_vec(&mut rng, 28);
                let kl = k.apply_k(&l).unwrap();
                prop_assert!(dot(&kl, &kl) <= dot(&l, &l) + 1e-12);
            }
        }
    }
}
