//! Proximal maps of the linearized registration subproblem
//!
//! ```text
//! min_{u,l}  h₁h₂ ‖∇Tᵀu − l + b‖₁ + δ{‖K l‖_* ≤ ν} + μ h₁h₂ Σ_k ‖G u^k‖₂,₁ + H(u)
//! ```
//!
//! in the conjugate form used by the primal-dual iteration. `H` encodes the uniqueness
//! constraint on the displacements: either their global mean is zero, or one reference
//! field is pinned to zero.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lowrank::{project_l1_ball, svd};
use crate::operators::StateLayout;
use crate::solver::ProxBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConstraintMode {
    /// `Σ_k Σ_p u^k_p = 0` for each displacement component.
    #[default]
    MeanZero,
    /// `u^ref = 0` for the given image index.
    FixedReference(usize),
}

/// Data shared by the proximal maps of one subproblem.
#[derive(Clone, Debug)]
pub struct ProxContext {
    pub layout: StateLayout,
    /// `b_k = T_k(ũ^k) − ∇T_k(ũ^k)ᵀ ũ^k`, `Nmn` values.
    pub offset: Vec<f64>,
    /// `h₁h₂`.
    pub l1_weight: f64,
    /// `μ h₁h₂`.
    pub tv_radius: f64,
    /// Nuclear-norm budget `ν`.
    pub nu: f64,
    pub mode: ConstraintMode,
}

impl ProxContext {
    pub fn new(
        layout: StateLayout,
        offset: Vec<f64>,
        l1_weight: f64,
        tv_radius: f64,
        nu: f64,
        mode: ConstraintMode,
    ) -> Result<Self> {
        let len = layout.images * layout.pixels();
        if offset.len() != len {
            return Err(Error::dims(format!("offset needs {len} values, got {}", offset.len())));
        }
        if !(l1_weight > 0.0) || !(tv_radius > 0.0) {
            return Err(Error::invalid(format!(
                "weights must be positive (l1 {l1_weight}, tv {tv_radius})"
            )));
        }
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(Error::invalid(format!("nu must be nonnegative, got {nu}")));
        }
        if let ConstraintMode::FixedReference(r) = mode {
            if r >= layout.images {
                return Err(Error::invalid(format!(
                    "reference index {r} out of range for {} images",
                    layout.images
                )));
            }
        }
        Ok(ProxContext {
            layout,
            offset,
            l1_weight,
            tv_radius,
            nu,
            mode,
        })
    }
}

/// Conjugate prox of `z ↦ w‖z + b‖₁`: clamp `y + ηb` to `[−w, w]`.
pub fn prox_f1_star(y1: &mut [f64], offset: &[f64], weight: f64, eta: f64) {
    for (v, b) in y1.iter_mut().zip(offset) {
        *v = (*v + eta * b).clamp(-weight, weight);
    }
}

/// Conjugate prox of the indicator of `{‖Z‖_* ≤ ν}`, i.e. `Y − Π_{‖·‖_* ≤ ην}(Y)`,
/// applied to `y2` read as an `mn x N` matrix stored column after column.
pub fn prox_f2_star(y2: &mut [f64], pixels: usize, nu: f64, eta: f64) -> Result<()> {
    if pixels == 0 || !y2.len().is_multiple_of(pixels) {
        return Err(Error::dims(format!(
            "{} values do not form columns of {pixels}",
            y2.len()
        )));
    }
    if nu == 0.0 {
        // The conjugate of the indicator of {0} is zero, its prox is the identity.
        return Ok(());
    }
    let mat = DMatrix::from_column_slice(pixels, y2.len() / pixels, y2);
    let triple = svd(&mat)?;
    let sigma: Vec<f64> = triple.singular_values.iter().copied().collect();
    let radius = eta * nu;
    if sigma.iter().sum::<f64>() <= radius {
        y2.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let projected = project_l1_ball(&sigma, radius)?;
    let kept: Vec<f64> = sigma.iter().zip(&projected).map(|(s, p)| s - p).collect();
    y2.copy_from_slice(triple.recompose_with(&kept).as_slice());
    Ok(())
}

/// Conjugate prox of `μh₁h₂ ‖·‖₂,₁`: projects every gradient group onto the ball of
/// radius `μh₁h₂`. Independent of the step size.
pub fn prox_f3_star(y3: &mut [f64], pixels: usize, radius: f64) {
    let block = 4 * pixels;
    for chunk in y3.chunks_exact_mut(block) {
        for p in 0..pixels {
            let idx = [p, p + pixels, p + 2 * pixels, p + 3 * pixels];
            let norm = idx.iter().map(|&i| chunk[i] * chunk[i]).sum::<f64>().sqrt();
            if norm > radius {
                let scale = radius / norm;
                idx.iter().for_each(|&i| chunk[i] *= scale);
            }
        }
    }
}

/// Prox of the uniqueness constraint on the field block of a primal vector; the
/// low-rank block is left untouched.
pub fn prox_h(x: &mut [f64], layout: StateLayout, mode: ConstraintMode) {
    let mn = layout.pixels();
    let fields = &mut x[..layout.low_rank_offset()];
    match mode {
        ConstraintMode::MeanZero => {
            let count = (layout.images * mn) as f64;
            for c in 0..2 {
                let mean = fields
                    .chunks_exact(2 * mn)
                    .map(|u| u[c * mn..(c + 1) * mn].iter().sum::<f64>())
                    .sum::<f64>()
                    / count;
                for u in fields.chunks_exact_mut(2 * mn) {
                    u[c * mn..(c + 1) * mn].iter_mut().for_each(|v| *v -= mean);
                }
            }
        }
        ConstraintMode::FixedReference(r) => {
            fields[2 * r * mn..2 * (r + 1) * mn].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl ProxBundle for ProxContext {
    fn prox_dual(&self, y: &mut [f64], eta: f64) -> Result<()> {
        let len = self.layout.images * self.layout.pixels();
        let pixels = self.layout.pixels();
        let (y1, rest) = y.split_at_mut(len);
        let (y2, y3) = rest.split_at_mut(len);
        let (_, svd_result) = rayon::join(
            || {
                prox_f1_star(y1, &self.offset, self.l1_weight, eta);
                prox_f3_star(y3, pixels, self.tv_radius);
            },
            || prox_f2_star(y2, pixels, self.nu, eta),
        );
        svd_result
    }

    fn prox_primal(&self, x: &mut [f64], _tau: f64) -> Result<()> {
        prox_h(x, self.layout, self.mode);
        Ok(())
    }

    /// Data term plus TV term (the nuclear-norm constraint is not included).
    fn energy(&self, _x: &[f64], ax: &[f64]) -> f64 {
        let len = self.layout.images * self.layout.pixels();
        let pixels = self.layout.pixels();
        let data: f64 = ax[..len].iter().zip(&self.offset).map(|(a, b)| (a + b).abs()).sum();
        let tv: f64 = ax[2 * len..]
            .chunks_exact(4 * pixels)
            .map(|g| {
                (0..pixels)
                    .map(|p| {
                        (g[p].powi(2) + g[p + pixels].powi(2) + g[p + 2 * pixels].powi(2) + g[p + 3 * pixels].powi(2))
                            .sqrt()
                    })
                    .sum::<f64>()
            })
            .sum();
        self.l1_weight * data + self.tv_radius * tv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{nuclear_norm, project_nuclear_ball};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn soft(v: f64, t: f64) -> f64 {
        v.signum() * (v.abs() - t).max(0.0)
    }

    #[test]
    fn f1_examples() {
        let mut y = vec![0.0; 4];
        prox_f1_star(&mut y, &[0.0; 4], 1.0, 1.0);
        assert_eq!(y, vec![0.0; 4]);

        let mut y = vec![2.0, -0.5];
        prox_f1_star(&mut y, &[0.0, 0.0], 1.0, 1.0);
        assert_eq!(y, vec![1.0, -0.5]);
    }

    #[test]
    fn f1_moreau_identity() {
        // F(z) = w‖z + b‖₁ has prox_{F/η}(v) = soft(v + b, w/η) − b.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let w = rng.random_range(0.1..2.0);
            let eta = rng.random_range(0.05..5.0);
            let y = random_vec(&mut rng, 20, 4.0);
            let b = random_vec(&mut rng, 20, 2.0);
            let mut p = y.clone();
            prox_f1_star(&mut p, &b, w, eta);
            for i in 0..y.len() {
                assert!(p[i].abs() <= w);
                let v = y[i] / eta;
                let primal = soft(v + b[i], w / eta) - b[i];
                assert!((y[i] - (p[i] + eta * primal)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn f2_examples() {
        let mut zero = vec![0.0; 12];
        prox_f2_star(&mut zero, 4, 1.0, 0.5).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        // Rank one with σ₁ = 1.5 ≤ ην = 2 is absorbed entirely.
        let a = [0.6, 0.8, 0.0];
        let b = [1.0, 0.0];
        let mut y: Vec<f64> = (0..2).flat_map(|k| a.iter().map(move |ai| 1.5 * ai * b[k])).collect();
        prox_f2_star(&mut y, 3, 2.0, 1.0).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));

        // ν = 0 is the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let orig = random_vec(&mut rng, 18, 1.0);
        let mut same = orig.clone();
        prox_f2_star(&mut same, 6, 0.0, 0.7).unwrap();
        assert_eq!(same, orig);
        assert!(prox_f2_star(&mut same, 5, 1.0, 1.0).is_err());
    }

    #[test]
    fn f2_matches_moreau_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let eta = rng.random_range(0.1..3.0);
            let nu = rng.random_range(0.01..2.0);
            let y = random_vec(&mut rng, 18, 2.0);
            let mut p = y.clone();
            prox_f2_star(&mut p, 6, nu, eta).unwrap();
            let scaled = DMatrix::from_column_slice(6, 3, &y) / eta;
            let proj = project_nuclear_ball(&scaled, nu).unwrap();
            let expect = DMatrix::from_column_slice(6, 3, &y) - proj * eta;
            assert!(dist(&p, expect.as_slice()) < 1e-8);
            let complement = DMatrix::from_column_slice(6, 3, &y) - DMatrix::from_column_slice(6, 3, &p);
            assert!(nuclear_norm(&complement) / eta <= nu + 1e-8);
        }
    }

    #[test]
    fn f2_is_unitarily_invariant() {
        // Two matrices with repeated singular values related by orthogonal transforms
        // must map to correspondingly transformed outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let base = DMatrix::from_fn(5, 3, |i, j| if i == j { [2.0, 2.0, 0.5][i] } else { 0.0 });
        let q = crate::lowrank::svd(&DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap()
            .u;
        let r = crate::lowrank::svd(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap()
            .u;
        let rotated = &q * &base * r.transpose();
        let mut p_base = base.as_slice().to_vec();
        let mut p_rot = rotated.as_slice().to_vec();
        prox_f2_star(&mut p_base, 5, 1.3, 0.9).unwrap();
        prox_f2_star(&mut p_rot, 5, 1.3, 0.9).unwrap();
        let back = &q * DMatrix::from_column_slice(5, 3, &p_base) * r.transpose();
        assert!(dist(back.as_slice(), &p_rot) < 1e-9);
    }

    #[test]
    fn f3_examples() {
        let mut inside = vec![0.1, 0.2, 0.0, 0.0, -0.1, 0.3, 0.2, 0.1];
        let orig = inside.clone();
        prox_f3_star(&mut inside, 2, 1.0);
        assert_eq!(inside, orig);

        let mut single = vec![3.0, 0.0, 0.0, 0.0];
        prox_f3_star(&mut single, 1, 1.0);
        assert_eq!(single, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn f3_groups_straddle_blocks() {
        // Group of pixel 0 is (v0, v2, v4, v6) for mn = 2.
        let mut v = vec![0.0; 8];
        v[0] = 3.0;
        v[6] = 4.0;
        v[1] = 0.5;
        prox_f3_star(&mut v, 2, 1.0);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[6] - 0.8).abs() < 1e-15);
        assert_eq!(v[1], 0.5);
    }

    #[test]
    fn f3_ignores_step_size() {
        let layout = StateLayout::new(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ctx = ProxContext::new(layout, vec![0.0; 18], 1.0, 0.3, 0.5, ConstraintMode::MeanZero).unwrap();
        let y = random_vec(&mut rng, layout.dual_len(), 1.0);
        let outputs: Vec<Vec<f64>> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&eta| {
                let mut v = y.clone();
                ctx.prox_dual(&mut v, eta).unwrap();
                v[36..].to_vec()
            })
            .collect();
        for o in &outputs[1..] {
            assert!(dist(o, &outputs[0]) < 1e-12);
        }
    }

    #[test]
    fn h_examples() {
        let layout = StateLayout::new(2, 2, 2);
        let mut x = vec![0.0; layout.primal_len()];
        x[..8].iter_mut().for_each(|v| *v = 1.0);
        x[8..16].iter_mut().for_each(|v| *v = 3.0);
        x[16..].iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let lows = x[16..].to_vec();
        prox_h(&mut x, layout, ConstraintMode::MeanZero);
        assert!(x[..8].iter().all(|&v| v == -1.0));
        assert!(x[8..16].iter().all(|&v| v == 1.0));
        assert_eq!(&x[16..], &lows[..]);

        let before = x.clone();
        prox_h(&mut x, layout, ConstraintMode::MeanZero);
        assert_eq!(x, before);

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let y = random_vec(&mut rng, layout.primal_len(), 1.0);
        let mut z = y.clone();
        prox_h(&mut z, layout, ConstraintMode::FixedReference(1));
        assert!(z[8..16].iter().all(|&v| v == 0.0));
        assert_eq!(&z[..8], &y[..8]);
        assert_eq!(&z[16..], &y[16..]);
    }

    #[test]
    fn context_validation() {
        let layout = StateLayout::new(2, 2, 2);
        assert!(ProxContext::new(layout, vec![0.0; 7], 1.0, 1.0, 1.0, ConstraintMode::MeanZero).is_err());
        assert!(ProxContext::new(layout, vec![0.0; 8], 0.0, 1.0, 1.0, ConstraintMode::MeanZero).is_err());
        assert!(ProxContext::new(layout, vec![0.0; 8], 1.0, 1.0, -1.0, ConstraintMode::MeanZero).is_err());
        assert!(ProxContext::new(layout, vec![0.0; 8], 1.0, 1.0, 0.0, ConstraintMode::FixedReference(2)).is_err());
        assert!(ProxContext::new(layout, vec![0.0; 8], 1.0, 1.0, 0.0, ConstraintMode::FixedReference(1)).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dual_prox_is_nonexpansive(seed in any::<u64>(), eta in 0.05f64..5.0, nu in 0.0f64..2.0) {
                let layout = StateLayout::new(3, 2, 3);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let offset = random_vec(&mut rng, 18, 1.0);
                let ctx = ProxContext::new(layout, offset, 0.7, 0.4, nu, ConstraintMode::MeanZero).unwrap();
                let a = random_vec(&mut rng, layout.dual_len(), 3.0);
                let b = random_vec(&mut rng, layout.dual_len(), 3.0);
                let (mut pa, mut pb) = (a.clone(), b.clone());
                ctx.prox_dual(&mut pa, eta).unwrap();
                ctx.prox_dual(&mut pb, eta).unwrap();
                prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-9);
                for v in &pa[..18] {
                    prop_assert!(v.abs() <= 0.7);
                }
            }

            #[test]
            fn primal_prox_is_nonexpansive_and_feasible(seed in any::<u64>(), fixed in any::<bool>()) {
                let layout = StateLayout::new(3, 3, 2);
                let mode = if fixed { ConstraintMode::FixedReference(2) } else { ConstraintMode::MeanZero };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_vec(&mut rng, layout.primal_len(), 5.0);
                let b = random_vec(&mut rng, layout.primal_len(), 5.0);
                let (mut pa, mut pb) = (a.clone(), b.clone());
                prox_h(&mut pa, layout, mode);
                prox_h(&mut pb, layout, mode);
                prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-12);
                if !fixed {
                    let mn = layout.pixels();
                    for c in 0..2 {
                        let s: f64 = (0..3).map(|k| pa[2 * k * mn + c * mn..2 * k * mn + (c + 1) * mn].iter().sum::<f64>()).sum();
                        prop_assert!(s.abs() <= 1e-10 * (3 * mn) as f64);
                    }
                }
            }
        }
    }
}
