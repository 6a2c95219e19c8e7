//! First-order primal-dual iteration for saddle-point problems
//! `min_x max_y ⟨A x, y⟩ − F*(y) + H(x)`.

use crate::error::{Error, Result};
use crate::operators::LinearOperator;

/// Default fixed-point tolerance of one subproblem solve.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Default iteration cap of one subproblem solve.
pub const DEFAULT_MAX_ITERATIONS: usize = 2000;
/// Energy is recorded every this many iterations when tracing is enabled.
pub const ENERGY_TRACE_INTERVAL: usize = 10;

/// Resolvents of the dual function `F*` and the primal function `H`.
pub trait ProxBundle {
    /// In place: `y ← (id + η ∂F*)⁻¹ (y)`.
    fn prox_dual(&self, y: &mut [f64], eta: f64) -> Result<()>;

    /// In place: `x ← (id + τ ∂H)⁻¹ (x)`.
    fn prox_primal(&self, x: &mut [f64], tau: f64) -> Result<()>;

    /// Primal objective at `x`, given `ax = A x`. Only used for tracing.
    fn energy(&self, _x: &[f64], _ax: &[f64]) -> f64 {
        f64::NAN
    }
}

/// Returns `τ = η = 0.99 / ‖A‖`, so that `τη‖A‖² = 0.9801`.
pub fn choose_steps(norm_estimate: f64) -> Result<(f64, f64)> {
    if !(norm_estimate > 0.0) || !norm_estimate.is_finite() {
        return Err(Error::invalid(format!(
            "operator norm estimate must be positive and finite, got {norm_estimate}"
        )));
    }
    let step = 0.99 / norm_estimate;
    Ok((step, step))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdhgSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub tau: f64,
    pub eta: f64,
    pub trace_energy: bool,
}

impl PdhgSettings {
    /// Validates `τη · norm² < 1` against the supplied norm estimate.
    pub fn new(max_iterations: usize, tolerance: f64, tau: f64, eta: f64, norm_estimate: f64) -> Result<Self> {
        if max_iterations == 0 {
            return Err(Error::invalid("max iterations must be positive"));
        }
        if !(tolerance > 0.0) {
            return Err(Error::invalid(format!("tolerance must be positive, got {tolerance}")));
        }
        if !(tau > 0.0 && eta > 0.0) || !tau.is_finite() || !eta.is_finite() {
            return Err(Error::invalid(format!(
                "step sizes must be positive, got tau={tau}, eta={eta}"
            )));
        }
        if !(norm_estimate >= 0.0) || !(tau * eta * norm_estimate * norm_estimate < 1.0) {
            return Err(Error::invalid(format!(
                "step sizes violate tau*eta*|A|^2 < 1 (tau={tau}, eta={eta}, |A|={norm_estimate})"
            )));
        }
        Ok(PdhgSettings {
            max_iterations,
            tolerance,
            tau,
            eta,
            trace_energy: false,
        })
    }

    /// Settings with steps from [`choose_steps`].
    pub fn from_norm(norm_estimate: f64, max_iterations: usize, tolerance: f64) -> Result<Self> {
        let (tau, eta) = choose_steps(norm_estimate)?;
        Self::new(max_iterations, tolerance, tau, eta, norm_estimate)
    }

    pub fn with_energy_trace(mut self, on: bool) -> Self {
        self.trace_energy = on;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `max(‖Δx‖∞ / τ, ‖Δy‖∞ / η)` of the last iteration.
    pub residual: f64,
    pub converged: bool,
    /// `(iteration, energy)` pairs, empty unless tracing was requested.
    pub energy_trace: Vec<(usize, f64)>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (p, q)| acc.max((p - q).abs()))
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Runs the primal-dual iteration
///
/// ```text
/// y ← prox_{ηF*}(y + η A x̄)
/// x ← prox_{τH}(x − τ Aᵀ y)
/// x̄ ← 2 x_new − x_old
/// ```
///
/// from `(x0, y0)` with `x̄ = x0`, until the scaled step difference drops below the
/// tolerance or the iteration cap is hit.
pub fn pdhg_solve<A, P>(
    op: &A,
    prox: &P,
    x0: Vec<f64>,
    y0: Vec<f64>,
    settings: &PdhgSettings,
) -> Result<(Vec<f64>, Vec<f64>, SolveReport)>
where
    A: LinearOperator,
    P: ProxBundle,
{
    if x0.len() != op.dim_in() || y0.len() != op.dim_out() {
        return Err(Error::dims(format!(
            "operator is {}x{}, got primal {} and dual {}",
            op.dim_out(),
            op.dim_in(),
            x0.len(),
            y0.len()
        )));
    }
    let (tau, eta) = (settings.tau, settings.eta);
    let mut x = x0;
    let mut y = y0;
    let mut x_bar = x.clone();
    let mut x_new = vec![0.0; x.len()];
    let mut y_new = vec![0.0; y.len()];
    let mut a_buf = vec![0.0; y.len()];
    let mut at_buf = vec![0.0; x.len()];
    let mut report = SolveReport {
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
        energy_trace: Vec::new(),
    };

    for it in 1..=settings.max_iterations {
        op.apply(&x_bar, &mut a_buf);
        for ((yn, yo), ax) in y_new.iter_mut().zip(&y).zip(&a_buf) {
            *yn = yo + eta * ax;
        }
        prox.prox_dual(&mut y_new, eta)?;

        op.apply_adjoint(&y_new, &mut at_buf);
        for ((xn, xo), aty) in x_new.iter_mut().zip(&x).zip(&at_buf) {
            *xn = xo - tau * aty;
        }
        prox.prox_primal(&mut x_new, tau)?;

        if !all_finite(&x_new) || !all_finite(&y_new) {
            return Err(Error::NonFinite {
                iteration: it,
                context: "primal-dual iterate".into(),
            });
        }

        let residual = (max_abs_diff(&x_new, &x) / tau).max(max_abs_diff(&y_new, &y) / eta);
        for ((xb, xn), xo) in x_bar.iter_mut().zip(&x_new).zip(&x) {
            *xb = 2.0 * xn - xo;
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut y, &mut y_new);
        report.iterations = it;
        report.residual = residual;

        if settings.trace_energy && it % ENERGY_TRACE_INTERVAL == 0 {
            op.apply(&x, &mut a_buf);
            report.energy_trace.push((it, prox.energy(&x, &a_buf)));
        }
        if residual < settings.tolerance {
            report.converged = true;
            break;
        }
    }
    Ok((x, y, report))
}
