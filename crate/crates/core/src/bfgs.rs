//! Block-diagonal inverse BFGS with Armijo backtracking.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative curvature threshold: updates with `yᵀs ≤ CURVATURE_EPS·‖y‖‖s‖` are skipped.
pub const CURVATURE_EPS: f64 = 1e-10;

/// A smooth objective with an analytic gradient.
pub trait Objective {
    /// Value and gradient at `x`.
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>);
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmijoParams {
    pub c1: f64,
    pub rho: f64,
    pub alpha0: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self { c1: 1e-4, rho: 0.5, alpha0: 1.0, max_backtracks: 30 }
    }
}

/// Result of a backtracking search; `alpha == 0` means no admissible step was found.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmijoStep<T> {
    pub alpha: f64,
    pub value: f64,
    pub evaluations: usize,
    pub payload: Option<T>,
}

impl<T> ArmijoStep<T> {
    pub fn stalled(&self) -> bool {
        self.alpha == 0.0
    }
}

/// Backtracking over `α ∈ {α₀ ρᵐ}` for `φ(α) ≤ f + c₁ α·slope`. `phi` returns the
/// value at `x + α d` plus an arbitrary payload kept for the accepted point.
pub fn armijo_search<T>(
    mut phi: impl FnMut(f64) -> (f64, T),
    fx: f64,
    slope: f64,
    params: &ArmijoParams,
) -> Result<ArmijoStep<T>> {
    backtrack(
        |a| {
            let (v, p) = phi(a);
            (v, None, p)
        },
        fx,
        slope,
        params,
    )
}

/// Relative change in `f` below which the value test is replaced by a slope test.
pub const APPROX_ARMIJO_EPS: f64 = 1e-10;

/// Armijo backtracking that also accepts `φ′(α) ≤ (2c₁ − 1)·φ′(0)` once
/// `|φ(α) − f| ≤ ε|f|`, where rounding in `f` hides the true decrease. On a quadratic
/// the two conditions coincide. `phi` returns the value, `φ′(α)` and a payload.
pub fn armijo_search_approx<T>(
    mut phi: impl FnMut(f64) -> (f64, f64, T),
    fx: f64,
    slope: f64,
    params: &ArmijoParams,
) -> Result<ArmijoStep<T>> {
    backtrack(
        |a| {
            let (v, d, p) = phi(a);
            (v, Some(d), p)
        },
        fx,
        slope,
        params,
    )
}

fn backtrack<T>(
    mut phi: impl FnMut(f64) -> (f64, Option<f64>, T),
    fx: f64,
    slope: f64,
    params: &ArmijoParams,
) -> Result<ArmijoStep<T>> {
    if !(slope < 0.0) {
        return Err(Error::NotDescent(slope));
    }
    let mut alpha = params.alpha0;
    for m in 0..=params.max_backtracks {
        let (v, dphi, payload) = phi(alpha);
        let exact = v <= fx + params.c1 * alpha * slope;
        let approx = dphi.is_some_and(|d| {
            (v - fx).abs() <= APPROX_ARMIJO_EPS * fx.abs() && d <= (2.0 * params.c1 - 1.0) * slope
        });
        if v.is_finite() && (exact || approx) {
            return Ok(ArmijoStep { alpha, value: v, evaluations: m + 1, payload: Some(payload) });
        }
        alpha *= params.rho;
    }
    Ok(ArmijoStep { alpha: 0.0, value: fx, evaluations: params.max_backtracks + 1, payload: None })
}

/// Armijo step along `direction` from `x` for a value-only function.
pub fn armijo_step(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    fx: f64,
    grad: &[f64],
    direction: &[f64],
    params: &ArmijoParams,
) -> Result<ArmijoStep<()>> {
    let slope: f64 = grad.iter().zip(direction).map(|(g, d)| g * d).sum();
    let mut trial = x.to_vec();
    armijo_search(
        |alpha| {
            for ((t, xi), di) in trial.iter_mut().zip(x).zip(direction) {
                *t = xi + alpha * di;
            }
            (f(&trial), ())
        },
        fx,
        slope,
        params,
    )
}

/// Inverse-BFGS update `H⁺ = H + (1 + yᵀHy/yᵀs)·ssᵀ/yᵀs − (s yᵀH + H y sᵀ)/yᵀs`.
/// Returns `None` when the curvature condition fails.
pub fn bfgs_update(h: &DMatrix<f64>, s: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let ys = y.dot(&s);
    if !(ys > CURVATURE_EPS * y.norm() * s.norm()) {
        return None;
    }
    let hy = h * &y;
    let yhy = y.dot(&hy);
    let mut out = h + (&s * s.transpose()) * ((1.0 + yhy / ys) / ys) - (&s * hy.transpose() + &hy * s.transpose()) / ys;
    // Clean rounding asymmetry.
    let t = out.transpose();
    out = (out + t) * 0.5;
    Some(out)
}

/// How the inverse Hessian couples the parameter blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianCoupling {
    /// Independent τ and θ blocks.
    #[default]
    Decoupled,
    /// One matrix over all parameters.
    Joint,
}

/// Block-diagonal inverse Hessian approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseHessian {
    pub ranges: Vec<Range<usize>>,
    pub blocks: Vec<DMatrix<f64>>,
    /// Accepted updates per block.
    pub updates: Vec<usize>,
}

impl InverseHessian {
    pub fn identity(ranges: Vec<Range<usize>>) -> Self {
        let blocks = ranges.iter().map(|r| DMatrix::identity(r.len(), r.len())).collect();
        let updates = vec![0; ranges.len()];
        Self { ranges, blocks, updates }
    }

    pub fn reset(&mut self) {
        *self = Self::identity(std::mem::take(&mut self.ranges));
    }

    /// `H g`.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for (r, b) in self.ranges.iter().zip(&self.blocks) {
            let v = b * DVector::from_column_slice(&g[r.clone()]);
            out[r.clone()].copy_from_slice(v.as_slice());
        }
        out
    }

    /// Secant update of every block; returns the number of skipped blocks.
    pub fn update(&mut self, s: &[f64], y: &[f64]) -> usize {
        let mut skipped = 0;
        for ((r, b), n) in self.ranges.iter().zip(self.blocks.iter_mut()).zip(self.updates.iter_mut()) {
            match bfgs_update(b, &s[r.clone()], &y[r.clone()]) {
                Some(nb) => {
                    *b = nb;
                    *n += 1;
                }
                None => skipped += 1,
            }
        }
        skipped
    }

    /// Diagonal of the full (block-diagonal) matrix.
    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.ranges.iter().map(|r| r.end).max().unwrap_or(0);
        let mut d = vec![0.0; n];
        for (r, b) in self.ranges.iter().zip(&self.blocks) {
            for (i, idx) in r.clone().enumerate() {
                d[idx] = b[(i, i)];
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once `‖g‖∞` falls below this.
    pub grad_tol: f64,
    pub armijo: ArmijoParams,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 100, grad_tol: 1e-8, armijo: ArmijoParams::default() }
    }
}

/// Final iterate and bookkeeping of a BFGS run.
#[derive(Debug, Clone)]
pub struct BfgsState {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub inv_hessian: InverseHessian,
    pub iterations: usize,
    pub skipped_updates: usize,
    pub resets: usize,
    pub stalled: bool,
    pub converged: bool,
    /// Objective value after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `obj` from `x0` with a block-diagonal inverse Hessian starting at the identity.
pub fn minimize(obj: &impl Objective, x0: &[f64], ranges: Vec<Range<usize>>, opts: &BfgsOptions) -> BfgsState {
    let (fx, g) = obj.eval(x0);
    let mut st = BfgsState {
        x: x0.to_vec(),
        value: fx,
        grad: g,
        inv_hessian: InverseHessian::identity(ranges),
        iterations: 0,
        skipped_updates: 0,
        resets: 0,
        stalled: false,
        converged: false,
        history: vec![fx],
    };
    let mut trial = vec![0.0; x0.len()];
    while st.iterations < opts.max_iter {
        if inf_norm(&st.grad) < opts.grad_tol {
            st.converged = true;
            break;
        }
        let mut d: Vec<f64> = st.inv_hessian.apply(&st.grad).iter().map(|v| -v).collect();
        let mut slope: f64 = d.iter().zip(&st.grad).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            st.inv_hessian.reset();
            st.resets += 1;
            d = st.grad.iter().map(|v| -v).collect();
            slope = -st.grad.iter().map(|v| v * v).sum::<f64>();
        }
        let x = &st.x;
        let step = armijo_search_approx(
            |alpha| {
                for ((t, xi), di) in trial.iter_mut().zip(x).zip(&d) {
                    *t = xi + alpha * di;
                }
                let (v, g) = obj.eval(&trial);
                let dphi = g.iter().zip(&d).map(|(a, b)| a * b).sum();
                (v, dphi, g)
            },
            st.value,
            slope,
            &opts.armijo,
        );
        let step = match step {
            Ok(s) if !s.stalled() => s,
            _ => {
                st.stalled = true;
                break;
            }
        };
        let g_new = step.payload.expect("accepted step carries a gradient");
        let s: Vec<f64> = d.iter().map(|v| step.alpha * v).collect();
        let y: Vec<f64> = g_new.iter().zip(&st.grad).map(|(a, b)| a - b).collect();
        st.skipped_updates += st.inv_hessian.update(&s, &y);
        for (xi, si) in st.x.iter_mut().zip(&s) {
            *xi += si;
        }
        st.value = step.value;
        st.grad = g_new;
        st.iterations += 1;
        st.history.push(st.value);
    }
    if !st.converged && inf_norm(&st.grad) < opts.grad_tol {
        st.converged = true;
    }
    st
}
