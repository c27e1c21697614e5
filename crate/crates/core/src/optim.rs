//! Unconstrained minimizers behind a common trait, selectable by name.
//!
//! `bfgs` is a quasi-Newton method with an Armijo backtracking line search;
//! when the line search cannot make progress it hands the current point to a
//! Nelder-Mead simplex search and then restarts. `nelder-mead` runs the
//! simplex search alone.

use serde::Serialize;

/// A smooth function to minimize.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the value.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Converged once the gradient max-norm drops to this level.
    pub gradient_tolerance: f64,
    /// Relative objective change treated as a stall.
    pub relative_tolerance: f64,
    /// A stall only counts as convergence below this gradient max-norm.
    pub stall_gradient_tolerance: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            relative_tolerance: 1e-12,
            stall_gradient_tolerance: 1e-6,
        }
    }
}

/// Starting point, optionally with a row-major inverse Hessian approximation
/// carried over from a previous fit.
#[derive(Debug, Clone, Copy)]
pub struct Start<'a> {
    pub x: &'a [f64],
    pub inverse_hessian: Option<&'a [f64]>,
}

impl<'a> Start<'a> {
    pub fn at(x: &'a [f64]) -> Self {
        Self {
            x,
            inverse_hessian: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Final inverse Hessian approximation (quasi-Newton methods only).
    pub inverse_hessian: Option<Vec<f64>>,
    /// True when the simplex fallback was used.
    pub used_fallback: bool,
}

pub trait Minimizer: Send + Sync {
    fn name(&self) -> &'static str;

    fn minimize(&self, objective: &dyn Objective, start: Start<'_>, settings: &OptimizerSettings) -> Outcome;
}

/// Names accepted by [`minimizer`].
pub const MINIMIZERS: &[&str] = &["bfgs", "nelder-mead"];

pub fn minimizer(name: &str) -> Option<Box<dyn Minimizer>> {
    match name {
        "bfgs" => Some(Box::new(Bfgs)),
        "nelder-mead" => Some(Box::new(NelderMead)),
        _ => None,
    }
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Bfgs;

enum BfgsStop {
    Converged,
    LineSearchFailed,
    MaxIterations,
}

struct BfgsState {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    h: Vec<f64>,
    iterations: usize,
    evaluations: usize,
}

impl Bfgs {
    fn run(
        objective: &dyn Objective,
        state: &mut BfgsState,
        scale_first: bool,
        settings: &OptimizerSettings,
    ) -> BfgsStop {
        const ARMIJO: f64 = 1e-4;
        let n = objective.dim();
        let mut scale_pending = scale_first;
        let mut p = vec![0.0; n];
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut hy = vec![0.0; n];

        while state.iterations < settings.max_iterations {
            if max_norm(&state.g) <= settings.gradient_tolerance {
                return BfgsStop::Converged;
            }
            state.iterations += 1;

            for i in 0..n {
                p[i] = -(0..n).map(|j| state.h[i * n + j] * state.g[j]).sum::<f64>();
            }
            let mut slope = dot(&state.g, &p);
            if !(slope < 0.0) {
                reset_identity(&mut state.h, n);
                for i in 0..n {
                    p[i] = -state.g[i];
                }
                slope = dot(&state.g, &p);
            }

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                for i in 0..n {
                    x_new[i] = state.x[i] + step * p[i];
                }
                let f_new = objective.value_and_gradient(&x_new, &mut g_new);
                state.evaluations += 1;
                if f_new.is_finite() && f_new <= state.f + ARMIJO * step * slope {
                    accepted = Some(f_new);
                    break;
                }
                step *= 0.5;
            }
            let Some(f_new) = accepted else {
                return BfgsStop::LineSearchFailed;
            };

            let s: Vec<f64> = (0..n).map(|i| x_new[i] - state.x[i]).collect();
            let y: Vec<f64> = (0..n).map(|i| g_new[i] - state.g[i]).collect();
            let sy = dot(&s, &y);
            let yy = dot(&y, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * yy.sqrt() && sy > 0.0 {
                if scale_pending {
                    let gamma = sy / yy;
                    reset_identity(&mut state.h, n);
                    state.h.iter_mut().for_each(|v| *v *= gamma);
                    scale_pending = false;
                }
                for i in 0..n {
                    hy[i] = (0..n).map(|j| state.h[i * n + j] * y[j]).sum();
                }
                let yhy = dot(&y, &hy);
                let a = (sy + yhy) / (sy * sy);
                for i in 0..n {
                    for j in 0..n {
                        state.h[i * n + j] += a * s[i] * s[j] - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                    }
                }
            }

            let change = (state.f - f_new).abs();
            let stalled = change <= settings.relative_tolerance * state.f.abs().max(1.0);
            state.x.copy_from_slice(&x_new);
            state.g.copy_from_slice(&g_new);
            state.f = f_new;
            if stalled && max_norm(&state.g) <= settings.stall_gradient_tolerance {
                return BfgsStop::Converged;
            }
        }
        if max_norm(&state.g) <= settings.gradient_tolerance {
            BfgsStop::Converged
        } else {
            BfgsStop::MaxIterations
        }
    }
}

fn reset_identity(h: &mut [f64], n: usize) {
    h.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
}

impl Minimizer for Bfgs {
    fn name(&self) -> &'static str {
        "bfgs"
    }

    fn minimize(&self, objective: &dyn Objective, start: Start<'_>, settings: &OptimizerSettings) -> Outcome {
        let n = objective.dim();
        let mut g = vec![0.0; n];
        let f = objective.value_and_gradient(start.x, &mut g);
        let (h, scale_first) = match start.inverse_hessian {
            Some(h) if h.len() == n * n => (h.to_vec(), false),
            _ => {
                let mut h = vec![0.0; n * n];
                reset_identity(&mut h, n);
                (h, true)
            }
        };
        let mut state = BfgsState {
            x: start.x.to_vec(),
            f,
            g,
            h,
            iterations: 0,
            evaluations: 1,
        };
        let mut used_fallback = false;
        let mut stop = Bfgs::run(objective, &mut state, scale_first, settings);
        if matches!(stop, BfgsStop::LineSearchFailed) {
            // Simplex search from the stuck point, then one quasi-Newton restart.
            used_fallback = true;
            let simplex = NelderMead.minimize(objective, Start::at(&state.x), settings);
            state.evaluations += simplex.evaluations;
            state.x = simplex.x;
            state.f = objective.value_and_gradient(&state.x, &mut state.g);
            state.evaluations += 1;
            reset_identity(&mut state.h, n);
            stop = Bfgs::run(objective, &mut state, true, settings);
        }
        let gradient_norm = max_norm(&state.g);
        let converged = match stop {
            BfgsStop::Converged => true,
            // A failed line search at a point that already satisfies the
            // stall tolerance is a precision floor, not a failure.
            BfgsStop::LineSearchFailed => gradient_norm <= settings.stall_gradient_tolerance,
            BfgsStop::MaxIterations => false,
        };
        Outcome {
            x: state.x,
            value: state.f,
            gradient_norm,
            iterations: state.iterations,
            evaluations: state.evaluations,
            converged,
            inverse_hessian: Some(state.h),
            used_fallback,
        }
    }
}

/// Derivative-free simplex search (reflection 1, expansion 2, contraction
/// and shrink 0.5).
#[derive(Debug, Clone, Copy, Default)]
pub struct NelderMead;

impl Minimizer for NelderMead {
    fn name(&self) -> &'static str {
        "nelder-mead"
    }

    fn minimize(&self, objective: &dyn Objective, start: Start<'_>, settings: &OptimizerSettings) -> Outcome {
        let n = objective.dim();
        let max_iter = settings.max_iterations * 20 * n.max(1);
        let mut evaluations = 0;
        let mut eval = |x: &[f64]| {
            evaluations += 1;
            let v = objective.value(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut simplex: Vec<Vec<f64>> = vec![start.x.to_vec()];
        for k in 0..n {
            let mut v = start.x.to_vec();
            v[k] += 0.1 + 0.05 * v[k].abs();
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();
        let mut iterations = 0;

        while iterations < max_iter {
            iterations += 1;
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[n] - values[0];
            if spread <= settings.relative_tolerance * values[0].abs().max(1.0) {
                let size = simplex[1..]
                    .iter()
                    .map(|v| max_norm(&v.iter().zip(&simplex[0]).map(|(a, b)| a - b).collect::<Vec<_>>()))
                    .fold(0.0, f64::max);
                if size <= 1e-10 * (1.0 + max_norm(&simplex[0])) {
                    break;
                }
            }

            let centroid: Vec<f64> = (0..n)
                .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                (0..n)
                    .map(|k| centroid[k] + t * (simplex[n][k] - centroid[k]))
                    .collect()
            };

            let reflected = along(-1.0);
            let f_r = eval(&reflected);
            if f_r < values[0] {
                let expanded = along(-2.0);
                let f_e = eval(&expanded);
                if f_e < f_r {
                    simplex[n] = expanded;
                    values[n] = f_e;
                } else {
                    simplex[n] = reflected;
                    values[n] = f_r;
                }
                continue;
            }
            if f_r < values[n - 1] {
                simplex[n] = reflected;
                values[n] = f_r;
                continue;
            }
            let (contracted, f_c) = if f_r < values[n] {
                let c = along(-0.5);
                let f = eval(&c);
                (c, f)
            } else {
                let c = along(0.5);
                let f = eval(&c);
                (c, f)
            };
            if f_c < values[n].min(f_r) {
                simplex[n] = contracted;
                values[n] = f_c;
                continue;
            }
            for i in 1..=n {
                for k in 0..n {
                    simplex[i][k] = simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k]);
                }
                values[i] = eval(&simplex[i]);
            }
        }

        let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        let x = simplex[best].clone();
        let mut g = vec![0.0; n];
        let value = objective.value_and_gradient(&x, &mut g);
        let gradient_norm = max_norm(&g);
        Outcome {
            x,
            value,
            gradient_norm,
            iterations,
            evaluations: evaluations + 1,
            converged: gradient_norm <= settings.stall_gradient_tolerance,
            inverse_hessian: None,
            used_fallback: false,
        }
    }
}
