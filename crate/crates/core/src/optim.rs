//! BFGS maximization with central finite-difference gradients.

/// Settings for [`maximize`].
#[derive(Clone, Debug, PartialEq)]
pub struct BfgsConfig {
    /// Central-difference step.
    pub fd_step: f64,
    /// Stop when the gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective gain falls below this.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Longest allowed step (Euclidean norm) per iteration.
    pub max_step: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            grad_tol: 1e-5,
            rel_tol: 1e-10,
            max_iter: 500,
            max_step: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimStatus {
    GradientConverged,
    ObjectiveConverged,
    MaxIterations,
    LineSearchFailed,
}

impl OptimStatus {
    pub fn converged(self) -> bool {
        matches!(
            self,
            OptimStatus::GradientConverged | OptimStatus::ObjectiveConverged
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimStatus::GradientConverged => "gradient",
            OptimStatus::ObjectiveConverged => "objective",
            OptimStatus::MaxIterations => "max_iter",
            OptimStatus::LineSearchFailed => "line_search_failed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f` from `x0`. Non-finite objective values are treated as
/// infeasible by the line search.
pub fn maximize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], cfg: &BfgsConfig) -> OptimResult {
    // Minimize the negated objective.
    let obj = |x: &[f64]| -f(x);
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = obj(&x);
    if !fx.is_finite() {
        return OptimResult {
            x,
            value: -fx,
            iterations: 0,
            status: OptimStatus::LineSearchFailed,
        };
    }
    let identity = |n: usize| {
        let mut h = vec![0.0; n * n];
        (0..n).for_each(|i| h[i * n + i] = 1.0);
        h
    };
    let mut hinv = identity(n);
    let mut fresh = true;
    let mut grad = central_gradient(&obj, &x, cfg.fd_step);

    for iter in 0..cfg.max_iter {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < cfg.grad_tol {
            return OptimResult {
                x,
                value: -fx,
                iterations: iter,
                status: OptimStatus::GradientConverged,
            };
        }
        let mut dir: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| hinv[i * n + j] * grad[j]).sum::<f64>())
            .collect();
        if dot(&dir, &grad) >= 0.0 {
            hinv = identity(n);
            fresh = true;
            dir = grad.iter().map(|g| -g).collect();
        }
        let norm = dot(&dir, &dir).sqrt();
        if norm > cfg.max_step {
            dir.iter_mut().for_each(|d| *d *= cfg.max_step / norm);
        }
        let slope = dot(&dir, &grad);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let ft = obj(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if !fresh {
                hinv = identity(n);
                fresh = true;
                continue;
            }
            return OptimResult {
                x,
                value: -fx,
                iterations: iter,
                status: OptimStatus::LineSearchFailed,
            };
        };

        let grad_new = central_gradient(&obj, &x_new, cfg.fd_step);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            // H+ = (I - rho s y') H (I - rho y s') + rho s s'
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| hinv[i * n + j] * y[j]).sum())
                .collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    hinv[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }

        let gain = fx - f_new;
        x = x_new;
        let prev = fx;
        fx = f_new;
        grad = grad_new;
        if gain.abs() <= cfg.rel_tol * prev.abs().max(1.0) {
            return OptimResult {
                x,
                value: -fx,
                iterations: iter + 1,
                status: OptimStatus::ObjectiveConverged,
            };
        }
    }
    OptimResult {
        x,
        value: -fx,
        iterations: cfg.max_iter,
        status: OptimStatus::MaxIterations,
    }
}
