//! ε-insensitive support vector regression with a Gaussian kernel.
//!
//! The dual is solved by SMO with second-order working-set selection over
//! the `2n` variables `[alpha; alpha*]`:
//!
//! ```text
//! min  1/2 (a - a*)' K (a - a*) + eps sum(a + a*) - y'(a - a*)
//! s.t. sum(a - a*) = 0,   0 <= a, a* <= C
//! ```
//!
//! and the regressor is `f(x) = sum_i (a_i - a*_i) k(x_i, x) + b`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    /// Box constraint (regularization strength).
    pub c: f64,
    /// Half-width of the insensitive tube, in target units.
    pub epsilon: f64,
    /// Kernel width `s` in `exp(-|x - x'|^2 / s^2)`.
    pub kernel_scale: f64,
    /// Stopping tolerance on the maximal KKT violation.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            epsilon: 0.01,
            kernel_scale: 1.0,
            tolerance: 1e-3,
            max_iterations: 10_000_000,
        }
    }
}

impl SvrParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid("C must be positive and finite"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        if !(self.kernel_scale > 0.0 && self.kernel_scale.is_finite()) {
            return Err(Error::invalid("kernel scale must be positive"));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::invalid("tolerance and iteration budget must be positive"));
        }
        Ok(())
    }
}

pub fn gaussian_kernel(a: ArrayView1<f64>, b: ArrayView1<f64>, scale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
    (-d2 / (scale * scale)).exp()
}

/// Gram matrix of the rows of `x`.
pub fn kernel_matrix(x: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let n = x.nrows();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = gaussian_kernel(x.row(i), x.row(j), scale);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Solution of the dual problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub iterations: usize,
}

impl DualSolution {
    /// Expansion coefficients `alpha - alpha*`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.alpha_star).map(|(a, b)| a - b).collect()
    }
}

/// Dual objective for a given `(alpha, alpha*)`.
pub fn dual_objective(k: &Array2<f64>, y: &[f64], epsilon: f64, alpha: &[f64], alpha_star: &[f64]) -> f64 {
    let beta: Vec<f64> = alpha.iter().zip(alpha_star).map(|(a, b)| a - b).collect();
    let n = beta.len();
    let mut quad = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| k[(i, j)] * beta[j]).sum();
        quad += beta[i] * row;
    }
    let l1: f64 = alpha.iter().zip(alpha_star).map(|(a, b)| a + b).sum();
    let lin: f64 = y.iter().zip(&beta).map(|(t, b)| t * b).sum();
    0.5 * quad + epsilon * l1 - lin
}

/// SMO on a precomputed Gram matrix.
pub fn solve_dual(k: &Array2<f64>, y: &[f64], params: &SvrParams) -> Result<DualSolution> {
    params.validate()?;
    let n = y.len();
    if k.dim() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: format!("{n}x{n}"),
            got: format!("{:?}", k.dim()),
        });
    }
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let l = 2 * n;
    let c = params.c;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let idx = |t: usize| if t < n { t } else { t - n };
    let mut a = vec![0.0; l];
    let mut g: Vec<f64> = (0..l)
        .map(|t| if t < n { params.epsilon - y[t] } else { params.epsilon + y[t - n] })
        .collect();
    let qd = |t: usize| k[(idx(t), idx(t))];

    let mut iterations = 0;
    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..l {
            if sign(t) > 0.0 {
                if a[t] < c && -g[t] >= gmax {
                    gmax = -g[t];
                    i = t;
                }
            } else if a[t] > 0.0 && g[t] >= gmax {
                gmax = g[t];
                i = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        if i != usize::MAX {
            let ki = idx(i);
            for t in 0..l {
                let yt = sign(t);
                let quad = qd(i) + qd(t) - 2.0 * k[(ki, idx(t))];
                let quad = if quad > 0.0 { quad } else { TAU };
                if yt > 0.0 {
                    if a[t] > 0.0 {
                        let diff = gmax + g[t];
                        gmax2 = gmax2.max(g[t]);
                        if diff > 0.0 {
                            let obj = -diff * diff / quad;
                            if obj <= best {
                                best = obj;
                                j = t;
                            }
                        }
                    }
                } else if a[t] < c {
                    let diff = gmax - g[t];
                    gmax2 = gmax2.max(-g[t]);
                    if diff > 0.0 {
                        let obj = -diff * diff / quad;
                        if obj <= best {
                            best = obj;
                            j = t;
                        }
                    }
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax + gmax2 < params.tolerance {
            break;
        }
        if iterations >= params.max_iterations {
            return Err(Error::SolverDiverged(iterations));
        }
        iterations += 1;

        let (yi, yj) = (sign(i), sign(j));
        let qij = yi * yj * k[(idx(i), idx(j))];
        let (old_i, old_j) = (a[i], a[j]);
        if yi != yj {
            let quad = (qd(i) + qd(j) + 2.0 * qij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = a[i] - a[j];
            a[i] += delta;
            a[j] += delta;
            if diff > 0.0 {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = diff;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = -diff;
            }
            if diff > 0.0 {
                if a[i] > c {
                    a[i] = c;
                    a[j] = c - diff;
                }
            } else if a[j] > c {
                a[j] = c;
                a[i] = c + diff;
            }
        } else {
            let quad = (qd(i) + qd(j) - 2.0 * qij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = a[i] + a[j];
            a[i] -= delta;
            a[j] += delta;
            if sum > c {
                if a[i] > c {
                    a[i] = c;
                    a[j] = sum - c;
                }
                if a[j] > c {
                    a[j] = c;
                    a[i] = sum - c;
                }
            } else {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = sum;
                }
                if a[i] < 0.0 {
                    a[i] = 0.0;
                    a[j] = sum;
                }
            }
        }
        let (di, dj) = (a[i] - old_i, a[j] - old_j);
        let (ri, rj) = (k.row(idx(i)), k.row(idx(j)));
        let (wi, wj) = (yi * di, yj * dj);
        for t in 0..l {
            let u = idx(t);
            g[t] += sign(t) * (wi * ri[u] + wj * rj[u]);
        }
    }

    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..l {
        let yg = sign(t) * g[t];
        if a[t] >= c {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if a[t] <= 0.0 {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    let alpha = a[..n].to_vec();
    let alpha_star = a[n..].to_vec();
    let objective = dual_objective(k, y, params.epsilon, &alpha, &alpha_star);
    Ok(DualSolution {
        alpha,
        alpha_star,
        bias: -rho,
        objective,
        iterations,
    })
}

/// Trained single-output regressor. Support vectors are stored in the
/// (already normalized) input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub support_vectors: Array2<f64>,
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub params: SvrParams,
}

impl SvrModel {
    /// Model with no support vectors that always returns `value`.
    pub fn constant(value: f64, dims: usize, params: SvrParams) -> Self {
        Self {
            support_vectors: Array2::zeros((0, dims)),
            coefficients: Vec::new(),
            bias: value,
            params,
        }
    }

    pub fn dims(&self) -> usize {
        self.support_vectors.ncols()
    }

    pub fn support_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        let s = self.params.kernel_scale;
        self.support_vectors
            .rows()
            .into_iter()
            .zip(&self.coefficients)
            .map(|(sv, c)| c * gaussian_kernel(sv, x, s))
            .sum::<f64>()
            + self.bias
    }
}

/// Fits an ε-SVR to the rows of `x`. Identical targets give a constant
/// model.
pub fn fit(x: ArrayView2<f64>, y: &[f64], params: &SvrParams) -> Result<SvrModel> {
    params.validate()?;
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} targets", x.nrows()),
            got: format!("{}", y.len()),
        });
    }
    if y.iter().all(|v| *v == y[0]) {
        log::warn!("all training targets equal {}; using a constant predictor", y[0]);
        return Ok(SvrModel::constant(y[0], x.ncols(), *params));
    }
    let k = kernel_matrix(x, params.kernel_scale);
    let sol = solve_dual(&k, y, params)?;
    let coef = sol.coefficients();
    let keep: Vec<usize> = (0..y.len()).filter(|&i| coef[i] != 0.0).collect();
    Ok(SvrModel {
        support_vectors: x.select(Axis(0), &keep),
        coefficients: keep.iter().map(|&i| coef[i]).collect(),
        bias: sol.bias,
        params: *params,
    })
}
