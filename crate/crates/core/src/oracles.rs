//! Independent checks: finite differences, Monte Carlo means, Stein's identity,
//! and an iterative ridge solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hermite::LinkFunction;
use crate::rng::Rng;
use crate::taskgen::gaussian_vector;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, point: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut x = point.clone();
    let mut out = DVector::zeros(point.len());
    for i in 0..point.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = f(&x)?;
        x[i] = x0 - h;
        let fm = f(&x)?;
        x[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!("function is not finite near coordinate {i}")));
        }
        out[i] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub argmax_index: usize,
    pub step_h: f64,
}

/// Largest coordinate error relative to the largest finite-difference entry.
pub fn compare_gradients(analytic: &DVector<f64>, numeric: &DVector<f64>, h: f64) -> FiniteDiffReport {
    let scale = numeric.amax().max(1e-8);
    let (mut worst, mut idx) = (0.0, 0);
    for i in 0..numeric.len() {
        let e = (analytic[i] - numeric[i]).abs() / scale;
        if e > worst {
            worst = e;
            idx = i;
        }
    }
    FiniteDiffReport {
        max_rel_error: worst,
        argmax_index: idx,
        step_h: h,
    }
}

/// Streaming mean and variance of vector samples.
#[derive(Debug, Clone)]
pub struct Welford {
    n: usize,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl Welford {
    pub fn new(k: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(k),
            m2: DVector::zeros(k),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Sample standard deviation over `sqrt(n)`.
    pub fn stderr(&self) -> DVector<f64> {
        if self.n < 2 {
            return DVector::zeros(self.mean.len());
        }
        let n = self.n as f64;
        self.m2.map(|s| (s / (n - 1.0)).max(0.0).sqrt() / n.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: DVector<f64>,
    pub stderr: DVector<f64>,
    pub samples: usize,
}

impl McEstimate {
    /// True when every coordinate is within `k` standard errors of `target`.
    pub fn within(&self, target: &DVector<f64>, k: f64) -> bool {
        (0..self.mean.len()).all(|i| (self.mean[i] - target[i]).abs() <= k * self.stderr[i])
    }
}

pub fn mc_expectation<T, S, F>(mut sampler: S, mut f: F, m: usize, rng: &mut Rng) -> Result<McEstimate>
where
    S: FnMut(&mut Rng) -> T,
    F: FnMut(&T) -> DVector<f64>,
{
    if m < 2 {
        return Err(Error::invalid("Monte Carlo needs at least 2 samples"));
    }
    let mut acc: Option<Welford> = None;
    for i in 0..m {
        let v = f(&sampler(rng));
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite Monte Carlo sample at index {i}")));
        }
        acc.get_or_insert_with(|| Welford::new(v.len())).push(&v);
    }
    let acc = acc.expect("m >= 2");
    Ok(McEstimate {
        mean: acc.mean().clone(),
        stderr: acc.stderr(),
        samples: m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteinReport {
    pub lhs: DVector<f64>,
    pub rhs: DVector<f64>,
    /// `|| LHS - RHS ||`.
    pub deviation: f64,
    /// Standard error of each coordinate of the paired difference.
    pub stderr: DVector<f64>,
    /// Largest coordinate deviation in units of its standard error.
    pub max_z: f64,
}

/// Monte Carlo of `E[s(<b,x>) x]` against `E[s'(<b,x>)] b` for `x ~ N(0, I_d)`.
pub fn stein_check(link: &LinkFunction, beta: &DVector<f64>, m: usize, rng: &mut Rng) -> Result<SteinReport> {
    if m < 10_000 {
        return Err(Error::invalid("Stein check needs at least 10^4 samples"));
    }
    let d = beta.len();
    let mut lhs = Welford::new(d);
    let mut rhs = Welford::new(1);
    let mut diff = Welford::new(d);
    for _ in 0..m {
        let x = gaussian_vector(d, rng);
        let z = beta.dot(&x);
        let fz = link.eval(z);
        let dz = link.derivative(z);
        let l = &x * fz;
        lhs.push(&l);
        rhs.push(&DVector::from_element(1, dz));
        diff.push(&(l - beta * dz));
    }
    let lhs_mean = lhs.mean().clone();
    let rhs_vec = beta * rhs.mean()[0];
    let stderr = diff.stderr();
    let max_z = (0..d)
        .map(|i| diff.mean()[i].abs() / stderr[i].max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(SteinReport {
        deviation: (&lhs_mean - &rhs_vec).norm(),
        lhs: lhs_mean,
        rhs: rhs_vec,
        stderr,
        max_z,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeGdReport {
    pub a: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub rate: f64,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(h: &DMatrix<f64>, iters: usize) -> f64 {
    let n = h.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = h * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda
}

/// Gradient descent on `(1/2N) ||Phi a - y||^2 + (lambda/2) ||a||^2` from `a = 0`.
pub fn ridge_gd_oracle(phi: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, rate: f64, iters: usize) -> Result<RidgeGdReport> {
    let n = phi.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::invalid("ridge oracle needs matching non-empty features and labels"));
    }
    let nf = n as f64;
    let mut h = (phi.transpose() * phi) / nf;
    for i in 0..h.nrows() {
        h[(i, i)] += lambda;
    }
    let c = phi.tr_mul(y) / nf;
    let top = power_iteration(&h, 500) * 1.05;
    let rate = if top > 0.0 { rate.min(1.9 / top) } else { rate };
    let objective = |a: &DVector<f64>| 0.5 * a.dot(&(&h * a)) - a.dot(&c);

    let mut a = DVector::zeros(h.nrows());
    let mut prev = objective(&a);
    let mut rises = 0;
    let mut grad = &h * &a - &c;
    let mut it = 0;
    while it < iters {
        if grad.norm() <= 1e-10 {
            break;
        }
        a.axpy(-rate, &grad, 1.0);
        grad = &h * &a - &c;
        it += 1;
        let obj = objective(&a);
        if !obj.is_finite() {
            return Err(Error::numeric(format!("ridge oracle diverged at step {it}")));
        }
        if obj > prev {
            rises += 1;
            if rises >= 10 {
                return Err(Error::numeric(format!("ridge oracle objective rose for 10 steps (step {it})")));
            }
        } else {
            rises = 0;
        }
        prev = obj;
    }
    let grad_norm = grad.norm();
    Ok(RidgeGdReport {
        a,
        iterations: it,
        grad_norm,
        converged: grad_norm <= 1e-10,
        rate,
    })
}
