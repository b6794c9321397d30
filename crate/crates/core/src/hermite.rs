//! Probabilist's Hermite polynomials and Hermite-coefficient link functions.
//!
//! A link function is stored as `sigma(z) = sum_i c_i / i! * He_i(z)`, so the
//! stored `c_i` equal `E[sigma(Z) He_i(Z)]` for `Z ~ N(0, 1)`. Routines that
//! work with *plain* coefficients (`f = sum_i h_i He_i`) say so explicitly.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest degree accepted by the evaluation and basis-change routines.
pub const MAX_DEGREE: usize = 64;
/// Largest degree a [`LinkFunction`] may carry.
pub const MAX_LINK_DEGREE: usize = 16;
/// Default bound on `sum_i c_i^2`.
pub const DEFAULT_COEFF_BOUND: f64 = 100.0;
/// Absolute tolerance below which a coefficient counts as zero.
pub const COEFF_TOL: f64 = 1e-12;
/// Default Gauss-Hermite node count.
pub const DEFAULT_NODES: usize = 128;
/// Largest power `j` used in the `min_j ie(sigma^j)` cross-check.
pub const GE_POWER_CAP: u32 = 4;

/// `ln(i!)`.
pub fn ln_factorial(i: usize) -> f64 {
    (2..=i).map(|k| (k as f64).ln()).sum()
}

/// `i!` in floating point; exact products up to 20, log-gamma route beyond.
pub fn factorial(i: usize) -> f64 {
    if i <= 20 {
        (1..=i as u64).product::<u64>() as f64
    } else {
        ln_factorial(i).exp()
    }
}

/// `He_i(z)` by the three-term recurrence.
pub fn hermite_eval(i: usize, z: f64) -> Result<f64> {
    if i > MAX_DEGREE {
        return Err(Error::invalid(format!(
            "Hermite degree {i} exceeds the cap {MAX_DEGREE}"
        )));
    }
    Ok(*hermite_all(i, z).last().unwrap())
}

/// `[He_0(z), ..., He_n(z)]`.
pub fn hermite_all(n: usize, z: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(z);
    }
    for k in 1..n {
        let next = z * out[k] - k as f64 * out[k - 1];
        out.push(next);
    }
    out
}

/// Coefficient of `He_{n-2k}` in `z^n` (unsigned): `n! / (k! (n-2k)! 2^k)`.
fn pairing_coeff(n: usize, k: usize) -> f64 {
    if n <= 20 {
        factorial(n) / (factorial(k) * factorial(n - 2 * k) * 2f64.powi(k as i32))
    } else {
        (ln_factorial(n)
            - ln_factorial(k)
            - ln_factorial(n - 2 * k)
            - k as f64 * std::f64::consts::LN_2)
            .exp()
    }
}

/// Monomial coefficients (index = power) to plain Hermite coefficients
/// `f = sum_i h_i He_i`. Zero entries are omitted from the map.
pub fn monomial_to_hermite(poly: &[f64]) -> Result<BTreeMap<usize, f64>> {
    if poly.len() > MAX_DEGREE + 1 {
        return Err(Error::invalid(format!(
            "polynomial degree {} exceeds the cap {MAX_DEGREE}",
            poly.len() - 1
        )));
    }
    let mut h = vec![0.0; poly.len()];
    for (n, &p) in poly.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for k in 0..=n / 2 {
            h[n - 2 * k] += p * pairing_coeff(n, k);
        }
    }
    Ok(h.into_iter()
        .enumerate()
        .filter(|(_, v)| *v != 0.0)
        .collect())
}

/// Plain Hermite coefficients to monomial coefficients (index = power).
pub fn hermite_to_monomial(h: &BTreeMap<usize, f64>) -> Result<Vec<f64>> {
    let deg = h.keys().next_back().copied().unwrap_or(0);
    if deg > MAX_DEGREE {
        return Err(Error::invalid(format!(
            "Hermite degree {deg} exceeds the cap {MAX_DEGREE}"
        )));
    }
    let mut poly = vec![0.0; deg + 1];
    for (&n, &c) in h {
        for k in 0..=n / 2 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            poly[n - 2 * k] += sign * c * pairing_coeff(n, k);
        }
    }
    Ok(poly)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Polynomial link `sigma(z) = sum_{i=Q}^{P} c_i / i! He_i(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFunction {
    coeffs: BTreeMap<usize, f64>,
}

/// Degree, information exponent and general exponent of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentReport {
    pub degree: usize,
    pub ie: usize,
    pub ge: usize,
}

impl LinkFunction {
    /// Builds a link from raw `c_i`, checking the bound [`DEFAULT_COEFF_BOUND`].
    pub fn new(coeffs: BTreeMap<usize, f64>) -> Result<Self> {
        Self::with_bound(coeffs, DEFAULT_COEFF_BOUND)
    }

    pub fn with_bound(coeffs: BTreeMap<usize, f64>, bound: f64) -> Result<Self> {
        let coeffs: BTreeMap<usize, f64> =
            coeffs.into_iter().filter(|(_, c)| *c != 0.0).collect();
        let (Some(&q), Some(&p)) = (coeffs.keys().next(), coeffs.keys().next_back()) else {
            return Err(Error::invalid("link function has all-zero coefficients"));
        };
        if q < 1 {
            return Err(Error::invalid("link functions start at degree Q >= 1"));
        }
        if p > MAX_LINK_DEGREE {
            return Err(Error::invalid(format!(
                "link degree {p} exceeds the cap {MAX_LINK_DEGREE}"
            )));
        }
        if let Some((i, c)) = coeffs.iter().find(|(_, c)| !c.is_finite()) {
            return Err(Error::invalid(format!("coefficient c_{i} = {c} is not finite")));
        }
        let norm2: f64 = coeffs.values().map(|c| c * c).sum();
        if norm2 > bound {
            return Err(Error::invalid(format!(
                "sum of squared coefficients {norm2} exceeds bound {bound}"
            )));
        }
        Ok(Self { coeffs })
    }

    /// Convenience constructor from `(degree, c_i)` pairs.
    pub fn from_pairs(pairs: &[(usize, f64)]) -> Result<Self> {
        Self::new(pairs.iter().copied().collect())
    }

    pub fn coeffs(&self) -> &BTreeMap<usize, f64> {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        *self.coeffs.keys().next_back().unwrap()
    }

    pub fn eval(&self, z: f64) -> f64 {
        let he = hermite_all(self.degree(), z);
        self.coeffs
            .iter()
            .map(|(&i, &c)| c / factorial(i) * he[i])
            .sum()
    }

    /// `sigma'(z)`, using `He_i' = i He_{i-1}`.
    pub fn derivative(&self, z: f64) -> f64 {
        let he = hermite_all(self.degree(), z);
        self.coeffs
            .iter()
            .map(|(&i, &c)| c / factorial(i) * i as f64 * he[i - 1])
            .sum()
    }

    /// Plain Hermite coefficients `h_i = c_i / i!`.
    pub fn plain_coeffs(&self) -> BTreeMap<usize, f64> {
        self.coeffs
            .iter()
            .map(|(&i, &c)| (i, c / factorial(i)))
            .collect()
    }

    /// Monomial coefficients, index = power.
    pub fn to_monomial(&self) -> Vec<f64> {
        hermite_to_monomial(&self.plain_coeffs()).expect("link degree is capped")
    }

    pub fn information_exponent(&self) -> Result<usize> {
        information_exponent_of(&self.coeffs)
    }

    /// 1 when the polynomial has an odd monomial, 2 when it is even.
    pub fn general_exponent(&self) -> usize {
        let poly = self.to_monomial();
        let scale = poly.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let odd = poly
            .iter()
            .enumerate()
            .skip(1)
            .any(|(k, c)| k % 2 == 1 && c.abs() > COEFF_TOL * scale.max(1.0));
        if odd {
            1
        } else {
            2
        }
    }

    /// `min_{1<=j<=GE_POWER_CAP} ie(sigma^j)`, each power re-expanded in the
    /// Hermite basis from its monomial form.
    pub fn general_exponent_bruteforce(&self) -> Result<usize> {
        let base = self.to_monomial();
        let mut power = base.clone();
        let mut best = usize::MAX;
        for j in 1..=GE_POWER_CAP {
            if j > 1 {
                power = poly_mul(&power, &base);
            }
            let plain = monomial_to_hermite(&power)?;
            let c: BTreeMap<usize, f64> = plain
                .into_iter()
                .map(|(i, h)| (i, h * factorial(i)))
                .collect();
            if let Ok(ie) = information_exponent_of(&c) {
                best = best.min(ie);
            }
        }
        if best == usize::MAX {
            return Err(Error::numeric("no power of the link has a non-constant term"));
        }
        Ok(best)
    }

    pub fn exponents(&self) -> Result<ExponentReport> {
        Ok(ExponentReport {
            degree: self.degree(),
            ie: self.information_exponent()?,
            ge: self.general_exponent(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LinkFile {
            convention: LINK_CONVENTION.to_string(),
            coeffs: self.coeffs.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LinkFile = serde_json::from_str(text)?;
        Self::new(file.coeffs)
    }
}

const LINK_CONVENTION: &str = "sigma(z) = sum_i coeffs[i] / i! * He_i(z); values are raw c_i";

#[derive(Serialize, Deserialize)]
struct LinkFile {
    #[serde(default)]
    convention: String,
    coeffs: BTreeMap<usize, f64>,
}

/// Smallest degree `i >= 1` whose coefficient exceeds [`COEFF_TOL`].
pub fn information_exponent_of(coeffs: &BTreeMap<usize, f64>) -> Result<usize> {
    coeffs
        .iter()
        .find(|(&i, c)| i >= 1 && c.abs() > COEFF_TOL)
        .map(|(&i, _)| i)
        .ok_or_else(|| Error::invalid("all non-constant coefficients are zero"))
}

/// Link clipped at the attention temperature:
/// `sigma(z)/rho` when `|sigma(z)/rho| <= clip`, else 0.
#[derive(Debug, Clone)]
pub struct ClippedLink {
    pub base: LinkFunction,
    pub rho: f64,
    pub clip: f64,
}

impl ClippedLink {
    /// Clip threshold `1 / ln(d)`.
    pub fn for_dimension(base: LinkFunction, rho: f64, d: usize) -> Self {
        Self {
            base,
            rho,
            clip: 1.0 / (d as f64).ln(),
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        let s = self.base.eval(z) / self.rho;
        if s.abs() <= self.clip {
            s
        } else {
            0.0
        }
    }
}

/// Gauss-Hermite rule for the standard normal weight (weights sum to 1).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes from the Jacobi matrix of the orthonormal probabilist's
    /// polynomials, polished by Newton steps; Christoffel weights.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("quadrature needs at least one node"));
        }
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64).sqrt();
            jac[(k - 1, k)] = off;
            jac[(k, k - 1)] = off;
        }
        let mut nodes: Vec<f64> = jac.symmetric_eigen().eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let orthonormal = |z: f64| -> Vec<f64> {
            let mut p = Vec::with_capacity(n + 1);
            p.push(1.0);
            p.push(z);
            for k in 1..n {
                let next = (z * p[k] - (k as f64).sqrt() * p[k - 1]) / ((k + 1) as f64).sqrt();
                p.push(next);
            }
            p
        };

        let mut weights = Vec::with_capacity(n);
        for z in nodes.iter_mut() {
            for _ in 0..3 {
                let p = orthonormal(*z);
                let dp = (n as f64).sqrt() * p[n - 1];
                if dp == 0.0 {
                    break;
                }
                *z -= p[n] / dp;
            }
            let p = orthonormal(*z);
            let s: f64 = p[..n].iter().map(|v| v * v).sum();
            weights.push(1.0 / s);
        }
        Ok(Self { nodes, weights })
    }

    /// `E[f(Z)]` for `Z ~ N(0, 1)`.
    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// `c_i = E[f(Z) He_i(Z)]` for `i = 0..=max_degree`, so that
/// `f = sum_i c_i / i! He_i` on the span of the first `max_degree` polynomials.
pub fn quadrature_expand(
    f: impl Fn(f64) -> f64,
    max_degree: usize,
    nodes: usize,
) -> Result<BTreeMap<usize, f64>> {
    if max_degree > MAX_DEGREE {
        return Err(Error::invalid(format!(
            "expansion degree {max_degree} exceeds the cap {MAX_DEGREE}"
        )));
    }
    if nodes < 4 * max_degree.max(1) {
        return Err(Error::invalid(format!(
            "{nodes} nodes are insufficient for degree {max_degree}; need at least {}",
            4 * max_degree.max(1)
        )));
    }
    let rule = GaussHermite::new(nodes)?;
    let mut out = vec![0.0; max_degree + 1];
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let fz = f(z);
        for (acc, he) in out.iter_mut().zip(hermite_all(max_degree, z)) {
            *acc += w * fz * he;
        }
    }
    Ok(out.into_iter().enumerate().collect())
}
