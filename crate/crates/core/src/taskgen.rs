//! Subspaces, feature vectors, link functions and labelled prompts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermite::{factorial, LinkFunction, DEFAULT_COEFF_BOUND, MAX_LINK_DEGREE};
use crate::rng::Rng;

pub fn gaussian_vector(d: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal basis `U` (d x r) of an r-dimensional subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Orthonormalizes the columns of `m` (modified Gram-Schmidt, two passes).
    pub fn from_columns(m: DMatrix<f64>) -> Result<Self> {
        let (d, r) = m.shape();
        if r == 0 || r > d {
            return Err(Error::invalid(format!("need 1 <= r <= d, got d={d}, r={r}")));
        }
        let mut q = m;
        for j in 0..r {
            for _pass in 0..2 {
                for k in 0..j {
                    let proj = q.column(k).dot(&q.column(j));
                    let qk = q.column(k).clone_owned();
                    q.column_mut(j).axpy(-proj, &qk, 1.0);
                }
            }
            let norm = q.column(j).norm();
            if norm < 1e-12 {
                return Err(Error::numeric("columns are linearly dependent"));
            }
            q.column_mut(j).unscale_mut(norm);
        }
        Ok(Self { basis: q })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `P = U U^T`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// `P v` without forming `P`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }

    /// `|| v - P v ||`.
    pub fn residual_norm(&self, v: &DVector<f64>) -> f64 {
        (v - self.project(v)).norm()
    }
}

/// Rotation-invariant random subspace: orthonormalized d x r Gaussian matrix.
pub fn sample_subspace(d: usize, r: usize, rng: &mut Rng) -> Result<Subspace> {
    if r == 0 || r > d {
        return Err(Error::invalid(format!("need 1 <= r <= d, got d={d}, r={r}")));
    }
    Subspace::from_columns(gaussian_matrix(d, r, rng))
}

/// `U g / ||g||` with `g ~ N(0, I_r)`: uniform on the unit sphere of the subspace.
pub fn sample_feature(sub: &Subspace, rng: &mut Rng) -> DVector<f64> {
    loop {
        let g = gaussian_vector(sub.dim(), rng);
        let n = g.norm();
        if n > 0.0 {
            return sub.basis() * (g / n);
        }
    }
}

pub fn subspace_projector(sub: &Subspace) -> DMatrix<f64> {
    sub.projector()
}

/// Distribution of one Hermite coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoeffDist {
    Constant(f64),
    Uniform(f64, f64),
}

impl CoeffDist {
    pub fn mean(&self) -> f64 {
        match *self {
            CoeffDist::Constant(c) => c,
            CoeffDist::Uniform(a, b) => 0.5 * (a + b),
        }
    }

    fn max_abs(&self) -> f64 {
        match *self {
            CoeffDist::Constant(c) => c.abs(),
            CoeffDist::Uniform(a, b) => a.abs().max(b.abs()),
        }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            CoeffDist::Constant(c) => c,
            CoeffDist::Uniform(a, b) => a + (b - a) * rng.random::<f64>(),
        }
    }
}

/// How drawn values map onto the stored `c_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoeffBasis {
    /// The drawn value is `c_i` itself (term `c_i / i! He_i`).
    Factorial,
    /// The drawn value `w` multiplies the unit-variance polynomial
    /// `He_i / sqrt(i!)`, i.e. `c_i = w sqrt(i!)`.
    Orthonormal,
}

impl CoeffBasis {
    fn to_raw(self, degree: usize, w: f64) -> f64 {
        match self {
            CoeffBasis::Factorial => w,
            CoeffBasis::Orthonormal => w * factorial(degree).sqrt(),
        }
    }
}

impl FromStr for CoeffBasis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "factorial" | "raw" => Ok(CoeffBasis::Factorial),
            "orthonormal" => Ok(CoeffBasis::Orthonormal),
            other => Err(Error::config(format!(
                "unknown coefficient basis `{other}` (expected factorial | orthonormal)"
            ))),
        }
    }
}

/// Per-degree coefficient distributions for random link functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    terms: BTreeMap<usize, CoeffDist>,
    basis: CoeffBasis,
    bound: f64,
}

impl LinkSpec {
    pub fn new(terms: BTreeMap<usize, CoeffDist>, basis: CoeffBasis, bound: f64) -> Result<Self> {
        let Some((&q, lead)) = terms.iter().next() else {
            return Err(Error::config("link spec has no terms"));
        };
        if q < 1 {
            return Err(Error::config("link spec degrees start at 1"));
        }
        if let Some(&p) = terms.keys().next_back() {
            if p > MAX_LINK_DEGREE {
                return Err(Error::config(format!("link spec degree {p} exceeds {MAX_LINK_DEGREE}")));
            }
        }
        if lead.mean() == 0.0 {
            return Err(Error::config(format!(
                "the lowest-degree coefficient (degree {q}) must have nonzero mean"
            )));
        }
        for (i, d) in &terms {
            if let CoeffDist::Uniform(a, b) = d {
                if !(a < b) {
                    return Err(Error::config(format!("degree {i}: uniform({a}, {b}) is empty")));
                }
            }
        }
        let worst: f64 = terms
            .iter()
            .map(|(&i, d)| basis.to_raw(i, d.max_abs()).powi(2))
            .sum();
        if worst > bound {
            return Err(Error::config(format!(
                "link spec can draw sum c_i^2 = {worst} above the bound {bound}"
            )));
        }
        Ok(Self { terms, basis, bound })
    }

    pub fn terms(&self) -> &BTreeMap<usize, CoeffDist> {
        &self.terms
    }

    pub fn basis(&self) -> CoeffBasis {
        self.basis
    }

    /// `He_3/sqrt(3!) + c He_4/sqrt(4!)` with `c ~ U(-0.5, 0.5)`.
    pub fn mixed_cubic_quartic() -> Self {
        "3:const:1, 4:uniform:-0.5:0.5".parse::<Self>().unwrap().with_basis(CoeffBasis::Orthonormal)
    }

    /// Same family with the cubic weight drawn from `U(0.5, 1.5)`.
    pub fn shifted_cubic_quartic() -> Self {
        "3:uniform:0.5:1.5, 4:uniform:-0.5:0.5".parse::<Self>().unwrap().with_basis(CoeffBasis::Orthonormal)
    }

    pub fn with_basis(self, basis: CoeffBasis) -> Self {
        Self::new(self.terms, basis, self.bound).expect("re-validated spec")
    }

    pub fn with_bound(self, bound: f64) -> Result<Self> {
        Self::new(self.terms, self.basis, bound)
    }
}

/// Grammar: comma-separated `degree:const:value` or `degree:uniform:lo:hi`.
impl FromStr for LinkSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut terms = BTreeMap::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let parts: Vec<&str> = item.split(':').map(str::trim).collect();
            let bad = || Error::config(format!("malformed link term `{item}`"));
            let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
            let degree: usize = parts.first().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let dist = match parts.as_slice() {
                [_, "const", v] | [_, "constant", v] => CoeffDist::Constant(num(v)?),
                [_, "uniform", a, b] => CoeffDist::Uniform(num(a)?, num(b)?),
                _ => return Err(bad()),
            };
            if terms.insert(degree, dist).is_some() {
                return Err(Error::config(format!("degree {degree} listed twice")));
            }
        }
        Self::new(terms, CoeffBasis::Factorial, DEFAULT_COEFF_BOUND)
    }
}

impl fmt::Display for LinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|(i, d)| match d {
                CoeffDist::Constant(c) => format!("{i}:const:{c}"),
                CoeffDist::Uniform(a, b) => format!("{i}:uniform:{a}:{b}"),
            })
            .collect();
        write!(f, "{}", parts.join(", "))
    }
}

/// Draws a link from the spec, redrawing the (probability-zero) all-zero case.
pub fn sample_link(spec: &LinkSpec, rng: &mut Rng) -> Result<LinkFunction> {
    for _ in 0..1000 {
        let coeffs: BTreeMap<usize, f64> = spec
            .terms
            .iter()
            .map(|(&i, d)| (i, spec.basis.to_raw(i, d.draw(rng))))
            .collect();
        if coeffs.values().any(|c| *c != 0.0) {
            return LinkFunction::with_bound(coeffs, spec.bound);
        }
    }
    Err(Error::numeric("link spec keeps drawing all-zero coefficients"))
}

/// One single-index task.
#[derive(Debug, Clone)]
pub struct Task {
    pub beta: DVector<f64>,
    pub link: LinkFunction,
    pub tau: f64,
}

impl Task {
    pub fn new(beta: DVector<f64>, link: LinkFunction, tau: f64) -> Result<Self> {
        if !(tau >= 0.0) {
            return Err(Error::invalid("noise level must be >= 0"));
        }
        if (beta.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("feature vector must have unit norm"));
        }
        Ok(Self { beta, link, tau })
    }

    pub fn sample(sub: &Subspace, spec: &LinkSpec, tau: f64, rng: &mut Rng) -> Result<Self> {
        let beta = sample_feature(sub, rng);
        let link = sample_link(spec, rng)?;
        Self::new(beta, link, tau)
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Noise-free target `sigma(<beta, x>)`.
    pub fn clean(&self, x: &DVector<f64>) -> f64 {
        self.link.eval(self.beta.dot(x))
    }

    fn noise(&self, rng: &mut Rng) -> f64 {
        if rng.random::<bool>() {
            self.tau
        } else {
            -self.tau
        }
    }

    /// Fresh `(x, y)` with `x ~ N(0, I_d)` and two-point noise.
    pub fn draw(&self, rng: &mut Rng) -> (DVector<f64>, f64) {
        let x = gaussian_vector(self.dim(), rng);
        let y = self.clean(&x) + self.noise(rng);
        (x, y)
    }
}

/// Labelled prompt whose contexts are split into four consecutive groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    /// d x N, one context input per column.
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub query_x: DVector<f64>,
    pub query_y: f64,
    pub sizes: [usize; 4],
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    fn offset(&self, group: usize) -> usize {
        self.sizes[..group].iter().sum()
    }

    /// Inputs and labels of group `g` (0-based).
    pub fn group(&self, g: usize) -> (DMatrix<f64>, DVector<f64>) {
        let start = self.offset(g);
        let n = self.sizes[g];
        (
            self.xs.columns(start, n).clone_owned(),
            self.ys.rows(start, n).clone_owned(),
        )
    }

    /// Concatenation of groups `g0..=g1`.
    pub fn groups(&self, g0: usize, g1: usize) -> (DMatrix<f64>, DVector<f64>) {
        let start = self.offset(g0);
        let n: usize = self.sizes[g0..=g1].iter().sum();
        (
            self.xs.columns(start, n).clone_owned(),
            self.ys.rows(start, n).clone_owned(),
        )
    }
}

/// I.i.d. Gaussian contexts labelled by the task, plus a query.
pub fn sample_prompt(task: &Task, sizes: [usize; 4], rng: &mut Rng) -> Prompt {
    let n: usize = sizes.iter().sum();
    let d = task.dim();
    let mut xs = DMatrix::zeros(d, n);
    let mut ys = DVector::zeros(n);
    for i in 0..n {
        let (x, y) = task.draw(rng);
        xs.set_column(i, &x);
        ys[i] = y;
    }
    let (query_x, query_y) = task.draw(rng);
    Prompt {
        xs,
        ys,
        query_x,
        query_y,
        sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn full_rank_subspace_is_orthogonal() {
        let mut rng = stream(1, &[0]);
        let s = sample_subspace(3, 3, &mut rng).unwrap();
        let gram = s.basis().transpose() * s.basis();
        assert!((gram - DMatrix::identity(3, 3)).norm() < 1e-10);
        assert!((s.projector() - DMatrix::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn subspace_orthonormal_and_errors() {
        let mut rng = stream(2, &[0]);
        let s = sample_subspace(8, 2, &mut rng).unwrap();
        let gram = s.basis().transpose() * s.basis();
        assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-10);
        assert!(sample_subspace(3, 4, &mut rng).is_err());
        assert!(sample_subspace(3, 0, &mut rng).is_err());
    }

    #[test]
    fn projector_axioms() {
        let mut rng = stream(3, &[0]);
        let s = sample_subspace(10, 4, &mut rng).unwrap();
        let p = subspace_projector(&s);
        assert!((&p * &p - &p).norm() < 1e-10);
        assert!((&p - p.transpose()).norm() < 1e-12);
        assert!((p.trace() - 4.0).abs() < 1e-10);
    }

    #[test]
    fn rank_one_feature_is_the_basis_column() {
        let mut rng = stream(4, &[0]);
        let s = sample_subspace(5, 1, &mut rng).unwrap();
        for _ in 0..5 {
            let b = sample_feature(&s, &mut rng);
            let col = s.basis().column(0).clone_owned();
            assert!((&b - &col).norm() < 1e-12 || (&b + &col).norm() < 1e-12);
        }
    }

    #[test]
    fn features_are_unit_and_in_span() {
        let mut rng = stream(5, &[0]);
        let s = sample_subspace(12, 3, &mut rng).unwrap();
        for _ in 0..50 {
            let b = sample_feature(&s, &mut rng);
            assert!((b.norm() - 1.0).abs() < 1e-10);
            assert!(s.residual_norm(&b) < 1e-10);
        }
    }

    #[test]
    fn link_spec_parsing_and_validation() {
        let spec: LinkSpec = "3:const:1, 4:uniform:-0.5:0.5".parse().unwrap();
        assert_eq!(spec.terms().len(), 2);
        assert!("3:uniform:-1:1".parse::<LinkSpec>().is_err());
        assert!("3:gamma:1".parse::<LinkSpec>().is_err());
        assert!("1:const:1, 1:const:2".parse::<LinkSpec>().is_err());
        assert!("1:const:20".parse::<LinkSpec>().is_err());
        assert_eq!(spec.to_string().parse::<LinkSpec>().unwrap(), spec);
    }

    #[test]
    fn mixed_family_uses_orthonormal_weights() {
        let mut rng = stream(6, &[0]);
        let link = sample_link(&LinkSpec::mixed_cubic_quartic(), &mut rng).unwrap();
        assert!((link.coeffs()[&3] - 6f64.sqrt()).abs() < 1e-12);
        let w4 = link.coeffs()[&4] / 24f64.sqrt();
        assert!((-0.5..=0.5).contains(&w4));
        let shifted = sample_link(&LinkSpec::shifted_cubic_quartic(), &mut rng).unwrap();
        let w3 = shifted.coeffs()[&3] / 6f64.sqrt();
        assert!((0.5..=1.5).contains(&w3));
        let id = sample_link(&"1:const:1".parse().unwrap(), &mut rng).unwrap();
        assert_eq!(id.eval(0.7), 0.7);
    }

    #[test]
    fn noiseless_labels_are_exact() {
        let mut rng = stream(7, &[0]);
        let s = sample_subspace(6, 2, &mut rng).unwrap();
        let task = Task::sample(&s, &"1:const:1, 2:const:1".parse().unwrap(), 0.0, &mut rng).unwrap();
        let p = sample_prompt(&task, [3, 2, 4, 1], &mut rng);
        assert_eq!(p.len(), 10);
        for i in 0..p.len() {
            let x = p.xs.column(i).clone_owned();
            assert_eq!(p.ys[i], task.clean(&x));
        }
    }

    #[test]
    fn two_point_noise_magnitude() {
        let mut rng = stream(8, &[0]);
        let s = sample_subspace(6, 2, &mut rng).unwrap();
        let task = Task::sample(&s, &"1:const:1".parse().unwrap(), 0.1, &mut rng).unwrap();
        let p = sample_prompt(&task, [50, 0, 0, 0], &mut rng);
        for i in 0..p.len() {
            let x = p.xs.column(i).clone_owned();
            assert!(((p.ys[i] - task.clean(&x)).abs() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn groups_partition_contexts() {
        let mut rng = stream(9, &[0]);
        let s = sample_subspace(4, 4, &mut rng).unwrap();
        let task = Task::sample(&s, &"1:const:1".parse().unwrap(), 0.1, &mut rng).unwrap();
        let p = sample_prompt(&task, [2, 3, 0, 4], &mut rng);
        let (x1, y1) = p.group(1);
        assert_eq!(x1.ncols(), 3);
        assert_eq!(y1[0], p.ys[2]);
        assert_eq!(p.group(2).0.ncols(), 0);
        let (_, y3) = p.group(3);
        assert_eq!(y3[3], p.ys[8]);
    }

    #[test]
    fn prompts_are_deterministic() {
        let make = || {
            let mut rng = stream(10, &[1, 2]);
            let s = sample_subspace(5, 2, &mut rng).unwrap();
            let task = Task::sample(&s, &LinkSpec::mixed_cubic_quartic(), 0.1, &mut rng).unwrap();
            sample_prompt(&task, [4, 4, 4, 4], &mut rng)
        };
        assert_eq!(make(), make());
    }
}
