//! Oracle-backed self-checks: Hermite algebra, gradients, Stein's identity and
//! the Stage III solver.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hermite::{factorial, hermite_all, GaussHermite, hermite_eval, hermite_to_monomial, monomial_to_hermite, LinkFunction};
use crate::model::{
    f_ic, fmt_f64, grad_gamma_pretrain_loss, grad_u_fic, AttentionContext, AttentionParams, LoraState, MlpParams,
};
use crate::oracles::{compare_gradients, finite_diff_grad, ridge_gd_oracle, stein_check, Welford, DEFAULT_FD_STEP};
use crate::rng::{stream, tag, Rng};
use crate::taskgen::{gaussian_matrix, gaussian_vector, sample_feature, sample_subspace};
use crate::training::{relu_features, ridge_objective, ridge_solve, sample_biases, sample_signs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Hermite,
    Gradients,
    Stein,
    Ridge,
    All,
}

impl Suite {
    fn parts(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Hermite, Suite::Gradients, Suite::Stein, Suite::Ridge],
            s => vec![s],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Hermite => "hermite",
            Suite::Gradients => "gradients",
            Suite::Stein => "stein",
            Suite::Ridge => "ridge",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hermite" => Ok(Suite::Hermite),
            "gradients" => Ok(Suite::Gradients),
            "stein" => Ok(Suite::Stein),
            "ridge" => Ok(Suite::Ridge),
            "all" => Ok(Suite::All),
            other => Err(Error::config(format!(
                "unknown suite `{other}` (expected hermite | gradients | stein | ridge | all)"
            ))),
        }
    }
}

/// One measured quantity against its tolerance (`measured <= tolerance` passes).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (k, part) in suite.parts().into_iter().enumerate() {
        let mut rng = stream(seed, &[tag::VERIFY, k as u64]);
        out.extend(match part {
            Suite::Hermite => {
                let mut v = hermite_orthogonality(200_000, &mut rng)?;
                v.extend(hermite_recurrence()?);
                v.push(basis_round_trip(200, &mut rng)?);
                v.extend(exponent_corpus(100, &mut rng)?);
                v
            }
            Suite::Gradients => {
                let mut v = grad_u_checks(20, &mut rng)?;
                v.extend(grad_gamma_checks(20, &mut rng)?);
                v
            }
            Suite::Stein => stein_checks(&mut rng)?,
            Suite::Ridge => ridge_checks(20, &mut rng)?,
            Suite::All => unreachable!(),
        });
    }
    Ok(out)
}

/// `|mean(He_i He_j) - 1{i=j} i!|` in standard errors `sd(He_i He_j)/sqrt(m)`, for `i, j <= 6`.
pub fn hermite_orthogonality(m: usize, rng: &mut Rng) -> Result<Vec<Check>> {
    const K: usize = 7;
    let mut acc = Welford::new(K * K);
    let mut prod = DVector::zeros(K * K);
    for _ in 0..m {
        let z = gaussian_vector(1, rng)[0];
        let h = hermite_all(K - 1, z);
        for i in 0..K {
            for j in 0..K {
                prod[i * K + j] = h[i] * h[j];
            }
        }
        acc.push(&prod);
    }
    // exact sd of He_i He_j; the sample sd of these heavy-tailed products is badly biased low
    let gh = GaussHermite::new(20)?;
    let mut out = Vec::new();
    for i in 0..K {
        for j in i..K {
            let target = if i == j { factorial(i) } else { 0.0 };
            let second = gh.expectation(|z| {
                let h = hermite_all(K - 1, z);
                (h[i] * h[j]).powi(2)
            });
            let se = ((second - target * target) / m as f64).sqrt();
            let z = (acc.mean()[i * K + j] - target).abs() / se.max(f64::MIN_POSITIVE);
            out.push(Check::new("hermite", format!("orthogonality He{i}*He{j} (stderr units)"), z, 5.0));
        }
    }
    Ok(out)
}

/// `He_{n+1} = z He_n - n He_{n-1}` and agreement with the explicit sum formula.
pub fn hermite_recurrence() -> Result<Vec<Check>> {
    let mut rec: f64 = 0.0;
    let mut explicit: f64 = 0.0;
    for k in 0..=40 {
        let z = -5.0 + 0.25 * k as f64;
        let h = hermite_all(21, z);
        for n in 1..21 {
            let lhs = h[n + 1];
            let rhs = z * h[n] - n as f64 * h[n - 1];
            rec = rec.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
        for n in 0..=20 {
            let mut s = 0.0;
            for j in 0..=n / 2 {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                s += sign * z.powi((n - 2 * j) as i32) / (factorial(j) * factorial(n - 2 * j) * 2f64.powi(j as i32));
            }
            s *= factorial(n);
            let direct = hermite_eval(n, z)?;
            explicit = explicit.max((direct - s).abs() / s.abs().max(1.0));
        }
    }
    Ok(vec![
        Check::new("hermite", "three-term recurrence (relative)", rec, 1e-10),
        Check::new("hermite", "explicit sum formula (relative)", explicit, 1e-9),
    ])
}

/// Monomial -> Hermite -> monomial on random polynomials of degree < 12.
pub fn basis_round_trip(cases: usize, rng: &mut Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let deg = rng.random_range(0..12);
        let poly: Vec<f64> = (0..=deg).map(|_| rng.random_range(-2.0..2.0)).collect();
        let back = hermite_to_monomial(&monomial_to_hermite(&poly)?)?;
        let scale = poly.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        for (k, c) in poly.iter().enumerate() {
            worst = worst.max((back.get(k).copied().unwrap_or(0.0) - c).abs() / scale);
        }
        for extra in back.iter().skip(poly.len()) {
            worst = worst.max(extra.abs() / scale);
        }
    }
    Ok(Check::new("hermite", "basis round trip (relative)", worst, 1e-10))
}

/// Random links; general exponent against the power brute force, and `ge <= ie <= deg`.
pub fn exponent_corpus(cases: usize, rng: &mut Rng) -> Result<Vec<Check>> {
    let mut disagree = 0usize;
    let mut order = 0usize;
    for k in 0..cases {
        let deg = rng.random_range(1..=6usize);
        let even_only = k % 3 == 0;
        let mut coeffs = BTreeMap::new();
        for i in 1..=deg {
            if even_only && i % 2 == 1 {
                continue;
            }
            if i == deg || rng.random::<f64>() < 0.6 {
                let c: f64 = rng.random_range(0.2..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                coeffs.insert(i, c);
            }
        }
        if coeffs.is_empty() {
            coeffs.insert(2, 1.0);
        }
        let link = LinkFunction::new(coeffs)?;
        let rep = link.exponents()?;
        if link.general_exponent_bruteforce()? != rep.ge {
            disagree += 1;
        }
        if !(rep.ge <= rep.ie && rep.ie <= rep.degree) {
            order += 1;
        }
    }
    Ok(vec![
        Check::new("hermite", format!("general exponent vs brute force ({cases} links, mismatches)"), disagree as f64, 0.0),
        Check::new("hermite", format!("ge <= ie <= degree ({cases} links, violations)"), order as f64, 0.0),
    ])
}

fn random_head(m: usize, rng: &mut Rng) -> Result<MlpParams> {
    MlpParams::new(gaussian_vector(m, rng), sample_signs(m, rng), gaussian_vector(m, rng) * 0.5)
}

/// Analytic `grad_u f_ic` against central differences at `d=8, N=16, m=8`.
pub fn grad_u_checks(instances: usize, rng: &mut Rng) -> Result<Vec<Check>> {
    let (d, n, m) = (8, 16, 8);
    let mut out = Vec::new();
    for k in 0..instances {
        let att = AttentionParams::new(gaussian_matrix(d, d, rng) / d as f64, 1.0)?;
        let mlp = random_head(m, rng)?;
        let ctx = AttentionContext::new(gaussian_matrix(d, n, rng), gaussian_vector(n, rng))?;
        let x = gaussian_vector(d, rng);
        let u = gaussian_vector(d, rng) / (d as f64).sqrt();
        let analytic = grad_u_fic(&att, &LoraState { u: u.clone() }, &mlp, &ctx, &x)?;
        let numeric = finite_diff_grad(
            |p| f_ic(&att, Some(&LoraState { u: p.clone() }), &mlp, &ctx, &x),
            &u,
            DEFAULT_FD_STEP,
        )?;
        let rep = compare_gradients(&analytic, &numeric, DEFAULT_FD_STEP);
        out.push(Check::new("gradients", format!("grad_u instance {k}"), rep.max_rel_error, 1e-5));
    }
    Ok(out)
}

/// Analytic `grad_Gamma` of the regularized prompt loss at `d=6, N=8, m=4`.
pub fn grad_gamma_checks(instances: usize, rng: &mut Rng) -> Result<Vec<Check>> {
    let (d, n, m) = (6, 8, 4);
    let lambda = 0.1;
    let mut out = Vec::new();
    for k in 0..instances {
        let gamma = gaussian_matrix(d, d, rng) / d as f64;
        let mlp = random_head(m, rng)?;
        let ctx = AttentionContext::new(gaussian_matrix(d, n, rng), gaussian_vector(n, rng))?;
        let x = gaussian_vector(d, rng);
        let y = gaussian_vector(1, rng)[0];
        let att = AttentionParams::new(gamma.clone(), 1.0)?;
        let analytic = grad_gamma_pretrain_loss(&att, &mlp, &ctx, &x, y, lambda)?;
        let flat = DVector::from_column_slice(gamma.as_slice());
        let numeric = finite_diff_grad(
            |p| {
                let g = DMatrix::from_column_slice(d, d, p.as_slice());
                let a = AttentionParams::new(g.clone(), 1.0)?;
                let f = f_ic(&a, None, &mlp, &ctx, &x)?;
                Ok((f - y).powi(2) + lambda * g.norm_squared())
            },
            &flat,
            DEFAULT_FD_STEP,
        )?;
        let rep = compare_gradients(&DVector::from_column_slice(analytic.as_slice()), &numeric, DEFAULT_FD_STEP);
        out.push(Check::new("gradients", format!("grad_gamma instance {k}"), rep.max_rel_error, 1e-5));
    }
    Ok(out)
}

/// `E[s(<b,x>) x] = E[s'(<b,x>)] b` in standard errors for a few links.
pub fn stein_checks(rng: &mut Rng) -> Result<Vec<Check>> {
    let links: [(&str, &[(usize, f64)]); 4] = [
        ("He1", &[(1, 1.0)]),
        ("He1+He2", &[(1, 1.0), (2, 1.0)]),
        ("He3", &[(3, 1.0)]),
        ("He2+He4", &[(2, 1.0), (4, 0.5)]),
    ];
    let sub = sample_subspace(6, 3, rng)?;
    let mut out = Vec::new();
    for (name, pairs) in links {
        let link = LinkFunction::from_pairs(pairs)?;
        let beta = sample_feature(&sub, rng);
        let rep = stein_check(&link, &beta, 100_000, rng)?;
        out.push(Check::new("stein", format!("Stein identity {name} (stderr units)"), rep.max_z, 5.0));
    }
    Ok(out)
}

/// Closed-form Stage III ridge against gradient descent at `m=8, N4=64`.
pub fn ridge_checks(instances: usize, rng: &mut Rng) -> Result<Vec<Check>> {
    let (d, m, n, lambda) = (4, 8, 64, 1e-3);
    let mut out = Vec::new();
    for k in 0..instances {
        let xs = gaussian_matrix(d, n, rng);
        let u = gaussian_vector(d, rng).normalize();
        let v = sample_signs(m, rng);
        let b = sample_biases(m, d, rng);
        let link = LinkFunction::from_pairs(&[(1, 1.0), (2, 0.5)])?;
        let ys = xs.tr_mul(&u).map(|z| link.eval(z)) + gaussian_vector(n, rng) * 0.1;
        let phi = relu_features(&u, &v, &b, &xs);
        let (a, kkt) = ridge_solve(&phi, &ys, lambda)?;
        let gd = ridge_gd_oracle(&phi, &ys, lambda, 1.0, 5_000_000)?;
        out.push(Check::new("ridge", format!("closed form vs descent instance {k} (inf-norm)"), (gd.a - &a).amax(), 1e-6));
        out.push(Check::new("ridge", format!("KKT residual instance {k} (relative)"), kkt, 1e-8));
        let obj = ridge_objective(&phi, &ys, &a, lambda);
        let zero = ridge_objective(&phi, &ys, &DVector::zeros(m), lambda);
        out.push(Check::new("ridge", format!("objective below a = 0 instance {k}"), obj - zero, 0.0));
    }
    Ok(out)
}

pub fn write_report(path: &Path, checks: &[Check]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["suite", "check", "measured", "tolerance", "passed"])?;
    for c in checks {
        w.write_record([
            c.suite.to_string(),
            c.name.clone(),
            fmt_f64(c.measured),
            fmt_f64(c.tolerance),
            c.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert_eq!("nope".parse::<Suite>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn small_suites_pass_and_repeat() {
        let mut rng = stream(3, &[0]);
        let a = ridge_checks(3, &mut rng).unwrap();
        assert!(all_passed(&a), "{a:?}");
        let g = grad_u_checks(3, &mut stream(4, &[0])).unwrap();
        assert!(all_passed(&g), "{g:?}");
        assert_eq!(g, grad_u_checks(3, &mut stream(4, &[0])).unwrap());
        let h = hermite_recurrence().unwrap();
        assert!(all_passed(&h), "{h:?}");
    }
}
