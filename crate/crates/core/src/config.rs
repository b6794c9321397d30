//! Text configuration: `key = value` lines, `[section]` headers, `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{CompareConfig, Scenario, Start, SweepMetric, DEFAULT_EVAL_SAMPLES};
use crate::taskgen::{CoeffBasis, LinkSpec};
use crate::training::{default_kappa_scale, default_n3, Group2Role, Hyper, PretrainConfig, Scaling, TttConfig};

const TOP: &str = "";

const KEYS: &[(&str, &[&str])] = &[
    (TOP, &["d", "r", "m", "rho", "kappa_scale"]),
    ("pretrain", &["eta", "lambda", "t", "n", "alpha"]),
    (
        "ttt",
        &[
            "n1",
            "n2",
            "n3",
            "n4",
            "n_new",
            "scaling",
            "c",
            "eps",
            "alpha1",
            "eta1",
            "lambda1",
            "alpha2",
            "eta2",
            "lambda2",
            "group2_role",
            "trajectory_stride",
        ],
    ),
    ("task", &["link", "basis", "coeff_bound", "tau"]),
    (
        "eval",
        &[
            "samples",
            "seeds",
            "start",
            "init_alignment",
            "tie_eps",
            "metric",
            "icl_tasks",
            "icl_queries",
            "icl_lambda",
            "pretrained",
        ],
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSection {
    pub samples: usize,
    pub seeds: usize,
    pub start: Start,
    pub metric: SweepMetric,
    pub tie_eps: bool,
    pub icl_tasks: usize,
    pub icl_queries: usize,
    pub icl_lambda: f64,
    pub pretrained: bool,
}

/// Fully resolved configuration; every default is filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub rho: f64,
    pub kappa_scale: f64,
    pub pretrain: PretrainConfig,
    pub ttt: TttConfig,
    pub link: LinkSpec,
    pub tau: f64,
    pub eval: EvalSection,
}

struct Raw {
    values: BTreeMap<(String, String), (String, usize)>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut section = TOP.to_string();
        let mut values = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {lineno}: malformed section header `{body}`")))?
                    .trim();
                if name.is_empty() || !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::config(format!("line {lineno}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {lineno}: expected `key = value`, got `{body}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let known = KEYS.iter().find(|(s, _)| *s == section).map(|(_, k)| *k).unwrap_or(&[]);
            if !known.contains(&k) {
                return Err(Error::config(format!("line {lineno}: unknown key `{}`", qualified(&section, k))));
            }
            if v.is_empty() {
                return Err(Error::config(format!("line {lineno}: key `{}` has no value", qualified(&section, k))));
            }
            if values
                .insert((section.clone(), k.to_string()), (v.to_string(), lineno))
                .is_some()
            {
                return Err(Error::config(format!("line {lineno}: key `{}` set twice", qualified(&section, k))));
            }
        }
        Ok(Self { values })
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.values.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("line {line}: cannot parse `{}` = `{v}`", qualified(section, key)))
            }),
        }
    }

    fn or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.get(section, key)?
            .ok_or_else(|| Error::config(format!("missing required key `{}`", qualified(section, key))))
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

struct Flag(bool);

impl FromStr for Flag {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        parse_bool(s).map(Flag).ok_or(())
    }
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        text.parse()
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            d: self.d,
            r: self.r,
            m: self.m,
            rho: self.rho,
            kappa_scale: self.kappa_scale,
            link: self.link.clone(),
            tau: self.tau,
            ttt: self.ttt.clone(),
            start: self.eval.start,
            eval_samples: self.eval.samples,
            tie_eps_to_n3: self.eval.tie_eps,
        }
    }

    /// This file supplies everything but the test-time link, which comes from `shifted`.
    pub fn compare(&self, shifted: &Config, force: bool) -> Result<CompareConfig> {
        if (shifted.d, shifted.r) != (self.d, self.r) {
            return Err(Error::config("the two compare configs disagree on d or r"));
        }
        Ok(CompareConfig {
            d: self.d,
            r: self.r,
            m: self.m,
            rho: self.rho,
            kappa_scale: self.kappa_scale,
            pretrain_link: self.link.clone(),
            test_link: shifted.link.clone(),
            tau: self.tau,
            ttt: self.ttt.clone(),
            pretrain: self.eval.pretrained.then(|| self.pretrain.clone()),
            force,
            icl_tasks: self.eval.icl_tasks,
            icl_queries: self.eval.icl_queries,
            icl_lambda: self.eval.icl_lambda,
            eval_samples: self.eval.samples,
        })
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let raw = Raw::parse(text)?;
        let d: usize = raw.require(TOP, "d")?;
        let r: usize = raw.or(TOP, "r", d)?;
        if d == 0 || r == 0 || r > d {
            return Err(Error::config(format!("need 1 <= r <= d, got d = {d}, r = {r}")));
        }
        let m: usize = raw.or(TOP, "m", 64)?;
        if m == 0 {
            return Err(Error::config("m must be >= 1"));
        }
        let rho: f64 = raw.or(TOP, "rho", 1.0)?;
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::config("rho must be positive"));
        }
        let kappa_scale: f64 = raw.or(TOP, "kappa_scale", default_kappa_scale(d))?;
        if !(kappa_scale > 0.0) || !kappa_scale.is_finite() {
            return Err(Error::config("kappa_scale must be positive"));
        }

        let pretrain = PretrainConfig {
            eta_pt: raw.or("pretrain", "eta", 1.0)?,
            lambda_pt: raw.or("pretrain", "lambda", 0.0)?,
            t_pt: raw.or("pretrain", "t", 1024)?,
            n_pt: raw.or("pretrain", "n", 1024)?,
            alpha_pt: raw.or("pretrain", "alpha", 1.0 / m as f64)?,
            rho,
            d,
            m,
        };
        pretrain.validate()?;

        let mode: String = raw.or("ttt", "scaling", "theorem-orders".to_string())?;
        let eps: f64 = raw.or("ttt", "eps", 0.05)?;
        let scaling = match mode.as_str() {
            "theorem-orders" => {
                for k in ["alpha1", "eta1", "lambda1", "alpha2", "eta2"] {
                    if raw.get::<String>("ttt", k)?.is_some() {
                        return Err(Error::config(format!("`ttt.{k}` is only used with scaling = explicit")));
                    }
                }
                Scaling::TheoremOrders {
                    c: raw.or("ttt", "c", 1.0)?,
                    eps,
                }
            }
            "explicit" => Scaling::Explicit(Hyper {
                alpha1: raw.require("ttt", "alpha1")?,
                eta1: raw.require("ttt", "eta1")?,
                lambda1: raw.require("ttt", "lambda1")?,
                alpha2: raw.require("ttt", "alpha2")?,
                eta2: raw.require("ttt", "eta2")?,
            }),
            other => {
                return Err(Error::config(format!(
                    "unknown ttt.scaling `{other}` (expected theorem-orders | explicit)"
                )))
            }
        };
        // validates c and eps up front
        scaling.resolve(r, 1, m)?;
        let n3 = match raw.get("ttt", "n3")? {
            Some(n) => n,
            None if eps > 0.0 && eps < 1.0 => default_n3(r, eps),
            None => return Err(Error::config("ttt.eps must lie in (0, 1) when ttt.n3 is omitted")),
        };
        let role: String = raw.or("ttt", "group2_role", "unused".to_string())?;
        let group2_role = match role.as_str() {
            "unused" => Group2Role::Unused,
            "stream-prefix" => Group2Role::StreamPrefix,
            other => {
                return Err(Error::config(format!(
                    "unknown ttt.group2_role `{other}` (expected unused | stream-prefix)"
                )))
            }
        };
        let ttt = TttConfig {
            sizes: [
                raw.or("ttt", "n1", 1024)?,
                raw.or("ttt", "n2", 0)?,
                n3,
                raw.or("ttt", "n4", 1024)?,
            ],
            n_new: raw.or("ttt", "n_new", 1024)?,
            scaling,
            lambda2: raw.or("ttt", "lambda2", 1e-3)?,
            group2_role,
            trajectory_stride: raw.or("ttt", "trajectory_stride", 1)?,
        };
        ttt.validate()?;

        let basis: CoeffBasis = raw.or("task", "basis", CoeffBasis::Factorial)?;
        let bound: f64 = raw.or("task", "coeff_bound", crate::hermite::DEFAULT_COEFF_BOUND)?;
        let link_text: String = raw.or("task", "link", "1:const:1, 2:const:1".to_string())?;
        let link = link_text.parse::<LinkSpec>()?.with_basis(basis).with_bound(bound)?;
        let tau: f64 = raw.or("task", "tau", 0.1)?;
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::config("task.tau must be >= 0"));
        }

        let start_text: String = raw.or("eval", "start", "pipeline".to_string())?;
        let start = match start_text.as_str() {
            "pipeline" => Start::Pipeline,
            "pinned" => Start::Pinned,
            "stage2" => {
                let a: f64 = raw.or("eval", "init_alignment", 0.3)?;
                if !(-1.0..=1.0).contains(&a) {
                    return Err(Error::config("eval.init_alignment must lie in [-1, 1]"));
                }
                Start::Stage2From(a)
            }
            other => {
                return Err(Error::config(format!(
                    "unknown eval.start `{other}` (expected pipeline | pinned | stage2)"
                )))
            }
        };
        let metric_text: String = raw.or("eval", "metric", "risk".to_string())?;
        let metric = match metric_text.as_str() {
            "risk" => SweepMetric::RiskExcess,
            "misalignment" => SweepMetric::Misalignment,
            other => {
                return Err(Error::config(format!(
                    "unknown eval.metric `{other}` (expected risk | misalignment)"
                )))
            }
        };
        let samples: usize = raw.or("eval", "samples", DEFAULT_EVAL_SAMPLES)?;
        if samples < crate::eval::MIN_RISK_SAMPLES {
            return Err(Error::config(format!(
                "eval.samples must be >= {}",
                crate::eval::MIN_RISK_SAMPLES
            )));
        }
        let eval = EvalSection {
            samples,
            seeds: raw.or("eval", "seeds", 10)?,
            start,
            metric,
            tie_eps: raw.or("eval", "tie_eps", Flag(false))?.0,
            icl_tasks: raw.or("eval", "icl_tasks", 256)?,
            icl_queries: raw.or("eval", "icl_queries", 64)?,
            icl_lambda: raw.or("eval", "icl_lambda", 1e-3)?,
            pretrained: raw.or("eval", "pretrained", Flag(false))?.0,
        };
        if eval.seeds == 0 {
            return Err(Error::config("eval.seeds must be >= 1"));
        }

        Ok(Config {
            d,
            r,
            m,
            rho,
            kappa_scale,
            pretrain,
            ttt,
            link,
            tau,
            eval,
        })
    }
}
