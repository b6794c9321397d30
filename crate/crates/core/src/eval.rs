//! Risk estimation, alignment, log-log slope fits, scaling sweeps and the
//! ICL-versus-TTT comparison.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_output, fmt_f64, AttentionContext, AttentionParams, LoraState, MlpParams};
use crate::oracles::Welford;
use crate::rng::{stream, tag, Rng};
use crate::taskgen::{gaussian_vector, sample_prompt, sample_subspace, LinkSpec, Prompt, Subspace, Task};
use crate::training::{
    constant_head, pretrain_gamma, preprocess_context, relu_features, ridge_solve, run_pipeline_on,
    sample_biases, ttt_stage2, ttt_stage3, PretrainConfig, PretrainedModel, Scaling, TttConfig,
};

/// Sine of the largest principal angle between the top-`r` eigenspace of the
/// symmetrized matrix and the subspace.
pub fn subspace_distance(gamma: &DMatrix<f64>, sub: &Subspace) -> Result<f64> {
    let d = gamma.nrows();
    let r = sub.dim();
    if gamma.ncols() != d || sub.ambient_dim() != d {
        return Err(Error::invalid("subspace distance needs matching square dimensions"));
    }
    let eig = ((gamma + gamma.transpose()) * 0.5).symmetric_eigen();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = DMatrix::from_fn(d, r, |i, j| eig.eigenvectors[(i, idx[j])]);
    let resid = &top - sub.basis() * sub.basis().tr_mul(&top);
    Ok(resid.singular_values().max().min(1.0))
}

pub const MIN_RISK_SAMPLES: usize = 100;
pub const DEFAULT_EVAL_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean_abs_error: f64,
    pub stderr: f64,
    pub samples: usize,
    pub tau: f64,
}

impl RiskEstimate {
    pub fn excess(&self) -> f64 {
        (self.mean_abs_error - self.tau).abs()
    }
}

fn risk_from_errors(errors: impl Iterator<Item = f64>, tau: f64) -> RiskEstimate {
    let mut acc = Welford::new(1);
    for e in errors {
        acc.push(&DVector::from_element(1, e));
    }
    RiskEstimate {
        mean_abs_error: acc.mean()[0],
        stderr: acc.stderr()[0],
        samples: acc.count(),
        tau,
    }
}

/// Mean of `|f(x) - y|` over `m` fresh draws from the task.
pub fn estimate_risk<F>(predictor: F, task: &Task, m: usize, rng: &mut Rng) -> Result<RiskEstimate>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let draws = draw_eval_set(task, m, rng)?;
    risk_on(&predictor, &draws, task.tau)
}

/// Fixed evaluation draws, shared between predictors for paired comparisons.
pub fn draw_eval_set(task: &Task, m: usize, rng: &mut Rng) -> Result<Vec<(DVector<f64>, f64)>> {
    if m < MIN_RISK_SAMPLES {
        return Err(Error::invalid(format!("risk estimation needs at least {MIN_RISK_SAMPLES} samples, got {m}")));
    }
    Ok((0..m).map(|_| task.draw(rng)).collect())
}

pub fn risk_on<F>(predictor: &F, draws: &[(DVector<f64>, f64)], tau: f64) -> Result<RiskEstimate>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut errs = Vec::with_capacity(draws.len());
    for (i, (x, y)) in draws.iter().enumerate() {
        let f = predictor(x)?;
        if !f.is_finite() {
            return Err(Error::numeric(format!("non-finite prediction at evaluation sample {i}")));
        }
        errs.push((f - y).abs());
    }
    Ok(risk_from_errors(errs.into_iter(), tau))
}

/// `<beta, u> / ||u||`.
pub fn alignment(u: &DVector<f64>, beta: &DVector<f64>) -> Result<f64> {
    let n = u.norm();
    if n == 0.0 {
        return Err(Error::invalid("alignment of a zero vector"));
    }
    if (beta.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::invalid("alignment needs a unit feature vector"));
    }
    Ok(beta.dot(u) / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Ordinary least squares of `ln value` on `ln knob`.
pub fn fit_loglog_slope(rows: &[(f64, f64)]) -> Result<SlopeFit> {
    if rows.len() < 4 {
        return Err(Error::invalid(format!("slope fit needs at least 4 points, got {}", rows.len())));
    }
    if rows.iter().any(|&(k, v)| !(k > 0.0) || !(v > 0.0)) {
        return Err(Error::invalid("slope fit needs positive knob values and measurements"));
    }
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.0.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs at least two distinct knob values"));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        points: rows.len(),
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `eps` solving `n3 = (r sqrt(r) / eps) ln(1/eps)`.
pub fn eps_for_n3(r: usize, n3: usize) -> f64 {
    let r = r as f64;
    let count = |eps: f64| r * r.sqrt() / eps * (1.0 / eps).ln();
    let (mut lo, mut hi) = (1e-12f64, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        // the count is decreasing in eps
        if count(mid) > n3 as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Knob {
    N3,
    N4,
    M,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::N3 => "N3",
            Knob::N4 => "N4",
            Knob::M => "m",
        }
    }

    fn code(self) -> u64 {
        match self {
            Knob::N3 => 3,
            Knob::N4 => 4,
            Knob::M => 5,
        }
    }
}

impl std::str::FromStr for Knob {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N3" | "n3" => Ok(Knob::N3),
            "N4" | "n4" => Ok(Knob::N4),
            "m" | "M" => Ok(Knob::M),
            other => Err(Error::config(format!("unknown sweep knob `{other}` (expected N3 | N4 | m)"))),
        }
    }
}

/// Where the direction `u` comes from in a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Start {
    /// Full three-stage pipeline.
    Pipeline,
    /// Skip Stage I; Stage II starts from a direction with this alignment.
    Stage2From(f64),
    /// `u = beta`; only Stage III runs.
    Pinned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMetric {
    /// `|risk - tau|`.
    RiskExcess,
    /// `1 - <beta, u>`.
    Misalignment,
}

/// One synthetic test-time setting with an oracle attention matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub rho: f64,
    pub kappa_scale: f64,
    pub link: LinkSpec,
    pub tau: f64,
    pub ttt: TttConfig,
    pub start: Start,
    pub eval_samples: usize,
    /// In theorem-orders mode, derive `eps` from the Stage II length.
    pub tie_eps_to_n3: bool,
}

impl Scenario {
    pub fn with_knob(&self, knob: Knob, value: usize) -> Self {
        let mut s = self.clone();
        match knob {
            Knob::N3 => s.ttt.sizes[2] = value,
            Knob::N4 => s.ttt.sizes[3] = value,
            Knob::M => s.m = value,
        }
        s
    }
}

/// Unit vector in the subspace with the given alignment to `beta`.
pub fn direction_with_alignment(sub: &Subspace, beta: &DVector<f64>, a: f64, rng: &mut Rng) -> Result<DVector<f64>> {
    if sub.dim() < 2 && a.abs() < 1.0 {
        return Err(Error::invalid("a partially aligned start needs r >= 2"));
    }
    for _ in 0..100 {
        let g = sub.basis() * gaussian_vector(sub.dim(), rng);
        let w = &g - beta * beta.dot(&g);
        let n = w.norm();
        if n > 1e-12 {
            return Ok(beta * a + w * ((1.0 - a * a).max(0.0).sqrt() / n));
        }
    }
    Err(Error::numeric("could not draw an orthogonal direction"))
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub risk: RiskEstimate,
    pub alignment: f64,
    pub trajectory: Vec<(usize, f64)>,
}

/// Runs one sweep cell; the subspace, task and head signs are keyed by the seed
/// index only, every data draw by `(cell path, seed index)`.
pub fn run_cell(scn: &Scenario, master: u64, seed_idx: u64, cell: &[u64]) -> Result<CellOutcome> {
    let env = |t: u64| stream(master, &[seed_idx, t]);
    let sub = sample_subspace(scn.d, scn.r, &mut env(tag::SUBSPACE))?;
    let task = Task::sample(&sub, &scn.link, scn.tau, &mut env(tag::TASK))?;
    let model = PretrainedModel::oracle(&sub, scn.kappa_scale, scn.rho, scn.m, &mut env(tag::MLP_INIT))?;
    let ge = task.link.general_exponent();

    let mut path = cell.to_vec();
    path.push(seed_idx);
    let cell_seed = crate::rng::stream_id(&path) ^ master;
    let mut ttt = scn.ttt.clone();
    if scn.tie_eps_to_n3 {
        if let Scaling::TheoremOrders { c, .. } = ttt.scaling {
            ttt.scaling = Scaling::TheoremOrders {
                c,
                eps: eps_for_n3(scn.r, ttt.sizes[2].max(1)),
            };
        }
    }
    let prompt = sample_prompt(&task, ttt.sizes, &mut stream(cell_seed, &[tag::PROMPT]));
    let (u, mlp, traj) = match scn.start {
        Start::Pipeline => {
            let res = run_pipeline_on(&model, &ttt, &prompt, Some(&task.beta), ge, cell_seed)?;
            (res.u_final, res.mlp, res.alignment_trajectory)
        }
        Start::Stage2From(a0) => {
            ttt.validate()?;
            let hyper = ttt.scaling.resolve(scn.r, ge, scn.m)?;
            let u0 = direction_with_alignment(&sub, &task.beta, a0, &mut stream(cell_seed, &[tag::U_INIT]))?;
            let (x1, y1) = prompt.group(0);
            let mem = AttentionContext::new(preprocess_context(&model.gamma, scn.r, &x1)?, y1)?;
            let (xs, ys) = prompt.group(2);
            let s2 = ttt_stage2(
                &model.attention()?,
                scn.r,
                &mem,
                &xs,
                &ys,
                &u0,
                &constant_head(hyper.alpha2, &model.v),
                hyper.eta2,
                Some(&task.beta),
                ttt.trajectory_stride,
            )
            .map_err(|e| e.in_stage("stage2"))?;
            let mlp = fit_head(&s2.u, &model, &prompt, ttt.lambda2, cell_seed)?;
            (s2.u, mlp, s2.trajectory)
        }
        Start::Pinned => {
            ttt.validate()?;
            let u = task.beta.clone();
            let mlp = fit_head(&u, &model, &prompt, ttt.lambda2, cell_seed)?;
            (u, mlp, Vec::new())
        }
    };
    let lora = LoraState { u: u.clone() };
    let risk = estimate_risk(
        |x| Ok(crate::model::f_tf(&lora, &mlp, x)),
        &task,
        scn.eval_samples,
        &mut stream(cell_seed, &[tag::EVAL]),
    )?;
    Ok(CellOutcome {
        risk,
        alignment: alignment(&u, &task.beta)?,
        trajectory: traj,
    })
}

fn fit_head(u: &DVector<f64>, model: &PretrainedModel, prompt: &Prompt, lambda2: f64, seed: u64) -> Result<MlpParams> {
    let b = sample_biases(model.v.len(), model.dim(), &mut stream(seed, &[tag::STAGE3]));
    let (x4, y4) = prompt.group(3);
    Ok(ttt_stage3(u, &model.v, &b, &x4, &y4, lambda2).map_err(|e| e.in_stage("stage3"))?.mlp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub knob: String,
    pub value: usize,
    pub seed: u64,
    pub risk: f64,
    pub stderr: f64,
    pub alignment: f64,
    pub tau: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub knob: Knob,
    pub rows: Vec<SweepRow>,
    /// `(value, seed, message)` for cells that errored.
    pub failures: Vec<(usize, u64, String)>,
    /// `(value, median metric)` per grid value.
    pub medians: Vec<(f64, f64)>,
    pub slope: Option<SlopeFit>,
    /// Per-cell trajectories, aligned with `rows`.
    pub trajectories: Vec<Vec<(usize, f64)>>,
}

pub fn metric_of(row: &SweepRow, metric: SweepMetric) -> f64 {
    match metric {
        SweepMetric::RiskExcess => (row.risk - row.tau).abs(),
        SweepMetric::Misalignment => 1.0 - row.alignment,
    }
}

/// Runs every `(value, seed)` cell, then fits the log-log slope of the
/// per-value median metric against the knob.
pub fn scaling_sweep(
    knob: Knob,
    grid: &[usize],
    scn: &Scenario,
    seeds: usize,
    metric: SweepMetric,
    master: u64,
) -> Result<SweepOutput> {
    if grid.len() < 5 {
        return Err(Error::config(format!("sweep grid needs at least 5 points, got {}", grid.len())));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("sweep grid contains duplicate values"));
    }
    if grid.contains(&0) {
        return Err(Error::config("sweep grid values must be positive"));
    }
    let cells: Vec<(usize, u64)> = grid
        .iter()
        .flat_map(|&v| (0..seeds as u64).map(move |s| (v, s)))
        .collect();
    let mut results: Vec<(usize, u64, Result<CellOutcome>, u64)> = cells
        .par_iter()
        .map(|&(value, seed)| {
            let start = Instant::now();
            let out = run_cell(&scn.with_knob(knob, value), master, seed, &[knob.code(), value as u64]);
            (value, seed, out, start.elapsed().as_millis() as u64)
        })
        .collect();
    results.sort_by_key(|r| (r.0, r.1));

    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    let mut failures = Vec::new();
    for (value, seed, out, wall_ms) in results {
        match out {
            Ok(c) => {
                rows.push(SweepRow {
                    knob: knob.name().to_string(),
                    value,
                    seed,
                    risk: c.risk.mean_abs_error,
                    stderr: c.risk.stderr,
                    alignment: c.alignment,
                    tau: c.risk.tau,
                    wall_ms,
                });
                trajectories.push(c.trajectory);
            }
            Err(e) => failures.push((value, seed, e.to_string())),
        }
    }
    let mut medians = Vec::new();
    for &v in &sorted {
        let vals: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| metric_of(r, metric)).collect();
        if !vals.is_empty() {
            medians.push((v as f64, median(&vals)));
        }
    }
    let slope = fit_loglog_slope(&medians).ok();
    Ok(SweepOutput {
        knob,
        rows,
        failures,
        medians,
        slope,
        trajectories,
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["knob", "value", "seed", "risk", "stderr", "alignment", "tau", "wall_ms"])?;
    for r in rows {
        w.write_record([
            r.knob.clone(),
            r.value.to_string(),
            r.seed.to_string(),
            fmt_f64(r.risk),
            fmt_f64(r.stderr),
            fmt_f64(r.alignment),
            fmt_f64(r.tau),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_slope_csv(path: &Path, knob: &str, fit: &SlopeFit) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["knob", "slope", "intercept", "r2", "points"])?;
    w.write_record([
        knob.to_string(),
        fmt_f64(fit.slope),
        fmt_f64(fit.intercept),
        fmt_f64(fit.r_squared),
        fit.points.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Settings for the frozen-ICL versus TTT comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub rho: f64,
    pub kappa_scale: f64,
    pub pretrain_link: LinkSpec,
    pub test_link: LinkSpec,
    pub tau: f64,
    pub ttt: TttConfig,
    /// `None` uses the oracle matrix.
    pub pretrain: Option<PretrainConfig>,
    pub force: bool,
    /// Prompts (one task each) used to fit the frozen ICL head.
    pub icl_tasks: usize,
    pub icl_queries: usize,
    pub icl_lambda: f64,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub icl_risk: f64,
    pub icl_stderr: f64,
    pub ttt_risk: f64,
    pub ttt_stderr: f64,
    pub alignment: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    pub median_icl: f64,
    pub median_ttt: f64,
    pub no_shift: bool,
    pub icl_head: MlpParams,
    pub model: PretrainedModel,
}

/// ICL prediction on the raw concatenated context of a prompt.
pub fn icl_predict(att: &AttentionParams, head: &MlpParams, ctx: &AttentionContext, x: &DVector<f64>) -> Result<f64> {
    Ok(head.eval(attention_output(att, None, ctx, x)?))
}

fn full_context(prompt: &Prompt) -> Result<AttentionContext> {
    AttentionContext::new(prompt.xs.clone(), prompt.ys.clone())
}

/// Ridge fit of `relu(v_j g + b_j)` features of the attention output on
/// pretraining-distribution prompts.
pub fn fit_icl_head(model: &PretrainedModel, cfg: &CompareConfig, sub: &Subspace, master: u64) -> Result<MlpParams> {
    let att = model.attention()?;
    let mut rng = stream(master, &[tag::ICL_HEAD]);
    let b = sample_biases(model.v.len(), model.dim(), &mut rng);
    let rows: Vec<Result<Vec<(f64, f64)>>> = (0..cfg.icl_tasks as u64)
        .into_par_iter()
        .map(|k| {
            let mut trng = stream(master, &[tag::ICL_HEAD, k]);
            let task = Task::sample(sub, &cfg.pretrain_link, cfg.tau, &mut trng)?;
            let prompt = sample_prompt(&task, cfg.ttt.sizes, &mut trng);
            let ctx = full_context(&prompt)?;
            let mut out = Vec::with_capacity(cfg.icl_queries);
            for _ in 0..cfg.icl_queries {
                let (x, y) = task.draw(&mut trng);
                out.push((attention_output(&att, None, &ctx, &x)?, y));
            }
            Ok(out)
        })
        .collect();
    let mut gs = Vec::new();
    let mut ys = Vec::new();
    for r in rows {
        for (g, y) in r? {
            gs.push(g);
            ys.push(y);
        }
    }
    let unit = DVector::from_element(1, 1.0);
    let xs = DMatrix::from_row_slice(1, gs.len(), &gs);
    let phi = relu_features(&unit, &model.v, &b, &xs);
    let (a, _) = ridge_solve(&phi, &DVector::from_vec(ys), cfg.icl_lambda)?;
    MlpParams::new(a, model.v.clone(), b)
}

/// Pretrains (or builds the oracle) once on the first link family, fits the
/// frozen ICL head, then scores both arms on identical tasks and draws from the
/// second family.
pub fn icl_vs_ttt_experiment(cfg: &CompareConfig, seeds: usize, master: u64) -> Result<CompareOutput> {
    if cfg.icl_tasks == 0 || cfg.icl_queries == 0 {
        return Err(Error::config("the ICL head needs icl_tasks >= 1 and icl_queries >= 1"));
    }
    cfg.ttt.validate()?;
    let sub = sample_subspace(cfg.d, cfg.r, &mut stream(master, &[tag::SUBSPACE]))?;
    let model = match &cfg.pretrain {
        None => PretrainedModel::oracle(&sub, cfg.kappa_scale, cfg.rho, cfg.m, &mut stream(master, &[tag::MLP_INIT]))?,
        Some(p) => {
            let link = cfg.pretrain_link.clone();
            let s = sub.clone();
            let tau = cfg.tau;
            let sampler = move |rng: &mut Rng| Task::sample(&s, &link, tau, rng);
            let out = pretrain_gamma(p, &sampler, cfg.force, &mut stream(master, &[tag::PRETRAIN]))
                .map_err(|e| e.in_stage("pretrain"))?;
            PretrainedModel {
                gamma: out.gamma,
                rho: p.rho,
                v: out.v,
                r: cfg.r,
            }
        }
    };
    let head = fit_icl_head(&model, cfg, &sub, master)?;
    let att = model.attention()?;
    let no_shift = cfg.pretrain_link == cfg.test_link;

    let rows: Vec<Result<CompareRow>> = (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            let task = Task::sample(&sub, &cfg.test_link, cfg.tau, &mut stream(master, &[s, tag::TASK]))?;
            let prompt = sample_prompt(&task, cfg.ttt.sizes, &mut stream(master, &[s, tag::PROMPT]));
            let draws = draw_eval_set(&task, cfg.eval_samples, &mut stream(master, &[s, tag::EVAL]))?;
            let ctx = full_context(&prompt)?;
            let icl = risk_on(&|x: &DVector<f64>| icl_predict(&att, &head, &ctx, x), &draws, cfg.tau)?;
            let ge = task.link.general_exponent();
            let res = run_pipeline_on(&model, &cfg.ttt, &prompt, Some(&task.beta), ge, crate::rng::stream_id(&[master, s]))?;
            let ttt = risk_on(&|x: &DVector<f64>| Ok(res.predict(x)), &draws, cfg.tau)?;
            Ok(CompareRow {
                seed: s,
                icl_risk: icl.mean_abs_error,
                icl_stderr: icl.stderr,
                ttt_risk: ttt.mean_abs_error,
                ttt_stderr: ttt.stderr,
                alignment: alignment(&res.u_final, &task.beta)?,
                tau: cfg.tau,
            })
        })
        .collect();
    let rows: Vec<CompareRow> = rows.into_iter().collect::<Result<_>>()?;
    let median_icl = median(&rows.iter().map(|r| r.icl_risk).collect::<Vec<_>>());
    let median_ttt = median(&rows.iter().map(|r| r.ttt_risk).collect::<Vec<_>>());
    Ok(CompareOutput {
        rows,
        median_icl,
        median_ttt,
        no_shift,
        icl_head: head,
        model,
    })
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "icl_risk", "icl_stderr", "ttt_risk", "ttt_stderr", "alignment", "tau"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            fmt_f64(r.icl_risk),
            fmt_f64(r.icl_stderr),
            fmt_f64(r.ttt_risk),
            fmt_f64(r.ttt_stderr),
            fmt_f64(r.alignment),
            fmt_f64(r.tau),
        ])?;
    }
    w.flush()?;
    Ok(())
}
