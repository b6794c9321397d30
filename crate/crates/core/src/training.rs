//! One-step pretraining of the attention matrix and the three-stage
//! test-time training loop (weak recovery, strong recovery, ridge head).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    add_pretrain_data_grad, attention_output, f_ic_grad_u, fmt_f64, AttentionContext, AttentionParams, LoraState,
    MlpParams,
};
use crate::rng::{stream, tag, Rng};
use crate::taskgen::{gaussian_vector, sample_prompt, Prompt, Subspace, Task};

/// Elementary-operation cap `T * N * d^2` for pretraining without `force`.
pub const PRETRAIN_BUDGET: f64 = 1e11;
/// Prompts per reduction chunk in pretraining.
const PRETRAIN_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub eta_pt: f64,
    pub lambda_pt: f64,
    pub t_pt: usize,
    pub n_pt: usize,
    pub alpha_pt: f64,
    pub rho: f64,
    pub d: usize,
    pub m: usize,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.t_pt == 0 || self.n_pt == 0 {
            return Err(Error::config("pretrain d, m, T_pt and N_pt must be positive"));
        }
        for (name, v) in [
            ("eta_pt", self.eta_pt),
            ("lambda_pt", self.lambda_pt),
            ("alpha_pt", self.alpha_pt),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("rho must be positive"));
        }
        Ok(())
    }

    pub fn cost(&self) -> f64 {
        self.t_pt as f64 * self.n_pt as f64 * (self.d as f64).powi(2)
    }
}

/// `Unif({+1, -1}^m)`.
pub fn sample_signs(m: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(m, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

pub fn constant_head(alpha: f64, v: &DVector<f64>) -> MlpParams {
    let m = v.len();
    MlpParams {
        a: DVector::from_element(m, alpha),
        v: v.clone(),
        b: DVector::zeros(m),
    }
}

/// Attention matrix plus the frozen head signs shared by every test-time task.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedModel {
    pub gamma: DMatrix<f64>,
    pub rho: f64,
    pub v: DVector<f64>,
    pub r: usize,
}

impl PretrainedModel {
    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn attention(&self) -> Result<AttentionParams> {
        AttentionParams::new(self.gamma.clone(), self.rho)
    }

    /// Oracle matrix with fresh head signs.
    pub fn oracle(sub: &Subspace, kappa_scale: f64, rho: f64, m: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            gamma: oracle_gamma(sub, kappa_scale)?,
            rho,
            v: sample_signs(m, rng),
            r: sub.dim(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub gamma: DMatrix<f64>,
    pub v: DVector<f64>,
    /// Mean squared error `(f_ic(x^t) - y^t)^2` at the initial matrix.
    pub mean_loss: f64,
}

/// One averaged gradient step from `I/sqrt(d)` over `T_pt` freshly sampled prompts.
pub fn pretrain_gamma<S>(cfg: &PretrainConfig, sampler: &S, force: bool, rng: &mut Rng) -> Result<PretrainOutput>
where
    S: Fn(&mut Rng) -> Result<Task> + Sync,
{
    cfg.validate()?;
    if !force && cfg.cost() > PRETRAIN_BUDGET {
        return Err(Error::Budget(format!(
            "pretraining needs T_pt*N_pt*d^2 = {:.3e} operations (cap {:.0e}); use --force or the oracle matrix",
            cfg.cost(),
            PRETRAIN_BUDGET
        )));
    }
    let d = cfg.d;
    let v = sample_signs(cfg.m, rng);
    let base = rng.next_u64();
    let gamma0 = DMatrix::identity(d, d) / (d as f64).sqrt();
    let att = AttentionParams::new(gamma0.clone(), cfg.rho)?;
    let mlp = constant_head(cfg.alpha_pt, &v);

    let chunks: Vec<usize> = (0..cfg.t_pt.div_ceil(PRETRAIN_CHUNK)).collect();
    let partial: Vec<Result<(DMatrix<f64>, f64)>> = chunks
        .par_iter()
        .map(|&c| {
            let mut acc = DMatrix::zeros(d, d);
            let mut loss = 0.0;
            let end = ((c + 1) * PRETRAIN_CHUNK).min(cfg.t_pt);
            for t in c * PRETRAIN_CHUNK..end {
                let mut prng = stream(base, &[t as u64]);
                let task = sampler(&mut prng)?;
                if task.dim() != d {
                    return Err(Error::invalid(format!("task dimension {} does not match d = {d}", task.dim())));
                }
                let prompt = sample_prompt(&task, [cfg.n_pt, 0, 0, 0], &mut prng);
                let ctx = AttentionContext::new(prompt.xs, prompt.ys)?;
                let sq = add_pretrain_data_grad(&att, &mlp, &ctx, &prompt.query_x, prompt.query_y, 1.0, &mut acc)?;
                if !sq.is_finite() || acc.iter().any(|x| !x.is_finite()) {
                    return Err(Error::numeric(format!("non-finite pretraining gradient at prompt {t}")));
                }
                loss += sq;
            }
            Ok((acc, loss))
        })
        .collect();
    let mut sum = DMatrix::zeros(d, d);
    let mut loss = 0.0;
    for p in partial {
        let (g, l) = p?;
        sum += g;
        loss += l;
    }
    let t = cfg.t_pt as f64;
    // regularizer gradient 2 lambda Gamma0, averaged with the 1/2 factor
    let gamma = &gamma0 * (1.0 - cfg.eta_pt * cfg.lambda_pt) - sum * (cfg.eta_pt / (2.0 * t));
    Ok(PretrainOutput {
        gamma,
        v,
        mean_loss: loss / t,
    })
}

/// `P / (kappa_scale sqrt(r))`.
pub fn oracle_gamma(sub: &Subspace, kappa_scale: f64) -> Result<DMatrix<f64>> {
    if !(kappa_scale > 0.0) || !kappa_scale.is_finite() {
        return Err(Error::config("kappa_scale must be positive"));
    }
    Ok(sub.projector() / (kappa_scale * (sub.dim() as f64).sqrt()))
}

pub fn default_kappa_scale(d: usize) -> f64 {
    (d as f64).ln().powi(2)
}

/// Replaces every column `x_i` by `sqrt(r) Gamma x_i`.
pub fn preprocess_context(gamma: &DMatrix<f64>, r: usize, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if gamma.ncols() != xs.nrows() {
        return Err(Error::invalid("preprocessing dimension mismatch"));
    }
    Ok(gamma * xs * (r as f64).sqrt())
}

/// Gaussian draw mapped through `sqrt(r) Gamma`, scaled to norm `1/sqrt(r)`.
pub fn init_u(gamma: &DMatrix<f64>, r: usize, rng: &mut Rng) -> Result<DVector<f64>> {
    let sr = (r as f64).sqrt();
    for _ in 0..100 {
        let u = gamma * gaussian_vector(gamma.nrows(), rng) * sr;
        let n = u.norm();
        if n > 0.0 && n.is_finite() {
            return Ok(u / (sr * n));
        }
    }
    Err(Error::numeric("initial direction keeps vanishing after preprocessing"))
}

/// Stage-specific hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub alpha1: f64,
    pub eta1: f64,
    pub lambda1: f64,
    pub alpha2: f64,
    pub eta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scaling {
    Explicit(Hyper),
    /// Orders in `(r, ge, eps)` with every hidden constant equal to `c`.
    TheoremOrders { c: f64, eps: f64 },
}

impl Scaling {
    pub fn resolve(&self, r: usize, ge: usize, m: usize) -> Result<Hyper> {
        let h = match *self {
            Scaling::Explicit(h) => h,
            Scaling::TheoremOrders { c, eps } => {
                if !(c > 0.0) || !(eps > 0.0 && eps < 1.0) {
                    return Err(Error::config("theorem-orders needs c > 0 and 0 < eps < 1"));
                }
                let r = r as f64;
                let g = ge as f64;
                let eta1 = c * r.powf(1.5 * g + 1.5);
                Hyper {
                    alpha1: c * r.powf(-g / 2.0 - 1.0) / m as f64,
                    eta1,
                    lambda1: 1.0 / eta1,
                    alpha2: c * eps / r / m as f64,
                    eta2: c / r.sqrt(),
                }
            }
        };
        for (name, v) in [
            ("alpha1", h.alpha1),
            ("eta1", h.eta1),
            ("lambda1", h.lambda1),
            ("alpha2", h.alpha2),
            ("eta2", h.eta2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(h)
    }
}

/// `ceil((r sqrt(r) / eps) ln(1/eps))`.
pub fn default_n3(r: usize, eps: f64) -> usize {
    let r = r as f64;
    (r * r.sqrt() / eps * (1.0 / eps).ln()).ceil() as usize
}

/// How group 2 of the prompt is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group2Role {
    Unused,
    /// Raw group-2 points are consumed by Stage II before group 3.
    StreamPrefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    /// `[N1, N2, N3, N4]`.
    pub sizes: [usize; 4],
    pub n_new: usize,
    pub scaling: Scaling,
    pub lambda2: f64,
    pub group2_role: Group2Role,
    /// Record every k-th Stage II alignment (the last step is always kept).
    pub trajectory_stride: usize,
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes[3] == 0 {
            return Err(Error::config("Stage III requires N4 >= 1"));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::config("lambda2 must be >= 0"));
        }
        if self.trajectory_stride == 0 {
            return Err(Error::config("trajectory_stride must be >= 1"));
        }
        let stream_len = self.sizes[2] + if self.group2_role == Group2Role::StreamPrefix { self.sizes[1] } else { 0 };
        if self.sizes[0] == 0 && (self.n_new > 0 || stream_len > 0) {
            return Err(Error::config("Stages I and II need an attention memory (N1 >= 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagRow {
    pub stage: &'static str,
    pub step: usize,
    pub metric: &'static str,
    pub value: f64,
}

pub fn write_diagnostics_csv(path: &Path, rows: &[DiagRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "step", "metric", "value"])?;
    for r in rows {
        w.write_record([r.stage.to_string(), r.step.to_string(), r.metric.to_string(), fmt_f64(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub u: DVector<f64>,
    /// Preconditioned data gradient `sqrt(r) Gamma* grad_u (1/2N) sum (f - teacher)^2`.
    pub grad: DVector<f64>,
    pub teacher_mean: f64,
    pub loss: f64,
}

/// Self-distillation step against the centred output of the unmodified attention.
#[allow(clippy::too_many_arguments)]
pub fn ttt_stage1(
    att: &AttentionParams,
    r: usize,
    ctx1: &AttentionContext,
    u0: &DVector<f64>,
    n_new: usize,
    mlp: &MlpParams,
    eta1: f64,
    lambda1: f64,
    rng: &mut Rng,
) -> Result<Stage1Output> {
    let d = att.dim();
    let ws: Vec<DVector<f64>> = (0..n_new).map(|_| gaussian_vector(d, rng)).collect();
    let mut grad = DVector::zeros(d);
    let mut teacher_mean = 0.0;
    let mut loss = 0.0;
    if n_new > 0 {
        let teachers: Vec<f64> = ws
            .iter()
            .map(|w| attention_output(att, None, ctx1, w))
            .collect::<Result<_>>()?;
        teacher_mean = teachers.iter().sum::<f64>() / n_new as f64;
        let lora = LoraState { u: u0.clone() };
        for (w, t) in ws.iter().zip(&teachers) {
            let (f, df) = f_ic_grad_u(att, &lora, mlp, ctx1, w)?;
            let resid = f - (t - teacher_mean);
            loss += 0.5 * resid * resid;
            grad.axpy(resid, &df, 1.0);
        }
        grad /= n_new as f64;
        loss /= n_new as f64;
        grad = &att.gamma * grad * (r as f64).sqrt();
    }
    let mut u = u0 - (&grad + u0 * lambda1) * eta1;
    let n = u.norm();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::numeric("Stage I update is zero or non-finite"));
    }
    u /= n;
    Ok(Stage1Output {
        u,
        grad,
        teacher_mean,
        loss,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub u: DVector<f64>,
    /// `(step, <beta, u>)`, step 0 being the initial direction.
    pub trajectory: Vec<(usize, f64)>,
    pub mean_loss: f64,
}

/// One pass of normalized online SGD over the stream `(xs[:, t], ys[t])`.
#[allow(clippy::too_many_arguments)]
pub fn ttt_stage2(
    att: &AttentionParams,
    r: usize,
    memory: &AttentionContext,
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    u_init: &DVector<f64>,
    mlp: &MlpParams,
    eta2: f64,
    beta: Option<&DVector<f64>>,
    stride: usize,
) -> Result<Stage2Output> {
    if xs.ncols() != ys.len() {
        return Err(Error::invalid("Stage II stream inputs and labels differ in length"));
    }
    let sr = (r as f64).sqrt();
    let n3 = ys.len();
    let stride = stride.max(1);
    let mut lora = LoraState { u: u_init.clone() };
    let mut traj = Vec::new();
    if let Some(b) = beta {
        traj.push((0, b.dot(&lora.u) / lora.u.norm()));
    }
    let mut loss = 0.0;
    for t in 0..n3 {
        let x = xs.column(t).clone_owned();
        let (f, df) = f_ic_grad_u(att, &lora, mlp, memory, &x)?;
        let resid = f - ys[t];
        loss += 0.5 * resid * resid;
        let step = &att.gamma * df * (sr * resid * eta2);
        lora.u -= step;
        let n = lora.u.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::numeric(format!("Stage II update is zero or non-finite at step {}", t + 1)));
        }
        lora.u /= n;
        if let Some(b) = beta {
            if (t + 1) % stride == 0 || t + 1 == n3 {
                traj.push((t + 1, b.dot(&lora.u)));
            }
        }
    }
    Ok(Stage2Output {
        u: lora.u,
        trajectory: traj,
        mean_loss: if n3 > 0 { loss / n3 as f64 } else { 0.0 },
    })
}

#[derive(Debug, Clone)]
pub struct Stage3Output {
    pub mlp: MlpParams,
    /// `|| (Phi^T Phi / N + lambda I) a - Phi^T y / N ||`, relative to `|| Phi^T y / N ||`.
    pub kkt_residual: f64,
    pub objective: f64,
}

/// Features `relu(v_j <u, x_t> + b_j)` as an N x m matrix.
pub fn relu_features(u: &DVector<f64>, v: &DVector<f64>, b: &DVector<f64>, xs: &DMatrix<f64>) -> DMatrix<f64> {
    let z = xs.tr_mul(u);
    DMatrix::from_fn(z.len(), v.len(), |t, j| (v[j] * z[t] + b[j]).max(0.0))
}

/// `(1/2N) ||Phi a - y||^2 + (lambda/2) ||a||^2`.
pub fn ridge_objective(phi: &DMatrix<f64>, y: &DVector<f64>, a: &DVector<f64>, lambda: f64) -> f64 {
    let n = phi.nrows() as f64;
    (phi * a - y).norm_squared() / (2.0 * n) + 0.5 * lambda * a.norm_squared()
}

/// Closed-form ridge solution of `(Phi^T Phi / N + lambda I) a = Phi^T y / N`,
/// with the relative normal-equation residual. Uses the N x N dual system when N < m.
pub fn ridge_solve(phi: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<(DVector<f64>, f64)> {
    let (n, m) = phi.shape();
    if n == 0 || y.len() != n {
        return Err(Error::config("Stage III requires N4 >= 1"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda2 must be >= 0"));
    }
    let singular = || Error::numeric("Stage III normal equations are singular; use lambda2 > 0");
    let nf = n as f64;
    let primal = n >= m;
    if !primal && lambda == 0.0 {
        return Err(singular());
    }
    let chol = if primal {
        let mut h = (phi.transpose() * phi) / nf;
        for i in 0..m {
            h[(i, i)] += lambda;
        }
        h.cholesky().ok_or_else(singular)?
    } else {
        let mut k = phi * phi.transpose();
        for i in 0..n {
            k[(i, i)] += nf * lambda;
        }
        k.cholesky().ok_or_else(singular)?
    };
    // (Phi^T Phi / N + lambda I)^{-1} r, by Woodbury in the dual case
    let solve = |r: &DVector<f64>| -> DVector<f64> {
        if primal {
            chol.solve(r)
        } else {
            (r - phi.tr_mul(&chol.solve(&(phi * r)))) / lambda
        }
    };
    let apply = |a: &DVector<f64>| phi.tr_mul(&(phi * a)) / nf + a * lambda;
    let rhs = phi.tr_mul(y) / nf;
    let scale = rhs.norm();
    let mut a = solve(&rhs);
    let mut resid = (apply(&a) - &rhs).norm();
    for _ in 0..3 {
        if resid <= 1e-12 * scale || scale == 0.0 {
            break;
        }
        a += solve(&(&rhs - apply(&a)));
        resid = (apply(&a) - &rhs).norm();
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(singular());
    }
    let rel = if scale > 0.0 { resid / scale } else { resid };
    Ok((a, rel))
}

/// Ridge regression of the head on the final direction.
pub fn ttt_stage3(
    u: &DVector<f64>,
    v: &DVector<f64>,
    b: &DVector<f64>,
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    lambda2: f64,
) -> Result<Stage3Output> {
    if ys.is_empty() {
        return Err(Error::config("Stage III requires N4 >= 1"));
    }
    let phi = relu_features(u, v, b, xs);
    let (a, kkt) = ridge_solve(&phi, ys, lambda2)?;
    let objective = ridge_objective(&phi, ys, &a, lambda2);
    Ok(Stage3Output {
        mlp: MlpParams::new(a, v.clone(), b.clone())?,
        kkt_residual: kkt,
        objective,
    })
}

/// `b_j ~ Unif([-ln^2 d, ln^2 d])`.
pub fn sample_biases(m: usize, d: usize, rng: &mut Rng) -> DVector<f64> {
    let l = (d as f64).ln().powi(2);
    DVector::from_fn(m, |_, _| -l + 2.0 * l * rng.random::<f64>())
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub gamma_star: DMatrix<f64>,
    pub u_init: DVector<f64>,
    pub u_stage1: DVector<f64>,
    pub stage1_grad: DVector<f64>,
    pub u_final: DVector<f64>,
    pub mlp: MlpParams,
    pub alignment_trajectory: Vec<(usize, f64)>,
    pub diagnostics: Vec<DiagRow>,
    pub hyper: Hyper,
}

impl PipelineResult {
    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        crate::model::f_tf(&LoraState { u: self.u_final.clone() }, &self.mlp, x)
    }
}

/// Full test-time training on one task; every random draw is keyed off `seed`.
pub fn run_pipeline(model: &PretrainedModel, cfg: &TttConfig, task: &Task, ge: usize, seed: u64) -> Result<PipelineResult> {
    let mut prng = stream(seed, &[tag::PROMPT]);
    let prompt = sample_prompt(task, cfg.sizes, &mut prng);
    run_pipeline_on(model, cfg, &prompt, Some(&task.beta), ge, seed)
}

/// As [`run_pipeline`], on an existing prompt; `beta` only feeds diagnostics.
pub fn run_pipeline_on(
    model: &PretrainedModel,
    cfg: &TttConfig,
    prompt: &Prompt,
    beta: Option<&DVector<f64>>,
    ge: usize,
    seed: u64,
) -> Result<PipelineResult> {
    cfg.validate()?;
    if prompt.sizes != cfg.sizes {
        return Err(Error::invalid("prompt group sizes differ from the configuration"));
    }
    let d = model.dim();
    if prompt.xs.nrows() != d {
        return Err(Error::config(format!(
            "prompt dimension {} does not match the attention matrix ({d})",
            prompt.xs.nrows()
        )));
    }
    let m = model.v.len();
    let hyper = cfg.scaling.resolve(model.r, ge, m)?;
    let att = model.attention()?;
    let r = model.r;
    let mut diag = Vec::new();
    let align = |u: &DVector<f64>| beta.map(|b| b.dot(u) / u.norm());

    let u0 = init_u(&model.gamma, r, &mut stream(seed, &[tag::U_INIT])).map_err(|e| e.in_stage("init"))?;
    if let Some(a) = align(&u0) {
        diag.push(DiagRow { stage: "init", step: 0, metric: "alignment", value: a });
    }
    diag.push(DiagRow { stage: "init", step: 0, metric: "u_norm", value: u0.norm() });

    let memory = if cfg.sizes[0] > 0 {
        let (x1, y1) = prompt.group(0);
        Some(AttentionContext::new(preprocess_context(&model.gamma, r, &x1)?, y1)?)
    } else {
        None
    };

    let s1 = match &memory {
        Some(ctx1) if cfg.n_new > 0 => ttt_stage1(
            &att,
            r,
            ctx1,
            &u0,
            cfg.n_new,
            &constant_head(hyper.alpha1, &model.v),
            hyper.eta1,
            hyper.lambda1,
            &mut stream(seed, &[tag::STAGE1]),
        )
        .map_err(|e| e.in_stage("stage1"))?,
        _ => Stage1Output {
            u: &u0 / u0.norm(),
            grad: DVector::zeros(d),
            teacher_mean: 0.0,
            loss: 0.0,
        },
    };
    if let Some(a) = align(&s1.u) {
        diag.push(DiagRow { stage: "stage1", step: 1, metric: "alignment", value: a });
    }
    diag.push(DiagRow { stage: "stage1", step: 1, metric: "u_norm", value: s1.u.norm() });
    diag.push(DiagRow { stage: "stage1", step: 1, metric: "loss", value: s1.loss });
    diag.push(DiagRow { stage: "stage1", step: 1, metric: "grad_norm", value: s1.grad.norm() });

    let (xs, ys) = match cfg.group2_role {
        Group2Role::Unused => prompt.group(2),
        Group2Role::StreamPrefix => prompt.groups(1, 2),
    };
    let s2 = match &memory {
        Some(mem) => ttt_stage2(
            &att,
            r,
            mem,
            &xs,
            &ys,
            &s1.u,
            &constant_head(hyper.alpha2, &model.v),
            hyper.eta2,
            beta,
            cfg.trajectory_stride,
        )
        .map_err(|e| e.in_stage("stage2"))?,
        None => Stage2Output {
            u: s1.u.clone(),
            trajectory: beta.map(|b| vec![(0, b.dot(&s1.u))]).unwrap_or_default(),
            mean_loss: 0.0,
        },
    };
    for &(step, a) in &s2.trajectory {
        diag.push(DiagRow { stage: "stage2", step, metric: "alignment", value: a });
    }
    diag.push(DiagRow { stage: "stage2", step: ys.len(), metric: "u_norm", value: s2.u.norm() });
    diag.push(DiagRow { stage: "stage2", step: ys.len(), metric: "loss", value: s2.mean_loss });

    let b_star = sample_biases(m, d, &mut stream(seed, &[tag::STAGE3]));
    let (x4, y4) = prompt.group(3);
    let s3 = ttt_stage3(&s2.u, &model.v, &b_star, &x4, &y4, cfg.lambda2).map_err(|e| e.in_stage("stage3"))?;
    diag.push(DiagRow { stage: "stage3", step: 0, metric: "loss", value: s3.objective });
    diag.push(DiagRow { stage: "stage3", step: 0, metric: "kkt_residual", value: s3.kkt_residual });

    Ok(PipelineResult {
        gamma_star: model.gamma.clone(),
        u_init: u0,
        u_stage1: s1.u,
        stage1_grad: s1.grad,
        u_final: s2.u,
        mlp: s3.mlp,
        alignment_trajectory: s2.trajectory,
        diagnostics: diag,
        hyper,
    })
}
