//! Reduced single-layer transformer: softmax attention with a scalar output,
//! a ReLU head, and the rank-one LoRA modification `Gamma + u u^T`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention matrix and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub gamma: DMatrix<f64>,
    pub rho: f64,
}

impl AttentionParams {
    pub fn new(gamma: DMatrix<f64>, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {rho}")));
        }
        if gamma.nrows() != gamma.ncols() {
            return Err(Error::invalid("attention matrix must be square"));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("attention matrix has non-finite entries"));
        }
        Ok(Self { gamma, rho })
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    /// `(Gamma + u u^T) x` without forming the rank-one matrix.
    pub fn query(&self, lora: Option<&DVector<f64>>, x: &DVector<f64>) -> DVector<f64> {
        let mut q = &self.gamma * x;
        if let Some(u) = lora {
            q.axpy(u.dot(x), u, 1.0);
        }
        q
    }
}

/// ReLU head `sum_j a_j relu(v_j s + b_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub a: DVector<f64>,
    pub v: DVector<f64>,
    pub b: DVector<f64>,
}

impl MlpParams {
    pub fn new(a: DVector<f64>, v: DVector<f64>, b: DVector<f64>) -> Result<Self> {
        let m = a.len();
        if v.len() != m || b.len() != m {
            return Err(Error::invalid("a, v and b must share the same length"));
        }
        if m == 0 {
            return Err(Error::invalid("MLP width must be at least 1"));
        }
        if v.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::invalid("v entries must be +1 or -1"));
        }
        Ok(Self { a, v, b })
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn eval(&self, s: f64) -> f64 {
        let mut out = 0.0;
        for j in 0..self.width() {
            let pre = self.v[j] * s + self.b[j];
            if pre > 0.0 {
                out += self.a[j] * pre;
            }
        }
        out
    }

    /// Derivative in `s`, with the ReLU derivative at 0 taken as 0.
    pub fn slope(&self, s: f64) -> f64 {
        let mut out = 0.0;
        for j in 0..self.width() {
            if self.v[j] * s + self.b[j] > 0.0 {
                out += self.a[j] * self.v[j];
            }
        }
        out
    }

    /// Feature vector `relu(v_j s + b_j)`.
    pub fn features(&self, s: f64) -> DVector<f64> {
        DVector::from_fn(self.width(), |j, _| (self.v[j] * s + self.b[j]).max(0.0))
    }
}

/// Trainable rank-one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    pub u: DVector<f64>,
}

/// Attention memory: d x N inputs (one per column) and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionContext {
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
}

impl AttentionContext {
    pub fn new(xs: DMatrix<f64>, ys: DVector<f64>) -> Result<Self> {
        if xs.ncols() != ys.len() {
            return Err(Error::invalid(format!(
                "context has {} inputs but {} labels",
                xs.ncols(),
                ys.len()
            )));
        }
        if ys.is_empty() {
            return Err(Error::invalid("attention context is empty"));
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.nrows()
    }
}

/// Softmax weights (normalized) and the attention output.
struct Softmax {
    probs: DVector<f64>,
    g: f64,
}

fn softmax(att: &AttentionParams, lora: Option<&DVector<f64>>, ctx: &AttentionContext, x: &DVector<f64>) -> Result<Softmax> {
    if ctx.is_empty() {
        return Err(Error::invalid("attention context is empty"));
    }
    if x.len() != att.dim() || ctx.dim() != att.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: Gamma is {}, context {}, query {}",
            att.dim(),
            ctx.dim(),
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("query has non-finite entries"));
    }
    let q = att.query(lora, x);
    let mut logits = ctx.xs.tr_mul(&q);
    logits += &ctx.ys;
    logits /= att.rho;
    let mut max = f64::NEG_INFINITY;
    for &s in logits.iter() {
        if s.is_nan() {
            return Err(Error::invalid("attention logits contain NaN"));
        }
        max = max.max(s);
    }
    if !max.is_finite() {
        return Err(Error::numeric("attention logits are not finite"));
    }
    let mut probs = logits.map(|s| (s - max).exp());
    let z = probs.sum();
    probs /= z;
    let g = probs.dot(&ctx.ys);
    Ok(Softmax { probs, g })
}

/// `sum_i y_i w_i / sum_i w_i` with `w_i = exp((y_i + x_i^T Gamma_eff x) / rho)`.
pub fn attention_output(
    att: &AttentionParams,
    lora: Option<&LoraState>,
    ctx: &AttentionContext,
    x: &DVector<f64>,
) -> Result<f64> {
    Ok(softmax(att, lora.map(|l| &l.u), ctx, x)?.g)
}

pub fn f_ic(
    att: &AttentionParams,
    lora: Option<&LoraState>,
    mlp: &MlpParams,
    ctx: &AttentionContext,
    x: &DVector<f64>,
) -> Result<f64> {
    Ok(mlp.eval(attention_output(att, lora, ctx, x)?))
}

pub fn f_tf(lora: &LoraState, mlp: &MlpParams, x: &DVector<f64>) -> f64 {
    mlp.eval(lora.u.dot(x))
}

/// Attention output and its gradient in `u`:
/// `(1/rho) sum_i p_i (y_i - g) (<x_i,u> x + <u,x> x_i)`.
pub fn attention_grad_u(
    att: &AttentionParams,
    lora: &LoraState,
    ctx: &AttentionContext,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let sm = softmax(att, Some(&lora.u), ctx, x)?;
    let c = DVector::from_fn(ctx.len(), |i, _| sm.probs[i] * (ctx.ys[i] - sm.g) / att.rho);
    let xu = ctx.xs.tr_mul(&lora.u);
    let mut grad = &ctx.xs * &c;
    grad *= lora.u.dot(x);
    grad.axpy(c.dot(&xu), x, 1.0);
    Ok((sm.g, grad))
}

/// Returns `(f_ic, grad_u f_ic)`.
pub fn f_ic_grad_u(
    att: &AttentionParams,
    lora: &LoraState,
    mlp: &MlpParams,
    ctx: &AttentionContext,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let (g, dg) = attention_grad_u(att, lora, ctx, x)?;
    Ok((mlp.eval(g), dg * mlp.slope(g)))
}

pub fn grad_u_fic(
    att: &AttentionParams,
    lora: &LoraState,
    mlp: &MlpParams,
    ctx: &AttentionContext,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(f_ic_grad_u(att, lora, mlp, ctx, x)?.1)
}

/// Gradient in `Gamma` of `(f_ic(x) - y)^2 + lambda ||Gamma||_F^2` (no LoRA).
pub fn grad_gamma_pretrain_loss(
    att: &AttentionParams,
    mlp: &MlpParams,
    ctx: &AttentionContext,
    x: &DVector<f64>,
    y: f64,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let mut out = att.gamma.clone() * (2.0 * lambda);
    add_pretrain_data_grad(att, mlp, ctx, x, y, 1.0, &mut out)?;
    Ok(out)
}

/// Adds `scale * grad_Gamma (f_ic(x) - y)^2` to `acc`; returns the squared error.
pub fn add_pretrain_data_grad(
    att: &AttentionParams,
    mlp: &MlpParams,
    ctx: &AttentionContext,
    x: &DVector<f64>,
    y: f64,
    scale: f64,
    acc: &mut DMatrix<f64>,
) -> Result<f64> {
    let sm = softmax(att, None, ctx, x)?;
    let resid = mlp.eval(sm.g) - y;
    let outer = 2.0 * resid * mlp.slope(sm.g) * scale / att.rho;
    if outer != 0.0 {
        let c = DVector::from_fn(ctx.len(), |i, _| sm.probs[i] * (ctx.ys[i] - sm.g));
        let left = &ctx.xs * c;
        acc.ger(outer, &left, x, 1.0);
    }
    Ok(resid * resid)
}

/// Parameter snapshot written as CSV blocks plus a JSON manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub gamma: DMatrix<f64>,
    pub rho: f64,
    pub u: Option<DVector<f64>>,
    pub mlp: Option<MlpParams>,
    pub stage: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    d: usize,
    m: Option<usize>,
    rho: f64,
    stage: String,
    files: Vec<String>,
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "value"])?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_record([i.to_string(), j.to_string(), fmt_f64(m[(i, j)])])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut entries = Vec::new();
    let (mut rows, mut cols) = (0, 0);
    for rec in r.records() {
        let rec = rec?;
        let parse = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::invalid(format!("{}: short row", path.display())))
        };
        let i: usize = parse(0)?.parse().map_err(|_| Error::invalid("bad row index"))?;
        let j: usize = parse(1)?.parse().map_err(|_| Error::invalid("bad column index"))?;
        let v: f64 = parse(2)?.parse().map_err(|_| Error::invalid("bad value"))?;
        rows = rows.max(i + 1);
        cols = cols.max(j + 1);
        entries.push((i, j, v));
    }
    if entries.len() != rows * cols {
        return Err(Error::invalid(format!("{}: matrix is incomplete", path.display())));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, j, v) in entries {
        m[(i, j)] = v;
    }
    Ok(m)
}

pub fn write_vector_csv(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "value"])?;
    for (i, x) in v.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f64(*x)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut vals = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let i: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| Error::invalid("bad index"))?;
        if i != k {
            return Err(Error::invalid(format!("{}: indices out of order", path.display())));
        }
        let v: f64 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| Error::invalid("bad value"))?;
        vals.push(v);
    }
    Ok(DVector::from_vec(vals))
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl Checkpoint {
    /// Writes the CSV blocks and `checkpoint.json` into `dir`; returns the files created.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut files = vec![dir.join("gamma.csv")];
        write_matrix_csv(&files[0], &self.gamma)?;
        if let Some(u) = &self.u {
            let p = dir.join("u.csv");
            write_vector_csv(&p, u)?;
            files.push(p);
        }
        if let Some(mlp) = &self.mlp {
            for (name, v) in [("a", &mlp.a), ("v", &mlp.v), ("b", &mlp.b)] {
                let p = dir.join(format!("{name}.csv"));
                write_vector_csv(&p, v)?;
                files.push(p);
            }
        }
        let manifest = CheckpointManifest {
            d: self.gamma.nrows(),
            m: self.mlp.as_ref().map(MlpParams::width),
            rho: self.rho,
            stage: self.stage.clone(),
            files: files
                .iter()
                .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
                .collect(),
        };
        let mpath = dir.join("checkpoint.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
        files.push(mpath);
        Ok(files)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
        let gamma = read_matrix_csv(&dir.join("gamma.csv"))?;
        if gamma.nrows() != manifest.d || gamma.ncols() != manifest.d {
            return Err(Error::invalid("checkpoint Gamma does not match its manifest"));
        }
        let has = |f: &str| manifest.files.iter().any(|x| x == f);
        let u = if has("u.csv") {
            Some(read_vector_csv(&dir.join("u.csv"))?)
        } else {
            None
        };
        let mlp = if has("a.csv") {
            Some(MlpParams::new(
                read_vector_csv(&dir.join("a.csv"))?,
                read_vector_csv(&dir.join("v.csv"))?,
                read_vector_csv(&dir.join("b.csv"))?,
            )?)
        } else {
            None
        };
        Ok(Self {
            gamma,
            rho: manifest.rho,
            u,
            mlp,
            stage: manifest.stage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_grad;
    use crate::rng::{stream, Rng};
    use crate::taskgen::{gaussian_matrix, gaussian_vector, Subspace};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_mlp(m: usize, rng: &mut Rng) -> MlpParams {
        let a = gaussian_vector(m, rng);
        let v = DVector::from_fn(m, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let b = gaussian_vector(m, rng) * 0.5;
        MlpParams::new(a, v, b).unwrap()
    }

    struct Instance {
        att: AttentionParams,
        lora: LoraState,
        mlp: MlpParams,
        ctx: AttentionContext,
        x: DVector<f64>,
    }

    fn instance(d: usize, n: usize, m: usize, rng: &mut Rng) -> Instance {
        let gamma = gaussian_matrix(d, d, rng) / (d as f64);
        Instance {
            att: AttentionParams::new(gamma, 1.0).unwrap(),
            lora: LoraState {
                u: gaussian_vector(d, rng) / (d as f64).sqrt(),
            },
            mlp: random_mlp(m, rng),
            ctx: AttentionContext::new(gaussian_matrix(d, n, rng), gaussian_vector(n, rng)).unwrap(),
            x: gaussian_vector(d, rng),
        }
    }

    fn unit_mlp() -> MlpParams {
        MlpParams::new(DVector::from_element(1, 1.0), DVector::from_element(1, 1.0), DVector::zeros(1)).unwrap()
    }

    #[test]
    fn equal_labels_and_single_pair() {
        let mut rng = stream(1, &[0]);
        let inst = instance(4, 5, 3, &mut rng);
        let ctx = AttentionContext::new(inst.ctx.xs.clone(), DVector::from_element(5, 0.7)).unwrap();
        assert_abs_diff_eq!(attention_output(&inst.att, None, &ctx, &inst.x).unwrap(), 0.7, epsilon = 1e-14);
        let one = AttentionContext::new(inst.ctx.xs.columns(0, 1).clone_owned(), DVector::from_element(1, -2.5)).unwrap();
        assert_eq!(attention_output(&inst.att, Some(&inst.lora), &one, &inst.x).unwrap(), -2.5);
    }

    #[test]
    fn three_term_enumeration() {
        let att = AttentionParams::new(DMatrix::zeros(2, 2), 1.0).unwrap();
        let ctx = AttentionContext::new(DMatrix::from_element(2, 3, 0.3), DVector::from_vec(vec![0.0, 1.0, 2.0])).unwrap();
        let e = [0f64, 1.0, 2.0].map(f64::exp);
        let expect = (e[1] + 2.0 * e[2]) / (e[0] + e[1] + e[2]);
        let g = attention_output(&att, None, &ctx, &DVector::from_element(2, 1.0)).unwrap();
        assert_abs_diff_eq!(g, expect, epsilon = 1e-14);
        assert_abs_diff_eq!(g, 1.5752103826044415, epsilon = 1e-12);
    }

    #[test]
    fn errors_on_empty_or_nan() {
        assert!(AttentionContext::new(DMatrix::zeros(3, 0), DVector::zeros(0)).is_err());
        let att = AttentionParams::new(DMatrix::identity(2, 2), 1.0).unwrap();
        let ctx = AttentionContext::new(DMatrix::from_element(2, 2, 1.0), DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(attention_output(&att, None, &ctx, &DVector::from_vec(vec![f64::NAN, 0.0])).is_err());
        let bad = AttentionContext::new(DMatrix::from_element(2, 2, f64::NAN), DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(attention_output(&att, None, &bad, &DVector::from_element(2, 1.0)).is_err());
        assert!(AttentionParams::new(DMatrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn huge_logits_stay_finite() {
        let att = AttentionParams::new(DMatrix::identity(2, 2) * 1e6, 1.0).unwrap();
        let ctx = AttentionContext::new(
            DMatrix::from_column_slice(2, 3, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        let g = attention_output(&att, None, &ctx, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(g, 1.0, epsilon = 1e-12);
        let g = attention_output(&att, None, &ctx, &DVector::from_vec(vec![-1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(g, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn head_examples() {
        let mut rng = stream(2, &[0]);
        let inst = instance(4, 6, 5, &mut rng);
        let zero = MlpParams::new(DVector::zeros(5), inst.mlp.v.clone(), inst.mlp.b.clone()).unwrap();
        assert_eq!(f_ic(&inst.att, None, &zero, &inst.ctx, &inst.x).unwrap(), 0.0);
        assert_eq!(f_tf(&inst.lora, &zero, &inst.x), 0.0);

        let g = attention_output(&inst.att, None, &inst.ctx, &inst.x).unwrap();
        assert_eq!(unit_mlp().eval(g.abs()), g.abs());

        let pair = MlpParams::new(
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::zeros(2),
        )
        .unwrap();
        for _ in 0..100 {
            let inst = instance(4, 6, 1, &mut rng);
            let g = attention_output(&inst.att, Some(&inst.lora), &inst.ctx, &inst.x).unwrap();
            let f = f_ic(&inst.att, Some(&inst.lora), &pair, &inst.ctx, &inst.x).unwrap();
            assert_abs_diff_eq!(f, g, epsilon = 1e-12);
        }
    }

    #[test]
    fn f_tf_examples() {
        let mut rng = stream(3, &[0]);
        let mlp = random_mlp(6, &mut rng);
        let no_bias = MlpParams::new(mlp.a.clone(), mlp.v.clone(), DVector::zeros(6)).unwrap();
        let lora = LoraState {
            u: DVector::from_vec(vec![1.0, 0.0, 0.0]),
        };
        assert_eq!(f_tf(&lora, &no_bias, &DVector::from_vec(vec![0.0, 2.0, -1.0])), 0.0);
        let x = DVector::from_vec(vec![0.4, 2.0, -1.0]);
        let doubled = MlpParams::new(mlp.a.clone() * 2.0, mlp.v.clone(), mlp.b.clone()).unwrap();
        assert_eq!(f_tf(&lora, &doubled, &x), 2.0 * f_tf(&lora, &mlp, &x));
    }

    #[test]
    fn lora_equals_explicit_rank_one() {
        let mut rng = stream(4, &[0]);
        for _ in 0..20 {
            let inst = instance(6, 9, 4, &mut rng);
            let merged = AttentionParams::new(&inst.att.gamma + &inst.lora.u * inst.lora.u.transpose(), 1.0).unwrap();
            let a = f_ic(&inst.att, Some(&inst.lora), &inst.mlp, &inst.ctx, &inst.x).unwrap();
            let b = f_ic(&merged, None, &inst.mlp, &inst.ctx, &inst.x).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_u_vanishes_at_zero() {
        let mut rng = stream(5, &[0]);
        let mut inst = instance(5, 7, 4, &mut rng);
        inst.lora.u = DVector::zeros(5);
        let g = grad_u_fic(&inst.att, &inst.lora, &inst.mlp, &inst.ctx, &inst.x).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-8)
    }

    #[test]
    fn grad_u_matches_finite_differences() {
        let mut rng = stream(6, &[0]);
        for _ in 0..20 {
            let inst = instance(8, 16, 8, &mut rng);
            let an = grad_u_fic(&inst.att, &inst.lora, &inst.mlp, &inst.ctx, &inst.x).unwrap();
            let fd = finite_diff_grad(
                |u| f_ic(&inst.att, Some(&LoraState { u: u.clone() }), &inst.mlp, &inst.ctx, &inst.x),
                &inst.lora.u,
                1e-5,
            )
            .unwrap();
            assert!(rel_err(&an, &fd) <= 1e-5, "rel err {}", rel_err(&an, &fd));
        }
    }

    #[test]
    fn grad_u_is_rotation_equivariant() {
        let mut rng = stream(7, &[0]);
        let inst = instance(6, 10, 5, &mut rng);
        let r = Subspace::from_columns(gaussian_matrix(6, 6, &mut rng)).unwrap().basis().clone();
        let g = grad_u_fic(&inst.att, &inst.lora, &inst.mlp, &inst.ctx, &inst.x).unwrap();
        let att = AttentionParams::new(&r * &inst.att.gamma * r.transpose(), 1.0).unwrap();
        let ctx = AttentionContext::new(&r * &inst.ctx.xs, inst.ctx.ys.clone()).unwrap();
        let lora = LoraState { u: &r * &inst.lora.u };
        let gr = grad_u_fic(&att, &lora, &inst.mlp, &ctx, &(&r * &inst.x)).unwrap();
        assert!((gr - &r * g).amax() < 1e-8);
    }

    #[test]
    fn grad_gamma_matches_finite_differences() {
        let mut rng = stream(8, &[0]);
        for _ in 0..20 {
            let inst = instance(6, 8, 4, &mut rng);
            let y: f64 = rng.sample(rand_distr::StandardNormal);
            let lambda = 0.01;
            let an = grad_gamma_pretrain_loss(&inst.att, &inst.mlp, &inst.ctx, &inst.x, y, lambda).unwrap();
            let flat = DVector::from_column_slice(inst.att.gamma.as_slice());
            let fd = finite_diff_grad(
                |gv| {
                    let gm = DMatrix::from_column_slice(6, 6, gv.as_slice());
                    let att = AttentionParams { gamma: gm.clone(), rho: 1.0 };
                    let f = f_ic(&att, None, &inst.mlp, &inst.ctx, &inst.x)?;
                    Ok((f - y).powi(2) + lambda * gm.norm_squared())
                },
                &flat,
                1e-5,
            )
            .unwrap();
            let an = DVector::from_column_slice(an.as_slice());
            assert!(rel_err(&an, &fd) <= 1e-5, "rel err {}", rel_err(&an, &fd));
        }
    }

    #[test]
    fn grad_gamma_special_cases() {
        let mut rng = stream(9, &[0]);
        let inst = instance(4, 6, 3, &mut rng);
        let y = f_ic(&inst.att, None, &inst.mlp, &inst.ctx, &inst.x).unwrap();
        let g = grad_gamma_pretrain_loss(&inst.att, &inst.mlp, &inst.ctx, &inst.x, y, 0.3).unwrap();
        assert!((g - &inst.att.gamma * 0.6).amax() < 1e-15);

        let att = AttentionParams::new(DMatrix::zeros(4, 4), 1.0).unwrap();
        let ctx = AttentionContext::new(inst.ctx.xs.clone(), DVector::from_element(6, 1.3)).unwrap();
        let g = grad_gamma_pretrain_loss(&att, &inst.mlp, &ctx, &inst.x, 5.0, 0.0).unwrap();
        assert!(g.amax() < 1e-14);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = stream(10, &[0]);
        let inst = instance(3, 4, 5, &mut rng);
        let ck = Checkpoint {
            gamma: inst.att.gamma.clone(),
            rho: 1.5,
            u: Some(inst.lora.u.clone()),
            mlp: Some(inst.mlp.clone()),
            stage: "stage3".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let files = ck.write(dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        assert_eq!(Checkpoint::read(dir.path()).unwrap(), ck);
    }

    proptest! {
        #[test]
        fn output_within_label_range_and_permutation_invariant(seed in 0u64..10_000, n in 1usize..12) {
            let mut rng = stream(seed, &[99]);
            let inst = instance(5, n, 2, &mut rng);
            let g = attention_output(&inst.att, Some(&inst.lora), &inst.ctx, &inst.x).unwrap();
            let lo = inst.ctx.ys.min();
            let hi = inst.ctx.ys.max();
            prop_assert!(g >= lo - 1e-12 && g <= hi + 1e-12);

            let perm: Vec<usize> = (0..n).rev().collect();
            let xs = DMatrix::from_fn(5, n, |i, j| inst.ctx.xs[(i, perm[j])]);
            let ys = DVector::from_fn(n, |j, _| inst.ctx.ys[perm[j]]);
            let ctx = AttentionContext::new(xs, ys).unwrap();
            let gp = attention_output(&inst.att, Some(&inst.lora), &ctx, &inst.x).unwrap();
            prop_assert!((g - gp).abs() <= 1e-12);
        }
    }
}
