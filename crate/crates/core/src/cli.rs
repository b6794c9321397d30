//! Command-line front end: argument parsing, seeding, output files and manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{
    alignment, estimate_risk, fit_loglog_slope, icl_vs_ttt_experiment, scaling_sweep, subspace_distance,
    write_compare_csv, write_slope_csv, write_sweep_csv, Knob,
};
use crate::model::{fmt_f64, read_matrix_csv, write_matrix_csv, Checkpoint, LoraState, MlpParams};
use crate::rng::{stream, tag};
use crate::taskgen::{sample_subspace, Subspace, Task};
use crate::training::{pretrain_gamma, run_pipeline, write_diagnostics_csv, PretrainedModel};
use crate::verify::{all_passed, run_suite, write_report, Suite};

#[derive(Debug, Parser)]
#[command(name = "sitt", version, about = "Test-time training of a single-layer attention model on single-index tasks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for sweep and compare (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "sitt-out")]
    pub out: PathBuf,
    /// Override the pretraining compute guard.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One gradient step on the attention matrix; writes a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stages I-III on a fresh task.
    Ttt {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory written by `pretrain`.
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        gamma: Option<PathBuf>,
        /// Use the oracle matrix P / (kappa_scale sqrt(r)).
        #[arg(long)]
        oracle: bool,
    },
    /// Scaling sweep over one knob.
    Sweep {
        #[arg(long, required_unless_present = "selftest")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "selftest")]
        knob: Option<String>,
        /// `a:b:factor` geometric grid or a comma-separated list.
        #[arg(long)]
        grid: Option<String>,
        /// Fit a synthetic power law instead of running cells.
        #[arg(long)]
        selftest: bool,
    },
    /// Frozen ICL against TTT under a link shift.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Config whose `[task]` link is used at test time (default: same as --config).
        #[arg(long)]
        shift: Option<PathBuf>,
    },
    /// Oracle verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    artifact_version: &'static str,
    master_seed: u64,
    config: Option<Config>,
    config_text: Option<String>,
    started_unix: f64,
    finished_unix: f64,
    outputs: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct Run {
    out: PathBuf,
    command: &'static str,
    seed: u64,
    started: f64,
    config: Option<Config>,
    config_text: Option<String>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(out: &Path, command: &'static str, seed: u64) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            command,
            seed,
            started: now(),
            config: None,
            config_text: None,
            outputs: Vec::new(),
        })
    }

    fn load_config(&mut self, path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config = text.parse()?;
        self.config = Some(cfg.clone());
        self.config_text = Some(text);
        Ok(cfg)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    /// Written to a temporary name, then renamed into place.
    fn finish(self) -> Result<()> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        let manifest = RunManifest {
            command: self.command.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION"),
            master_seed: self.seed,
            config: self.config,
            config_text: self.config_text,
            started_unix: self.started,
            finished_unix: now(),
            outputs,
        };
        let tmp = self.out.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, self.out.join("manifest.json"))?;
        Ok(())
    }
}

fn write_kv_csv(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([*k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// `a:b:factor` (geometric, rounded to integers) or `v1,v2,...`.
pub fn parse_grid(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::config(format!("malformed grid `{text}` (expected a:b:factor or a comma list)"));
    if text.contains(':') {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [a, b, f] = parts[..] else { return Err(bad()) };
        if !(a >= 1.0) || !(b >= a) || !(f > 1.0) {
            return Err(Error::config("grid needs 1 <= a <= b and factor > 1"));
        }
        let mut out = Vec::new();
        let mut v = a;
        while v <= b * (1.0 + 1e-9) {
            out.push(v.round() as usize);
            v *= f;
        }
        Ok(out)
    } else {
        text.split(',').map(|p| p.trim().parse::<usize>().map_err(|_| bad())).collect()
    }
}

fn subspace_for(cfg: &Config, seed: u64) -> Result<Subspace> {
    sample_subspace(cfg.d, cfg.r, &mut stream(seed, &[tag::SUBSPACE]))
}

fn cmd_pretrain(g: &GlobalArgs, config: &Path) -> Result<i32> {
    let mut run = Run::new(&g.out, "pretrain", g.seed)?;
    let cfg = run.load_config(config)?;
    let sub = subspace_for(&cfg, g.seed)?;
    let (link, tau, s) = (cfg.link.clone(), cfg.tau, sub.clone());
    let sampler = move |rng: &mut crate::rng::Rng| Task::sample(&s, &link, tau, rng);
    let out = pretrain_gamma(&cfg.pretrain, &sampler, g.force, &mut stream(g.seed, &[tag::PRETRAIN]))
        .map_err(|e| e.in_stage("pretrain"))?;
    let dist = subspace_distance(&out.gamma, &sub)?;
    println!("subspace distance (top-{} eigenspace vs S_r): {dist:.6}", cfg.r);
    let ckpt = Checkpoint {
        gamma: out.gamma.clone(),
        rho: cfg.rho,
        u: None,
        mlp: Some(MlpParams::new(
            nalgebra::DVector::from_element(cfg.m, cfg.pretrain.alpha_pt),
            out.v.clone(),
            nalgebra::DVector::zeros(cfg.m),
        )?),
        stage: "pretrain".into(),
    };
    let dir = g.out.join("checkpoint");
    for f in ckpt.write(&dir)? {
        run.outputs.push(f);
    }
    let p = run.path("checkpoint/subspace.csv");
    write_matrix_csv(&p, sub.basis())?;
    let p = run.path("pretrain_summary.csv");
    write_kv_csv(
        &p,
        &[
            ("mean_loss", fmt_f64(out.mean_loss)),
            ("subspace_distance", fmt_f64(dist)),
        ],
    )?;
    run.finish()?;
    Ok(0)
}

fn cmd_ttt(g: &GlobalArgs, config: &Path, gamma: Option<&Path>, oracle: bool) -> Result<i32> {
    let mut run = Run::new(&g.out, "ttt", g.seed)?;
    let cfg = run.load_config(config)?;
    let (model, sub) = if oracle {
        let sub = subspace_for(&cfg, g.seed)?;
        let model = PretrainedModel::oracle(&sub, cfg.kappa_scale, cfg.rho, cfg.m, &mut stream(g.seed, &[tag::MLP_INIT]))?;
        (model, sub)
    } else {
        let dir = gamma.ok_or_else(|| Error::config("ttt needs --gamma DIR or --oracle"))?;
        let ckpt = Checkpoint::read(dir)?;
        if ckpt.gamma.nrows() != cfg.d {
            return Err(Error::config(format!(
                "checkpoint dimension {} does not match config d = {}",
                ckpt.gamma.nrows(),
                cfg.d
            )));
        }
        let v = match &ckpt.mlp {
            Some(mlp) if mlp.width() == cfg.m => mlp.v.clone(),
            Some(mlp) => {
                return Err(Error::config(format!(
                    "checkpoint width {} does not match config m = {}",
                    mlp.width(),
                    cfg.m
                )))
            }
            None => return Err(Error::config("checkpoint carries no head signs")),
        };
        let basis_path = dir.join("subspace.csv");
        let sub = if basis_path.exists() {
            Subspace::from_columns(read_matrix_csv(&basis_path)?)?
        } else {
            subspace_for(&cfg, g.seed)?
        };
        if sub.ambient_dim() != cfg.d || sub.dim() != cfg.r {
            return Err(Error::config("checkpoint subspace does not match config d and r"));
        }
        let model = PretrainedModel {
            gamma: ckpt.gamma,
            rho: cfg.rho,
            v,
            r: cfg.r,
        };
        (model, sub)
    };
    let task = Task::sample(&sub, &cfg.link, cfg.tau, &mut stream(g.seed, &[tag::TASK]))?;
    let ge = task.link.general_exponent();
    info!("task link {:?}, general exponent {ge}", task.link.coeffs());
    let res = run_pipeline(&model, &cfg.ttt, &task, ge, g.seed)?;
    let lora = LoraState { u: res.u_final.clone() };
    let risk = estimate_risk(
        |x| Ok(crate::model::f_tf(&lora, &res.mlp, x)),
        &task,
        cfg.eval.samples,
        &mut stream(g.seed, &[tag::EVAL]),
    )?;
    let align = alignment(&res.u_final, &task.beta)?;

    let p = run.path("trajectory.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["step", "alignment"])?;
    for (step, a) in &res.alignment_trajectory {
        w.write_record([step.to_string(), fmt_f64(*a)])?;
    }
    w.flush()?;
    let p = run.path("diagnostics.csv");
    write_diagnostics_csv(&p, &res.diagnostics)?;
    let p = run.path("risk.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["risk", "stderr", "samples", "tau", "alignment"])?;
    w.write_record([
        fmt_f64(risk.mean_abs_error),
        fmt_f64(risk.stderr),
        risk.samples.to_string(),
        fmt_f64(risk.tau),
        fmt_f64(align),
    ])?;
    w.flush()?;
    let ckpt = Checkpoint {
        gamma: res.gamma_star.clone(),
        rho: model.rho,
        u: Some(res.u_final.clone()),
        mlp: Some(res.mlp.clone()),
        stage: "stage3".into(),
    };
    for f in ckpt.write(&g.out.join("checkpoint"))? {
        run.outputs.push(f);
    }
    println!(
        "risk {:.6} (stderr {:.6}, tau {}), final alignment {align:.6}",
        risk.mean_abs_error, risk.stderr, risk.tau
    );
    run.finish()?;
    Ok(0)
}

fn cmd_sweep(g: &GlobalArgs, config: Option<&Path>, knob: Option<&str>, grid: Option<&str>, selftest: bool) -> Result<i32> {
    let mut run = Run::new(&g.out, "sweep", g.seed)?;
    if selftest {
        let values = parse_grid(grid.unwrap_or("16:4096:2"))?;
        let rows: Vec<(f64, f64)> = values.iter().map(|&v| (v as f64, (v as f64).powf(-0.5))).collect();
        let fit = fit_loglog_slope(&rows)?;
        let p = run.path("slope.csv");
        write_slope_csv(&p, "selftest", &fit)?;
        run.finish()?;
        println!("selftest slope {:.9}", fit.slope);
        return Ok(if (fit.slope + 0.5).abs() <= 1e-6 { 0 } else { 1 });
    }
    let cfg = run.load_config(config.ok_or_else(|| Error::config("sweep needs --config"))?)?;
    let knob: Knob = knob.ok_or_else(|| Error::config("sweep needs --knob"))?.parse()?;
    let values = parse_grid(grid.ok_or_else(|| Error::config("sweep needs --grid"))?)?;
    let out = scaling_sweep(knob, &values, &cfg.scenario(), cfg.eval.seeds, cfg.eval.metric, g.seed)?;
    let p = run.path("sweep.csv");
    write_sweep_csv(&p, &out.rows)?;
    match &out.slope {
        Some(fit) => {
            let p = run.path("slope.csv");
            write_slope_csv(&p, knob.name(), fit)?;
            println!("{} slope {:.4} (r2 {:.3}, {} points)", knob.name(), fit.slope, fit.r_squared, fit.points);
        }
        None => warn!("too few successful grid values for a slope fit"),
    }
    run.finish()?;
    if out.failures.is_empty() {
        Ok(0)
    } else {
        for (v, s, msg) in &out.failures {
            error!("cell {}={v} seed {s} failed: {msg}", knob.name());
            eprintln!("cell {}={v} seed {s} failed: {msg}", knob.name());
        }
        Ok(3)
    }
}

fn cmd_compare(g: &GlobalArgs, config: &Path, shift: Option<&Path>) -> Result<i32> {
    let mut run = Run::new(&g.out, "compare", g.seed)?;
    let a = run.load_config(config)?;
    let b = match shift {
        Some(p) => Config::from_path(p)?,
        None => a.clone(),
    };
    let cc = a.compare(&b, g.force)?;
    let out = icl_vs_ttt_experiment(&cc, a.eval.seeds, g.seed)?;
    let p = run.path("compare.csv");
    write_compare_csv(&p, &out.rows)?;
    let wins = out.rows.iter().filter(|r| r.ttt_risk < r.icl_risk).count();
    let label = if out.no_shift { "no-shift" } else { "shift" };
    let p = run.path("summary.csv");
    write_kv_csv(
        &p,
        &[
            ("seeds", out.rows.len().to_string()),
            ("median_icl_risk", fmt_f64(out.median_icl)),
            ("median_ttt_risk", fmt_f64(out.median_ttt)),
            ("ttt_wins", wins.to_string()),
            ("mode", label.to_string()),
        ],
    )?;
    println!(
        "{label}: median ICL risk {:.6}, median TTT risk {:.6}, TTT better in {wins}/{} seeds",
        out.median_icl,
        out.median_ttt,
        out.rows.len()
    );
    run.finish()?;
    Ok(0)
}

fn cmd_verify(g: &GlobalArgs, suite: &str) -> Result<i32> {
    let suite: Suite = suite.parse()?;
    let mut run = Run::new(&g.out, "verify", g.seed)?;
    let checks = run_suite(suite, g.seed)?;
    let p = run.path("verify_report.csv");
    write_report(&p, &checks)?;
    run.finish()?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    for c in &failed {
        eprintln!("FAILED {} / {}: {} > {}", c.suite, c.name, c.measured, c.tolerance);
    }
    println!("{}: {}/{} checks passed", suite.name(), checks.len() - failed.len(), checks.len());
    Ok(if all_passed(&checks) { 0 } else { 1 })
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("SITT_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Pretrain { config } => cmd_pretrain(g, config),
        Command::Ttt { config, gamma, oracle } => cmd_ttt(g, config, gamma.as_deref(), *oracle),
        Command::Sweep {
            config,
            knob,
            grid,
            selftest,
        } => cmd_sweep(g, config.as_deref(), knob.as_deref(), grid.as_deref(), *selftest),
        Command::Compare { config, shift } => cmd_compare(g, config, shift.as_deref()),
        Command::Verify { suite } => cmd_verify(g, suite),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
