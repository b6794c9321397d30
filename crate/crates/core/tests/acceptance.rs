//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use sitt::config::Config;
use sitt::eval::{
    icl_vs_ttt_experiment, median, run_cell, scaling_sweep, subspace_distance, Knob, SweepMetric, SweepOutput,
};
use sitt::model::AttentionContext;
use sitt::rng::{stream, tag, Rng};
use sitt::taskgen::{sample_prompt, sample_subspace, Task};
use sitt::training::{
    constant_head, init_u, preprocess_context, pretrain_gamma, ttt_stage1, PretrainedModel,
};
use sitt::verify::{
    basis_round_trip, exponent_corpus, grad_gamma_checks, grad_u_checks, hermite_orthogonality, hermite_recurrence,
    ridge_checks, Check,
};

const MASTER: u64 = 20_240_601;

/// Writes straight to the process stdout so the line shows even under capture.
fn report(id: u32, title: &str, ok: bool, detail: &str, elapsed: Duration, limit: Duration) -> bool {
    let in_time = elapsed <= limit;
    let pass = ok && in_time;
    let line = format!(
        "{} criterion {id:>2} {title}: {detail} [{:.1}s of {:.0}s]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn failures(checks: &[Check]) -> Vec<String> {
    checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} = {:e} > {:e}", c.name, c.measured, c.tolerance))
        .collect()
}

fn worst(checks: &[Check]) -> f64 {
    checks.iter().map(|c| c.measured).fold(0.0, f64::max)
}

fn cfg(text: &str) -> Config {
    text.parse().expect("acceptance config parses")
}

#[test]
fn criterion_01_hermite_correctness() {
    let t = Instant::now();
    let mut rng = stream(MASTER, &[1]);
    let orth = hermite_orthogonality(200_000, &mut rng).unwrap();
    let rec = hermite_recurrence().unwrap();
    let round = basis_round_trip(200, &mut rng).unwrap();
    let mut all = orth.clone();
    all.extend(rec.clone());
    all.push(round.clone());
    let bad = failures(&all);
    let detail = format!(
        "orthogonality max {:.2} stderr (<= 5), recurrence {:.1e}, round trip {:.1e}{}",
        worst(&orth),
        worst(&rec),
        round.measured,
        if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
    );
    assert!(report(1, "Hermite correctness", bad.is_empty(), &detail, t.elapsed(), Duration::from_secs(10)));
}

#[test]
fn criterion_02_exponent_logic() {
    let t = Instant::now();
    let checks = exponent_corpus(100, &mut stream(MASTER, &[2])).unwrap();
    let detail = format!(
        "brute-force mismatches {}, ordering violations {} over 100 links",
        checks[0].measured, checks[1].measured
    );
    let ok = failures(&checks).is_empty();
    assert!(report(2, "exponent logic", ok, &detail, t.elapsed(), Duration::from_secs(5)));
}

#[test]
fn criterion_03_gradient_fidelity() {
    let t = Instant::now();
    let gu = grad_u_checks(20, &mut stream(MASTER, &[3, 0])).unwrap();
    let gg = grad_gamma_checks(20, &mut stream(MASTER, &[3, 1])).unwrap();
    let ok = failures(&gu).is_empty() && failures(&gg).is_empty();
    let detail = format!(
        "max relative error grad_u {:.2e}, grad_gamma {:.2e} (<= 1e-5, 20 instances each)",
        worst(&gu),
        worst(&gg)
    );
    assert!(report(3, "gradient fidelity", ok, &detail, t.elapsed(), Duration::from_secs(30)));
}

#[test]
fn criterion_04_stage3_solver() {
    let t = Instant::now();
    let checks = ridge_checks(20, &mut stream(MASTER, &[4])).unwrap();
    let gap = checks.iter().filter(|c| c.name.contains("descent")).map(|c| c.measured).fold(0.0, f64::max);
    let kkt = checks.iter().filter(|c| c.name.contains("KKT")).map(|c| c.measured).fold(0.0, f64::max);
    let bad = failures(&checks);
    let detail = format!("max |closed - descent| {gap:.2e} (<= 1e-6), max KKT {kkt:.2e} (<= 1e-8)");
    assert!(report(4, "Stage III solver equivalence", bad.is_empty(), &detail, t.elapsed(), Duration::from_secs(10)));
}

#[test]
fn criterion_05_pretraining_subspace() {
    let t = Instant::now();
    let c = cfg("
d = 8
r = 2
m = 64
rho = 4
[pretrain]
eta = 1
lambda = 0
t = 4096
n = 4096
[task]
link = 1:const:1, 2:const:1
tau = 0.1
");
    let mut dists = Vec::new();
    for s in 0..5u64 {
        let seed = MASTER + s;
        let sub = sample_subspace(c.d, c.r, &mut stream(seed, &[tag::SUBSPACE])).unwrap();
        let (link, tau, su) = (c.link.clone(), c.tau, sub.clone());
        let sampler = move |rng: &mut Rng| Task::sample(&su, &link, tau, rng);
        let out = pretrain_gamma(&c.pretrain, &sampler, false, &mut stream(seed, &[tag::PRETRAIN])).unwrap();
        dists.push(subspace_distance(&out.gamma, &sub).unwrap());
    }
    let med = median(&dists);
    let detail = format!("median principal-angle distance {med:.4} (<= 0.3); per seed {dists:.3?}");
    assert!(report(5, "pretraining subspace signal", med <= 0.3, &detail, t.elapsed(), Duration::from_secs(600)));
}

const STRONG_RECOVERY: &str = "
d = 32
r = 8
m = 64
rho = 16
[ttt]
n1 = 1024
n3 = 20000
n4 = 256
n_new = 0
c = 40
trajectory_stride = 100
[task]
link = 1:const:1, 2:const:1
tau = 0.1
[eval]
start = stage2
init_alignment = 0.3
tie_eps = true
seeds = 10
metric = misalignment
";

fn trend(traj: &[(usize, f64)]) -> f64 {
    let n = traj.len() as f64;
    let mx = traj.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = traj.iter().map(|p| p.1).sum::<f64>() / n;
    traj.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum::<f64>()
}

#[test]
fn criterion_06_strong_recovery() {
    let t = Instant::now();
    let c = cfg(STRONG_RECOVERY);
    let scn = c.scenario();
    let mut finals = Vec::new();
    let mut rising = 0;
    for s in 0..c.eval.seeds as u64 {
        let cell = run_cell(&scn, MASTER, s, &[6]).unwrap();
        finals.push(cell.alignment);
        if trend(&cell.trajectory) > 0.0 {
            rising += 1;
        }
    }
    let med = median(&finals);
    let ok = med >= 0.95 && rising >= 9;
    let detail = format!("median final alignment {med:.4} (>= 0.95), rising trajectories {rising}/10 (>= 9)");
    assert!(report(6, "strong recovery", ok, &detail, t.elapsed(), Duration::from_secs(300)));
}

#[test]
fn criterion_07_eps_vs_n3() {
    let t = Instant::now();
    let c = cfg(STRONG_RECOVERY);
    let out = scaling_sweep(Knob::N3, &[2500, 5000, 10_000, 20_000, 40_000], &c.scenario(), 10, SweepMetric::Misalignment, MASTER)
        .unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let fit = out.slope.unwrap();
    let ok = (-1.5..=-0.5).contains(&fit.slope);
    let detail = format!(
        "slope {:.3} in [-1.5, -0.5] (r2 {:.3}); medians {}",
        fit.slope,
        fit.r_squared,
        fmt_medians(&out)
    );
    assert!(report(7, "eps vs N3 scaling", ok, &detail, t.elapsed(), Duration::from_secs(1200)));
}

fn fmt_medians(out: &SweepOutput) -> String {
    out.medians
        .iter()
        .map(|(v, m)| format!("{v}:{m:.2e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_08_risk_scaling() {
    let t = Instant::now();
    let base = "
d = 8
r = 2
rho = 1
[ttt]
n1 = 1024
n3 = 20000
n_new = 0
lambda2 = 1
[task]
link = 1:const:1, 2:const:1
tau = 0.1
[eval]
start = pinned
seeds = 5
";
    let a = cfg(&format!("m = 4096\n{base}\n"));
    let out_a = scaling_sweep(Knob::N4, &[64, 128, 256, 512, 1024, 2048, 4096], &a.scenario(), 5, SweepMetric::RiskExcess, MASTER)
        .unwrap();
    let b = cfg(&format!("m = 16\n{}", base.replace("lambda2 = 1", "lambda2 = 1\nn4 = 16384")));
    let out_b = scaling_sweep(Knob::M, &[16, 32, 64, 128, 256, 512, 1024], &b.scenario(), 5, SweepMetric::RiskExcess, MASTER)
        .unwrap();
    assert!(out_a.failures.is_empty() && out_b.failures.is_empty());
    let sa = out_a.slope.unwrap();
    let sb = out_b.slope.unwrap();
    let monotone = out_b.medians.windows(2).all(|w| w[1].1 <= w[0].1);
    let ok = (-0.8..=-0.2).contains(&sa.slope) && monotone && sb.slope <= -0.2;
    let detail = format!(
        "N4 slope {:.3} in [-0.8, -0.2]; m slope {:.3} (<= -0.2), medians non-increasing {monotone}; N4 medians {}; m medians {}",
        sa.slope,
        sb.slope,
        fmt_medians(&out_a),
        fmt_medians(&out_b)
    );
    assert!(report(8, "risk scaling in N4 and m", ok, &detail, t.elapsed(), Duration::from_secs(900)));
}

#[test]
fn criterion_09_stage1_direction() {
    let t = Instant::now();
    let c = cfg("
d = 32
r = 8
m = 64
rho = 16
[ttt]
n1 = 4096
n_new = 4096
n3 = 20000
n4 = 256
c = 1
[task]
link = 1:const:1, 2:const:1
tau = 0.1
");
    let hyper = c.ttt.scaling.resolve(c.r, 1, c.m).unwrap();
    let mut wins = 0;
    for s in 0..20u64 {
        let env = |t: u64| stream(MASTER, &[9, s, t]);
        let sub = sample_subspace(c.d, c.r, &mut env(tag::SUBSPACE)).unwrap();
        let task = Task::sample(&sub, &c.link, c.tau, &mut env(tag::TASK)).unwrap();
        let model = PretrainedModel::oracle(&sub, c.kappa_scale, c.rho, c.m, &mut env(tag::MLP_INIT)).unwrap();
        let u0 = init_u(&model.gamma, c.r, &mut env(tag::U_INIT)).unwrap();
        let prompt = sample_prompt(&task, c.ttt.sizes, &mut env(tag::PROMPT));
        let (x1, y1) = prompt.group(0);
        let ctx = AttentionContext::new(preprocess_context(&model.gamma, c.r, &x1).unwrap(), y1).unwrap();
        let out = ttt_stage1(
            &model.attention().unwrap(),
            c.r,
            &ctx,
            &u0,
            c.ttt.n_new,
            &constant_head(hyper.alpha1, &model.v),
            hyper.eta1,
            hyper.lambda1,
            &mut env(tag::STAGE1),
        )
        .unwrap();
        let signal = (-&out.grad).dot(&task.beta).abs() / out.grad.norm();
        let baseline = u0.dot(&task.beta).abs() / u0.norm();
        if signal > baseline {
            wins += 1;
        }
    }
    let detail = format!("update beats the random-start baseline in {wins}/20 seeds (>= 16)");
    assert!(report(9, "Stage I signal direction", wins >= 16, &detail, t.elapsed(), Duration::from_secs(600)));
}

#[test]
fn criterion_10_distribution_shift() {
    let t = Instant::now();
    let body = |link: &str| {
        format!(
            "
d = 8
r = 8
m = 256
rho = 4
kappa_scale = 1
[pretrain]
t = 4096
n = 4096
[ttt]
n1 = 4096
n_new = 4096
n3 = 20000
n4 = 4096
c = 1
trajectory_stride = 100
[task]
link = {link}
basis = orthonormal
tau = 0.1
[eval]
seeds = 20
pretrained = true
icl_tasks = 256
icl_queries = 64
"
        )
    };
    let a = cfg(&body("3:const:1, 4:uniform:-0.5:0.5"));
    let b = cfg(&body("3:uniform:0.5:1.5, 4:uniform:-0.5:0.5"));
    let out = icl_vs_ttt_experiment(&a.compare(&b, false).unwrap(), 20, MASTER).unwrap();
    let wins = out.rows.iter().filter(|r| r.ttt_risk < r.icl_risk).count();
    let ok = !out.no_shift && out.rows.len() >= 20 && out.median_ttt < out.median_icl;
    let detail = format!(
        "median TTT risk {:.4} < median frozen-ICL risk {:.4} over {} paired seeds (TTT better in {wins})",
        out.median_ttt,
        out.median_icl,
        out.rows.len()
    );
    assert!(report(10, "distribution-shift comparison", ok, &detail, t.elapsed(), Duration::from_secs(1800)));
}

fn sitt(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sitt"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn criterion_11_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ttt.conf");
    std::fs::write(
        &config,
        "d = 16\nr = 4\nm = 32\nrho = 4\n[ttt]\nn1 = 256\nn_new = 256\nn3 = 2000\nn4 = 256\ntrajectory_stride = 50\n[task]\nlink = 1:const:1, 2:const:1\n",
    )
    .unwrap();
    let cfg_arg = config.to_str().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = sitt(&["ttt", "--config", cfg_arg, "--oracle", "--seed", "7"], &out);
            (out, o.status.code())
        })
        .collect();
    let same = |f: &str| {
        let a = std::fs::read(runs[0].0.join(f)).ok();
        a.is_some() && a == std::fs::read(runs[1].0.join(f)).ok()
    };
    let ttt_ok = runs.iter().all(|r| r.1 == Some(0));
    let identical = same("trajectory.csv") && same("risk.csv");
    let verify = sitt(&["verify", "--suite", "all", "--seed", "7"], &dir.path().join("verify"));
    let verify_ok = verify.status.code() == Some(0);
    let detail = format!(
        "ttt exit codes {:?}, trajectory/risk CSVs byte-identical {identical}, verify --suite all exit {:?}",
        runs.iter().map(|r| r.1).collect::<Vec<_>>(),
        verify.status.code()
    );
    let ok = ttt_ok && identical && verify_ok;
    assert!(report(11, "determinism", ok, &detail, t.elapsed(), Duration::from_secs(120)));
}
