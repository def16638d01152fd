//! Subcommand implementations. Each returns normally on success and a
//! [`CliError`] that maps onto the process exit code otherwise.

use std::fmt::Write as _;
use std::path::Path;

use lqmfg::evalne::ols_slope;
use lqmfg::linalg::from_rows;
use lqmfg::oracle::oracle_report;
use lqmfg::sim::{derive_seed, rollout_with, RolloutOptions};
use lqmfg::{
    critic_gtd, critic_lstd, deploy, estimate_gap, run_algorithm1, solve_dare, solve_mfe, sweep, true_theta,
    validate_spec, CriticKind, DeployedPolicy, FeedbackPolicy, GameSpec, LoopMode, MeanFieldLaw,
    PolicySource,
};
use serde::Serialize;

use crate::config::{PolicyChoice, RunConfig};
use crate::output::{diagnostics_table, gap_table, rounds_table, unix_now, RunDir};
use crate::CliError;

const FIXED_POINT_TOL: f64 = 1e-13;

/// Options shared by all subcommands after the configuration is resolved.
pub struct Context<'a> {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub out: Option<&'a Path>,
    pub json: bool,
}

impl Context<'_> {
    fn run_dir(&self) -> Result<Option<RunDir>, CliError> {
        self.out.map(RunDir::create).transpose()
    }

    fn eval_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, &[1])
    }
}

fn fmt_matrix(m: &[Vec<f64>]) -> String {
    let rows: Vec<String> = m
        .iter()
        .map(|r| r.iter().map(|x| format!("{x:.8}")).collect::<Vec<_>>().join(", "))
        .collect();
    format!("[{}]", rows.join("; "))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes to JSON"));
}

pub fn validate(ctx: &Context) -> Result<(), CliError> {
    let started = unix_now();
    let spec = ctx.cfg.spec()?;
    let report = validate_spec(&spec)?;
    if !report.ok() {
        print!("{report}");
        return Err(CliError::ValidationFailed);
    }
    let rd = solve_dare(&spec)?;

    #[derive(Serialize)]
    struct Validation<'a> {
        checks: &'a lqmfg::ValidationReport,
        t_p: f64,
        h_norm: f64,
        lipschitz: f64,
        assumption1_ok: bool,
    }
    let summary = Validation {
        checks: &report,
        t_p: rd.t_p,
        h_norm: rd.h_norm,
        lipschitz: rd.lipschitz_constant(),
        assumption1_ok: rd.assumption1_ok,
    };
    if ctx.json {
        print_json(&summary);
    } else {
        print!("{report}");
        println!("T_P = {:.4} (||H_P|| = {:.4}, Lipschitz constant {:.4})", rd.t_p, rd.h_norm, summary.lipschitz);
        if rd.assumption1_ok {
            println!("Assumption 1: satisfied");
        } else {
            println!("Assumption 1: violated (T_P >= 1)");
        }
    }
    if let Some(mut dir) = ctx.run_dir()? {
        dir.write_json("validation.json", &summary)?;
        dir.finish(ctx.command, &ctx.cfg, started)?;
    }
    if !rd.assumption1_ok {
        return Err(CliError::ValidationFailed);
    }
    Ok(())
}

pub fn oracle(ctx: &Context) -> Result<(), CliError> {
    let started = unix_now();
    let spec = ctx.cfg.spec()?;
    let report = oracle_report(&spec, FIXED_POINT_TOL)?;
    if ctx.json {
        print_json(&report);
    } else {
        let mut s = String::new();
        let _ = writeln!(s, "P   = {}", fmt_matrix(&report.p));
        let _ = writeln!(s, "G_P = {}", fmt_matrix(&report.g_p));
        let _ = writeln!(s, "H_P = {}", fmt_matrix(&report.h_p));
        let _ = writeln!(s, "T_P = {:.8}", report.t_p);
        let _ = writeln!(
            s,
            "Assumption 1: {}",
            if report.assumption1_ok { "satisfied" } else { "violated" }
        );
        if let (Some(f), Some(k), Some(sum), Some(j)) =
            (&report.f_star, &report.k_star, &report.k1_plus_k2, report.cost_star)
        {
            let _ = writeln!(s, "F*  = {}", fmt_matrix(f));
            let _ = writeln!(s, "K*  = {}", fmt_matrix(k));
            let _ = writeln!(s, "K1 + K2 = {}", fmt_matrix(sum));
            let _ = writeln!(s, "J(K*, F*) = {j:.8}");
            if let (Some(res), Some(it)) = (report.fixed_point_residual, report.fixed_point_iterations) {
                let _ = writeln!(s, "fixed point residual {res:.3e} after {it} iterations");
            }
        }
        print!("{s}");
    }
    if let Some(mut dir) = ctx.run_dir()? {
        dir.write_json("oracle.json", &report)?;
        dir.finish(ctx.command, &ctx.cfg, started)?;
    }
    if !report.assumption1_ok {
        return Err(CliError::ValidationFailed);
    }
    Ok(())
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let started = unix_now();
    let spec = ctx.cfg.spec()?;
    let mut loop_cfg = ctx.cfg.train.clone();
    loop_cfg.seed = ctx.cfg.seed;
    let report = run_algorithm1(&spec, &loop_cfg)?;
    if ctx.json {
        print_json(&report);
    } else {
        println!("mode {:?}, {} rounds", loop_cfg.mode, loop_cfg.rounds);
        for rec in &report.rounds {
            let err = rec.f_error.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into());
            let gap = rec.inner_cost_gap.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into());
            println!(
                "  round {:>3}: F = {}  ||F - F*|| = {err}  inner cost gap = {gap}  rejections = {}",
                rec.r,
                fmt_matrix(&rec.f_out),
                rec.rejections
            );
        }
        println!("final K = {}", fmt_matrix(&report.final_k));
        println!("final F = {}", fmt_matrix(&report.final_f));
    }
    if let Some(mut dir) = ctx.run_dir()? {
        let (h, rows) = rounds_table(&report);
        dir.write_csv("rounds.csv", &h, &rows)?;
        let (h, rows) = diagnostics_table(&report);
        dir.write_csv("diagnostics.csv", &h, &rows)?;
        dir.write_json("report.json", &report)?;
        dir.finish(ctx.command, &ctx.cfg, started)?;
    }
    Ok(())
}

/// Policy deployed by `eval-ne` and by non-exact-inner sweeps.
fn deployed_policy(ctx: &Context, spec: &GameSpec) -> Result<DeployedPolicy, CliError> {
    match ctx.cfg.sweep.policy {
        PolicyChoice::ExactMfe => {
            let sol = solve_mfe(spec, FIXED_POINT_TOL)?;
            Ok(deploy(&sol.k_star, &sol.f_star, &spec.nu0)?)
        }
        PolicyChoice::Trained => {
            let mut loop_cfg = ctx.cfg.train.clone();
            loop_cfg.seed = ctx.cfg.seed;
            let rep = run_algorithm1(spec, &loop_cfg)?;
            Ok(deploy(&rep.final_k_policy(), &rep.final_f_matrix(), &spec.nu0)?)
        }
    }
}

pub fn eval_ne(ctx: &Context) -> Result<(), CliError> {
    let started = unix_now();
    let spec = ctx.cfg.spec()?;
    let rd = solve_dare(&spec)?;
    let dp = deployed_policy(ctx, &spec)?;
    let n = ctx.cfg.sweep.n;
    ctx.cfg.eval.validate(n)?;
    let mut est = estimate_gap(&dp, n, &spec, &rd, &ctx.cfg.eval, derive_seed(ctx.eval_seed(), &[n as u64]))?;
    if ctx.cfg.sweep.policy == PolicyChoice::Trained {
        est.r = Some(ctx.cfg.train.rounds);
    }
    if ctx.json {
        print_json(&est);
    } else {
        println!(
            "N = {n}: deployed {:.6} ± {:.6}, best response ({:?}) {:.6} ± {:.6}, gap {:.3e} ± {:.3e}{}",
            est.deployed,
            est.deployed_se,
            est.best_response_kind,
            est.best_response,
            est.best_response_se,
            est.gap,
            est.gap_se,
            if est.diverged { " [diverged]" } else { "" }
        );
    }
    if let Some(mut dir) = ctx.run_dir()? {
        let (h, rows) = gap_table(std::slice::from_ref(&est));
        dir.write_csv("gap.csv", &h, &rows)?;
        dir.finish(ctx.command, &ctx.cfg, started)?;
    }
    Ok(())
}

pub fn sweep_cmd(ctx: &Context) -> Result<(), CliError> {
    let started = unix_now();
    let spec = ctx.cfg.spec()?;
    let sw = &ctx.cfg.sweep;
    for &n in &sw.n_list {
        ctx.cfg.eval.validate(n)?;
    }
    let source = match sw.policy {
        PolicyChoice::ExactMfe => PolicySource::ExactMfe,
        PolicyChoice::Trained if ctx.cfg.train.mode == LoopMode::ExactInner => {
            PolicySource::ExactInner(ctx.cfg.train.clone())
        }
        PolicyChoice::Trained => PolicySource::Fixed(deployed_policy(ctx, &spec)?),
    };
    let table = sweep(&spec, &source, &sw.n_list, &sw.r_list, &ctx.cfg.eval, ctx.eval_seed())?;
    if ctx.json {
        print_json(&table);
    } else {
        println!("{:>6} {:>4} {:>12} {:>12} {:>12}", "N", "R", "deployed", "bestresp", "gap");
        for row in &table.rows {
            let r = row.r.map(|v| v.to_string()).unwrap_or_else(|| "inf".into());
            println!(
                "{:>6} {:>4} {:>12.6} {:>12.6} {:>12.3e}",
                row.n, r, row.deployed, row.best_response, row.gap
            );
        }
        println!("slope of gap against N - 1: {}", opt_fmt(table.n_slope));
        println!("per-round gap ratio: {}", opt_fmt(table.r_ratio));
    }
    if let Some(mut dir) = ctx.run_dir()? {
        let (h, rows) = gap_table(&table.rows);
        dir.write_csv("sweep.csv", &h, &rows)?;
        dir.write_json("sweep.json", &table)?;
        dir.finish(ctx.command, &ctx.cfg, started)?;
    }
    Ok(())
}

fn opt_fmt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
}

#[derive(Debug, Clone, Serialize)]
struct CriticBenchRow {
    t: usize,
    seed: usize,
    relative_error: f64,
    squared_error: f64,
}

pub fn critic_bench(ctx: &Context) -> Result<(), CliError> {
    let started = unix_now();
    let spec = ctx.cfg.spec()?;
    let bench = &ctx.cfg.critic_bench;
    let learner = &ctx.cfg.train.learner;
    let critic = match learner.critic {
        CriticKind::Gtd => critic_gtd,
        CriticKind::Lstd => critic_lstd,
        CriticKind::Exact => {
            return Err(CliError::Usage("critic-bench needs a sampled critic (gtd or lstd)".into()));
        }
    };
    if bench.t_list.is_empty() || bench.seeds == 0 {
        return Err(CliError::Usage("critic_bench needs a non-empty t_list and seeds >= 1".into()));
    }

    let (k, f) = match (&bench.k, &bench.f) {
        (Some(k), Some(f)) => (FeedbackPolicy::new(from_rows("k", k)?)?, from_rows("f", f)?),
        (k, f) => {
            let sol = solve_mfe(&spec, FIXED_POINT_TOL)?;
            let k = match k {
                Some(k) => FeedbackPolicy::new(from_rows("k", k)?)?,
                None => sol.k_star.clone(),
            };
            let f = match f {
                Some(f) => from_rows("f", f)?,
                None => sol.f_star.clone(),
            };
            (k, f)
        }
    };
    k.check_spec(&spec)?;
    let mf = MeanFieldLaw::for_spec(&spec, f)?;
    let truth = true_theta(&k, &mf, &spec)?;
    let opts = RolloutOptions {
        restart_every: learner.episode_len,
        ..Default::default()
    };

    let mut rows = Vec::new();
    for &t in &bench.t_list {
        for seed in 0..bench.seeds {
            let traj = rollout_with(&k, &mf, &spec, t, derive_seed(ctx.cfg.seed, &[2, t as u64, seed as u64]), &opts)?;
            let est = critic(&traj, learner)?;
            rows.push(CriticBenchRow {
                t,
                seed,
                relative_error: est.relative_error(&truth),
                squared_error: (est.theta() - truth.theta()).norm_squared(),
            });
        }
    }

    let medians: Vec<(usize, f64, f64)> = bench
        .t_list
        .iter()
        .map(|&t| {
            let sq: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.squared_error).collect();
            let rel: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.relative_error).collect();
            (t, median(sq), median(rel))
        })
        .collect();
    let decreasing = medians.windows(2).all(|w| w[1].1 < w[0].1);
    if ctx.json {
        print_json(&rows);
    } else {
        println!("critic {:?}, ||theta|| = {:.6}", learner.critic, truth.norm());
        println!("{:>9} {:>14} {:>14}", "T", "median sq err", "median rel err");
        for (t, sq, rel) in &medians {
            println!("{t:>9} {sq:>14.4e} {rel:>14.4}");
        }
        println!("median squared error strictly decreasing: {decreasing}");
        let log_t: Vec<f64> = medians.iter().map(|m| (m.0 as f64).ln()).collect();
        let log_e: Vec<f64> = medians.iter().map(|m| m.2.ln()).collect();
        println!("log-log slope of relative error against T: {}", opt_fmt(ols_slope(&log_t, &log_e)));
    }
    if let Some(mut dir) = ctx.run_dir()? {
        let header = ["T", "seed", "relative_error", "squared_error"].map(String::from).to_vec();
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.t.to_string(), r.seed.to_string(), format!("{}", r.relative_error), format!("{}", r.squared_error)])
            .collect();
        dir.write_csv("critic_bench.csv", &header, &body)?;
        dir.finish(ctx.command, &ctx.cfg, started)?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
