//! Finite-population deployment of a mean-field controller and estimation of
//! its ε-Nash gap.
//!
//! Every agent plays `U_tⁿ = -K₁ Z_tⁿ - K₂ Fᵗ ν₀`. The gap of agent `n` is its
//! deployed cost minus the cost of a best response while everyone else keeps
//! the deployed rule. Two best responses are available:
//!
//! * [`BestResponseKind::Tracking`] — the model-based tracking controller
//!   against the deterministic reference `Fᵗ ν₀`. Against an exact equilibrium
//!   this controller coincides with the deployed rule, so its gap is zero.
//! * [`BestResponseKind::FullInformation`] — the stationary optimal controller
//!   of agent `n` given its own state and the other agents' empirical mean,
//!   whose dynamics under the deployed rule are known. Its gap is the exact
//!   finite-population incentive to deviate and scales like `1/(N-1)`.
//!
//! Deployed and best-response runs use common random numbers, so the gap
//! standard error is the paired one.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_discrete_lyapunov;
use crate::mfgloop::{run_algorithm1, LoopConfig, LoopMode};
use crate::model::{FeedbackPolicy, GameSpec, MeanFieldLaw};
use crate::oracle::{compute_costate, solve_mfe, solve_riccati, RiccatiData};
use crate::sim::{derive_seed, matvec_into, mean_and_stderr, population_costs, AgentPolicy, PopulationOptions};

/// `U_t = -K₁ Z_t - K₂ Fᵗ ν₀` with the reference term precomputed per step.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployedPolicy {
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub nu0: DVector<f64>,
    /// `K₂ Fᵗ ν₀` for `t < len`, flattened `p` entries per step.
    offsets: Vec<f64>,
}

pub fn deploy(k: &FeedbackPolicy, f: &DMatrix<f64>, nu0: &DVector<f64>) -> Result<DeployedPolicy> {
    let m = k.state_dim();
    if f.shape() != (m, m) || nu0.len() != m {
        return Err(Error::Dimension {
            field: "deploy",
            expected: format!("F {m}x{m}, nu0 {m}"),
            found: format!("F {}x{}, nu0 {}", f.nrows(), f.ncols(), nu0.len()),
        });
    }
    Ok(DeployedPolicy {
        k1: k.k1(),
        k2: k.k2(),
        f: f.clone(),
        nu0: nu0.clone(),
        offsets: Vec::new(),
    })
}

impl DeployedPolicy {
    pub fn gain(&self) -> FeedbackPolicy {
        FeedbackPolicy::from_blocks(&self.k1, &self.k2).expect("blocks share a shape")
    }

    /// Precomputes the reference term for steps `0..horizon`.
    pub fn prepare(&mut self, horizon: usize) {
        let p = self.k1.nrows();
        let have = self.offsets.len() / p;
        if have >= horizon {
            return;
        }
        let mut z = &self.f.pow(have as u32) * &self.nu0;
        for _ in have..horizon {
            let o = &self.k2 * &z;
            self.offsets.extend(o.iter());
            z = &self.f * z;
        }
    }

    /// Reference term `K₂ Fᵗ ν₀`.
    pub fn offset(&self, t: usize) -> DVector<f64> {
        let p = self.k1.nrows();
        if (t + 1) * p <= self.offsets.len() {
            DVector::from_column_slice(&self.offsets[t * p..(t + 1) * p])
        } else {
            &self.k2 * self.f.pow(t as u32) * &self.nu0
        }
    }

    /// `U_t` for state `z` (allocating convenience form).
    pub fn action(&self, t: usize, z: &DVector<f64>) -> DVector<f64> {
        -(&self.k1 * z) - self.offset(t)
    }
}

impl AgentPolicy for DeployedPolicy {
    fn control_dim(&self) -> usize {
        self.k1.nrows()
    }

    fn action_into(&self, t: usize, z: &[f64], _others: &[f64], out: &mut [f64]) {
        matvec_into(&self.k1, z, out);
        let p = out.len();
        if (t + 1) * p <= self.offsets.len() {
            for i in 0..p {
                out[i] = -out[i] - self.offsets[t * p + i];
            }
        } else {
            let o = self.offset(t);
            for i in 0..p {
                out[i] = -out[i] - o[i];
            }
        }
    }
}

/// Which controller stands in for the best response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BestResponseKind {
    #[default]
    Tracking,
    FullInformation,
}

/// Tracking controller `U_t = G_P P A Z_t + G_P λ_{t+1}` against `Z̄_t = Fᵗ ν₀`.
struct TrackingResponse {
    k1: DMatrix<f64>,
    /// `G_P λ_{t+1}` per step, flattened.
    feedforward: Vec<f64>,
}

impl TrackingResponse {
    fn new(dp: &DeployedPolicy, spec: &GameSpec, rd: &RiccatiData, horizon: usize) -> Result<Self> {
        let mf = MeanFieldLaw::new(dp.f.clone(), dp.nu0.clone())?;
        let refs = mf.trajectory(horizon + 1);
        // λ_{horizon} by the series, then λ_t = H_P λ_{t+1} - C_Z Z̄_t backwards.
        let mut lam = compute_costate(&mf, horizon, rd, spec, 1e-15)?;
        let p = spec.control_dim();
        let mut feedforward = vec![0.0; horizon * p];
        for t in (0..horizon).rev() {
            let ff = &rd.g * &lam;
            feedforward[t * p..(t + 1) * p].copy_from_slice(ff.as_slice());
            lam = &rd.h * lam - &spec.c_z * &refs[t];
        }
        Ok(TrackingResponse {
            k1: -(&rd.g * &rd.p * &spec.a),
            feedforward,
        })
    }
}

impl AgentPolicy for TrackingResponse {
    fn control_dim(&self) -> usize {
        self.k1.nrows()
    }

    fn action_into(&self, t: usize, z: &[f64], _others: &[f64], out: &mut [f64]) {
        matvec_into(&self.k1, z, out);
        let p = out.len();
        for i in 0..p {
            out[i] = -out[i] + self.feedforward[t * p + i];
        }
    }
}

/// Stationary optimal controller `U = -[K_z K_o](Z; Z̄ᴺ)` of one agent facing
/// `N - 1` others who play `-K₁ Z`: the others' mean evolves as
/// `Z̄' = (A - B K₁) Z̄ + W̄` with `Cov W̄ = Σ_w/(N-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullInformationResponse {
    pub gain: DMatrix<f64>,
    /// Value matrix of the two-block problem.
    pub p: DMatrix<f64>,
    /// Optimal long-run average cost.
    pub cost: f64,
}

fn full_information_system(k1: &DMatrix<f64>, spec: &GameSpec, n_agents: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = spec.state_dim();
    let p = spec.control_dim();
    let mut a = DMatrix::zeros(2 * m, 2 * m);
    a.view_mut((0, 0), (m, m)).copy_from(&spec.a);
    a.view_mut((m, m), (m, m)).copy_from(&(&spec.a - &spec.b * k1));
    let mut b = DMatrix::zeros(2 * m, p);
    b.view_mut((0, 0), (m, p)).copy_from(&spec.b);
    let mut q = DMatrix::zeros(2 * m, 2 * m);
    q.view_mut((0, 0), (m, m)).copy_from(&spec.c_z);
    q.view_mut((m, m), (m, m)).copy_from(&spec.c_z);
    q.view_mut((0, m), (m, m)).copy_from(&(-&spec.c_z));
    q.view_mut((m, 0), (m, m)).copy_from(&(-&spec.c_z));
    let mut w = DMatrix::zeros(2 * m, 2 * m);
    w.view_mut((0, 0), (m, m)).copy_from(&spec.sigma_w);
    w.view_mut((m, m), (m, m)).copy_from(&(&spec.sigma_w / (n_agents - 1) as f64));
    (a, b, q, w)
}

pub fn full_information_response(k1: &DMatrix<f64>, spec: &GameSpec, n_agents: usize) -> Result<FullInformationResponse> {
    if n_agents < 2 {
        return Err(Error::InvalidArgument("a population needs at least 2 agents".into()));
    }
    let (a, b, q, w) = full_information_system(k1, spec, n_agents);
    let (p, _) = solve_riccati(&a, &b, &q, &spec.c_u)?;
    let s = &spec.c_u + b.transpose() * &p * &b;
    let gain = s
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("C_U + BᵀPB is not positive definite".into()))?
        .solve(&(b.transpose() * &p * &a));
    let cost = (&p * &w).trace();
    Ok(FullInformationResponse { gain, p, cost })
}

impl AgentPolicy for FullInformationResponse {
    fn control_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn action_into(&self, _t: usize, z: &[f64], others: &[f64], out: &mut [f64]) {
        let m = z.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..out.len() {
            let mut acc = 0.0;
            for j in 0..m {
                acc += self.gain[(i, j)] * z[j] + self.gain[(i, m + j)] * others[j];
            }
            out[i] = -acc;
        }
    }
}

/// Exact stationary costs of the deployed state feedback and of the
/// full-information best response in an `N`-agent population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactGap {
    pub n: usize,
    pub deployed: f64,
    pub best_response: f64,
    pub gap: f64,
}

/// Long-run gap of `U = -K₁ Z` (the reference term decays and does not affect averages).
pub fn exact_full_information_gap(k1: &DMatrix<f64>, spec: &GameSpec, n_agents: usize) -> Result<ExactGap> {
    let br = full_information_response(k1, spec, n_agents)?;
    let (a, b, q, w) = full_information_system(k1, spec, n_agents);
    let mut k = DMatrix::zeros(k1.nrows(), a.nrows());
    k.view_mut((0, 0), k1.shape()).copy_from(k1);
    let l = &a - &b * &k;
    let pk = solve_discrete_lyapunov(&l, &(&q + k.transpose() * &spec.c_u * &k))?;
    let deployed = (&pk * &w).trace();
    Ok(ExactGap {
        n: n_agents,
        deployed,
        best_response: br.cost,
        gap: deployed - br.cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizon: usize,
    pub reps: usize,
    /// Fraction of each horizon discarded before averaging.
    pub burn_in: f64,
    pub best_response: BestResponseKind,
    /// Index of the evaluated agent.
    pub agent: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizon: 5_000,
            reps: 20,
            burn_in: 0.1,
            best_response: BestResponseKind::Tracking,
            agent: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if n_agents < 2 {
            return Err(Error::InvalidArgument(format!("N must be at least 2, got {n_agents}")));
        }
        if self.reps < 2 {
            return Err(Error::InvalidArgument("at least 2 replications are needed".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) || self.horizon == 0 {
            return Err(Error::Config("burn_in must lie in [0, 1) and horizon be positive".into()));
        }
        if self.agent >= n_agents {
            return Err(Error::InvalidArgument(format!("agent {} out of range for N = {n_agents}", self.agent)));
        }
        Ok(())
    }

    fn burn_in_steps(&self) -> usize {
        (self.burn_in * self.horizon as f64).floor() as usize
    }
}

/// Monte Carlo cost with its standard error across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub reps: usize,
    pub diverged: bool,
}

fn rep_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, &[rep as u64])
}

/// Per-replication time-average cost of the evaluated agent, optionally with
/// that agent's policy replaced.
fn agent_costs(
    dp: &DeployedPolicy,
    deviation: Option<&(dyn AgentPolicy + Sync)>,
    n_agents: usize,
    spec: &GameSpec,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate(n_agents)?;
    (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let mut policies: Vec<&(dyn AgentPolicy + Sync)> = vec![dp; n_agents];
            if let Some(dev) = deviation {
                policies[cfg.agent] = dev;
            }
            let out = population_costs(
                &policies,
                spec,
                cfg.horizon,
                cfg.burn_in_steps(),
                rep_seed(seed, rep),
                &PopulationOptions::default(),
            )?;
            Ok(out.average[cfg.agent])
        })
        .collect()
}

fn summarize(values: &[f64]) -> CostEstimate {
    let diverged = values.iter().any(|v| !v.is_finite());
    let (mean, stderr) = mean_and_stderr(values);
    CostEstimate {
        mean,
        stderr,
        reps: values.len(),
        diverged,
    }
}

/// Time-average cost of one agent when everyone plays `dp`.
pub fn estimate_deployed_cost(
    dp: &DeployedPolicy,
    n_agents: usize,
    spec: &GameSpec,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<CostEstimate> {
    let mut dp = dp.clone();
    dp.prepare(cfg.horizon);
    Ok(summarize(&agent_costs(&dp, None, n_agents, spec, cfg, seed)?))
}

fn build_response(
    dp: &DeployedPolicy,
    n_agents: usize,
    spec: &GameSpec,
    rd: &RiccatiData,
    cfg: &EvalConfig,
) -> Result<Box<dyn AgentPolicy + Sync>> {
    Ok(match cfg.best_response {
        BestResponseKind::Tracking => Box::new(TrackingResponse::new(dp, spec, rd, cfg.horizon)?),
        BestResponseKind::FullInformation => Box::new(full_information_response(&dp.k1, spec, n_agents)?),
    })
}

/// Time-average cost of the evaluated agent playing the configured best
/// response while the others play `dp`.
pub fn best_response_cost(
    dp: &DeployedPolicy,
    n_agents: usize,
    spec: &GameSpec,
    rd: &RiccatiData,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<CostEstimate> {
    let mut dp = dp.clone();
    dp.prepare(cfg.horizon);
    let br = build_response(&dp, n_agents, spec, rd, cfg)?;
    Ok(summarize(&agent_costs(&dp, Some(br.as_ref()), n_agents, spec, cfg, seed)?))
}

/// ε-Nash gap estimate at one population size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeGapEstimate {
    pub n: usize,
    /// Outer rounds that produced the deployed policy; `None` for the exact equilibrium.
    pub r: Option<usize>,
    pub deployed: f64,
    pub deployed_se: f64,
    pub best_response: f64,
    pub best_response_se: f64,
    /// `deployed - best_response`.
    pub gap: f64,
    /// Standard error of the paired per-replication differences.
    pub gap_se: f64,
    pub reps: usize,
    pub horizon: usize,
    pub best_response_kind: BestResponseKind,
    pub diverged: bool,
}

/// Deployed and best-response costs on common random numbers.
pub fn estimate_gap(
    dp: &DeployedPolicy,
    n_agents: usize,
    spec: &GameSpec,
    rd: &RiccatiData,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<NeGapEstimate> {
    let mut dp = dp.clone();
    dp.prepare(cfg.horizon);
    let br = build_response(&dp, n_agents, spec, rd, cfg)?;
    let dep = agent_costs(&dp, None, n_agents, spec, cfg, seed)?;
    let best = agent_costs(&dp, Some(br.as_ref()), n_agents, spec, cfg, seed)?;
    let diffs: Vec<f64> = dep.iter().zip(&best).map(|(a, b)| a - b).collect();
    let (d, b) = (summarize(&dep), summarize(&best));
    let (_, gap_se) = mean_and_stderr(&diffs);
    Ok(NeGapEstimate {
        n: n_agents,
        r: None,
        deployed: d.mean,
        deployed_se: d.stderr,
        best_response: b.mean,
        best_response_se: b.stderr,
        gap: d.mean - b.mean,
        gap_se,
        reps: cfg.reps,
        horizon: cfg.horizon,
        best_response_kind: cfg.best_response,
        diverged: d.diverged || b.diverged,
    })
}

/// Policies deployed by a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySource {
    /// The exact equilibrium (`R = ∞`).
    ExactMfe,
    /// `R` exact-inner outer rounds from the given loop configuration.
    ExactInner(LoopConfig),
    /// A fixed, already deployed policy.
    Fixed(DeployedPolicy),
}

/// Full-factorial gap table with fitted rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    /// Rows sorted by `(R, N)`.
    pub rows: Vec<NeGapEstimate>,
    /// Log-log slope of gap against `N - 1` at the first `R`.
    pub n_slope: Option<f64>,
    /// Per-round decay ratio of gap against `R` at the largest `N`.
    pub r_ratio: Option<f64>,
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (sxx > 0.0 && slope.is_finite()).then_some(slope)
}

/// Log-log slope of gap against `N - 1`; `None` unless every gap is positive.
pub fn fit_n_slope(ns: &[usize], gaps: &[f64]) -> Option<f64> {
    if gaps.iter().any(|g| !(*g > 0.0)) {
        return None;
    }
    let x: Vec<f64> = ns.iter().map(|&n| ((n - 1) as f64).ln()).collect();
    let y: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    ols_slope(&x, &y)
}

/// Per-round ratio `exp(slope)` of `ln gap` against `R`; `None` unless every gap is positive.
pub fn fit_r_ratio(rs: &[usize], gaps: &[f64]) -> Option<f64> {
    if gaps.iter().any(|g| !(*g > 0.0)) {
        return None;
    }
    let x: Vec<f64> = rs.iter().map(|&r| r as f64).collect();
    let y: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    ols_slope(&x, &y).map(f64::exp)
}

fn policy_for(spec: &GameSpec, source: &PolicySource, r: Option<usize>) -> Result<DeployedPolicy> {
    match (source, r) {
        (PolicySource::Fixed(dp), _) => Ok(dp.clone()),
        (PolicySource::ExactMfe, _) | (PolicySource::ExactInner(_), None) => {
            let sol = solve_mfe(spec, 1e-13)?;
            deploy(&sol.k_star, &sol.f_star, &spec.nu0)
        }
        (PolicySource::ExactInner(cfg), Some(r)) => {
            let cfg = LoopConfig {
                rounds: r,
                mode: LoopMode::ExactInner,
                ..cfg.clone()
            };
            let rep = run_algorithm1(spec, &cfg)?;
            // The deployed pair is the last round's gain with the mean field it produced.
            deploy(&rep.final_k_policy(), &rep.final_f_matrix(), &spec.nu0)
        }
    }
}

/// Gap table over `n_list × r_list`. For sources other than
/// [`PolicySource::ExactInner`] the rounds are irrelevant and one `R = ∞` row
/// per `N` is produced.
pub fn sweep(
    spec: &GameSpec,
    source: &PolicySource,
    n_list: &[usize],
    r_list: &[usize],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<SweepTable> {
    if n_list.is_empty() {
        return Err(Error::InvalidArgument("N list is empty".into()));
    }
    let rounds: Vec<Option<usize>> = match source {
        PolicySource::ExactInner(_) => {
            if r_list.is_empty() {
                return Err(Error::InvalidArgument("R list is empty".into()));
            }
            let mut rs = r_list.to_vec();
            rs.sort_unstable();
            rs.dedup();
            rs.into_iter().map(Some).collect()
        }
        _ => vec![None],
    };
    let mut ns = n_list.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let rd = crate::oracle::solve_dare(spec)?;

    let mut rows = Vec::with_capacity(rounds.len() * ns.len());
    for &r in &rounds {
        let dp = policy_for(spec, source, r)?;
        for &n in &ns {
            let point_seed = derive_seed(seed, &[n as u64, r.map_or(u64::MAX, |v| v as u64)]);
            let mut row = estimate_gap(&dp, n, spec, &rd, cfg, point_seed)?;
            row.r = r;
            rows.push(row);
        }
    }

    let n_slope = if ns.len() >= 2 {
        let first: Vec<&NeGapEstimate> = rows.iter().filter(|row| row.r == rounds[0]).collect();
        fit_n_slope(
            &first.iter().map(|row| row.n).collect::<Vec<_>>(),
            &first.iter().map(|row| row.gap).collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let r_ratio = if rounds.len() >= 2 {
        let n_max = *ns.last().expect("nonempty");
        let at: Vec<&NeGapEstimate> = rows.iter().filter(|row| row.n == n_max).collect();
        fit_r_ratio(
            &at.iter().map(|row| row.r.expect("exact-inner rows carry R")).collect::<Vec<_>>(),
            &at.iter().map(|row| row.gap).collect::<Vec<_>>(),
        )
    } else {
        None
    };
    Ok(SweepTable { rows, n_slope, r_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_cost, solve_dare, stationary_agent_covariance};
    use approx::assert_abs_diff_eq;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn mfe_policy(spec: &GameSpec) -> DeployedPolicy {
        let sol = solve_mfe(spec, 1e-13).unwrap();
        deploy(&sol.k_star, &sol.f_star, &spec.nu0).unwrap()
    }

    #[test]
    fn deploy_examples() {
        let spec = GameSpec::reference_scalar();
        let k = FeedbackPolicy::from_blocks(&scalar(0.4), &scalar(0.0)).unwrap();
        let dp = deploy(&k, &scalar(0.3), &spec.nu0).unwrap();
        let z = DVector::from_element(1, 2.0);
        assert_eq!(dp.action(3, &z)[0], -0.8);

        let k = FeedbackPolicy::from_blocks(&scalar(0.4), &scalar(0.5)).unwrap();
        let dp = deploy(&k, &scalar(0.3), &DVector::zeros(1)).unwrap();
        assert_eq!(dp.action(0, &z)[0], -0.8);

        let mut dp = mfe_policy(&spec);
        dp.prepare(40);
        for t in [0usize, 5, 39] {
            let want = dp.k2[(0, 0)] * 0.3f64.powi(t as i32);
            assert_abs_diff_eq!(dp.offset(t)[0], want, epsilon = 1e-15);
        }
        assert!(dp.offset(39)[0].abs() < 1e-20);
        assert_abs_diff_eq!(dp.offset(45)[0], dp.k2[(0, 0)] * 0.3f64.powi(45), epsilon = 1e-30);
    }

    #[test]
    fn noiseless_deployed_cost_is_closed_form() {
        let mut spec = GameSpec::reference_scalar();
        spec.sigma_w = scalar(0.0);
        spec.sigma_0 = scalar(0.0);
        let dp = mfe_policy(&spec);
        let cfg = EvalConfig {
            horizon: 50,
            reps: 2,
            burn_in: 0.0,
            ..Default::default()
        };
        let est = estimate_deployed_cost(&dp, 3, &spec, &cfg, 0).unwrap();
        // Every agent follows z_t = 0.3ᵗ, so deviations vanish and u_t = -(K₁ + K₂) 0.3ᵗ.
        let k = dp.k1[(0, 0)] + dp.k2[(0, 0)];
        let closed: f64 = (0..50).map(|t| (k * 0.3f64.powi(t)).powi(2)).sum::<f64>() / 50.0;
        assert_abs_diff_eq!(est.mean, closed, epsilon = 1e-18);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn deployed_cost_is_deterministic() {
        let spec = GameSpec::reference_scalar();
        let dp = mfe_policy(&spec);
        let cfg = EvalConfig { horizon: 300, reps: 4, ..Default::default() };
        let a = estimate_deployed_cost(&dp, 8, &spec, &cfg, 5).unwrap();
        let b = estimate_deployed_cost(&dp, 8, &spec, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tracking_response_reproduces_the_equilibrium_rule() {
        let spec = GameSpec::reference_scalar();
        let rd = solve_dare(&spec).unwrap();
        let mut dp = mfe_policy(&spec);
        dp.prepare(100);
        let br = TrackingResponse::new(&dp, &spec, &rd, 100).unwrap();
        let mut u = [0.0];
        for t in 0..100 {
            br.action_into(t, &[0.7], &[0.0], &mut u);
            assert_abs_diff_eq!(u[0], dp.action(t, &DVector::from_element(1, 0.7))[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn tracking_feedforward_matches_direct_costate() {
        let spec = GameSpec::reference_scalar();
        let rd = solve_dare(&spec).unwrap();
        let k = FeedbackPolicy::from_blocks(&scalar(0.1), &scalar(0.2)).unwrap();
        let dp = deploy(&k, &scalar(0.5), &spec.nu0).unwrap();
        let br = TrackingResponse::new(&dp, &spec, &rd, 60).unwrap();
        let mf = MeanFieldLaw::for_spec(&spec, scalar(0.5)).unwrap();
        for t in [0usize, 1, 17, 59] {
            let lam = compute_costate(&mf, t + 1, &rd, &spec, 1e-16).unwrap();
            assert_abs_diff_eq!(br.feedforward[t], (&rd.g * lam)[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn exact_gap_scales_inversely_with_population() {
        let spec = GameSpec::reference_scalar();
        let dp = mfe_policy(&spec);
        let g: Vec<ExactGap> = [2usize, 4, 16, 64, 256]
            .iter()
            .map(|&n| exact_full_information_gap(&dp.k1, &spec, n).unwrap())
            .collect();
        for e in &g {
            assert!(e.gap > 0.0);
            assert!(e.best_response <= e.deployed);
        }
        let base = g[0].gap * (g[0].n - 1) as f64;
        for e in &g[1..] {
            assert_abs_diff_eq!(e.gap * (e.n - 1) as f64, base, epsilon = 1e-9 * base.max(1.0));
        }
        // Deployed cost of -K₁Z at the equilibrium tends to the mean-field optimum.
        // Only the tracking term feels the others' fluctuation: C_Z Σ₁₁ (1 + 1/(N-1)) + K₁ᵀC_U K₁ Σ₁₁.
        let quiet = spec.with_exploration(0.0);
        let s11 = stationary_agent_covariance(&dp.gain(), &quiet).unwrap()[(0, 0)];
        let k1 = dp.k1[(0, 0)];
        let want = 0.1 * s11 * (1.0 + 1.0 / 255.0) + k1 * k1 * s11;
        assert_abs_diff_eq!(g[4].deployed, want, epsilon = 1e-12);
        let mf = MeanFieldLaw::for_spec(&spec, dp.f.clone()).unwrap();
        let j = exact_cost(&dp.gain(), &mf, &quiet).unwrap();
        assert_abs_diff_eq!(g[4].deployed - j, 0.1 * s11 / 255.0, epsilon = 1e-12);
    }

    #[test]
    fn decoupled_agents_have_no_tracking_incentive() {
        let mut spec = GameSpec::reference_scalar();
        spec.c_z = scalar(0.0);
        let rd = solve_dare(&spec).unwrap();
        let dp = mfe_policy(&spec);
        assert_eq!(dp.k1, scalar(0.0));
        let cfg = EvalConfig { horizon: 400, reps: 3, ..Default::default() };
        let est = estimate_gap(&dp, 4, &spec, &rd, &cfg, 1).unwrap();
        assert_eq!(est.deployed, 0.0);
        assert_eq!(est.gap, 0.0);
    }

    #[test]
    fn slope_fits() {
        let ns = [4usize, 16, 64, 256];
        let gaps: Vec<f64> = ns.iter().map(|&n| 2.0 / ((n - 1) as f64).sqrt()).collect();
        assert_abs_diff_eq!(fit_n_slope(&ns, &gaps).unwrap(), -0.5, epsilon = 1e-12);
        assert_eq!(fit_n_slope(&ns, &[1.0, 0.0, 1.0, 1.0]), None);
        let rs = [1usize, 2, 4, 8];
        let gaps: Vec<f64> = rs.iter().map(|&r| 0.44f64.powi(r as i32)).collect();
        assert_abs_diff_eq!(fit_r_ratio(&rs, &gaps).unwrap(), 0.44, epsilon = 1e-12);
    }

    #[test]
    fn single_point_sweep_has_no_fits() {
        let spec = GameSpec::reference_scalar();
        let cfg = EvalConfig { horizon: 200, reps: 2, ..Default::default() };
        let t = sweep(&spec, &PolicySource::ExactMfe, &[8], &[3], &cfg, 0).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.n_slope, None);
        assert_eq!(t.r_ratio, None);
        assert_eq!(t.rows[0].r, None);
    }

    #[test]
    fn eval_config_checks() {
        let cfg = EvalConfig { reps: 1, ..Default::default() };
        assert!(cfg.validate(4).is_err());
        assert!(EvalConfig::default().validate(1).is_err());
        let cfg = EvalConfig { agent: 4, ..Default::default() };
        assert!(cfg.validate(4).is_err());
    }
}
