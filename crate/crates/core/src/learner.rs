//! Model-free inner loop: a critic estimating the quadratic action-value
//! parameter from one on-policy trajectory, and a natural-gradient actor.
//!
//! The action value of `U = -K X + ζ` is `q(x, u) = (x; u)ᵀ Θ (x; u)`, linear
//! in the features `φ = svec((x; u)(x; u)ᵀ)` with parameter `θ = svec(Θ)`.
//! It solves the average-cost Bellman equation `q(x,u) = c - J + E[q(x',u')]`.
//!
//! The default critic is a primal-dual gradient-TD iteration on the projected
//! Bellman error. Its dual and primal updates are preconditioned by a running
//! inverse of the feature second moment: the raw system is badly conditioned
//! (quartic features of a geometric mean-field coordinate), and plain
//! diminishing step sizes make no progress on the small directions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{smat, svec, svec_dim, svec_outer_into};
use crate::model::{FeedbackPolicy, GameSpec, MeanFieldLaw};
use crate::oracle::true_theta;
use crate::sim::{derive_seed, rollout_with, stream_rng, Gaussian, RolloutOptions, Trajectory};

/// Projection radius used when none is configured.
pub const DEFAULT_RHO: f64 = 1e3;

/// Quadratic action-value estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticEstimate {
    theta: DVector<f64>,
    theta_mat: DMatrix<f64>,
    control_dim: usize,
    /// Estimate of the average cost `J`.
    pub avg_cost: f64,
    pub projection_radius: f64,
}

impl CriticEstimate {
    /// From a symmetric matrix; the input is symmetrized.
    pub fn from_matrix(theta: DMatrix<f64>, control_dim: usize, avg_cost: f64, radius: f64) -> Self {
        let theta_mat = (&theta + theta.transpose()) * 0.5;
        CriticEstimate {
            theta: svec(&theta_mat),
            theta_mat,
            control_dim,
            avg_cost,
            projection_radius: radius,
        }
    }

    pub fn from_vector(theta: DVector<f64>, control_dim: usize, avg_cost: f64, radius: f64) -> Result<Self> {
        let theta_mat = smat(&theta)?;
        if control_dim == 0 || control_dim >= theta_mat.nrows() {
            return Err(Error::InvalidArgument(format!(
                "control dimension {control_dim} does not fit a {}x{} parameter",
                theta_mat.nrows(),
                theta_mat.ncols()
            )));
        }
        Ok(CriticEstimate {
            theta,
            theta_mat,
            control_dim,
            avg_cost,
            projection_radius: radius,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn theta_matrix(&self) -> &DMatrix<f64> {
        &self.theta_mat
    }

    pub fn norm(&self) -> f64 {
        self.theta.norm()
    }

    fn state_dim(&self) -> usize {
        self.theta_mat.nrows() - self.control_dim
    }

    /// Control-control block `Θ_uu` (`p x p`).
    pub fn theta_uu(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let p = self.control_dim;
        self.theta_mat.view((n, n), (p, p)).into_owned()
    }

    /// Control-state block `Θ_ux` (`p x 2m`).
    pub fn theta_ux(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let p = self.control_dim;
        self.theta_mat.view((n, 0), (p, n)).into_owned()
    }

    /// Natural-gradient direction `Θ_uu K - Θ_ux`.
    pub fn natural_gradient(&self, k: &FeedbackPolicy) -> Result<DMatrix<f64>> {
        if k.gain().shape() != (self.control_dim, self.state_dim()) {
            return Err(Error::Dimension {
                field: "K",
                expected: format!("{}x{}", self.control_dim, self.state_dim()),
                found: format!("{}x{}", k.gain().nrows(), k.gain().ncols()),
            });
        }
        Ok(self.theta_uu() * k.gain() - self.theta_ux())
    }

    /// Relative parameter error `||θ - θ_ref|| / ||θ_ref||`.
    pub fn relative_error(&self, reference: &CriticEstimate) -> f64 {
        (&self.theta - &reference.theta).norm() / reference.theta.norm()
    }
}

/// Which critic feeds the actor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CriticKind {
    #[default]
    Gtd,
    Lstd,
    /// The model-based parameter of the current gain (no sampling).
    Exact,
}

/// Inner-loop and critic configuration. The exploration scale is taken from the game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Steps per critic call.
    pub t_critic: usize,
    /// Actor-critic iterations per outer round.
    pub s_inner: usize,
    /// Actor step size.
    pub eta: f64,
    pub critic: CriticKind,
    /// Primal step `a / (1 + k)^power`.
    pub step_primal: f64,
    /// Dual step `b / (1 + k)^power`.
    pub step_dual: f64,
    pub step_power: f64,
    /// Projection radius; [`DEFAULT_RHO`] when absent.
    pub rho_theta: Option<f64>,
    /// Restart the trajectory from the initial law every this many steps.
    pub episode_len: Option<usize>,
    /// Transitions used only to build the preconditioner before updates start.
    pub warmup: usize,
    /// Fraction of the final critic iterates that are averaged.
    pub average_tail: f64,
    /// Estimate the average cost jointly with `θ` instead of as a running mean.
    pub joint_cost: bool,
    /// Preconditioner refresh period in transitions.
    pub precondition_every: usize,
    /// Ridge term of the batch least-squares critic (relative to the data scale).
    pub ridge: f64,
    /// Consecutive rejected actor updates tolerated before aborting.
    pub max_rejections: usize,
    pub probe_steps: usize,
    pub probe_starts: usize,
    pub probe_growth: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            t_critic: 20_000,
            s_inner: 30,
            eta: 0.05,
            critic: CriticKind::Gtd,
            step_primal: 0.2,
            step_dual: 0.35,
            step_power: 0.6,
            rho_theta: None,
            episode_len: Some(100),
            warmup: 1_000,
            average_tail: 0.75,
            joint_cost: false,
            precondition_every: 100,
            ridge: 1e-10,
            max_rejections: 5,
            probe_steps: 2_000,
            probe_starts: 5,
            probe_growth: 1e3,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.t_critic == 0 || self.s_inner == 0 {
            return bad("t_critic and s_inner must be positive");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be a nonnegative finite number");
        }
        if !(self.step_primal > 0.0 && self.step_dual > 0.0 && self.step_power > 0.0) {
            return bad("critic step sizes must be positive");
        }
        if self.rho_theta.is_some_and(|r| !(r > 0.0)) {
            return bad("rho_theta must be positive");
        }
        if self.episode_len == Some(0) || self.precondition_every == 0 {
            return bad("episode_len and precondition_every must be positive");
        }
        if !(self.average_tail > 0.0 && self.average_tail <= 1.0) {
            return bad("average_tail must lie in (0, 1]");
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be nonnegative");
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.rho_theta.unwrap_or(DEFAULT_RHO)
    }
}

struct Transitions<'a> {
    traj: &'a Trajectory,
    v: Vec<f64>,
    v_next: Vec<f64>,
}

impl<'a> Transitions<'a> {
    fn new(traj: &'a Trajectory) -> Self {
        let k = traj.state_dim() + traj.control_dim();
        Transitions {
            traj,
            v: vec![0.0; k],
            v_next: vec![0.0; k],
        }
    }

    fn load(buf: &mut [f64], traj: &Trajectory, t: usize) {
        let n = traj.state_dim();
        buf[..n].copy_from_slice(traj.x.column(t).as_slice());
        buf[n..].copy_from_slice(traj.u.column(t).as_slice());
    }

    /// Features of the transition at `t` into `phi`, `phi_next`.
    fn features(&mut self, t: usize, phi: &mut [f64], phi_next: &mut [f64]) {
        Self::load(&mut self.v, self.traj, t);
        Self::load(&mut self.v_next, self.traj, t + 1);
        svec_outer_into(&self.v, phi);
        svec_outer_into(&self.v_next, phi_next);
    }
}

fn check_trajectory(traj: &Trajectory, cfg: &LearnerConfig) -> Result<usize> {
    cfg.validate()?;
    if traj.diverged {
        return Err(Error::Diverged { step: traj.len() });
    }
    let d = svec_dim(traj.state_dim() + traj.control_dim());
    if traj.len() < d.max(2) {
        return Err(Error::InsufficientData {
            steps: traj.len(),
            required: d.max(2),
        });
    }
    Ok(d)
}

fn project(theta: &mut DVector<f64>, radius: f64) {
    let n = theta.norm();
    if n > radius {
        *theta *= radius / n;
    }
}

fn inverse_spd(m: &DMatrix<f64>, jitter: f64) -> DMatrix<f64> {
    let d = m.nrows();
    let top = m.diagonal().max();
    let scale = if top > 0.0 { top } else { 1.0 };
    let reg = m + DMatrix::identity(d, d) * (jitter * scale);
    match reg.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => reg.pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::identity(d, d)),
    }
}

/// Primal-dual gradient-TD critic on one trajectory, processed in order.
///
/// With `δ_t = c_t - J̄_t - ⟨φ_t - φ_{t+1}, θ⟩` and `M̂⁻¹` the running inverse of
/// `E[φφᵀ]`, the updates are
/// `ν ← ν + β_k (M̂⁻¹ φ_t δ_t - ν)` and `θ ← Π_ρ(θ + α_k M̂⁻¹ (φ_t - φ_{t+1}) φ_tᵀ ν)`.
/// `J̄` is the running mean of the costs; the returned `θ` is the Polyak
/// average of the projected iterates. Transitions across episode restarts are
/// skipped.
pub fn critic_gtd(traj: &Trajectory, cfg: &LearnerConfig) -> Result<CriticEstimate> {
    let d = check_trajectory(traj, cfg)?;
    let radius = cfg.radius();
    // With a jointly estimated average cost the last coordinate carries J
    // against a constant instrument.
    let dd = d + usize::from(cfg.joint_cost);
    let total = (0..traj.len()).filter(|&t| traj.is_transition(t)).count();
    let planned = total.saturating_sub(cfg.warmup);
    let tail_start = ((1.0 - cfg.average_tail) * planned as f64).floor() as usize;

    let mut tr = Transitions::new(traj);
    let mut phi = vec![0.0; d];
    let mut phi_next = vec![0.0; d];
    let mut z = DVector::<f64>::zeros(dd);
    let mut diff = DVector::<f64>::zeros(dd);
    let mut theta = DVector::<f64>::zeros(dd);
    let mut avg = DVector::<f64>::zeros(dd);
    let mut nu = DVector::<f64>::zeros(dd);
    let mut second = DMatrix::<f64>::zeros(dd, dd);
    let mut precond = DMatrix::<f64>::identity(dd, dd);
    let mut pv = DVector::<f64>::zeros(dd);
    let mut jbar = 0.0;
    let mut seen = 0usize;
    let mut transitions = 0usize;
    let mut updates = 0usize;
    let mut averaged = 0usize;

    for t in 0..traj.len() {
        seen += 1;
        jbar += (traj.c[t] - jbar) / seen as f64;
        if !traj.is_transition(t) {
            continue;
        }
        tr.features(t, &mut phi, &mut phi_next);
        for i in 0..d {
            z[i] = phi[i];
            diff[i] = phi[i] - phi_next[i];
        }
        if cfg.joint_cost {
            z[d] = 1.0;
            diff[d] = 1.0;
        }
        second.ger(1.0, &z, &z, 1.0);
        transitions += 1;
        if transitions <= cfg.warmup {
            continue;
        }
        if updates % cfg.precondition_every == 0 {
            precond = inverse_spd(&(&second / transitions as f64), 1e-8);
        }
        let k = updates as f64;
        let alpha = cfg.step_primal / (1.0 + k).powf(cfg.step_power);
        let beta = cfg.step_dual / (1.0 + k).powf(cfg.step_power);
        let baseline = if cfg.joint_cost { 0.0 } else { jbar };
        let delta = traj.c[t] - baseline - diff.dot(&theta);

        pv.gemv(1.0, &precond, &z, 0.0);
        nu *= 1.0 - beta;
        nu.axpy(beta * delta, &pv, 1.0);

        let proj = z.dot(&nu);
        pv.gemv(1.0, &precond, &diff, 0.0);
        theta.axpy(alpha * proj, &pv, 1.0);
        project(&mut theta, radius);

        if updates >= tail_start {
            averaged += 1;
            avg += (&theta - &avg) / averaged as f64;
        }
        updates += 1;
    }
    if averaged == 0 {
        return Err(Error::InsufficientData {
            steps: traj.len(),
            required: cfg.warmup + 2,
        });
    }
    let (theta, cost) = if cfg.joint_cost {
        (avg.rows(0, d).into_owned(), avg[d])
    } else {
        (avg, jbar)
    };
    CriticEstimate::from_vector(theta, traj.control_dim(), cost, radius)
}

/// Batch accumulator of `Σ φ_t (φ_t - φ'_t)ᵀ` and `Σ c_t φ_t`.
#[derive(Debug, Clone)]
pub struct LstdAccumulator {
    a: DMatrix<f64>,
    b: DVector<f64>,
    f: DVector<f64>,
    cost_sum: f64,
    count: usize,
}

impl LstdAccumulator {
    pub fn new(d: usize) -> Self {
        LstdAccumulator {
            a: DMatrix::zeros(d, d),
            b: DVector::zeros(d),
            f: DVector::zeros(d),
            cost_sum: 0.0,
            count: 0,
        }
    }

    pub fn push(&mut self, phi: &DVector<f64>, phi_next: &DVector<f64>, cost: f64) {
        self.a.ger(1.0, phi, &(phi - phi_next), 1.0);
        self.b.axpy(cost, phi, 1.0);
        self.f += phi;
        self.cost_sum += cost;
        self.count += 1;
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Mean of the pushed costs.
    pub fn mean_cost(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.cost_sum / self.count as f64
        }
    }

    /// Solves `(Â + λ s I) θ = Σ (c_t - ĉ) φ_t / n`, with `s` the largest singular value of `Â`.
    pub fn solve(&self, c_hat: f64, ridge: f64) -> Result<DVector<f64>> {
        let d = self.b.len();
        if self.count == 0 {
            return Err(Error::InsufficientData { steps: 0, required: d });
        }
        let n = self.count as f64;
        let rhs = (&self.b - &self.f * c_hat) / n;
        if rhs.iter().all(|&v| v == 0.0) {
            return Ok(DVector::zeros(d));
        }
        let a = &self.a / n;
        let sv = a.clone().svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        let lam = ridge * smax;
        if !(smin + lam > 1e-12 * smax.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient {
                smallest_singular_value: smin,
            });
        }
        let lhs = a + DMatrix::identity(d, d) * lam;
        lhs.lu().solve(&rhs).ok_or(Error::RankDeficient {
            smallest_singular_value: smin,
        })
    }
}

/// Batch least-squares temporal-difference critic on the same data contract as [`critic_gtd`].
///
/// `ĉ` is the mean cost of the trajectory.
pub fn critic_lstd(traj: &Trajectory, cfg: &LearnerConfig) -> Result<CriticEstimate> {
    let d = check_trajectory(traj, cfg)?;
    let mut tr = Transitions::new(traj);
    let mut phi = vec![0.0; d];
    let mut phi_next = vec![0.0; d];
    let mut acc = LstdAccumulator::new(d);
    for t in 0..traj.len() {
        if !traj.is_transition(t) {
            continue;
        }
        tr.features(t, &mut phi, &mut phi_next);
        acc.push(
            &DVector::from_column_slice(&phi),
            &DVector::from_column_slice(&phi_next),
            traj.c[t],
        );
    }
    let c_hat = traj.average_cost();
    let mut theta = acc.solve(c_hat, cfg.ridge)?;
    project(&mut theta, cfg.radius());
    CriticEstimate::from_vector(theta, traj.control_dim(), c_hat, cfg.radius())
}

/// Natural-gradient actor step `K' = K - η (Θ_uu K - Θ_ux)`.
///
/// Rejected with [`Error::SafeguardRejected`] when `Θ_uu` is not positive definite.
pub fn actor_step(k: &FeedbackPolicy, est: &CriticEstimate, eta: f64) -> Result<FeedbackPolicy> {
    let uu = est.theta_uu();
    if (&uu - uu.transpose()).amax() > 1e-10 * uu.amax().max(1.0) || uu.clone().cholesky().is_none() {
        return Err(Error::SafeguardRejected);
    }
    let grad = est.natural_gradient(k)?;
    FeedbackPolicy::new(k.gain() - grad * eta)
}

/// Model-free stability probe: noiseless-control rollouts from random starts.
///
/// Declares `K` unstable when `||X_t||` exceeds `probe_growth` times its
/// initial scale in any of the starts.
pub fn probe_stabilizing(
    k: &FeedbackPolicy,
    mf: &MeanFieldLaw,
    spec: &GameSpec,
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<bool> {
    let quiet = spec.with_exploration(0.0);
    let n = 2 * spec.state_dim();
    let mut rng = stream_rng(derive_seed(seed, &[u64::MAX]), 0);
    let mut start = Gaussian::centered(&DMatrix::identity(n, n));
    for i in 0..cfg.probe_starts {
        let mut x0 = DVector::zeros(n);
        start.sample_into(&mut rng, x0.as_mut_slice());
        let scale = x0.norm().max(1.0);
        let opts = RolloutOptions {
            x0: Some(x0),
            guard: cfg.probe_growth * scale,
            restart_every: None,
        };
        let tr = rollout_with(k, mf, &quiet, cfg.probe_steps, derive_seed(seed, &[i as u64]), &opts)?;
        if tr.diverged {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One row of inner-loop diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerDiagnostic {
    pub s: usize,
    pub est_cost: f64,
    pub theta_norm: f64,
    pub grad_norm: f64,
    pub safeguard_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopResult {
    pub k: FeedbackPolicy,
    pub diagnostics: Vec<InnerDiagnostic>,
    pub rejections: usize,
}

fn critic_for(
    k: &FeedbackPolicy,
    mf: &MeanFieldLaw,
    spec: &GameSpec,
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<CriticEstimate> {
    match cfg.critic {
        CriticKind::Exact => true_theta(k, mf, spec),
        kind => {
            let opts = RolloutOptions {
                restart_every: cfg.episode_len,
                ..Default::default()
            };
            let traj = rollout_with(k, mf, spec, cfg.t_critic, seed, &opts)?;
            if kind == CriticKind::Lstd {
                critic_lstd(&traj, cfg)
            } else {
                critic_gtd(&traj, cfg)
            }
        }
    }
}

/// `S_inner` rounds of rollout → critic → actor against a fixed mean field.
///
/// A rejected or destabilizing update keeps the previous gain; more than
/// `max_rejections` consecutive rejections abort the loop.
pub fn inner_loop(
    k_init: &FeedbackPolicy,
    mf: &MeanFieldLaw,
    spec: &GameSpec,
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<InnerLoopResult> {
    cfg.validate()?;
    k_init.check_spec(spec)?;
    let model_free = cfg.critic != CriticKind::Exact;
    if model_free {
        if !(spec.sigma_explore > 0.0) {
            return Err(Error::InvalidArgument(
                "exploration noise must be positive for the sampled critic".into(),
            ));
        }
        let d = svec_dim(2 * spec.state_dim() + spec.control_dim());
        if cfg.t_critic < d {
            return Err(Error::Config(format!("t_critic = {} is below the feature dimension {d}", cfg.t_critic)));
        }
        if !probe_stabilizing(k_init, mf, spec, cfg, seed)? {
            return Err(Error::InvalidArgument("initial gain failed the stabilizing probe".into()));
        }
    }

    let mut k = k_init.clone();
    let mut diagnostics = Vec::with_capacity(cfg.s_inner);
    let mut streak = 0usize;
    let mut rejections = 0usize;
    for s in 0..cfg.s_inner {
        let step_seed = derive_seed(seed, &[s as u64]);
        let outcome = critic_for(&k, mf, spec, cfg, step_seed)
            .and_then(|est| actor_step(&k, &est, cfg.eta).map(|next| (est, next)));
        match outcome {
            Ok((est, next)) => {
                let grad = est.natural_gradient(&k)?;
                diagnostics.push(InnerDiagnostic {
                    s,
                    est_cost: est.avg_cost,
                    theta_norm: est.norm(),
                    grad_norm: crate::linalg::spectral_norm(&grad),
                    safeguard_flag: false,
                });
                k = next;
                streak = 0;
            }
            Err(e @ (Error::SafeguardRejected | Error::Diverged { .. })) => {
                log::debug!("inner iteration {s}: update rejected ({e})");
                diagnostics.push(InnerDiagnostic {
                    s,
                    est_cost: f64::NAN,
                    theta_norm: f64::NAN,
                    grad_norm: f64::NAN,
                    safeguard_flag: true,
                });
                streak += 1;
                rejections += 1;
                if streak > cfg.max_rejections {
                    return Err(Error::InnerLoopAborted {
                        iteration: s,
                        rejections: streak,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(InnerLoopResult {
        k,
        diagnostics,
        rejections,
    })
}
