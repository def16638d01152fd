//! Trajectory generation.
//!
//! Two data sources: the generic-agent rollout of the augmented system
//! `X = (Z; Z̄)`, which feeds the critic, and the finite-population rollout of
//! `N` coupled agents used for the ε-Nash evaluation.
//!
//! Randomness: every stream is a ChaCha8 generator keyed by a 64-bit seed and
//! a stream index, so agent `n` of a population always sees the same noise no
//! matter how work is scheduled.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, svec_dim, svec_outer_into};
use crate::model::{build_augmented, FeedbackPolicy, GameSpec, MeanFieldLaw};

/// Default divergence guard on `||X_t||₂`.
pub const DEFAULT_GUARD: f64 = 1e8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed of `seed` along a path of integer keys.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws from `N(mean, LLᵀ)` with `L` a fixed square-root factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    factor: DMatrix<f64>,
    zero: bool,
    buf: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let factor = psd_sqrt(cov);
        let zero = factor.amax() == 0.0;
        Gaussian {
            mean: mean.iter().copied().collect(),
            factor,
            zero,
            buf: vec![0.0; mean.len()],
        }
    }

    pub fn centered(cov: &DMatrix<f64>) -> Self {
        Self::new(&DVector::zeros(cov.nrows()), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Writes one draw into `out`. A zero covariance consumes no randomness.
    pub fn sample_into<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut [f64]) {
        out.copy_from_slice(&self.mean);
        if self.zero {
            return;
        }
        for v in self.buf.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = self.dim();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.factor[(i, j)] * self.buf[j];
            }
            out[i] += acc;
        }
    }
}

/// `out = M x` for a dense matrix and slices.
pub(crate) fn matvec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    debug_assert_eq!(x.len(), c);
    debug_assert_eq!(out.len(), r);
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..c {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for i in 0..r {
            out[i] += m[(i, j)] * xj;
        }
    }
}

/// `xᵀ M x`.
pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One generic-agent rollout of the augmented system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Augmented states, one column per step (`2m x T`).
    pub x: DMatrix<f64>,
    /// Controls, one column per step (`p x T`).
    pub u: DMatrix<f64>,
    /// Instantaneous costs `X_tᵀC_X X_t + U_tᵀC_U U_t`.
    pub c: Vec<f64>,
    pub seed: u64,
    /// Initial augmented state actually used.
    pub x0: DVector<f64>,
    /// True when the guard fired; the trajectory is truncated before the offending state.
    pub diverged: bool,
    /// Steps at which the state was re-drawn from the initial law (episode starts after step 0).
    pub restarts: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.u.nrows()
    }

    /// Whether `(X_t, U_t) → (X_{t+1}, U_{t+1})` is a genuine transition.
    pub fn is_transition(&self, t: usize) -> bool {
        t + 1 < self.len() && self.restarts.binary_search(&(t + 1)).is_err()
    }

    /// Plain time average of the costs.
    pub fn average_cost(&self) -> f64 {
        if self.c.is_empty() {
            return 0.0;
        }
        self.c.iter().sum::<f64>() / self.c.len() as f64
    }

    /// Writes the trajectory as CSV with columns `t, x0.., u0.., c`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((0..self.state_dim()).map(|i| format!("x{i}")));
        header.extend((0..self.control_dim()).map(|i| format!("u{i}")));
        header.push("c".into());
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.len() {
            write!(w, "{t}")?;
            for v in self.x.column(t).iter().chain(self.u.column(t).iter()) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", self.c[t])?;
        }
        Ok(())
    }
}

/// Knobs of [`rollout_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOptions {
    /// Initial augmented state; drawn as `(Z₀ ~ N(ν₀, Σ₀), ν₀)` when absent.
    pub x0: Option<DVector<f64>>,
    pub guard: f64,
    /// Re-draw the augmented state from the initial law every this many steps.
    pub restart_every: Option<usize>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            x0: None,
            guard: DEFAULT_GUARD,
            restart_every: None,
        }
    }
}

/// Single-agent rollout of the augmented system under `U = -K X + ζ`.
///
/// No burn-in is discarded.
pub fn rollout_generic(
    k: &FeedbackPolicy,
    mf: &MeanFieldLaw,
    spec: &GameSpec,
    steps: usize,
    seed: u64,
    x0: Option<DVector<f64>>,
) -> Result<Trajectory> {
    rollout_with(k, mf, spec, steps, seed, &RolloutOptions { x0, ..Default::default() })
}

/// [`rollout_generic`] with explicit options.
pub fn rollout_with(
    k: &FeedbackPolicy,
    mf: &MeanFieldLaw,
    spec: &GameSpec,
    steps: usize,
    seed: u64,
    opts: &RolloutOptions,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    k.check_spec(spec)?;
    let aug = build_augmented(spec, mf)?;
    let m = spec.state_dim();
    let n = 2 * m;
    let p = spec.control_dim();
    if let Some(x0) = &opts.x0 {
        if x0.len() != n {
            return Err(Error::Dimension {
                field: "x0",
                expected: format!("{n}"),
                found: format!("{}", x0.len()),
            });
        }
    }
    if opts.restart_every == Some(0) {
        return Err(Error::InvalidArgument("restart_every must be positive".into()));
    }

    let mut rng = stream_rng(seed, 0);
    let mut init = Gaussian::new(&spec.nu0, &spec.sigma_0);
    let mut noise = Gaussian::centered(&spec.sigma_w);
    let sigma = spec.sigma_explore;
    let gain = k.gain();

    let draw_initial = |rng: &mut ChaCha8Rng, init: &mut Gaussian, x: &mut [f64]| {
        init.sample_into(rng, &mut x[..m]);
        x[m..].copy_from_slice(spec.nu0.as_slice());
    };

    let mut x = vec![0.0; n];
    match &opts.x0 {
        Some(x0) => x.copy_from_slice(x0.as_slice()),
        None => draw_initial(&mut rng, &mut init, &mut x),
    }
    let x0 = DVector::from_column_slice(&x);

    let mut xs = DMatrix::zeros(n, steps);
    let mut us = DMatrix::zeros(p, steps);
    let mut cs = Vec::with_capacity(steps);
    let mut restarts = Vec::new();
    let mut diverged = false;
    let mut u = vec![0.0; p];
    let mut next = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut w = vec![0.0; m];

    for t in 0..steps {
        if t > 0 && opts.restart_every.is_some_and(|e| t % e == 0) {
            draw_initial(&mut rng, &mut init, &mut x);
            restarts.push(t);
        }
        let xn = norm(&x);
        if !(xn <= opts.guard) {
            diverged = true;
            break;
        }
        matvec_into(gain, &x, &mut u);
        for v in u.iter_mut() {
            *v = -*v;
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        let c = quad_form(&aug.c_x, &x) + quad_form(&spec.c_u, &u);
        xs.column_mut(t).copy_from_slice(&x);
        us.column_mut(t).copy_from_slice(&u);
        cs.push(c);

        matvec_into(&aug.a_bar, &x, &mut next);
        matvec_into(&aug.b_bar, &u, &mut tmp);
        noise.sample_into(&mut rng, &mut w);
        for i in 0..n {
            next[i] += tmp[i];
        }
        for i in 0..m {
            next[i] += w[i];
        }
        std::mem::swap(&mut x, &mut next);
    }

    let len = cs.len();
    if len < steps {
        xs = xs.columns(0, len).into_owned();
        us = us.columns(0, len).into_owned();
    }
    Ok(Trajectory {
        x: xs,
        u: us,
        c: cs,
        seed,
        x0,
        diverged,
        restarts,
    })
}

/// Critic features `svec((x; u)(x; u)ᵀ)`.
pub fn features(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let v: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
    let mut out = DVector::zeros(svec_dim(v.len()));
    svec_outer_into(&v, out.as_mut_slice());
    out
}

/// A time-indexed control law of one agent in the finite population.
pub trait AgentPolicy: Sync {
    fn control_dim(&self) -> usize;

    /// Writes `U_t` given the agent's own state and the mean of the other agents' states.
    fn action_into(&self, t: usize, z: &[f64], others_mean: &[f64], out: &mut [f64]);
}

impl<P: AgentPolicy + ?Sized> AgentPolicy for &P {
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }

    fn action_into(&self, t: usize, z: &[f64], others_mean: &[f64], out: &mut [f64]) {
        (**self).action_into(t, z, others_mean, out)
    }
}

/// Options of a population rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationOptions {
    /// RNG stream of each agent; defaults to the agent index.
    pub streams: Option<Vec<u64>>,
    pub guard: f64,
}

impl Default for PopulationOptions {
    fn default() -> Self {
        PopulationOptions {
            streams: None,
            guard: DEFAULT_GUARD,
        }
    }
}

/// Full record of an `N`-agent rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTrace {
    /// Per-agent states, `m x T` each.
    pub z: Vec<DMatrix<f64>>,
    /// Per-agent instantaneous costs.
    pub costs: Vec<Vec<f64>>,
    /// Per-agent mean of the other agents' states, `m x T` each.
    pub zbar: Vec<DMatrix<f64>>,
    pub diverged: bool,
}

impl PopulationTrace {
    pub fn horizon(&self) -> usize {
        self.costs.first().map_or(0, Vec::len)
    }

    /// Time-average cost of every agent after discarding the first `burn_in` steps.
    pub fn average_costs(&self, burn_in: usize) -> Vec<f64> {
        self.costs
            .iter()
            .map(|c| {
                let tail = &c[burn_in.min(c.len())..];
                if tail.is_empty() {
                    f64::NAN
                } else {
                    tail.iter().sum::<f64>() / tail.len() as f64
                }
            })
            .collect()
    }
}

/// Shared population simulator; `record` receives `(t, n, z, others_mean, cost)`.
fn simulate_population<P, F>(
    policies: &[P],
    spec: &GameSpec,
    steps: usize,
    seed: u64,
    opts: &PopulationOptions,
    mut record: F,
) -> Result<bool>
where
    P: AgentPolicy,
    F: FnMut(usize, usize, &[f64], &[f64], f64),
{
    let n_agents = policies.len();
    if n_agents < 2 {
        return Err(Error::InvalidArgument(format!(
            "population rollout needs at least 2 agents, got {n_agents}"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    spec.check_dimensions()?;
    let m = spec.state_dim();
    let p = spec.control_dim();
    if let Some(bad) = policies.iter().find(|pol| pol.control_dim() != p) {
        return Err(Error::Dimension {
            field: "policy",
            expected: format!("{p} controls"),
            found: format!("{}", bad.control_dim()),
        });
    }
    let streams: Vec<u64> = match &opts.streams {
        Some(s) if s.len() != n_agents => {
            return Err(Error::Dimension {
                field: "streams",
                expected: format!("{n_agents}"),
                found: format!("{}", s.len()),
            })
        }
        Some(s) => s.clone(),
        None => (0..n_agents as u64).collect(),
    };

    let mut rngs: Vec<ChaCha8Rng> = streams.iter().map(|&s| stream_rng(seed, s)).collect();
    let mut init = Gaussian::new(&spec.nu0, &spec.sigma_0);
    let mut noise = Gaussian::centered(&spec.sigma_w);
    let mut z = vec![0.0; n_agents * m];
    for (i, rng) in rngs.iter_mut().enumerate() {
        init.sample_into(rng, &mut z[i * m..(i + 1) * m]);
    }

    let inv = 1.0 / (n_agents - 1) as f64;
    let mut total = vec![0.0; m];
    let mut others = vec![0.0; m];
    let mut dev = vec![0.0; m];
    let mut u = vec![0.0; p];
    let mut az = vec![0.0; m];
    let mut bu = vec![0.0; m];
    let mut w = vec![0.0; m];
    let mut next = vec![0.0; n_agents * m];

    for t in 0..steps {
        total.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n_agents {
            let zi = &z[i * m..(i + 1) * m];
            if !(norm(zi) <= opts.guard) {
                return Ok(true);
            }
            for k in 0..m {
                total[k] += zi[k];
            }
        }
        for i in 0..n_agents {
            let zi = &z[i * m..(i + 1) * m];
            for k in 0..m {
                others[k] = (total[k] - zi[k]) * inv;
                dev[k] = zi[k] - others[k];
            }
            policies[i].action_into(t, zi, &others, &mut u);
            let c = quad_form(&spec.c_z, &dev) + quad_form(&spec.c_u, &u);
            record(t, i, zi, &others, c);
            matvec_into(&spec.a, zi, &mut az);
            matvec_into(&spec.b, &u, &mut bu);
            noise.sample_into(&mut rngs[i], &mut w);
            let zn = &mut next[i * m..(i + 1) * m];
            for k in 0..m {
                zn[k] = az[k] + bu[k] + w[k];
            }
        }
        std::mem::swap(&mut z, &mut next);
    }
    Ok(false)
}

/// `N`-agent rollout of `Z_{t+1}ⁿ = A Z_tⁿ + B U_tⁿ + W_tⁿ` with per-agent cost
/// `||Z_tⁿ - Z̄ᴺ_{n,t}||²_{C_Z} + ||U_tⁿ||²_{C_U}`, where `Z̄ᴺ_{n,t}` is the mean of
/// the other agents' states.
pub fn rollout_population<P: AgentPolicy>(
    policies: &[P],
    spec: &GameSpec,
    steps: usize,
    seed: u64,
) -> Result<PopulationTrace> {
    rollout_population_with(policies, spec, steps, seed, &PopulationOptions::default())
}

pub fn rollout_population_with<P: AgentPolicy>(
    policies: &[P],
    spec: &GameSpec,
    steps: usize,
    seed: u64,
    opts: &PopulationOptions,
) -> Result<PopulationTrace> {
    let n_agents = policies.len();
    let m = spec.state_dim();
    let mut zs = vec![DMatrix::zeros(m, steps); n_agents];
    let mut zbar = vec![DMatrix::zeros(m, steps); n_agents];
    let mut costs = vec![Vec::with_capacity(steps); n_agents];
    let diverged = simulate_population(policies, spec, steps, seed, opts, |t, n, z, others, c| {
        zs[n].column_mut(t).copy_from_slice(z);
        zbar[n].column_mut(t).copy_from_slice(others);
        costs[n].push(c);
    })?;
    let len = costs.iter().map(Vec::len).min().unwrap_or(0);
    if len < steps {
        for n in 0..n_agents {
            zs[n] = zs[n].columns(0, len).into_owned();
            zbar[n] = zbar[n].columns(0, len).into_owned();
            costs[n].truncate(len);
        }
    }
    Ok(PopulationTrace {
        z: zs,
        costs,
        zbar,
        diverged,
    })
}

/// Time-average costs of a population rollout without storing the states.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCosts {
    /// Per-agent average over steps `burn_in..T`.
    pub average: Vec<f64>,
    pub diverged: bool,
}

/// Streaming variant of [`rollout_population`] returning only time-average costs.
pub fn population_costs<P: AgentPolicy>(
    policies: &[P],
    spec: &GameSpec,
    steps: usize,
    burn_in: usize,
    seed: u64,
    opts: &PopulationOptions,
) -> Result<PopulationCosts> {
    if burn_in >= steps {
        return Err(Error::InvalidArgument(format!(
            "burn-in {burn_in} leaves no samples out of {steps}"
        )));
    }
    let mut sums = vec![0.0; policies.len()];
    let diverged = simulate_population(policies, spec, steps, seed, opts, |t, n, _, _, c| {
        if t >= burn_in {
            sums[n] += c;
        }
    })?;
    let count = (steps - burn_in) as f64;
    Ok(PopulationCosts {
        average: sums
            .into_iter()
            .map(|s| if diverged { f64::INFINITY } else { s / count })
            .collect(),
        diverged,
    })
}

/// Mean and standard error by non-overlapping batch means.
pub fn batch_means(values: &[f64], batches: usize) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let batches = batches.clamp(2, n.max(2));
    let size = n / batches;
    if size == 0 {
        return (mean, f64::NAN);
    }
    let bm: Vec<f64> = (0..batches)
        .map(|b| values[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    mean_and_stderr(&bm)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svec;
    use crate::oracle::{exact_cost, optimal_gain, solve_dare};
    use approx::assert_abs_diff_eq;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn noiseless() -> GameSpec {
        let mut spec = GameSpec::reference_scalar().with_exploration(0.0);
        spec.sigma_w = scalar(0.0);
        spec.sigma_0 = scalar(0.0);
        spec
    }

    struct Linear {
        k1: f64,
    }

    impl AgentPolicy for Linear {
        fn control_dim(&self) -> usize {
            1
        }

        fn action_into(&self, _t: usize, z: &[f64], _o: &[f64], out: &mut [f64]) {
            out[0] = -self.k1 * z[0];
        }
    }

    #[test]
    fn noiseless_zero_gain_decays_geometrically() {
        let spec = noiseless();
        let mf = MeanFieldLaw::for_spec(&spec, scalar(0.3)).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let tr = rollout_generic(&FeedbackPolicy::zeros(&spec), &mf, &spec, 20, 1, Some(x0)).unwrap();
        for t in 0..20 {
            let want = 0.3f64.powi(t as i32);
            assert_abs_diff_eq!(tr.x[(0, t)], want, epsilon = 1e-15);
            assert_abs_diff_eq!(tr.x[(1, t)], want, epsilon = 1e-15);
            assert_eq!(tr.c[t], 0.0);
        }
    }

    #[test]
    fn equilibrium_gain_has_zero_cost_on_the_diagonal() {
        let spec = noiseless();
        let rd = solve_dare(&spec).unwrap();
        let mf = MeanFieldLaw::for_spec(&spec, scalar(0.3)).unwrap();
        let k = optimal_gain(&mf.f, &rd, &spec).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let tr = rollout_generic(&k, &mf, &spec, 10, 1, Some(x0)).unwrap();
        // hand recursion: z = z̄ = 0.3ᵗ, u = -(K₁ + K₂) 0.3ᵗ = 0
        for t in 0..10 {
            assert_abs_diff_eq!(tr.u[(0, t)], 0.0, epsilon = 1e-13);
            assert_abs_diff_eq!(tr.c[t], 0.0, epsilon = 1e-25);
            assert_abs_diff_eq!(tr.x[(0, t)], 0.3f64.powi(t as i32), epsilon = 1e-13);
        }
    }

    #[test]
    fn rollout_is_deterministic_and_costs_recompute() {
        let spec = GameSpec::reference_scalar();
        let mf = MeanFieldLaw::for_spec(&spec, scalar(0.3)).unwrap();
        let k = FeedbackPolicy::from_blocks(&scalar(0.2), &scalar(-0.1)).unwrap();
        let a = rollout_generic(&k, &mf, &spec, 500, 42, None).unwrap();
        let b = rollout_generic(&k, &mf, &spec, 500, 42, None).unwrap();
        assert_eq!(a, b);
        let c = rollout_generic(&k, &mf, &spec, 500, 43, None).unwrap();
        assert_ne!(a.c, c.c);
        assert_eq!(a.x.ncols(), 500);
        assert_eq!(a.u.ncols(), 500);
        assert_eq!(a.x0[1], 1.0);
        let aug = build_augmented(&spec, &mf).unwrap();
        for t in 0..500 {
            let x = a.x.column(t).into_owned();
            let u = a.u.column(t).into_owned();
            let c = (x.transpose() * &aug.c_x * &x)[0] + (u.transpose() * &spec.c_u * &u)[0];
            assert_abs_diff_eq!(a.c[t], c, epsilon = 1e-12);
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let spec = GameSpec::reference_scalar();
        let mf = MeanFieldLaw::for_spec(&spec, scalar(0.3)).unwrap();
        let k = FeedbackPolicy::from_blocks(&scalar(-2.0), &scalar(0.0)).unwrap();
        let tr = rollout_generic(&k, &mf, &spec, 10_000, 3, None).unwrap();
        assert!(tr.diverged);
        assert!(tr.len() < 100);
        assert_eq!(tr.x.ncols(), tr.len());
    }

    #[test]
    fn restarts_reset_the_mean_field_coordinate() {
        let spec = GameSpec::reference_scalar();
        let mf = MeanFieldLaw::for_spec(&spec, scalar(0.3)).unwrap();
        let opts = RolloutOptions {
            restart_every: Some(10),
            ..Default::default()
        };
        let tr = rollout_with(&FeedbackPolicy::zeros(&spec), &mf, &spec, 35, 5, &opts).unwrap();
        assert_eq!(tr.restarts, vec![10, 20, 30]);
        for &r in &tr.restarts {
            assert_eq!(tr.x[(1, r)], 1.0);
            assert!(!tr.is_transition(r - 1));
        }
        assert!(tr.is_transition(0));
        assert!(!tr.is_transition(34));
    }

    #[test]
    fn feature_examples() {
        let z = features(&DVector::zeros(2), &DVector::zeros(1));
        assert_eq!(z, DVector::zeros(6));
        let e = features(&DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(1));
        assert_eq!(e, DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn features_reproduce_quadratic_forms() {
        let mut rng = stream_rng(7, 0);
        let th = DMatrix::from_row_slice(3, 3, &[2.0, -0.4, 0.3, -0.4, 1.0, 0.1, 0.3, 0.1, 0.7]);
        let sv = svec(&th);
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = DVector::from_fn(1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = DVector::from_vec(vec![x[0], x[1], u[0]]);
            let q = (v.transpose() * &th * &v)[0];
            assert_abs_diff_eq!(features(&x, &u).dot(&sv), q, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_identical_noiseless_agents_track_each_other() {
        let spec = noiseless();
        let pols = [Linear { k1: 0.1 }, Linear { k1: 0.1 }];
        let tr = rollout_population(&pols, &spec, 30, 0).unwrap();
        for n in 0..2 {
            assert_eq!(tr.z[n], tr.zbar[n]);
            assert!(tr.costs[n].iter().all(|&c| c >= 0.0));
            for t in 0..30 {
                let u = -0.1 * tr.z[n][(0, t)];
                assert_abs_diff_eq!(tr.costs[n][t], u * u, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn others_mean_is_exact() {
        let spec = GameSpec::reference_scalar();
        let pols: Vec<Linear> = (0..5).map(|i| Linear { k1: 0.05 * i as f64 }).collect();
        let tr = rollout_population(&pols, &spec, 50, 9).unwrap();
        for n in 0..5 {
            for t in 0..50 {
                let direct: f64 =
                    (0..5).filter(|&j| j != n).map(|j| tr.z[j][(0, t)]).sum::<f64>() / 4.0;
                assert_abs_diff_eq!(tr.zbar[n][(0, t)], direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn permuting_agents_with_their_streams_permutes_costs() {
        let spec = GameSpec::reference_scalar();
        let pols: Vec<Linear> = (0..4).map(|i| Linear { k1: 0.1 * i as f64 }).collect();
        let base = rollout_population(&pols, &spec, 200, 11).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<&Linear> = perm.iter().map(|&i| &pols[i]).collect();
        let opts = PopulationOptions {
            streams: Some(perm.iter().map(|&i| i as u64).collect()),
            ..Default::default()
        };
        let tr = rollout_population_with(&permuted, &spec, 200, 11, &opts).unwrap();
        for (slot, &orig) in perm.iter().enumerate() {
            for t in 0..200 {
                assert_abs_diff_eq!(tr.costs[slot][t], base.costs[orig][t], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn streaming_costs_match_full_trace() {
        let spec = GameSpec::reference_scalar();
        let pols: Vec<Linear> = (0..3).map(|_| Linear { k1: 0.2 }).collect();
        let tr = rollout_population(&pols, &spec, 400, 2).unwrap();
        let s = population_costs(&pols, &spec, 400, 40, 2, &PopulationOptions::default()).unwrap();
        let want = tr.average_costs(40);
        for n in 0..3 {
            assert_abs_diff_eq!(s.average[n], want[n], epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_single_agent() {
        let spec = GameSpec::reference_scalar();
        assert!(rollout_population(&[Linear { k1: 0.0 }], &spec, 10, 0).is_err());
    }

    #[test]
    fn zero_control_population_matches_mean_field_cost() {
        // Independent agents with zero control: the deviation from the others'
        // mean has variance (1 + 1/(N-1)) times the stationary variance.
        let spec = GameSpec::reference_scalar();
        let n = 256;
        let pols: Vec<Linear> = (0..n).map(|_| Linear { k1: 0.0 }).collect();
        let s = population_costs(&pols, &spec, 2_000, 200, 4, &PopulationOptions::default()).unwrap();
        let (mean, se) = mean_and_stderr(&s.average);
        let mf = MeanFieldLaw::for_spec(&spec, scalar(0.3)).unwrap();
        let j = exact_cost(&FeedbackPolicy::zeros(&spec), &mf, &spec.with_exploration(0.0)).unwrap();
        let expected = j * (1.0 + 1.0 / (n as f64 - 1.0));
        assert!((mean - expected).abs() <= 4.0 * se + 0.02 * j, "{mean} vs {expected} (se {se})");
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[2, 3]), derive_seed(5, &[2, 3]));
    }
}
