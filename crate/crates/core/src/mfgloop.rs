//! Outer loop: alternate the inner actor-critic loop against the current
//! mean-field matrix with the state-aggregator update `F' = A - B(K₁ + K₂)`.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{inner_loop, CriticKind, InnerDiagnostic, LearnerConfig};
use crate::linalg::{from_rows, spectral_norm, to_rows};
use crate::model::{FeedbackPolicy, GameSpec, MeanFieldLaw};
use crate::oracle::{exact_cost, optimal_gain, solve_dare, solve_mfe, true_theta, MfeSolution, RiccatiData};
use crate::sim::derive_seed;

/// Mean-field matrix induced by a gain: `A - B(K₁ + K₂)`.
pub fn aggregate(k: &FeedbackPolicy, spec: &GameSpec) -> Result<DMatrix<f64>> {
    k.check_spec(spec)?;
    Ok(&spec.a - &spec.b * (k.k1() + k.k2()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LoopMode {
    /// Sampled critic (the configured GTD or LSTD).
    #[default]
    ModelFree,
    /// Actor iterations driven by the exact action-value parameter.
    ExactCritic,
    /// The whole inner loop replaced by the optimal gain against `F`.
    ExactInner,
}

impl std::str::FromStr for LoopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model-free" => Ok(LoopMode::ModelFree),
            "exact-critic" => Ok(LoopMode::ExactCritic),
            "exact-inner" => Ok(LoopMode::ExactInner),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Growth of the critic budget over outer rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TSchedule {
    #[default]
    Constant,
    /// `T_r = T₀ 2^{r-1}`.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Outer rounds `R`.
    pub rounds: usize,
    pub mode: LoopMode,
    pub t_schedule: TSchedule,
    /// Initial mean-field matrix; zero when absent.
    pub f_init: Option<Vec<Vec<f64>>>,
    /// Initial gain `[K₁ K₂]`; zero when absent.
    pub k_init: Option<Vec<Vec<f64>>>,
    /// Weight kept on the previous `F` (0 replaces `F` outright).
    pub damping: f64,
    pub seed: u64,
    pub learner: LearnerConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            rounds: 5,
            mode: LoopMode::ModelFree,
            t_schedule: TSchedule::Constant,
            f_init: None,
            k_init: None,
            damping: 0.0,
            seed: 0,
            learner: LearnerConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config("damping must lie in [0, 1)".into()));
        }
        self.learner.validate()
    }

    pub fn initial_f(&self, spec: &GameSpec) -> Result<DMatrix<f64>> {
        let m = spec.state_dim();
        match &self.f_init {
            None => Ok(DMatrix::zeros(m, m)),
            Some(rows) => {
                let f = from_rows("f_init", rows)?;
                if f.shape() != (m, m) {
                    return Err(Error::Dimension {
                        field: "f_init",
                        expected: format!("{m}x{m}"),
                        found: format!("{}x{}", f.nrows(), f.ncols()),
                    });
                }
                Ok(f)
            }
        }
    }

    pub fn initial_k(&self, spec: &GameSpec) -> Result<FeedbackPolicy> {
        match &self.k_init {
            None => Ok(FeedbackPolicy::zeros(spec)),
            Some(rows) => {
                let k = FeedbackPolicy::new(from_rows("k_init", rows)?)?;
                k.check_spec(spec)?;
                Ok(k)
            }
        }
    }
}

/// Per-round record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub r: usize,
    /// Mean-field matrix the inner loop played against.
    pub f_in: Vec<Vec<f64>>,
    /// Aggregate of the round's final gain (the next round's mean field).
    pub f_out: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    /// `||F_out - F*||` when the equilibrium is available.
    pub f_error: Option<f64>,
    /// `J(K, F_in) - J(K*(F_in), F_in)` when the model is available.
    pub inner_cost_gap: Option<f64>,
    /// `||F_in|| <= (1 + T_P)/2`, when the model is available.
    pub f_in_admissible: Option<bool>,
    pub t_critic: usize,
    pub rejections: usize,
}

/// Inner-loop diagnostic tagged with its round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundDiagnostic {
    pub r: usize,
    #[serde(flatten)]
    pub inner: InnerDiagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopReport {
    pub rounds: Vec<RoundRecord>,
    pub diagnostics: Vec<RoundDiagnostic>,
    pub final_k: Vec<Vec<f64>>,
    pub final_f: Vec<Vec<f64>>,
    pub f_star: Option<Vec<Vec<f64>>>,
    pub final_f_error: Option<f64>,
    pub rho_theta: Option<f64>,
    pub wall_clock_secs: f64,
}

impl LoopReport {
    pub fn final_f_matrix(&self) -> DMatrix<f64> {
        from_rows("final_f", &self.final_f).expect("report matrices are rectangular")
    }

    pub fn final_k_policy(&self) -> FeedbackPolicy {
        FeedbackPolicy::new(from_rows("final_k", &self.final_k).expect("report matrices are rectangular"))
            .expect("report gain has a valid shape")
    }

    pub fn f_errors(&self) -> Vec<Option<f64>> {
        self.rounds.iter().map(|r| r.f_error).collect()
    }
}

struct Oracle {
    rd: RiccatiData,
    mfe: Option<MfeSolution>,
}

fn oracle_for(spec: &GameSpec) -> Option<Oracle> {
    let rd = solve_dare(spec).ok()?;
    let mfe = if rd.assumption1_ok { solve_mfe(spec, 1e-13).ok() } else { None };
    Some(Oracle { rd, mfe })
}

/// Runs the outer loop for `cfg.rounds` rounds and reports every iterate.
///
/// The final mean-field matrix is the aggregate after the last round.
pub fn run_algorithm1(spec: &GameSpec, cfg: &LoopConfig) -> Result<LoopReport> {
    let started = Instant::now();
    cfg.validate()?;
    spec.check_dimensions()?;
    let oracle = oracle_for(spec);
    let mut f = cfg.initial_f(spec)?;
    let mut k = cfg.initial_k(spec)?;

    let mut learner = cfg.learner.clone();
    match cfg.mode {
        LoopMode::ExactCritic => learner.critic = CriticKind::Exact,
        LoopMode::ModelFree if learner.critic == CriticKind::Exact => {
            return Err(Error::Config("model-free mode needs a sampled critic".into()))
        }
        _ => {}
    }
    if learner.rho_theta.is_none() && oracle.is_some() {
        let mf = MeanFieldLaw::for_spec(spec, f.clone())?;
        if let Ok(est) = true_theta(&k, &mf, spec) {
            learner.rho_theta = Some(10.0 * est.norm());
        }
    }
    let exact_inner = match (&oracle, cfg.mode) {
        (Some(o), LoopMode::ExactInner) => Some(&o.rd),
        (None, LoopMode::ExactInner) => {
            return Err(Error::NumericalFailure("exact-inner mode needs the Riccati solution".into()))
        }
        _ => None,
    };
    let f_star = oracle.as_ref().and_then(|o| o.mfe.as_ref()).map(|s| s.f_star.clone());

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut diagnostics = Vec::new();
    for r in 1..=cfg.rounds {
        let mf = MeanFieldLaw::for_spec(spec, f.clone())?;
        let t_critic = match cfg.t_schedule {
            TSchedule::Constant => learner.t_critic,
            TSchedule::Geometric => cfg.learner.t_critic.saturating_mul(1usize << (r - 1).min(40)),
        };
        learner.t_critic = t_critic;
        let wrap = |e: Error| Error::Round { round: r, source: Box::new(e) };

        let mut rejections = 0;
        if let Some(rd) = exact_inner {
            k = optimal_gain(&f, rd, spec).map_err(wrap)?;
        } else {
            let out = inner_loop(&k, &mf, spec, &learner, derive_seed(cfg.seed, &[r as u64])).map_err(wrap)?;
            diagnostics.extend(out.diagnostics.into_iter().map(|inner| RoundDiagnostic { r, inner }));
            rejections = out.rejections;
            k = out.k;
        }

        let mut next = aggregate(&k, spec)?;
        if cfg.damping > 0.0 {
            next = &next * (1.0 - cfg.damping) + &f * cfg.damping;
        }

        let (inner_cost_gap, f_in_admissible) = match &oracle {
            Some(o) => {
                let gap = optimal_gain(&f, &o.rd, spec)
                    .and_then(|opt| Ok(exact_cost(&k, &mf, spec)? - exact_cost(&opt, &mf, spec)?))
                    .ok();
                (gap, Some(mf.is_admissible(&o.rd)))
            }
            None => (None, None),
        };
        if f_in_admissible == Some(false) {
            log::warn!("round {r}: mean-field matrix outside the admissible ball");
        }
        rounds.push(RoundRecord {
            r,
            f_in: to_rows(&f),
            f_out: to_rows(&next),
            k: to_rows(k.gain()),
            f_error: f_star.as_ref().map(|fs| spectral_norm(&(&next - fs))),
            inner_cost_gap,
            f_in_admissible,
            t_critic,
            rejections,
        });

        let norm = spectral_norm(&next);
        if !(norm <= 1.0) {
            log::error!("round {r}: ||F|| = {norm} after aggregation; history {:?}", rounds);
            return Err(Error::MeanFieldDiverged { round: r, norm });
        }
        f = next;
    }

    Ok(LoopReport {
        final_f_error: rounds.last().and_then(|r| r.f_error),
        rounds,
        diagnostics,
        final_k: to_rows(k.gain()),
        final_f: to_rows(&f),
        f_star: f_star.as_ref().map(to_rows),
        rho_theta: learner.rho_theta,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
