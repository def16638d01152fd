//! Model-based ground truth.
//!
//! Solves the Riccati equation of the tracking problem, evaluates the
//! mean-field operator `𝒯(F) = H_Pᵀ - B G_P S(F)` with
//! `S(F) = Σ_{s≥0} H_P^s C_Z F^{s+1}`, iterates it to the equilibrium matrix
//! `F*`, and provides the exact gains, costs and action-value parameters used
//! as test oracles by the learning code.
//!
//! Gain sign convention: the control is `U = -K X` with
//! `K₁ = -G_P P A` and `K₂ = G_P S(F)`, so that `A - B K₁` is the closed loop
//! `(I + B G_P P) A = H_Pᵀ` of the optimal tracking controller.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::learner::CriticEstimate;
use crate::linalg::{self, spectral_norm};
use crate::model::{build_augmented, FeedbackPolicy, GameSpec, MeanFieldLaw};

/// Convergence tolerance of the Riccati value iteration.
pub const DARE_TOL: f64 = 1e-12;
/// Iteration cap of the Riccati value iteration.
pub const DARE_MAX_ITER: usize = 100_000;
/// Truncation threshold on the term-norm bound of the `S(F)` series.
pub const SERIES_TOL: f64 = 1e-14;
const SERIES_MAX_TERMS: usize = 10_000_000;

/// Riccati solution and the derived gains.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiData {
    /// Stabilizing solution of `P = AᵀPA + C_Z + AᵀPB G_P P A`.
    pub p: DMatrix<f64>,
    /// `G_P = -(C_U + BᵀPB)⁻¹ Bᵀ`, `p x m`.
    pub g: DMatrix<f64>,
    /// `H_P = Aᵀ(I + P B G_P)`.
    pub h: DMatrix<f64>,
    /// `T_P = ||H_P|| + ||B G_P|| ||C_Z|| / (1 - ||H_P||)²`.
    pub t_p: f64,
    pub assumption1_ok: bool,
    pub h_norm: f64,
    pub bg_norm: f64,
    pub cz_norm: f64,
    /// Spectral norm of the Riccati residual at the returned `P`.
    pub residual: f64,
    pub iterations: usize,
}

impl RiccatiData {
    /// Radius `(1 + T_P)/2` of the admissible set of mean-field matrices.
    pub fn admissible_radius(&self) -> f64 {
        0.5 * (1.0 + self.t_p)
    }

    /// Lipschitz constant `||B G_P|| ||C_Z|| / (1 - ||H_P||)²` of `𝒯` on the admissible set.
    pub fn lipschitz_constant(&self) -> f64 {
        self.bg_norm * self.cz_norm / (1.0 - self.h_norm).powi(2)
    }

    /// `P - (H_P P A + C_Z)`; vanishes at the Riccati solution.
    pub fn closed_loop_identity_residual(&self, spec: &GameSpec) -> f64 {
        spectral_norm(&(&self.p - (&self.h * &self.p * &spec.a + &spec.c_z)))
    }
}

/// Equilibrium of the mean-field game in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct MfeSolution {
    pub f_star: DMatrix<f64>,
    pub k_star: FeedbackPolicy,
    pub riccati: RiccatiData,
    /// `||𝒯(F) - F||` at the last iterate.
    pub residual: f64,
    pub iterations: usize,
}

/// Riccati residual `P - (AᵀPA + Q - AᵀPB (R + BᵀPB)⁻¹ BᵀPA)`.
fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(p - dare_step(a, b, q, r, p)?)
}

fn dare_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let at_p = a.transpose() * p;
    let s = r + b.transpose() * p * b;
    let chol = s.cholesky().ok_or_else(|| {
        Error::NumericalFailure("R + BᵀPB lost positive definiteness during Riccati iteration".into())
    })?;
    let bt_p_a = b.transpose() * p * a;
    let next = &at_p * a + q - &at_p * b * chol.solve(&bt_p_a);
    Ok((&next + next.transpose()) * 0.5)
}

/// Riccati value iteration `P ← AᵀPA + Q - AᵀPB(R + BᵀPB)⁻¹BᵀPA` from `P₀ = Q`.
///
/// Shared by the tracking problem and the full-information best response of
/// the finite-population evaluation.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, usize)> {
    let mut p = q.clone();
    let mut last = f64::INFINITY;
    for it in 1..=DARE_MAX_ITER {
        let next = dare_step(a, b, q, r, &p)?;
        if !next.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalFailure("Riccati iterate is not finite".into()));
        }
        last = (&next - &p).amax();
        p = next;
        if last <= DARE_TOL * p.amax().max(1.0) {
            return Ok((p, it));
        }
    }
    Err(Error::NotConverged {
        what: "Riccati iteration",
        iterations: DARE_MAX_ITER,
        residual: last,
    })
}

/// Solves the tracking Riccati equation and derives `G_P`, `H_P` and `T_P`.
pub fn solve_dare(spec: &GameSpec) -> Result<RiccatiData> {
    spec.check_dimensions()?;
    let (p, iterations) = solve_riccati(&spec.a, &spec.b, &spec.c_z, &spec.c_u)?;
    let s = &spec.c_u + spec.b.transpose() * &p * &spec.b;
    let g = -s
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("C_U + BᵀPB is not positive definite".into()))?
        .solve(&spec.b.transpose());
    let m = spec.state_dim();
    let h = spec.a.transpose() * (DMatrix::identity(m, m) + &p * &spec.b * &g);
    let h_norm = spectral_norm(&h);
    let bg_norm = spectral_norm(&(&spec.b * &g));
    let cz_norm = spectral_norm(&spec.c_z);
    let t_p = if h_norm < 1.0 {
        h_norm + bg_norm * cz_norm / (1.0 - h_norm).powi(2)
    } else {
        f64::INFINITY
    };
    let residual = spectral_norm(&dare_residual(&spec.a, &spec.b, &spec.c_z, &spec.c_u, &p)?);
    Ok(RiccatiData {
        p,
        g,
        h,
        t_p,
        assumption1_ok: t_p < 1.0,
        h_norm,
        bg_norm,
        cz_norm,
        residual,
        iterations,
    })
}

fn check_square(field: &'static str, f: &DMatrix<f64>, m: usize) -> Result<()> {
    if f.shape() != (m, m) {
        return Err(Error::Dimension {
            field,
            expected: format!("{m}x{m}"),
            found: format!("{}x{}", f.nrows(), f.ncols()),
        });
    }
    Ok(())
}

/// `S(F) = Σ_{s≥0} H_P^s C_Z F^{s+1}` by truncated series.
///
/// Stops once the term-norm bound `||H_P||^s ||C_Z|| ||F||^{s+1}` drops below
/// [`SERIES_TOL`]; requires `||H_P|| ||F|| < 1`.
pub fn series_s(f: &DMatrix<f64>, rd: &RiccatiData, spec: &GameSpec) -> Result<DMatrix<f64>> {
    let m = spec.state_dim();
    check_square("F", f, m)?;
    let f_norm = spectral_norm(f);
    let ratio = rd.h_norm * f_norm;
    if !(ratio < 1.0) {
        return Err(Error::DivergentSeries { product: ratio });
    }
    let mut sum = DMatrix::zeros(m, m);
    // left = H^s C_Z, right = F^{s+1}
    let mut left = spec.c_z.clone();
    let mut right = f.clone();
    let mut bound = rd.cz_norm * f_norm;
    for _ in 0..SERIES_MAX_TERMS {
        if bound < SERIES_TOL || right.amax() == 0.0 || left.amax() == 0.0 {
            return Ok(sum);
        }
        sum += &left * &right;
        left = &rd.h * left;
        right = &right * f;
        bound *= ratio;
    }
    Err(Error::NotConverged {
        what: "S(F) series",
        iterations: SERIES_MAX_TERMS,
        residual: bound,
    })
}

/// `S(F)` as the solution of the Stein equation `S = C_Z F + H_P S F`.
pub fn series_s_stein(f: &DMatrix<f64>, rd: &RiccatiData, spec: &GameSpec) -> Result<DMatrix<f64>> {
    check_square("F", f, spec.state_dim())?;
    linalg::solve_stein(&rd.h, f, &(&spec.c_z * f))
}

/// The mean-field operator `𝒯(F) = H_Pᵀ - B G_P S(F)`.
pub fn apply_t(f: &DMatrix<f64>, rd: &RiccatiData, spec: &GameSpec) -> Result<DMatrix<f64>> {
    let s = series_s(f, rd, spec)?;
    Ok(rd.h.transpose() - &spec.b * &rd.g * s)
}

/// Picard iteration `F ← 𝒯(F)` until `||𝒯(F) - F|| <= tol`.
///
/// Refuses when the contraction assumption `T_P < 1` fails or `F_init` lies
/// outside the admissible ball.
pub fn fixed_point_mf(
    rd: &RiccatiData,
    spec: &GameSpec,
    f_init: &DMatrix<f64>,
    tol: f64,
) -> Result<MfeSolution> {
    if !rd.assumption1_ok {
        return Err(Error::AssumptionViolated { t_p: rd.t_p });
    }
    check_square("F_init", f_init, spec.state_dim())?;
    let norm = spectral_norm(f_init);
    if norm > rd.admissible_radius() {
        return Err(Error::NotAdmissible {
            norm,
            radius: rd.admissible_radius(),
        });
    }
    let max_iter = 10_000;
    let mut f = f_init.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let next = apply_t(&f, rd, spec)?;
        residual = spectral_norm(&(&next - &f));
        f = next;
        if residual <= tol {
            let k_star = optimal_gain(&f, rd, spec)?;
            return Ok(MfeSolution {
                f_star: f,
                k_star,
                riccati: rd.clone(),
                residual,
                iterations: it,
            });
        }
    }
    Err(Error::NotConverged {
        what: "mean-field fixed point",
        iterations: max_iter,
        residual,
    })
}

/// Solves the Riccati equation and the fixed point from `F = 0` in one call.
pub fn solve_mfe(spec: &GameSpec, tol: f64) -> Result<MfeSolution> {
    let rd = solve_dare(spec)?;
    let m = spec.state_dim();
    fixed_point_mf(&rd, spec, &DMatrix::zeros(m, m), tol)
}

/// Cost-minimizing augmented-state gain against the mean field generated by `F`.
pub fn optimal_gain(f: &DMatrix<f64>, rd: &RiccatiData, spec: &GameSpec) -> Result<FeedbackPolicy> {
    let s = series_s(f, rd, spec)?;
    let k1 = -(&rd.g * &rd.p * &spec.a);
    let k2 = &rd.g * s;
    FeedbackPolicy::from_blocks(&k1, &k2)
}

/// A deterministic reference sequence with a known uniform bound.
pub trait BoundedTrajectory {
    fn at(&self, t: usize) -> DVector<f64>;
    /// Upper bound on `||Z̄_t||` over all `t`.
    fn sup_norm(&self) -> f64;
}

impl BoundedTrajectory for MeanFieldLaw {
    fn at(&self, t: usize) -> DVector<f64> {
        self.state_at(t)
    }

    /// `||ν₀||` when `||F|| <= 1`, unbounded otherwise.
    fn sup_norm(&self) -> f64 {
        if self.norm() <= 1.0 {
            self.nu0.norm()
        } else {
            f64::INFINITY
        }
    }
}

/// Arbitrary reference trajectory given by a closure and a declared bound.
pub struct FnTrajectory<F> {
    pub f: F,
    pub bound: f64,
}

impl<F: Fn(usize) -> DVector<f64>> BoundedTrajectory for FnTrajectory<F> {
    fn at(&self, t: usize) -> DVector<f64> {
        (self.f)(t)
    }

    fn sup_norm(&self) -> f64 {
        self.bound
    }
}

/// Costate `λ_t = -Σ_{k≥0} H_P^k C_Z Z̄_{t+k}` of the tracking problem.
///
/// Truncated once `||H_P||^k ||C_Z|| sup||Z̄|| < tol`. A sample exceeding the
/// declared bound is reported as an unbounded trajectory.
pub fn compute_costate<Z: BoundedTrajectory + ?Sized>(
    zbar: &Z,
    t: usize,
    rd: &RiccatiData,
    spec: &GameSpec,
    tol: f64,
) -> Result<DVector<f64>> {
    let bound = zbar.sup_norm();
    if !bound.is_finite() {
        return Err(Error::UnboundedTrajectory {
            t,
            norm: f64::INFINITY,
            bound,
        });
    }
    if !(rd.h_norm < 1.0) {
        return Err(Error::DivergentSeries { product: rd.h_norm });
    }
    let m = spec.state_dim();
    let mut lambda = DVector::zeros(m);
    let mut weight = spec.c_z.clone();
    let mut tail = rd.cz_norm * bound;
    let mut k = 0usize;
    while tail >= tol && k < SERIES_MAX_TERMS {
        let z = zbar.at(t + k);
        if z.len() != m {
            return Err(Error::Dimension {
                field: "Zbar",
                expected: format!("{m}"),
                found: format!("{}", z.len()),
            });
        }
        let zn = z.norm();
        if zn > bound * (1.0 + 1e-12) {
            return Err(Error::UnboundedTrajectory { t: t + k, norm: zn, bound });
        }
        lambda -= &weight * z;
        weight = &rd.h * weight;
        tail *= rd.h_norm;
        k += 1;
    }
    Ok(lambda)
}

/// Stationary covariance of the agent block under `U = -K X + ζ`:
/// `Σ₁₁ = Σ_w + σ² B Bᵀ + (A - B K₁) Σ₁₁ (A - B K₁)ᵀ`.
pub fn stationary_agent_covariance(k: &FeedbackPolicy, spec: &GameSpec) -> Result<DMatrix<f64>> {
    k.check_spec(spec)?;
    let l = &spec.a - &spec.b * k.k1();
    let noise = &spec.sigma_w + spec.sigma_explore.powi(2) * &spec.b * spec.b.transpose();
    linalg::solve_discrete_lyapunov(&l.transpose(), &noise)
}

/// Exact long-run average cost `J(K, F)`.
///
/// Because `F` is stable the mean-field block decays and the stationary
/// covariance lives in the agent block, so
/// `J = tr((C_Z + K₁ᵀ C_U K₁) Σ₁₁) + σ² tr(C_U)`.
/// Returns `f64::INFINITY` when `A - B K₁` or `F` is not Schur stable.
pub fn exact_cost(k: &FeedbackPolicy, mf: &MeanFieldLaw, spec: &GameSpec) -> Result<f64> {
    k.check_spec(spec)?;
    let l = &spec.a - &spec.b * k.k1();
    if !(linalg::spectral_radius(&l) < 1.0) || !(linalg::spectral_radius(&mf.f) < 1.0) {
        return Ok(f64::INFINITY);
    }
    let sigma11 = stationary_agent_covariance(k, spec)?;
    let k1 = k.k1();
    let weight = &spec.c_z + k1.transpose() * &spec.c_u * &k1;
    Ok((weight * sigma11).trace() + spec.sigma_explore.powi(2) * spec.c_u.trace())
}

/// Value matrix `P_K` of the augmented closed loop:
/// `P_K = C_X + KᵀC_U K + (Ā - B̄K)ᵀ P_K (Ā - B̄K)`.
pub fn value_matrix(k: &FeedbackPolicy, mf: &MeanFieldLaw, spec: &GameSpec) -> Result<DMatrix<f64>> {
    k.check_spec(spec)?;
    let aug = build_augmented(spec, mf)?;
    let l = &aug.a_bar - &aug.b_bar * k.gain();
    let q = &aug.c_x + k.gain().transpose() * &spec.c_u * k.gain();
    linalg::solve_discrete_lyapunov(&l, &q)
}

/// Exact quadratic action-value parameter of `K` against `F`.
///
/// `Θ = [[C_X + ĀᵀP_KĀ, ĀᵀP_KB̄], [B̄ᵀP_KĀ, C_U + B̄ᵀP_KB̄]]`, attached with the
/// exact average cost. The projection radius is unbounded.
pub fn true_theta(k: &FeedbackPolicy, mf: &MeanFieldLaw, spec: &GameSpec) -> Result<CriticEstimate> {
    let pk = value_matrix(k, mf, spec)?;
    let aug = build_augmented(spec, mf)?;
    let n = aug.a_bar.nrows();
    let p = spec.control_dim();
    let mut theta = DMatrix::zeros(n + p, n + p);
    let xx = &aug.c_x + aug.a_bar.transpose() * &pk * &aug.a_bar;
    let xu = aug.a_bar.transpose() * &pk * &aug.b_bar;
    let uu = &spec.c_u + aug.b_bar.transpose() * &pk * &aug.b_bar;
    theta.view_mut((0, 0), (n, n)).copy_from(&xx);
    theta.view_mut((0, n), (n, p)).copy_from(&xu);
    theta.view_mut((n, 0), (p, n)).copy_from(&xu.transpose());
    theta.view_mut((n, n), (p, p)).copy_from(&uu);
    let theta = (&theta + theta.transpose()) * 0.5;
    let avg_cost =
        (&pk * &aug.sigma_w_bar).trace() + spec.sigma_explore.powi(2) * uu.trace();
    Ok(CriticEstimate::from_matrix(theta, p, avg_cost, f64::INFINITY))
}

/// Exact average cost through the augmented value matrix,
/// `J = tr(P_K Σ_w̄) + σ² tr(C_U + B̄ᵀP_K B̄)`; an independent route to [`exact_cost`].
pub fn exact_cost_augmented(k: &FeedbackPolicy, mf: &MeanFieldLaw, spec: &GameSpec) -> Result<f64> {
    Ok(true_theta(k, mf, spec)?.avg_cost)
}

/// Largest mismatch of the equilibrium recursion along `Z̄_t = Fᵗ ν₀`:
/// `sup_{t < horizon} ||Z̄_{t+1} - H_PᵀZ̄_t + B G_P Σ_s H_P^s C_Z Z̄_{t+s+1}||`.
pub fn equilibrium_recursion_residual(
    f: &DMatrix<f64>,
    rd: &RiccatiData,
    spec: &GameSpec,
    horizon: usize,
) -> Result<f64> {
    let s = series_s(f, rd, spec)?;
    let bg = &spec.b * &rd.g;
    let ht = rd.h.transpose();
    let mf = MeanFieldLaw::for_spec(spec, f.clone())?;
    let mut worst = 0.0_f64;
    for z in mf.trajectory(horizon) {
        // Σ_s H^s C_Z Z̄_{t+s+1} = S(F) Z̄_t along a linear trajectory.
        let r = f * &z - &ht * &z + &bg * (&s * &z);
        worst = worst.max(r.norm());
    }
    Ok(worst)
}

/// Printable summary of the oracle quantities for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub p: Vec<Vec<f64>>,
    pub g_p: Vec<Vec<f64>>,
    pub h_p: Vec<Vec<f64>>,
    pub t_p: f64,
    pub assumption1_ok: bool,
    pub f_star: Option<Vec<Vec<f64>>>,
    pub k_star: Option<Vec<Vec<f64>>>,
    pub k1_plus_k2: Option<Vec<Vec<f64>>>,
    pub cost_star: Option<f64>,
    pub fixed_point_residual: Option<f64>,
    pub fixed_point_iterations: Option<usize>,
}

pub fn oracle_report(spec: &GameSpec, tol: f64) -> Result<OracleReport> {
    let rd = solve_dare(spec)?;
    let rows = linalg::to_rows;
    let mut report = OracleReport {
        p: rows(&rd.p),
        g_p: rows(&rd.g),
        h_p: rows(&rd.h),
        t_p: rd.t_p,
        assumption1_ok: rd.assumption1_ok,
        f_star: None,
        k_star: None,
        k1_plus_k2: None,
        cost_star: None,
        fixed_point_residual: None,
        fixed_point_iterations: None,
    };
    if rd.assumption1_ok {
        let m = spec.state_dim();
        let sol = fixed_point_mf(&rd, spec, &DMatrix::zeros(m, m), tol)?;
        let mf = MeanFieldLaw::for_spec(spec, sol.f_star.clone())?;
        report.cost_star = Some(exact_cost(&sol.k_star, &mf, spec)?);
        report.k1_plus_k2 = Some(rows(&(sol.k_star.k1() + sol.k_star.k2())));
        report.f_star = Some(rows(&sol.f_star));
        report.k_star = Some(rows(sol.k_star.gain()));
        report.fixed_point_residual = Some(sol.residual);
        report.fixed_point_iterations = Some(sol.iterations);
    }
    Ok(report)
}
