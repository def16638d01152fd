//! Problem instance, the augmented-state view and the policy/mean-field types.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, from_rows, to_rows};
use crate::oracle::RiccatiData;

/// Relative singular-value threshold for the controllability/observability rank tests.
pub const RANK_TOL: f64 = 1e-10;
const SYM_TOL: f64 = 1e-12;

/// Primitives of a linear-quadratic mean-field game.
///
/// Each agent evolves as `Z' = A Z + B U + W` with `W ~ N(0, Σ_w)`, starts
/// from `N(ν₀, Σ₀)` and pays `|Z - Z̄|²_{C_Z} + |U|²_{C_U}` per step.
/// `sigma_explore` is the exploration scale used by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
    pub c_u: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_0: DMatrix<f64>,
    pub nu0: DVector<f64>,
    pub sigma_explore: f64,
}

impl GameSpec {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c_z: DMatrix<f64>,
        c_u: DMatrix<f64>,
        sigma_w: DMatrix<f64>,
        sigma_0: DMatrix<f64>,
        nu0: DVector<f64>,
        sigma_explore: f64,
    ) -> Result<Self> {
        let spec = GameSpec {
            a,
            b,
            c_z,
            c_u,
            sigma_w,
            sigma_0,
            nu0,
            sigma_explore,
        };
        spec.check_dimensions()?;
        Ok(spec)
    }

    /// Scalar instance used throughout the tests and examples:
    /// `A = 0.3, B = 1, C_Z = 0.1, C_U = 1, Σ_w = Σ₀ = 1, ν₀ = 1, σ = 0.1`.
    pub fn reference_scalar() -> Self {
        let s = |x: f64| DMatrix::from_element(1, 1, x);
        GameSpec {
            a: s(0.3),
            b: s(1.0),
            c_z: s(0.1),
            c_u: s(1.0),
            sigma_w: s(1.0),
            sigma_0: s(1.0),
            nu0: DVector::from_element(1, 1.0),
            sigma_explore: 0.1,
        }
    }

    /// State dimension `m`.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Control dimension `p`.
    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let m = self.a.nrows();
        let p = self.b.ncols();
        let want = |field: &'static str, mat: &DMatrix<f64>, r: usize, c: usize| {
            if mat.shape() == (r, c) {
                Ok(())
            } else {
                Err(Error::Dimension {
                    field,
                    expected: format!("{r}x{c}"),
                    found: format!("{}x{}", mat.nrows(), mat.ncols()),
                })
            }
        };
        if m == 0 {
            return Err(Error::Dimension {
                field: "A",
                expected: "non-empty square matrix".into(),
                found: "0x0".into(),
            });
        }
        want("A", &self.a, m, m)?;
        want("B", &self.b, m, p)?;
        if p == 0 {
            return Err(Error::Dimension {
                field: "B",
                expected: format!("{m}xp with p >= 1"),
                found: format!("{m}x0"),
            });
        }
        want("C_Z", &self.c_z, m, m)?;
        want("C_U", &self.c_u, p, p)?;
        want("Sigma_w", &self.sigma_w, m, m)?;
        want("Sigma_0", &self.sigma_0, m, m)?;
        if self.nu0.len() != m {
            return Err(Error::Dimension {
                field: "nu0",
                expected: format!("{m}"),
                found: format!("{}", self.nu0.len()),
            });
        }
        if !(self.sigma_explore >= 0.0) || !self.sigma_explore.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma_explore must be a finite nonnegative number, got {}",
                self.sigma_explore
            )));
        }
        Ok(())
    }

    /// Copy with the exploration scale replaced.
    pub fn with_exploration(&self, sigma: f64) -> Self {
        GameSpec {
            sigma_explore: sigma,
            ..self.clone()
        }
    }
}

/// On-disk form of [`GameSpec`]: matrices as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpecConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C_Z")]
    pub c_z: Vec<Vec<f64>>,
    #[serde(rename = "C_U")]
    pub c_u: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_w")]
    pub sigma_w: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_0")]
    pub sigma_0: Vec<Vec<f64>>,
    pub nu0: Vec<f64>,
    pub sigma_explore: f64,
}

impl TryFrom<&GameSpecConfig> for GameSpec {
    type Error = Error;

    fn try_from(cfg: &GameSpecConfig) -> Result<Self> {
        GameSpec::new(
            from_rows("A", &cfg.a)?,
            from_rows("B", &cfg.b)?,
            from_rows("C_Z", &cfg.c_z)?,
            from_rows("C_U", &cfg.c_u)?,
            from_rows("Sigma_w", &cfg.sigma_w)?,
            from_rows("Sigma_0", &cfg.sigma_0)?,
            DVector::from_vec(cfg.nu0.clone()),
            cfg.sigma_explore,
        )
    }
}

impl From<&GameSpec> for GameSpecConfig {
    fn from(spec: &GameSpec) -> Self {
        GameSpecConfig {
            a: to_rows(&spec.a),
            b: to_rows(&spec.b),
            c_z: to_rows(&spec.c_z),
            c_u: to_rows(&spec.c_u),
            sigma_w: to_rows(&spec.sigma_w),
            sigma_0: to_rows(&spec.sigma_0),
            nu0: spec.nu0.iter().copied().collect(),
            sigma_explore: spec.sigma_explore,
        }
    }
}

impl GameSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: GameSpecConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        GameSpec::try_from(&cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&GameSpecConfig::from(self)).expect("game spec serializes to TOML")
    }
}

/// One named pass/fail line of a [`ValidationReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    /// Conjunction of every check.
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "  [{mark}] {:<28} {}", c.name, c.detail)?;
        }
        for w in &self.warnings {
            writeln!(f, "  [warn] {w}")?;
        }
        Ok(())
    }
}

/// Controllability matrix `[B, AB, ..., A^{m-1}B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let p = b.ncols();
    let mut out = DMatrix::zeros(m, m * p);
    let mut blk = b.clone();
    for k in 0..m {
        out.view_mut((0, k * p), (m, p)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

/// Observability matrix `[C; CA; ...; CA^{m-1}]`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    controllability_matrix(&a.transpose(), &c.transpose()).transpose()
}

/// Symmetry, definiteness, controllability and observability checks.
///
/// Pure function of the spec: repeated calls produce identical reports.
pub fn validate_spec(spec: &GameSpec) -> Result<ValidationReport> {
    spec.check_dimensions()?;
    let mut checks = Vec::new();
    let mut push = |name, passed, detail: String| checks.push(Check { name, passed, detail });

    for (name, mat) in [
        ("C_Z symmetric", &spec.c_z),
        ("C_U symmetric", &spec.c_u),
        ("Sigma_w symmetric", &spec.sigma_w),
        ("Sigma_0 symmetric", &spec.sigma_0),
    ] {
        let asym = (mat - mat.transpose()).amax();
        push(name, linalg::is_symmetric(mat, SYM_TOL), format!("max |M - Mᵀ| = {asym:.3e}"));
    }

    let lam_u = linalg::min_symmetric_eigenvalue(&spec.c_u);
    push("C_U positive definite", lam_u > 0.0, format!("min eigenvalue {lam_u:.6e}"));
    let lam_z = linalg::min_symmetric_eigenvalue(&spec.c_z);
    push(
        "C_Z positive semi-definite",
        lam_z >= -SYM_TOL * spec.c_z.amax().max(1.0),
        format!("min eigenvalue {lam_z:.6e}"),
    );
    let lam_w = linalg::min_symmetric_eigenvalue(&spec.sigma_w);
    push("Sigma_w positive definite", lam_w > 0.0, format!("min eigenvalue {lam_w:.6e}"));
    let lam_0 = linalg::min_symmetric_eigenvalue(&spec.sigma_0);
    push(
        "Sigma_0 positive semi-definite",
        lam_0 >= -SYM_TOL * spec.sigma_0.amax().max(1.0),
        format!("min eigenvalue {lam_0:.6e}"),
    );

    let m = spec.state_dim();
    let ctrb = linalg::rank(&controllability_matrix(&spec.a, &spec.b), RANK_TOL);
    push("(A, B) controllable", ctrb == m, format!("rank {ctrb} of {m}"));
    let cz_half = linalg::psd_sqrt(&spec.c_z);
    let obsv = linalg::rank(&observability_matrix(&spec.a, &cz_half), RANK_TOL);
    push("(A, C_Z^1/2) observable", obsv == m, format!("rank {obsv} of {m}"));

    let mut warnings = Vec::new();
    if spec.nu0.amax() == 0.0 {
        warnings.push(
            "nu0 = 0: the mean-field trajectory is identically zero and F cannot be learned from data"
                .to_string(),
        );
    }
    if spec.sigma_explore == 0.0 {
        warnings.push("sigma_explore = 0: model-free learning is disabled".to_string());
    }
    Ok(ValidationReport { checks, warnings })
}

/// Mean-field state matrix `F` together with the initial mean `ν₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldLaw {
    pub f: DMatrix<f64>,
    pub nu0: DVector<f64>,
}

impl MeanFieldLaw {
    pub fn new(f: DMatrix<f64>, nu0: DVector<f64>) -> Result<Self> {
        if !f.is_square() || f.nrows() != nu0.len() {
            return Err(Error::Dimension {
                field: "F",
                expected: format!("{0}x{0}", nu0.len()),
                found: format!("{}x{}", f.nrows(), f.ncols()),
            });
        }
        Ok(MeanFieldLaw { f, nu0 })
    }

    pub fn for_spec(spec: &GameSpec, f: DMatrix<f64>) -> Result<Self> {
        Self::new(f, spec.nu0.clone())
    }

    /// `Z̄_t = Fᵗ ν₀`.
    pub fn state_at(&self, t: usize) -> DVector<f64> {
        let mut z = self.nu0.clone();
        for _ in 0..t {
            z = &self.f * z;
        }
        z
    }

    /// `Z̄_0, ..., Z̄_{len-1}`.
    pub fn trajectory(&self, len: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(len);
        let mut z = self.nu0.clone();
        for _ in 0..len {
            let next = &self.f * &z;
            out.push(std::mem::replace(&mut z, next));
        }
        out
    }

    pub fn norm(&self) -> f64 {
        linalg::spectral_norm(&self.f)
    }

    /// Membership in `{F : ||F||₂ <= (1 + T_P) / 2}`.
    pub fn is_admissible(&self, rd: &RiccatiData) -> bool {
        self.norm() <= rd.admissible_radius()
    }
}

/// Augmented-state LQG view for a fixed mean-field law: `X = (Z, Z̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSpec {
    /// `diag(A, F)`
    pub a_bar: DMatrix<f64>,
    /// `[B; 0]`
    pub b_bar: DMatrix<f64>,
    /// `[[C_Z, -C_Z], [-C_Z, C_Z]]`
    pub c_x: DMatrix<f64>,
    /// `Σ_w` in the agent block, zero elsewhere.
    pub sigma_w_bar: DMatrix<f64>,
}

pub fn build_augmented(spec: &GameSpec, mf: &MeanFieldLaw) -> Result<AugmentedSpec> {
    spec.check_dimensions()?;
    let m = spec.state_dim();
    let p = spec.control_dim();
    if mf.f.shape() != (m, m) {
        return Err(Error::Dimension {
            field: "F",
            expected: format!("{m}x{m}"),
            found: format!("{}x{}", mf.f.nrows(), mf.f.ncols()),
        });
    }
    let mut a_bar = DMatrix::zeros(2 * m, 2 * m);
    a_bar.view_mut((0, 0), (m, m)).copy_from(&spec.a);
    a_bar.view_mut((m, m), (m, m)).copy_from(&mf.f);
    let mut b_bar = DMatrix::zeros(2 * m, p);
    b_bar.view_mut((0, 0), (m, p)).copy_from(&spec.b);
    let mut c_x = DMatrix::zeros(2 * m, 2 * m);
    c_x.view_mut((0, 0), (m, m)).copy_from(&spec.c_z);
    c_x.view_mut((m, m), (m, m)).copy_from(&spec.c_z);
    c_x.view_mut((0, m), (m, m)).copy_from(&(-&spec.c_z));
    c_x.view_mut((m, 0), (m, m)).copy_from(&(-&spec.c_z));
    let mut sigma_w_bar = DMatrix::zeros(2 * m, 2 * m);
    sigma_w_bar.view_mut((0, 0), (m, m)).copy_from(&spec.sigma_w);
    Ok(AugmentedSpec {
        a_bar,
        b_bar,
        c_x,
        sigma_w_bar,
    })
}

/// Linear feedback on the augmented state, `U = -K X + ζ` with `K = [K₁ K₂]`.
///
/// Only the full gain is stored; the blocks are views into it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    k: DMatrix<f64>,
}

impl FeedbackPolicy {
    /// `k` must be `p x 2m`.
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        if k.ncols() == 0 || k.ncols() % 2 != 0 || k.nrows() == 0 {
            return Err(Error::Dimension {
                field: "K",
                expected: "p x 2m".into(),
                found: format!("{}x{}", k.nrows(), k.ncols()),
            });
        }
        Ok(FeedbackPolicy { k })
    }

    pub fn from_blocks(k1: &DMatrix<f64>, k2: &DMatrix<f64>) -> Result<Self> {
        if k1.shape() != k2.shape() {
            return Err(Error::Dimension {
                field: "K2",
                expected: format!("{}x{}", k1.nrows(), k1.ncols()),
                found: format!("{}x{}", k2.nrows(), k2.ncols()),
            });
        }
        let (p, m) = k1.shape();
        let mut k = DMatrix::zeros(p, 2 * m);
        k.view_mut((0, 0), (p, m)).copy_from(k1);
        k.view_mut((0, m), (p, m)).copy_from(k2);
        Self::new(k)
    }

    pub fn zeros(spec: &GameSpec) -> Self {
        FeedbackPolicy {
            k: DMatrix::zeros(spec.control_dim(), 2 * spec.state_dim()),
        }
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn into_gain(self) -> DMatrix<f64> {
        self.k
    }

    pub fn state_dim(&self) -> usize {
        self.k.ncols() / 2
    }

    pub fn control_dim(&self) -> usize {
        self.k.nrows()
    }

    /// Block acting on the agent state.
    pub fn k1(&self) -> DMatrix<f64> {
        let m = self.state_dim();
        self.k.columns(0, m).into_owned()
    }

    /// Block acting on the mean-field state.
    pub fn k2(&self) -> DMatrix<f64> {
        let m = self.state_dim();
        self.k.columns(m, m).into_owned()
    }

    /// `-K x + ζ`
    pub fn action(&self, x: &DVector<f64>, zeta: &DVector<f64>) -> DVector<f64> {
        zeta - &self.k * x
    }

    pub fn check_spec(&self, spec: &GameSpec) -> Result<()> {
        let want = (spec.control_dim(), 2 * spec.state_dim());
        if self.k.shape() != want {
            return Err(Error::Dimension {
                field: "K",
                expected: format!("{}x{}", want.0, want.1),
                found: format!("{}x{}", self.k.nrows(), self.k.ncols()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec2(b: DMatrix<f64>) -> GameSpec {
        GameSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.2]),
            b,
            DMatrix::identity(2, 2) * 0.2,
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, -1.0]),
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn reference_instance_passes_every_check() {
        let report = validate_spec(&GameSpec::reference_scalar()).unwrap();
        assert!(report.ok(), "{report}");
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn zero_input_map_is_not_controllable() {
        let report = validate_spec(&spec2(DMatrix::zeros(2, 1))).unwrap();
        assert!(!report.check("(A, B) controllable").unwrap().passed);
        assert!(!report.ok());
    }

    #[test]
    fn indefinite_control_weight_fails() {
        let mut spec = GameSpec::reference_scalar();
        spec.c_u = DMatrix::from_element(1, 1, -0.5);
        let report = validate_spec(&spec).unwrap();
        assert!(!report.check("C_U positive definite").unwrap().passed);
        assert!(!report.ok());
    }

    #[test]
    fn zero_initial_mean_warns() {
        let mut spec = GameSpec::reference_scalar();
        spec.nu0 = DVector::zeros(1);
        let report = validate_spec(&spec).unwrap();
        assert!(report.ok());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn dimension_mismatch_names_field() {
        let mut spec = GameSpec::reference_scalar();
        spec.sigma_w = DMatrix::identity(2, 2);
        match validate_spec(&spec) {
            Err(Error::Dimension { field, .. }) => assert_eq!(field, "Sigma_w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_is_deterministic() {
        let spec = spec2(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(validate_spec(&spec).unwrap(), validate_spec(&spec).unwrap());
    }

    #[test]
    fn augmented_blocks_for_scalar_instance() {
        let spec = GameSpec::reference_scalar();
        let mf = MeanFieldLaw::for_spec(&spec, DMatrix::from_element(1, 1, 0.3)).unwrap();
        let aug = build_augmented(&spec, &mf).unwrap();
        assert_eq!(aug.a_bar, DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.3]));
        assert_eq!(aug.b_bar, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(aug.sigma_w_bar, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(aug.c_x, DMatrix::from_row_slice(2, 2, &[0.1, -0.1, -0.1, 0.1]));

        let mf0 = MeanFieldLaw::for_spec(&spec, DMatrix::zeros(1, 1)).unwrap();
        let aug0 = build_augmented(&spec, &mf0).unwrap();
        assert_eq!(aug0.a_bar[(1, 1)], 0.0);
    }

    #[test]
    fn augmented_cost_eigenvalues_double_the_tracking_weight() {
        // C_X = [[1, -1], [-1, 1]] ⊗ C_Z has eigenvalues {0, 2} ⊗ eig(C_Z).
        let mut spec = spec2(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
        spec.c_z = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3]);
        let mf = MeanFieldLaw::for_spec(&spec, DMatrix::zeros(2, 2)).unwrap();
        let aug = build_augmented(&spec, &mf).unwrap();
        let mut got: Vec<f64> = aug.c_x.symmetric_eigen().eigenvalues.iter().copied().collect();
        got.sort_by(f64::total_cmp);
        let mut cz: Vec<f64> = spec.c_z.symmetric_eigen().eigenvalues.iter().copied().collect();
        cz.sort_by(f64::total_cmp);
        let want = [0.0, 0.0, 2.0 * cz[0], 2.0 * cz[1]];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = spec2(DMatrix::from_column_slice(2, 1, &[0.5, 1.0]));
        let text = spec.to_toml_string();
        assert!(text.contains("Sigma_w"));
        assert_eq!(GameSpec::from_toml_str(&text).unwrap(), spec);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let text = r#"
            A = [[0.3, 0.1], [0.2]]
            B = [[1.0], [0.0]]
            C_Z = [[0.1, 0.0], [0.0, 0.1]]
            C_U = [[1.0]]
            Sigma_w = [[1.0, 0.0], [0.0, 1.0]]
            Sigma_0 = [[1.0, 0.0], [0.0, 1.0]]
            nu0 = [1.0, 1.0]
            sigma_explore = 0.1
        "#;
        assert!(matches!(GameSpec::from_toml_str(text), Err(Error::Dimension { field: "A", .. })));
    }

    proptest! {
        #[test]
        fn augmented_cost_is_psd(
            l in proptest::collection::vec(-1.0f64..1.0, 4),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let lm = DMatrix::from_row_slice(2, 2, &l);
            let mut spec = spec2(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
            spec.c_z = &lm * lm.transpose();
            let mf = MeanFieldLaw::for_spec(&spec, DMatrix::zeros(2, 2)).unwrap();
            let aug = build_augmented(&spec, &mf).unwrap();
            let v = DVector::from_vec(v);
            prop_assert!(v.dot(&(&aug.c_x * &v)) >= -1e-12);
        }

        #[test]
        fn gain_blocks_round_trip_exactly(k in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let policy = FeedbackPolicy::new(DMatrix::from_row_slice(2, 4, &k)).unwrap();
            let back = FeedbackPolicy::from_blocks(&policy.k1(), &policy.k2()).unwrap();
            prop_assert_eq!(back.gain(), policy.gain());
        }
    }
}
