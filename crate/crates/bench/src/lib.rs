//! Fixtures shared by the benchmarks under `benches/`.

use lqmfg::{DMatrix, DVector, FeedbackPolicy, GameSpec, MeanFieldLaw};

/// Deterministic `m`-state, `m`-input game with a weakly coupled drift.
/// Satisfies the contraction assumption for every `m` used by the benches.
pub fn coupled_game(m: usize) -> GameSpec {
    let a = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            0.3
        } else {
            0.05 * ((i + 2 * j) as f64).sin() / m as f64
        }
    });
    GameSpec::new(
        a,
        DMatrix::identity(m, m),
        DMatrix::identity(m, m) * 0.1,
        DMatrix::identity(m, m),
        DMatrix::identity(m, m),
        DMatrix::identity(m, m),
        DVector::from_element(m, 1.0),
        0.1,
    )
    .expect("fixture dimensions agree")
}

/// Stabilizing gain and mean field on the reference scalar game.
pub fn scalar_fixture() -> (GameSpec, FeedbackPolicy, MeanFieldLaw) {
    let spec = GameSpec::reference_scalar();
    let s = |x| DMatrix::from_element(1, 1, x);
    let k = FeedbackPolicy::from_blocks(&s(0.2), &s(-0.1)).expect("1x1 blocks");
    let mf = MeanFieldLaw::for_spec(&spec, s(0.3)).expect("scalar mean field");
    (spec, k, mf)
}
