mod common;

use octattn_core::oracle::{oracle_forward, ORACLE_MAX_VOXELS};
use octattn_core::otb::{otb_forward, OtbConfig, OtbParams};
use octattn_core::params::bind_const;
use octattn_core::select::Mode;
use octattn_core::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_dev(grid_sizes: &[usize], seed: u64, with_scores: bool) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let grid = common::random_batch(&mut rng, grid_sizes, 12, d);
    let cfg = OtbConfig::small(3, d, 2).exhaustive(grid.len());
    let params = OtbParams::init(&cfg, &mut rng);
    let scores: Option<Vec<f64>> =
        with_scores.then(|| (0..grid.len()).map(|_| rng.random_range(0.0..1.0)).collect());

    let oracle = oracle_forward(&grid, grid.features(), &params, &cfg, scores.as_deref()).unwrap();
    let tape = Tape::new();
    let out = otb_forward(
        &grid,
        tape.constant(grid.features().clone()),
        &bind_const(&params, &tape),
        &cfg,
        scores.as_deref(),
        Mode::Infer,
        &mut rng,
    )
    .unwrap();
    let per_level = out
        .attention
        .attended
        .iter()
        .zip(&oracle.attended)
        .map(|(a, b)| a.value().max_abs_diff(b))
        .collect();
    (out.output.value().max_abs_diff(&oracle.output), per_level)
}

#[test]
fn exhaustive_selection_matches_dense_levels() {
    for seed in 0..5 {
        let (dev, levels) = max_dev(&[60], seed, false);
        assert!(dev < 1e-9, "seed {seed}: {dev}, levels {levels:?}");
    }
}

#[test]
fn matches_with_semantic_inputs() {
    for seed in 10..14 {
        let (dev, levels) = max_dev(&[50], seed, true);
        assert!(dev < 1e-9, "seed {seed}: {dev}, levels {levels:?}");
    }
}

#[test]
fn matches_across_batched_scenes() {
    let (dev, levels) = max_dev(&[40, 7, 25], 99, true);
    assert!(dev < 1e-9, "{dev}, levels {levels:?}");
}

#[test]
fn oracle_refuses_large_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = common::random_scene(&mut rng, ORACLE_MAX_VOXELS + 1, 16, 4);
    let cfg = OtbConfig::small(2, 4, 2);
    let params = OtbParams::init(&cfg, &mut rng);
    let err = oracle_forward(&grid, grid.features(), &params, &cfg, None).unwrap_err();
    assert!(err.to_string().contains("512"));
}
