mod common;

use octattn_core::params::bind_const;
use octattn_core::sparse_conv::{subm_conv, SubmConvParams};
use octattn_core::voxel::SparseVoxelGrid;
use octattn_core::{MacKind, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(grid: &SparseVoxelGrid, p: &SubmConvParams<Tensor>) -> (Tensor, u64) {
    let tape = Tape::new();
    let out = subm_conv(grid, tape.constant(grid.features().clone()), &bind_const(p, &tape)).unwrap();
    (out.value().as_ref().clone(), tape.macs().get(MacKind::Conv))
}

/// Full dense 3×3×3 correlation over a zero-filled volume, read back at the
/// occupied sites.
fn dense_conv(grid: &SparseVoxelGrid, p: &SubmConvParams<Tensor>, extent: usize) -> Tensor {
    let ks = p.kernel.shape();
    let (ci, co) = (ks[3], ks[4]);
    let idx = |x: usize, y: usize, z: usize| (x * extent + y) * extent + z;
    let mut vol = vec![vec![0.0; ci]; extent * extent * extent];
    for (r, c) in grid.coords().iter().enumerate() {
        vol[idx(c[0] as usize, c[1] as usize, c[2] as usize)] = grid.features().row(r).to_vec();
    }
    let w = |a: usize, b: usize, c: usize, i: usize, o: usize| {
        p.kernel.data()[((((a * 3 + b) * 3 + c) * ci) + i) * co + o]
    };
    let mut out = Tensor::zeros([grid.len(), co]);
    for (r, c) in grid.coords().iter().enumerate() {
        for o in 0..co {
            let mut acc = p.bias.data()[o];
            for a in 0..3 {
                for b in 0..3 {
                    for cc in 0..3 {
                        let (x, y, z) = (c[0] + a as i32 - 1, c[1] + b as i32 - 1, c[2] + cc as i32 - 1);
                        let e = extent as i32;
                        if x < 0 || y < 0 || z < 0 || x >= e || y >= e || z >= e {
                            continue;
                        }
                        let f = &vol[idx(x as usize, y as usize, z as usize)];
                        for i in 0..ci {
                            acc += f[i] * w(a, b, cc, i, o);
                        }
                    }
                }
            }
            out.data_mut()[r * co + o] = acc;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn matches_dense_convolution(seed: u64, m in 1usize..150) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = common::random_scene(&mut rng, m, 7, 3);
        let p = SubmConvParams::init(3, 2, &mut rng);
        let (sparse, _) = run(&grid, &p);
        prop_assert!(sparse.max_abs_diff(&dense_conv(&grid, &p, 7)) < 1e-12);
    }

    #[test]
    fn translation_equivariant(seed: u64, m in 1usize..60, shift in prop::array::uniform3(0i32..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = common::random_scene(&mut rng, m, 6, 2);
        let p = SubmConvParams::init(2, 3, &mut rng);
        let moved = SparseVoxelGrid::new(
            grid.coords().iter().map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]]).collect(),
            grid.batch_ids().to_vec(),
            grid.features().clone(),
            octattn_core::voxel::VoxelSpec::unit(12),
            1,
        )
        .unwrap();
        prop_assert!(run(&grid, &p).0.max_abs_diff(&run(&moved, &p).0) < 1e-12);
    }
}

#[test]
fn mac_count_is_taps_times_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = common::random_scene(&mut rng, 40, 5, 3);
    let p = SubmConvParams::init(3, 5, &mut rng);
    let mut taps = 0u64;
    for c in grid.coords() {
        for o in (0..octattn_core::sparse_conv::TAPS).map(octattn_core::sparse_conv::tap_offset) {
            if grid.lookup(0, [c[0] + o[0], c[1] + o[1], c[2] + o[2]]).is_some() {
                taps += 1;
            }
        }
    }
    assert_eq!(run(&grid, &p).1, taps * 15);
}
