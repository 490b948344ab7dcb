mod common;

use octattn_core::attention::{mhsa_top, AttnParams, TokenLayout};
use octattn_core::otb::{otb_forward, OtbConfig, OtbParams};
use octattn_core::params::{bind_const, BatchNorm};
use octattn_core::pyramid::{build_pyramid, PyramidLayout};
use octattn_core::select::Mode;
use octattn_core::voxel::dense_slots;
use octattn_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene_sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..80, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn index_bank_round_trip(seed: u64, sizes in scene_sizes(), extent in 2i32..24, height in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = sizes.iter().map(|&m| m.min((extent * extent * extent) as usize)).collect();
        let grid = common::random_batch(&mut rng, &sizes, extent, 2);
        let layout = PyramidLayout::build(&grid, height).unwrap();
        prop_assert_eq!(layout.height(), height);
        for (n, bank) in layout.banks.iter().enumerate() {
            let (child, parent) = (&layout.levels[n], &layout.levels[n + 1]);
            prop_assert_eq!(bank.child_to_parent.len(), child.len());
            prop_assert_eq!(bank.parent_to_children.len(), parent.len());
            for (c, &p) in bank.child_to_parent.iter().enumerate() {
                prop_assert!(bank.parent_to_children[p].contains(&c));
                prop_assert_eq!(parent.coords[p], child.coords[c].map(|v| v >> 1));
                prop_assert_eq!(parent.batch_ids[p], child.batch_ids[c]);
            }
            for (p, kids) in bank.parent_to_children.iter().enumerate() {
                prop_assert!(!kids.is_empty() && kids.len() <= 8);
                prop_assert!(kids.iter().all(|&c| bank.child_to_parent[c] == p));
            }
            // every level-0 row reaches its level-n ancestor through the banks
            for r in 0..grid.len() {
                let mut row = r;
                for b in &layout.banks[..=n] {
                    row = b.child_to_parent[row];
                }
                prop_assert_eq!(row, layout.levels[n + 1].from_base[r]);
            }
        }
        let counts = layout.counts();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0] && w[0] <= 8 * w[1]));
    }

    #[test]
    fn pooling_dominates_descendants(seed: u64, sizes in scene_sizes(), height in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = common::random_batch(&mut rng, &sizes, 16, 3);
        let tape = Tape::new();
        let bn: Vec<_> = (0..height).map(|_| bind_const(&BatchNorm::identity(3), &tape)).collect();
        let p = build_pyramid(&grid, tape.constant(grid.features().clone()), height, &bn, 1e-5).unwrap();
        let base = grid.features();
        for (n, level) in p.layout.levels.iter().enumerate() {
            let pooled = p.pooled[n].value();
            let mut hit = vec![[false; 3]; level.len()];
            for r in 0..grid.len() {
                let q = level.from_base[r];
                for c in 0..3 {
                    prop_assert!(pooled.at(q, c) >= base.at(r, c));
                    hit[q][c] |= pooled.at(q, c) == base.at(r, c);
                }
            }
            prop_assert!(hit.iter().all(|h| h.iter().all(|&x| x)));
        }
    }

    #[test]
    fn padding_does_not_change_valid_rows(seed: u64, sizes in scene_sizes(), extra in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let grid = common::random_batch(&mut rng, &sizes, 12, d);
        let params = AttnParams::init(d, 2, 3, &mut rng);
        let run = |min_slots: usize| {
            let (slots, m_max) = dense_slots(grid.coords(), grid.batch_ids(), grid.num_scenes(), min_slots);
            let tape = Tape::new();
            let layout = TokenLayout {
                num_scenes: grid.num_scenes(),
                m_max,
                validity: slots.iter().map(Option::is_some).collect(),
            };
            let x = tape.constant(grid.features().clone()).gather_rows(&slots).unwrap();
            let out = mhsa_top(x, &layout, &bind_const(&params, &tape), 0.4, None).unwrap();
            let feats = out.features.value();
            let mut rows = vec![vec![0.0; d]; grid.len()];
            for (s, r) in slots.iter().enumerate() {
                if let Some(r) = *r {
                    rows[r] = feats.row(s).to_vec();
                }
            }
            rows
        };
        let tight = run(0);
        let m_max = *grid.scene_counts().iter().max().unwrap();
        let loose = run(m_max + extra);
        for (a, b) in tight.iter().zip(&loose) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn block_is_permutation_equivariant(seed: u64, sizes in prop::collection::vec(8usize..60, 1..3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let grid = common::random_batch(&mut rng, &sizes, 10, d);
        let (shuffled, perm) = common::shuffled(&mut rng, &grid);
        let cfg = OtbConfig { k: 2, big_k: 6, ..OtbConfig::small(3, d, 2) };
        let params = OtbParams::init(&cfg, &mut rng);
        let run = |g: &octattn_core::voxel::SparseVoxelGrid| -> Tensor {
            let tape = Tape::new();
            let mut sel = ChaCha8Rng::seed_from_u64(0);
            let out = otb_forward(
                g,
                tape.constant(g.features().clone()),
                &bind_const(&params, &tape),
                &cfg,
                None,
                Mode::Infer,
                &mut sel,
            )
            .unwrap();
            out.output.value().as_ref().clone()
        };
        let a = run(&grid);
        let b = run(&shuffled);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..d {
                prop_assert!((b.at(i, c) - a.at(p, c)).abs() <= 1e-12);
            }
        }
    }
}
