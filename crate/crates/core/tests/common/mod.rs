#![allow(dead_code)]

use std::collections::BTreeSet;

use octattn_core::voxel::{Coord, SparseVoxelGrid, VoxelSpec};
use octattn_core::Tensor;
use rand::Rng;

/// `m` distinct voxels inside `[0, extent)³`, features uniform in ±1.
pub fn random_scene<R: Rng>(rng: &mut R, m: usize, extent: i32, channels: usize) -> SparseVoxelGrid {
    let mut coords = BTreeSet::new();
    while coords.len() < m {
        coords.insert([
            rng.random_range(0..extent),
            rng.random_range(0..extent),
            rng.random_range(0..extent),
        ]);
    }
    let coords: Vec<Coord> = coords.into_iter().collect();
    SparseVoxelGrid::new(
        coords,
        vec![0; m],
        Tensor::uniform([m, channels], -1.0, 1.0, rng),
        VoxelSpec::unit(extent as u32),
        1,
    )
    .unwrap()
}

/// Several independent scenes batched into one grid.
pub fn random_batch<R: Rng>(rng: &mut R, sizes: &[usize], extent: i32, channels: usize) -> SparseVoxelGrid {
    let scenes: Vec<_> = sizes
        .iter()
        .map(|&m| random_scene(rng, m, extent, channels))
        .collect();
    SparseVoxelGrid::concat_scenes(&scenes).unwrap()
}

/// Row order shuffled by a random permutation; returns the grid and `perm`
/// with `new row i = old row perm[i]`.
pub fn shuffled<R: Rng>(rng: &mut R, grid: &SparseVoxelGrid) -> (SparseVoxelGrid, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..grid.len()).collect();
    perm.shuffle(rng);
    (grid.permuted(&perm).unwrap(), perm)
}
