//! Multi-scale feature pyramid built by coordinate halving and max-scatter
//! pooling, plus the parent/child index banks between adjacent levels.
//!
//! Level 0 keeps the input grid's row order. Every coarser level is stored
//! in `(scene, coord)` lexicographic order, so it does not depend on how
//! the input rows were ordered.

use std::collections::BTreeMap;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::BatchNorm;
use crate::tensor::Tensor;
use crate::voxel::{Coord, SparseVoxelGrid, VoxelSpec};

/// Bidirectional child ↔ parent rows between level `n` and `n + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexBank {
    /// Parent row for every child row.
    pub child_to_parent: Vec<usize>,
    /// Child rows of every parent, in lexicographic coordinate order.
    pub parent_to_children: Vec<Vec<usize>>,
}

impl IndexBank {
    fn build(child_coords: &[Coord], child_to_parent: Vec<usize>, parents: usize) -> Self {
        let mut parent_to_children = vec![Vec::new(); parents];
        for (c, &p) in child_to_parent.iter().enumerate() {
            parent_to_children[p].push(c);
        }
        for kids in &mut parent_to_children {
            kids.sort_by_key(|&c| child_coords[c]);
        }
        Self {
            child_to_parent,
            parent_to_children,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub coords: Vec<Coord>,
    pub batch_ids: Vec<usize>,
    /// Row at this level holding each level-0 row.
    pub from_base: Vec<usize>,
    pub spec: VoxelSpec,
}

impl PyramidLevel {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Zero-feature grid with this level's voxels.
    pub fn grid(&self, num_scenes: usize, channels: usize) -> Result<SparseVoxelGrid> {
        SparseVoxelGrid::new(
            self.coords.clone(),
            self.batch_ids.clone(),
            Tensor::zeros([self.len(), channels]),
            self.spec,
            num_scenes,
        )
    }
}

/// Index structure of a pyramid; independent of features.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLayout {
    pub levels: Vec<PyramidLevel>,
    /// `banks[n]` links level `n` (children) to level `n + 1` (parents).
    pub banks: Vec<IndexBank>,
    pub num_scenes: usize,
}

impl PyramidLayout {
    pub fn build(grid: &SparseVoxelGrid, height: usize) -> Result<Self> {
        if height == 0 {
            return Err(Error::Param("pyramid height must be at least 1".into()));
        }
        if let Some(c) = grid.coords().iter().find(|c| c.iter().any(|&v| v < 0)) {
            return Err(Error::Param(format!("negative voxel coordinate {c:?}")));
        }
        let m0 = grid.len();
        let mut levels = vec![PyramidLevel {
            coords: grid.coords().to_vec(),
            batch_ids: grid.batch_ids().to_vec(),
            from_base: (0..m0).collect(),
            spec: *grid.spec(),
        }];
        let mut banks = Vec::with_capacity(height - 1);
        for n in 1..height as u32 {
            let prev = levels.last().unwrap();
            // coords are non-negative, so the shift is floor division by 2
            let mut keys: BTreeMap<(usize, Coord), usize> = BTreeMap::new();
            for (&b, c) in prev.batch_ids.iter().zip(&prev.coords) {
                keys.insert((b, c.map(|v| v >> 1)), 0);
            }
            for (row, v) in keys.values_mut().enumerate() {
                *v = row;
            }
            let child_to_parent: Vec<usize> = prev
                .batch_ids
                .iter()
                .zip(&prev.coords)
                .map(|(&b, c)| keys[&(b, c.map(|v| v >> 1))])
                .collect();
            let from_base = prev.from_base.iter().map(|&r| child_to_parent[r]).collect();
            banks.push(IndexBank::build(&prev.coords, child_to_parent, keys.len()));
            let (batch_ids, coords) = keys.into_keys().unzip();
            levels.push(PyramidLevel {
                coords,
                batch_ids,
                from_base,
                spec: grid.spec().coarsened(n),
            });
        }
        Ok(Self {
            levels,
            banks,
            num_scenes: grid.num_scenes(),
        })
    }

    pub fn height(&self) -> usize {
        self.levels.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(PyramidLevel::len).collect()
    }

    /// Per-scene non-empty counts at level `n`.
    pub fn scene_counts(&self, n: usize) -> Vec<usize> {
        let mut counts = vec![0; self.num_scenes];
        for &b in &self.levels[n].batch_ids {
            counts[b] += 1;
        }
        counts
    }

    /// `m_n / m_{n+1}` for every adjacent pair.
    pub fn down_ratios(&self) -> Vec<f64> {
        self.counts()
            .windows(2)
            .map(|w| w[0] as f64 / w[1].max(1) as f64)
            .collect()
    }

    /// Geometric mean of [`Self::down_ratios`]; 1 for a single level.
    pub fn observed_omega(&self) -> f64 {
        let r = self.down_ratios();
        if r.is_empty() {
            1.0
        } else {
            (r.iter().map(|x| x.ln()).sum::<f64>() / r.len() as f64).exp()
        }
    }
}

/// Per-level features on a tape.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t> {
    pub layout: PyramidLayout,
    /// Input features `F₀` before pooling and normalization.
    pub base: Var<'t>,
    /// Max-scatter pooled features before batch norm.
    pub pooled: Vec<Var<'t>>,
    /// `BN(S_max(F₀, Iₙ))` per level.
    pub levels: Vec<Var<'t>>,
}

impl<'t> FeaturePyramid<'t> {
    pub fn height(&self) -> usize {
        self.levels.len()
    }
}

/// Pools `base` (rows aligned with `grid`) into every level and applies the
/// level's batch norm, using the level's whole population as the batch.
pub fn build_pyramid<'t>(
    grid: &SparseVoxelGrid,
    base: Var<'t>,
    height: usize,
    bn: &[BatchNorm<Var<'t>>],
    eps: f64,
) -> Result<FeaturePyramid<'t>> {
    if bn.len() != height {
        return Err(Error::Param(format!(
            "expected {height} batch-norm parameter sets, got {}",
            bn.len()
        )));
    }
    let layout = PyramidLayout::build(grid, height)?;
    let mut pooled = Vec::with_capacity(height);
    let mut levels = Vec::with_capacity(height);
    for (level, bn) in layout.levels.iter().zip(bn) {
        let p = base.segment_max(&level.from_base, level.len())?;
        levels.push(bn.forward(p, eps)?);
        pooled.push(p);
    }
    Ok(FeaturePyramid {
        layout,
        base,
        pooled,
        levels,
    })
}

/// Copies each level-`n` row to all of its level-0 descendants.
pub fn upsample<'t>(level_feats: Var<'t>, layout: &PyramidLayout, n: usize) -> Result<Var<'t>> {
    let idx: Vec<Option<usize>> = layout.levels[n].from_base.iter().map(|&r| Some(r)).collect();
    level_feats.gather_rows(&idx)
}

/// Mean position and mean segmentation score of each level-`n` voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub centers: Vec<[f64; 3]>,
    pub scores: Vec<f64>,
}

impl LevelStats {
    /// `m × 4` matrix of `(x, y, z, score)` rows.
    pub fn position_rows(&self) -> Tensor {
        let data = self
            .centers
            .iter()
            .zip(&self.scores)
            .flat_map(|(c, &s)| [c[0], c[1], c[2], s])
            .collect();
        Tensor::new([self.centers.len(), 4], data).expect("position rows")
    }
}

/// `base_centers` and `base_scores` are aligned with level-0 rows.
pub fn level_stats(
    layout: &PyramidLayout,
    n: usize,
    base_centers: &[[f64; 3]],
    base_scores: &[f64],
) -> LevelStats {
    let level = &layout.levels[n];
    let m = level.len();
    let mut sums = vec![[0.0; 4]; m];
    let mut counts = vec![0usize; m];
    for (r, &p) in level.from_base.iter().enumerate() {
        let c = base_centers[r];
        let s = &mut sums[p];
        s[0] += c[0];
        s[1] += c[1];
        s[2] += c[2];
        s[3] += base_scores[r];
        counts[p] += 1;
    }
    let (centers, scores) = sums
        .iter()
        .zip(&counts)
        .map(|(s, &k)| {
            let k = k as f64;
            ([s[0] / k, s[1] / k, s[2] / k], s[3] / k)
        })
        .unzip();
    LevelStats { centers, scores }
}

/// Halves the resolution of `grid`: coordinates are floor-divided by two and
/// features max-pooled. Returns the coarse grid (with pooled values), its
/// features on the tape and the child → parent map.
pub fn max_pool2<'t>(
    grid: &SparseVoxelGrid,
    features: Var<'t>,
) -> Result<(SparseVoxelGrid, Var<'t>, Vec<usize>)> {
    let layout = PyramidLayout::build(grid, 2)?;
    let coarse = &layout.levels[1];
    let pooled = features.segment_max(&coarse.from_base, coarse.len())?;
    let mut spec = *grid.spec();
    spec.voxel_size = spec.voxel_size.map(|s| s * 2.0);
    let out = SparseVoxelGrid::new(
        coarse.coords.clone(),
        coarse.batch_ids.clone(),
        pooled.value().as_ref().clone(),
        spec,
        grid.num_scenes(),
    )?;
    let map = layout.banks[0].child_to_parent.clone();
    Ok((out, pooled, map))
}
