//! The harness backbone: patch embedding, segmentation branch and stacked
//! Octree Transformer Blocks with 2× max pooling between layers.

use anyhow::Result;
use octattn_core::otb::{otb_forward, OtbParams};
use octattn_core::params::ParamTree;
use octattn_core::pyramid::max_pool2;
use octattn_core::select::Mode;
use octattn_core::semantic::{seg_branch, SegParams};
use octattn_core::voxel::{embed, EmbedParams, SparseVoxelGrid, VoxelSpec, RAW_FEATURES};
use octattn_core::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunMode};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub embed: EmbedParams<T>,
    pub seg: SegParams<T>,
    pub layers: Vec<OtbParams<T>>,
}

impl BackboneParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Self {
        Self {
            embed: EmbedParams::init(RAW_FEATURES, cfg.d, rng),
            seg: SegParams::init(cfg.d, rng),
            layers: cfg.heights.iter().map(|&h| OtbParams::init(&cfg.otb(h), rng)).collect(),
        }
    }
}

impl<T> ParamTree<T> for BackboneParams<T> {
    type Mapped<U> = BackboneParams<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BackboneParams<U> {
        BackboneParams {
            embed: self.embed.map_params(f),
            seg: self.seg.map_params(f),
            layers: self.layers.map_params(f),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.embed.visit(f);
        self.seg.visit(f);
        self.layers.visit(f);
    }
}

pub fn selection_mode(cfg: &RunConfig) -> Mode {
    match cfg.mode {
        RunMode::Train => Mode::Train { tau: cfg.tau },
        RunMode::Infer => Mode::Infer,
    }
}

/// Raw voxel features with positions rescaled to `[-1, 1]` over the range.
pub fn normalized_features(grid: &SparseVoxelGrid, spec: &VoxelSpec) -> Tensor {
    let mut f = grid.features().clone();
    for r in 0..f.rows() {
        let row = f.row_mut(r);
        for a in 0..3 {
            let mid = (spec.range_min[a] + spec.range_max[a]) / 2.0;
            let half = (spec.range_max[a] - spec.range_min[a]) / 2.0;
            row[a] = (row[a] - mid) / half;
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub height: usize,
    pub voxels: usize,
    /// Non-empty voxels per pyramid level, finest first.
    pub level_counts: Vec<usize>,
    pub down_ratios: Vec<f64>,
    pub observed_omega: f64,
}

pub struct BackboneOutput<'t> {
    pub features: Var<'t>,
    /// Foreground probabilities of the input voxels, `m × 1`.
    pub seg_scores: Var<'t>,
    /// Grid of the last layer.
    pub grid: SparseVoxelGrid,
    pub layers: Vec<LayerSummary>,
}

/// Runs the whole backbone on `grid` (raw point-mean features).
pub fn backbone_forward<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    grid: &SparseVoxelGrid,
    params: &BackboneParams<Var<'t>>,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<BackboneOutput<'t>> {
    let mode = selection_mode(cfg);
    let raw = tape.constant(normalized_features(grid, grid.spec()));
    let mut feats = embed(grid, raw, &params.embed)?;
    let seg_scores = seg_branch(grid, feats, &params.seg)?;
    let mut scores: Vec<f64> = seg_scores.value().data().to_vec();
    let mut current = grid.clone();
    let mut layers = Vec::with_capacity(cfg.heights.len());
    for (i, (&height, lp)) in cfg.heights.iter().zip(&params.layers).enumerate() {
        if i > 0 {
            let (coarse, pooled, child_to_parent) = max_pool2(&current, feats)?;
            scores = mean_by_parent(&scores, &child_to_parent, coarse.len());
            current = coarse;
            feats = pooled;
        }
        let out = otb_forward(&current, feats, lp, &cfg.otb(height), Some(&scores), mode, rng)?;
        let layout = &out.pyramid.layout;
        layers.push(LayerSummary {
            height,
            voxels: current.len(),
            level_counts: layout.counts(),
            down_ratios: layout.down_ratios(),
            observed_omega: layout.observed_omega(),
        });
        feats = out.output;
    }
    Ok(BackboneOutput {
        features: feats,
        seg_scores,
        grid: current,
        layers,
    })
}

fn mean_by_parent(values: &[f64], parent: &[usize], parents: usize) -> Vec<f64> {
    let mut sum = vec![0.0; parents];
    let mut count = vec![0usize; parents];
    for (&v, &p) in values.iter().zip(parent) {
        sum[p] += v;
        count[p] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}
